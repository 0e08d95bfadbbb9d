//! Exact simulation of the switched process.
//!
//! The embedded chain is sampled step by step: an exponential holding time,
//! then the next regime from the routing row, then the post-jump location
//! from the jump kernel evaluated at the flowed position. That consumption
//! order is fixed so seeds stay portable. Trajectories keep only the jump
//! skeleton; positions between jumps are recomputed from the semiflow.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fm::EmpiricalMeasure;
use crate::model::{HybridState, Observable, PdmpModel};
use crate::rng::RngStream;
use crate::stats::pairwise_sum;

pub const DEFAULT_JUMP_CAP: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub tau: f64,
    pub state: HybridState,
}

/// Jump skeleton on `[0, horizon]`. `jumps[0]` is `(0, x0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    jumps: Vec<Jump>,
    horizon: f64,
    seed: u64,
}

/// One step of the embedded chain from `state`: returns the holding time and
/// the post-jump state.
pub fn step_embedded(model: &PdmpModel, state: &HybridState, rng: &mut RngStream) -> (f64, HybridState) {
    let dt = rng.exponential(model.rate());
    let y_flow = model.semiflow(state.regime).flow(dt, &state.y);
    let regime = rng.categorical(model.routing_cumulative(state.regime));
    let y = model.jump_kernel().sample(&y_flow, rng);
    (dt, HybridState { y, regime })
}

pub fn simulate(model: &PdmpModel, x0: &HybridState, horizon: f64, rng: &mut RngStream) -> Result<Trajectory> {
    simulate_capped(model, x0, horizon, rng, DEFAULT_JUMP_CAP)
}

pub fn simulate_capped(
    model: &PdmpModel,
    x0: &HybridState,
    horizon: f64,
    rng: &mut RngStream,
    jump_cap: usize,
) -> Result<Trajectory> {
    model.validate_state(x0)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid(
            "horizon",
            format!("must be positive and finite, got {horizon}"),
        ));
    }
    let seed = rng.fingerprint();
    let expected = (model.rate() * horizon).min(1e6) as usize;
    let mut jumps = Vec::with_capacity(expected + 2);
    jumps.push(Jump {
        tau: 0.0,
        state: x0.clone(),
    });
    let mut tau = 0.0;
    let mut state = x0.clone();
    loop {
        let (dt, next) = step_embedded(model, &state, rng);
        tau += dt;
        if tau > horizon {
            break;
        }
        if jumps.len() > jump_cap {
            return Err(Error::RunawayTrajectory { cap: jump_cap, horizon });
        }
        jumps.push(Jump {
            tau,
            state: next.clone(),
        });
        state = next;
    }
    Ok(Trajectory { jumps, horizon, seed })
}

/// Composite Simpson settings for path integrals: per segment the step is
/// `min(max_step, length / min_panels)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub max_step: f64,
    pub min_panels: usize,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self {
            max_step: 0.01,
            min_panels: 16,
        }
    }
}

impl QuadratureRule {
    pub fn halved(&self) -> Self {
        Self {
            max_step: self.max_step / 2.0,
            min_panels: self.min_panels * 2,
        }
    }
}

/// Integral value and an error estimate from the step-doubled Simpson rule
/// on the same nodes (`|S_h - S_2h| / 15`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureValue {
    pub value: f64,
    pub error: f64,
}

impl Trajectory {
    pub fn x0(&self) -> &HybridState {
        &self.jumps[0].state
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    /// Number of jumps after time 0.
    pub fn jump_count(&self) -> usize {
        self.jumps.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Fingerprint of the stream that generated this trajectory.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn holding_times(&self) -> Vec<f64> {
        self.jumps.windows(2).map(|w| w[1].tau - w[0].tau).collect()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::OutOfRange {
                t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok(())
    }

    /// Index `n` with `τ_n ≤ t < τ_{n+1}`.
    fn segment(&self, t: f64) -> usize {
        self.jumps.partition_point(|j| j.tau <= t) - 1
    }

    pub fn eval_at(&self, model: &PdmpModel, t: f64) -> Result<HybridState> {
        self.check_time(t)?;
        let j = &self.jumps[self.segment(t)];
        Ok(model.flow_state(&j.state, t - j.tau))
    }

    /// States at nondecreasing `times`, walking the skeleton once.
    pub fn states_at(&self, model: &PdmpModel, times: &[f64]) -> Result<Vec<HybridState>> {
        let mut out = Vec::with_capacity(times.len());
        let mut n = 0;
        let mut prev = f64::NEG_INFINITY;
        for &t in times {
            self.check_time(t)?;
            if t < prev {
                return Err(invalid("times", "must be nondecreasing"));
            }
            prev = t;
            while n + 1 < self.jumps.len() && self.jumps[n + 1].tau <= t {
                n += 1;
            }
            let j = &self.jumps[n];
            out.push(model.flow_state(&j.state, t - j.tau));
        }
        Ok(out)
    }

    /// `∫_{t0}^{t1} f(Ψ(s)) ds`, segment by segment between jump times.
    pub fn integrate<F>(
        &self,
        model: &PdmpModel,
        f: F,
        t0: f64,
        t1: f64,
        rule: &QuadratureRule,
    ) -> Result<QuadratureValue>
    where
        F: Fn(&HybridState) -> f64,
    {
        self.check_time(t0)?;
        self.check_time(t1)?;
        if t0 > t1 {
            return Err(invalid("t0", "must not exceed t1"));
        }
        let mut values = Vec::new();
        let mut error = 0.0;
        let mut n = self.segment(t0);
        let mut a = t0;
        while a < t1 {
            let end = self.jumps.get(n + 1).map_or(self.horizon, |j| j.tau).min(t1);
            if end > a {
                let base = &self.jumps[n];
                let flow = model.semiflow(base.state.regime);
                let eval = |s: f64| {
                    let x = HybridState {
                        y: flow.flow(s - base.tau, &base.state.y),
                        regime: base.state.regime,
                    };
                    f(&x)
                };
                let (v, e) = simpson(eval, a, end, rule);
                values.push(v);
                error += e;
            }
            a = end;
            n += 1;
        }
        Ok(QuadratureValue {
            value: pairwise_sum(&values),
            error,
        })
    }

    /// Path integral of an observable. Constant observables integrate exactly.
    pub fn path_integral(&self, model: &PdmpModel, g: &Observable, t0: f64, t1: f64) -> Result<QuadratureValue> {
        if let Some(c) = g.constant_value() {
            self.check_time(t0)?;
            self.check_time(t1)?;
            return Ok(QuadratureValue {
                value: c * (t1 - t0),
                error: 0.0,
            });
        }
        self.integrate(model, |x| g.eval(x), t0, t1, &QuadratureRule::default())
    }
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rule: &QuadratureRule) -> (f64, f64) {
    let len = b - a;
    let panels = ((len / rule.max_step).ceil() as usize).max(rule.min_panels);
    let panels = panels.div_ceil(4) * 4;
    let h = len / panels as f64;
    let mut fine = 0.0;
    let mut coarse = 0.0;
    for k in 0..=panels {
        let s = if k == panels { b } else { a + k as f64 * h };
        let v = f(s);
        let wf = if k == 0 || k == panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        fine += wf * v;
        if k % 2 == 0 {
            let j = k / 2;
            let wc = if j == 0 || k == panels {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            coarse += wc * v;
        }
    }
    let fine = fine * h / 3.0;
    let coarse = coarse * 2.0 * h / 3.0;
    (fine, (fine - coarse).abs() / 15.0)
}

/// Initial law of a run: a point mass or a finite mixture of point masses.
#[derive(Clone, Debug)]
pub enum InitialLaw {
    Point(HybridState),
    Mixture(EmpiricalMeasure),
}

impl InitialLaw {
    /// Point masses consume no randomness.
    pub fn draw(&self, rng: &mut RngStream) -> HybridState {
        match self {
            InitialLaw::Point(x) => x.clone(),
            InitialLaw::Mixture(mu) => mu.sample(rng).clone(),
        }
    }

    pub fn validate(&self, model: &PdmpModel) -> Result<()> {
        match self {
            InitialLaw::Point(x) => model.validate_state(x),
            InitialLaw::Mixture(mu) => mu.points().iter().try_for_each(|x| model.validate_state(x)),
        }
    }
}

impl From<HybridState> for InitialLaw {
    fn from(x: HybridState) -> Self {
        InitialLaw::Point(x)
    }
}

impl From<EmpiricalMeasure> for InitialLaw {
    fn from(mu: EmpiricalMeasure) -> Self {
        InitialLaw::Mixture(mu)
    }
}

/// Runs `f(r, stream_r)` for `r in 0..n` in parallel with `stream_r =
/// rng.split(r)`. Output order is replica order.
pub fn replicate<T, F>(n: usize, rng: &RngStream, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, RngStream) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(|r| f(r, rng.split(r as u64))).collect()
}

pub fn try_replicate<T, F>(n: usize, rng: &RngStream, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, RngStream) -> Result<T> + Sync + Send,
{
    replicate(n, rng, f).into_iter().collect()
}
