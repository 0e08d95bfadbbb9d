//! Stationary means, the corrector `χ(x) = ∫_0^∞ P(t)ḡ(x) dt`, the martingale
//! decomposition of the additive functional and the asymptotic variance
//! estimators built on it.
//!
//! Monte-Carlo corrector values carry their own standard error. Where a
//! quadratic statistic of `χ̂` is formed (`Z(1)²`, `Σ Z(k)²`) the known noise
//! variance of the estimated endpoints is subtracted, so those estimators stay
//! unbiased for any corrector replica count.

use std::collections::HashMap;
use std::sync::RwLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{simulate, try_replicate, InitialLaw, QuadratureRule};
use crate::error::{invalid, Error, Result};
use crate::fm::EmpiricalMeasure;
use crate::hypotheses::ErgodicityEstimate;
use crate::model::{HybridState, Observable, PdmpModel};
use crate::rng::RngStream;
use crate::stats::{self, batch_means, mean_stderr, pairwise_sum, Estimate};

pub const DEFAULT_BATCHES: usize = 32;

/// `⟨g, μ*⟩` from the time average of one long run.
///
/// The run starts at `start`, discards `[0, burn_in]`, then covers
/// `[burn_in, horizon]` in 32 equal batches; the standard error is the
/// batch-means error. The run is simulated batch by batch so memory does not
/// grow with the horizon. The result is also stored into `g`.
pub fn estimate_mean_mu_star(
    model: &PdmpModel,
    g: &mut Observable,
    start: &HybridState,
    burn_in: f64,
    horizon: f64,
    rng: &RngStream,
) -> Result<Estimate> {
    model.validate_state(start)?;
    if !(burn_in >= 0.0) || !(horizon > burn_in) || !horizon.is_finite() {
        return Err(invalid(
            "horizon",
            format!("need 0 <= burn_in < horizon, got {burn_in} and {horizon}"),
        ));
    }
    let len = (horizon - burn_in) / DEFAULT_BATCHES as f64;
    if len < 1.0 / model.rate() {
        return Err(Error::HorizonTooShort(format!(
            "each of {DEFAULT_BATCHES} batches would last {len}, shorter than the mean holding time {}",
            1.0 / model.rate()
        )));
    }
    if let Some(c) = g.constant_value() {
        g.set_mean_under_mu_star(c);
        return Ok(Estimate::new(c, 0.0));
    }
    let mut x = start.clone();
    if burn_in > 0.0 {
        let tr = simulate(model, &x, burn_in, &mut rng.split(0))?;
        x = tr.eval_at(model, burn_in)?;
    }
    // Batches are split further so a single trajectory stays small.
    let pieces = (len * model.rate() / 50_000.0).ceil().max(1.0) as usize;
    let piece = len / pieces as f64;
    let mut batch = Vec::with_capacity(DEFAULT_BATCHES);
    for b in 0..DEFAULT_BATCHES {
        let mut parts = Vec::with_capacity(pieces);
        for p in 0..pieces {
            let mut r = rng.split_path(&[1, b as u64, p as u64]);
            let tr = simulate(model, &x, piece, &mut r)?;
            parts.push(tr.path_integral(model, g, 0.0, piece)?.value);
            x = tr.eval_at(model, piece)?;
        }
        batch.push(pairwise_sum(&parts) / len);
    }
    let est = batch_means(&batch, DEFAULT_BATCHES);
    g.set_mean_under_mu_star(est.value);
    Ok(est)
}

/// States read off one trajectory at `burn_in + k·spacing`, `k < n`, with
/// uniform weights.
pub fn sample_mu_star(
    model: &PdmpModel,
    start: &HybridState,
    n: usize,
    burn_in: f64,
    spacing: f64,
    rng: &RngStream,
) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(invalid("n", "need at least one sample"));
    }
    if !(burn_in >= 0.0) || !(spacing > 0.0) {
        return Err(invalid("spacing", "need burn_in >= 0 and spacing > 0"));
    }
    model.validate_state(start)?;
    let times: Vec<f64> = (0..n).map(|k| burn_in + k as f64 * spacing).collect();
    let horizon = *times.last().unwrap();
    if horizon == 0.0 {
        return Ok(EmpiricalMeasure::dirac(start.clone()));
    }
    let tr = simulate(model, start, horizon, &mut rng.split(0))?;
    EmpiricalMeasure::uniform(tr.states_at(model, &times)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorEstimate {
    pub x: HybridState,
    pub value: f64,
    pub stat_err: f64,
    /// `|I_h − I_{2h}|/3` on the same replicas.
    pub grid_err: f64,
    pub trunc_t: f64,
    pub n_rep: usize,
    pub tail_bound: Option<f64>,
}

impl CorrectorEstimate {
    pub fn as_estimate(&self) -> Estimate {
        Estimate::new(self.value, self.stat_err)
    }
}

/// Integration nodes for the corrector integrand: a geometric run
/// `step/64, …, step/2` then the uniform grid `step, 2·step, …` ending
/// exactly at `trunc_t`.
pub fn corrector_grid(trunc_t: f64, step: f64) -> Vec<f64> {
    let mut grid = vec![0.0];
    let first = step.min(trunc_t);
    for k in (1..=6).rev() {
        grid.push(first / f64::powi(2.0, k));
    }
    let n = (trunc_t / step).ceil() as usize;
    for k in 1..n {
        grid.push(k as f64 * step);
    }
    grid.push(trunc_t);
    grid
}

fn trapezoid(ts: &[f64], fs: &[f64]) -> f64 {
    let parts: Vec<f64> = ts
        .windows(2)
        .zip(fs.windows(2))
        .map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1]))
        .collect();
    pairwise_sum(&parts)
}

/// Settings of the Monte-Carlo corrector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorSettings {
    pub trunc_t: f64,
    pub grid_step: f64,
    pub n_rep: usize,
}

impl CorrectorSettings {
    /// `trunc_t = 20/λ`, grid step `0.05/λ`.
    pub fn default_for(model: &PdmpModel, n_rep: usize) -> Self {
        Self {
            trunc_t: 20.0 / model.rate(),
            grid_step: 0.05 / model.rate(),
            n_rep,
        }
    }
}

/// `χ̂(x)`: replicas from `x`, `ḡ(Ψ(t))` on [`corrector_grid`], trapezoid
/// rule per replica, averaged. The standard error is the spread of the
/// per-replica integrals. With `ergodicity`, the truncation tail
/// `‖g‖_BL·ϰ̂(V(x)+1)^{1/2}·e^{−γ̂T}/γ̂` is attached.
pub fn estimate_corrector(
    model: &PdmpModel,
    g: &Observable,
    x: &HybridState,
    settings: &CorrectorSettings,
    ergodicity: Option<&ErgodicityEstimate>,
    rng: &RngStream,
) -> Result<CorrectorEstimate> {
    let gbar = g.centered()?;
    model.validate_state(x)?;
    let CorrectorSettings {
        trunc_t,
        grid_step,
        n_rep,
    } = *settings;
    if !(trunc_t > 0.0 && trunc_t.is_finite()) {
        return Err(invalid("trunc_t", "must be positive"));
    }
    if !(grid_step > 0.0) {
        return Err(invalid("grid_step", "must be positive"));
    }
    if n_rep < 2 {
        return Err(invalid("n_rep", "need at least two replicas"));
    }
    let tail_bound = ergodicity.and_then(|e| e.tail_bound(g, model.lyapunov(x), trunc_t));
    if let (Some(c), Some(m)) = (g.constant_value(), g.mean_under_mu_star()) {
        return Ok(CorrectorEstimate {
            x: x.clone(),
            value: (c - m) * trunc_t,
            stat_err: 0.0,
            grid_err: 0.0,
            trunc_t,
            n_rep,
            tail_bound,
        });
    }
    let grid = corrector_grid(trunc_t, grid_step);
    // Every other uniform node, for the halving probe.
    let coarse_idx: Vec<usize> = {
        let uniform_start = 7;
        let mut idx: Vec<usize> = (0..uniform_start).collect();
        let last = grid.len() - 1;
        idx.extend((uniform_start..last).filter(|k| (k - uniform_start) % 2 == 1));
        idx.push(last);
        idx
    };
    let coarse_t: Vec<f64> = coarse_idx.iter().map(|&k| grid[k]).collect();
    let per_rep = try_replicate(n_rep, rng, |_, mut r| {
        let tr = simulate(model, x, trunc_t, &mut r)?;
        let vals: Vec<f64> = tr.states_at(model, &grid)?.iter().map(&gbar).collect();
        let coarse: Vec<f64> = coarse_idx.iter().map(|&k| vals[k]).collect();
        Ok((trapezoid(&grid, &vals), trapezoid(&coarse_t, &coarse)))
    })?;
    let fine: Vec<f64> = per_rep.iter().map(|p| p.0).collect();
    let coarse: Vec<f64> = per_rep.iter().map(|p| p.1).collect();
    let est = mean_stderr(&fine);
    Ok(CorrectorEstimate {
        x: x.clone(),
        value: est.value,
        stat_err: est.stderr,
        grid_err: (est.value - stats::mean(&coarse)).abs() / 3.0,
        trunc_t,
        n_rep,
        tail_bound,
    })
}

/// Corrector evaluator used by the decomposition and the σ² estimators.
pub trait Corrector: Sync {
    /// `χ(x)` with its standard error (zero for exact evaluators).
    fn eval(&self, x: &HybridState) -> Result<Estimate>;
}

/// Exact corrector given as a function.
pub struct ClosedFormCorrector<F>(pub F);

impl<F: Fn(&HybridState) -> f64 + Sync> Corrector for ClosedFormCorrector<F> {
    fn eval(&self, x: &HybridState) -> Result<Estimate> {
        Ok(Estimate::new((self.0)(x), 0.0))
    }
}

type StateKey = (usize, Vec<u64>);

fn state_key(x: &HybridState) -> StateKey {
    (x.regime, x.y.iter().map(|v| (v + 0.0).to_bits()).collect())
}

/// Monte-Carlo corrector memoized per state. The replica streams for a state
/// are derived from the state itself, so a value does not depend on query
/// order or on the trajectory that produced the state.
pub struct MonteCarloCorrector<'a> {
    model: &'a PdmpModel,
    g: &'a Observable,
    settings: CorrectorSettings,
    rng: RngStream,
    cache: RwLock<HashMap<StateKey, Estimate>>,
}

impl<'a> MonteCarloCorrector<'a> {
    pub fn new(model: &'a PdmpModel, g: &'a Observable, settings: CorrectorSettings, rng: &RngStream) -> Result<Self> {
        if g.mean_under_mu_star().is_none() {
            return Err(Error::MissingMean);
        }
        Ok(Self {
            model,
            g,
            settings,
            rng: rng.clone(),
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn cached(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }
}

impl Corrector for MonteCarloCorrector<'_> {
    fn eval(&self, x: &HybridState) -> Result<Estimate> {
        let key = state_key(x);
        if let Some(e) = self.cache.read().ok().and_then(|c| c.get(&key).copied()) {
            return Ok(e);
        }
        let mut words = vec![key.0 as u64];
        words.extend(&key.1);
        let r = self.rng.split_path(&words);
        let e = estimate_corrector(self.model, self.g, x, &self.settings, None, &r)?.as_estimate();
        if let Ok(mut c) = self.cache.write() {
            c.insert(key, e);
        }
        Ok(e)
    }
}

/// Pieces of `M(t) = χ(Ψ(t)) − χ(Ψ(0)) + ∫_0^t ḡ(Ψ(s)) ds` along one path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleDecomposition {
    pub grid_step: f64,
    /// Grid times `k·grid_step` up to the last integer time `≤ horizon`.
    pub times: Vec<f64>,
    pub chi: Vec<f64>,
    /// Variance of the corrector estimate at each grid time.
    pub chi_var: Vec<f64>,
    /// `∫_0^t ḡ` at each grid time.
    pub integral: Vec<f64>,
    pub m: Vec<f64>,
    /// `Z(n) = M(n) − M(n−1)`, `n = 1..N`.
    pub z: Vec<f64>,
    /// Corrector-noise variance carried by `Z(n)`.
    pub z_noise_var: Vec<f64>,
    /// `Σ_{k≤n} Z(k)²`, `n = 1..N`.
    pub qv: Vec<f64>,
    /// `R(t)` at the last grid time.
    pub r_final: f64,
}

impl MartingaleDecomposition {
    pub fn increments(&self) -> usize {
        self.z.len()
    }

    fn index_of_integer(&self, n: usize) -> usize {
        (n as f64 / self.grid_step).round() as usize
    }

    pub fn m_at(&self, n: usize) -> f64 {
        self.m[self.index_of_integer(n)]
    }

    /// `R(t) = (χ(Ψ(0)) − χ(Ψ(t)))/√t` at grid index `k ≥ 1`.
    pub fn remainder(&self, k: usize) -> f64 {
        (self.chi[0] - self.chi[k]) / self.times[k].sqrt()
    }

    /// `(1/√t)∫_0^t ḡ` at grid index `k ≥ 1`.
    pub fn scaled_integral(&self, k: usize) -> f64 {
        self.integral[k] / self.times[k].sqrt()
    }
}

/// Evaluates the decomposition of `traj` on the grid `k·grid_step`.
/// `grid_step` must divide one.
pub fn decompose(
    traj: &crate::engine::Trajectory,
    model: &PdmpModel,
    g: &Observable,
    chi: &dyn Corrector,
    grid_step: f64,
) -> Result<MartingaleDecomposition> {
    let gbar = g.centered()?;
    if traj.horizon() < 1.0 {
        return Err(Error::HorizonTooShort(format!(
            "decomposition needs horizon >= 1, got {}",
            traj.horizon()
        )));
    }
    let per_unit = 1.0 / grid_step;
    if !(grid_step > 0.0) || (per_unit - per_unit.round()).abs() > 1e-9 {
        return Err(invalid("grid_step", "must divide 1"));
    }
    let per_unit = per_unit.round() as usize;
    let n_int = (traj.horizon() + 1e-9).floor() as usize;
    let steps = n_int * per_unit;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 / per_unit as f64).collect();
    let states = traj.states_at(model, &times)?;
    let chis = states.iter().map(|x| chi.eval(x)).collect::<Result<Vec<_>>>()?;
    let rule = QuadratureRule::default();
    let mut integral = vec![0.0; times.len()];
    let mut acc = 0.0;
    for k in 1..times.len() {
        acc += traj.integrate(model, &gbar, times[k - 1], times[k], &rule)?.value;
        integral[k] = acc;
    }
    if let (Some(c), Some(m)) = (g.constant_value(), g.mean_under_mu_star()) {
        for (k, v) in integral.iter_mut().enumerate() {
            *v = (c - m) * times[k];
        }
    }
    let chi_v: Vec<f64> = chis.iter().map(|e| e.value).collect();
    let chi_var: Vec<f64> = chis.iter().map(|e| e.stderr * e.stderr).collect();
    let m: Vec<f64> = (0..times.len()).map(|k| chi_v[k] - chi_v[0] + integral[k]).collect();
    let mut z = Vec::with_capacity(n_int);
    let mut z_noise_var = Vec::with_capacity(n_int);
    let mut qv = Vec::with_capacity(n_int);
    let mut q = 0.0;
    for n in 1..=n_int {
        let (a, b) = ((n - 1) * per_unit, n * per_unit);
        let zn = m[b] - m[a];
        q += zn * zn;
        z.push(zn);
        z_noise_var.push(chi_var[a] + chi_var[b]);
        qv.push(q);
    }
    let last = times.len() - 1;
    let r_final = (chi_v[0] - chi_v[last]) / times[last].sqrt();
    Ok(MartingaleDecomposition {
        grid_step,
        times,
        chi: chi_v,
        chi_var,
        integral,
        m,
        z,
        z_noise_var,
        qv,
        r_final,
    })
}

/// Decompositions of `n_rep` independent paths of length `horizon` from `init`.
#[allow(clippy::too_many_arguments)]
pub fn decompose_ensemble(
    model: &PdmpModel,
    g: &Observable,
    chi: &dyn Corrector,
    init: &InitialLaw,
    horizon: f64,
    grid_step: f64,
    n_rep: usize,
    rng: &RngStream,
) -> Result<Vec<MartingaleDecomposition>> {
    init.validate(model)?;
    try_replicate(n_rep, rng, |_, mut r| {
        let x0 = init.draw(&mut r);
        let tr = simulate(model, &x0, horizon, &mut r)?;
        decompose(&tr, model, g, chi, grid_step)
    })
}

/// Weighted mean with a standard error. Uniform weights use 32 batch means
/// over the given order (support points read off one trajectory are
/// serially correlated); otherwise the delta method over the weights.
fn weighted_mean(terms: &[f64], weights: &[f64]) -> Estimate {
    let n = terms.len();
    let uniform = weights.iter().all(|w| (w - weights[0]).abs() <= 1e-15);
    if uniform {
        let bm = batch_means(terms, DEFAULT_BATCHES);
        let iid = mean_stderr(terms);
        let se = if bm.stderr.is_nan() {
            iid.stderr
        } else {
            bm.stderr.max(iid.stderr)
        };
        return Estimate::new(iid.value, se);
    }
    let v = pairwise_sum(&terms.iter().zip(weights).map(|(t, w)| t * w).collect::<Vec<_>>());
    let var: Vec<f64> = terms
        .iter()
        .zip(weights)
        .map(|(t, w)| w * w * (t - v) * (t - v))
        .collect();
    let corr = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
    Estimate::new(v, (pairwise_sum(&var) * corr).sqrt())
}

/// `σ² = E_{μ*} Z(1)²`: one unit of time from each support point of `mu_star`,
/// with the corrector-noise variance of both endpoints subtracted.
pub fn sigma2_martingale(
    model: &PdmpModel,
    g: &Observable,
    chi: &dyn Corrector,
    mu_star: &EmpiricalMeasure,
    rng: &RngStream,
) -> Result<Estimate> {
    let gbar = g.centered()?;
    if mu_star.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let rule = QuadratureRule::default();
    let terms = mu_star
        .points()
        .par_iter()
        .enumerate()
        .map(|(k, x)| {
            let mut r = rng.split(k as u64);
            let tr = simulate(model, x, 1.0, &mut r)?;
            let c0 = chi.eval(x)?;
            let c1 = chi.eval(&tr.eval_at(model, 1.0)?)?;
            let int = match (g.constant_value(), g.mean_under_mu_star()) {
                (Some(c), Some(m)) => c - m,
                _ => tr.integrate(model, &gbar, 0.0, 1.0, &rule)?.value,
            };
            let z = c1.value - c0.value + int;
            Ok(z * z - c0.stderr * c0.stderr - c1.stderr * c1.stderr)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(weighted_mean(&terms, mu_star.weights()))
}

/// `σ² = 2⟨χḡ, μ*⟩` from corrector values on the support of `mu_star`.
/// With independent per-point corrector estimates the spread of the terms
/// already contains the corrector noise.
pub fn sigma2_green(g: &Observable, chi_values: &[Estimate], mu_star: &EmpiricalMeasure) -> Result<Estimate> {
    let gbar = g.centered()?;
    if chi_values.len() != mu_star.len() {
        return Err(Error::Misaligned(format!(
            "{} corrector values for {} support points",
            chi_values.len(),
            mu_star.len()
        )));
    }
    let terms: Vec<f64> = mu_star
        .points()
        .iter()
        .zip(chi_values)
        .map(|(x, c)| 2.0 * c.value * gbar(x))
        .collect();
    if terms.iter().all(|t| *t == 0.0) {
        return Ok(Estimate::new(0.0, 0.0));
    }
    Ok(weighted_mean(&terms, mu_star.weights()))
}

/// Independent Monte-Carlo corrector values at every support point of
/// `mu_star` (point `k` uses stream `rng.split(k)`).
pub fn corrector_on_support(
    model: &PdmpModel,
    g: &Observable,
    mu_star: &EmpiricalMeasure,
    settings: &CorrectorSettings,
    rng: &RngStream,
) -> Result<Vec<CorrectorEstimate>> {
    mu_star
        .points()
        .par_iter()
        .enumerate()
        .map(|(k, x)| estimate_corrector(model, g, x, settings, None, &rng.split(k as u64)))
        .collect()
}

/// Least-squares slope of the ensemble mean of `Σ_{k≤n} Z(k)²` against
/// `n = 1..n_max` (corrector noise removed). The slope is linear in the
/// data, so it equals the mean of per-path slopes, whose spread gives the
/// standard error.
pub fn qv_slope(decomps: &[MartingaleDecomposition], n_max: usize) -> Result<Estimate> {
    if n_max < 2 {
        return Err(Error::Insufficient("qv slope needs n_max >= 2".into()));
    }
    if decomps.is_empty() {
        return Err(Error::Insufficient("no decompositions".into()));
    }
    if let Some(d) = decomps.iter().find(|d| d.increments() < n_max) {
        return Err(Error::Insufficient(format!(
            "a decomposition has {} increments, need {n_max}",
            d.increments()
        )));
    }
    let ns: Vec<f64> = (1..=n_max).map(|n| n as f64).collect();
    let slopes: Vec<f64> = decomps
        .iter()
        .map(|d| {
            let mut q = 0.0;
            let qs: Vec<f64> = (0..n_max)
                .map(|k| {
                    q += d.z[k] * d.z[k] - d.z_noise_var[k];
                    q
                })
                .collect();
            stats::line_fit(&ns, &qs).map_or(0.0, |f| f.slope)
        })
        .collect();
    Ok(mean_stderr(&slopes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Report {
    pub sigma2_mart: Estimate,
    pub sigma2_green: Estimate,
    pub qv_slope: Estimate,
    /// Largest pairwise `|difference| / combined stderr`.
    pub agreement_z: f64,
    pub trunc_t: f64,
    pub tail_bound: Option<f64>,
}

impl Sigma2Report {
    pub fn new(
        sigma2_mart: Estimate,
        sigma2_green: Estimate,
        qv_slope: Estimate,
        trunc_t: f64,
        tail_bound: Option<f64>,
    ) -> Self {
        let agreement_z = [
            sigma2_mart.z_against(&sigma2_green),
            sigma2_mart.z_against(&qv_slope),
            sigma2_green.z_against(&qv_slope),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        Self {
            sigma2_mart,
            sigma2_green,
            qv_slope,
            agreement_z,
            trunc_t,
            tail_bound,
        }
    }

    /// Inverse-variance weighted combination of the three estimates, treated
    /// as independent. Exact zeros short-circuit.
    pub fn combined(&self) -> Estimate {
        let all = [self.sigma2_mart, self.sigma2_green, self.qv_slope];
        if all.iter().any(|e| e.stderr == 0.0) {
            let exact: Vec<f64> = all.iter().filter(|e| e.stderr == 0.0).map(|e| e.value).collect();
            return Estimate::new(stats::mean(&exact), 0.0);
        }
        let w: Vec<f64> = all.iter().map(|e| 1.0 / (e.stderr * e.stderr)).collect();
        let sw: f64 = w.iter().sum();
        let v: f64 = all.iter().zip(&w).map(|(e, w)| e.value * w).sum::<f64>() / sw;
        Estimate::new(v, (1.0 / sw).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagCorrelation {
    pub lag: usize,
    /// Sample correlation of `(Z(n), Z(n+lag))` pooled over paths and `n`.
    pub corr: f64,
    /// Mean over paths of `Σ_n Z(n)Z(n+lag)`; zero in expectation.
    pub cross: Estimate,
    pub z: f64,
}

/// Increment autocorrelations for `lag = 1..=max_lag` from per-path sums of
/// products, so paths are the independent units.
pub fn increment_autocorrelation(decomps: &[MartingaleDecomposition], max_lag: usize) -> Result<Vec<LagCorrelation>> {
    let n = decomps.iter().map(|d| d.increments()).min().unwrap_or(0);
    if decomps.len() < 2 || n <= max_lag {
        return Err(Error::Insufficient(format!(
            "need at least two paths with more than {max_lag} increments"
        )));
    }
    (1..=max_lag)
        .map(|lag| {
            let pairs = n - lag;
            let cross: Vec<f64> = decomps
                .iter()
                .map(|d| pairwise_sum(&(0..pairs).map(|k| d.z[k] * d.z[k + lag]).collect::<Vec<_>>()))
                .collect();
            let sq_a: Vec<f64> = decomps
                .iter()
                .map(|d| pairwise_sum(&(0..pairs).map(|k| d.z[k] * d.z[k]).collect::<Vec<_>>()))
                .collect();
            let sq_b: Vec<f64> = decomps
                .iter()
                .map(|d| pairwise_sum(&(lag..n).map(|k| d.z[k] * d.z[k]).collect::<Vec<_>>()))
                .collect();
            let cross = mean_stderr(&cross);
            let denom = (stats::mean(&sq_a) * stats::mean(&sq_b)).sqrt();
            let corr = if denom > 0.0 { cross.value / denom } else { 0.0 };
            let z = if cross.value == 0.0 {
                0.0
            } else if cross.stderr == 0.0 {
                f64::INFINITY
            } else {
                cross.value.abs() / cross.stderr
            };
            Ok(LagCorrelation { lag, corr, cross, z })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderPoint {
    pub t: f64,
    /// Ensemble mean of `|R(t)|`.
    pub mean_abs: Estimate,
}

/// `E|R(t)|` with `R(t) = (χ(Ψ(0)) − χ(Ψ(t)))/√t` at the given times.
pub fn remainder_profile(
    model: &PdmpModel,
    chi: &dyn Corrector,
    init: &InitialLaw,
    times: &[f64],
    n_rep: usize,
    rng: &RngStream,
) -> Result<Vec<RemainderPoint>> {
    init.validate(model)?;
    if times.is_empty() || times.iter().any(|t| !(*t > 0.0)) || times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("times", "need increasing positive times"));
    }
    if n_rep < 2 {
        return Err(invalid("n_rep", "need at least two replicas"));
    }
    let horizon = *times.last().unwrap();
    let rows = try_replicate(n_rep, rng, |_, mut r| {
        let x0 = init.draw(&mut r);
        let tr = simulate(model, &x0, horizon, &mut r)?;
        let c0 = chi.eval(&x0)?.value;
        tr.states_at(model, times)?
            .iter()
            .zip(times)
            .map(|(x, t)| Ok((c0 - chi.eval(x)?.value).abs() / t.sqrt()))
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(times
        .iter()
        .enumerate()
        .map(|(j, &t)| RemainderPoint {
            t,
            mean_abs: mean_stderr(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()),
        })
        .collect())
}

/// Replicated values of `M(t)` at integer `t` from `init`.
pub fn martingale_values(decomps: &[MartingaleDecomposition], t: usize) -> Result<Estimate> {
    if decomps.iter().any(|d| d.increments() < t) {
        return Err(Error::Insufficient(format!("paths shorter than {t}")));
    }
    Ok(mean_stderr(&decomps.iter().map(|d| d.m_at(t)).collect::<Vec<_>>()))
}

/// Empirical quantile of `V` along one run over `[0, burn_in]`, sampled on a
/// grid of step `1/λ` from `start`.
pub fn lyapunov_quantile(model: &PdmpModel, start: &HybridState, burn_in: f64, p: f64, rng: &RngStream) -> Result<f64> {
    if !(burn_in > 0.0) {
        return Err(invalid("burn_in", "must be positive"));
    }
    let step = (1.0 / model.rate()).min(burn_in / 1000.0).max(burn_in / 1e6);
    let n = (burn_in / step).floor() as usize;
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
    let tr = simulate(model, start, burn_in, &mut rng.split(0))?;
    let vs: Vec<f64> = tr.states_at(model, &times)?.iter().map(|x| model.lyapunov(x)).collect();
    Ok(stats::quantile(&vs, p))
}

/// Default clamp radius for `clamp-linear`: ten times the 99.9% quantile of
/// `V` over the burn-in window, floored at 1.
pub fn default_clamp_radius(model: &PdmpModel, start: &HybridState, burn_in: f64, rng: &RngStream) -> Result<f64> {
    Ok((10.0 * lyapunov_quantile(model, start, burn_in, 0.999, rng)?).max(1.0))
}
