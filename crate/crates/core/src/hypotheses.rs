//! Numerical checks of the flow, jump and drift conditions, the explicit
//! constants of the generalized Laplace bound, and an exponential-ergodicity
//! probe based on the Fortet–Mourier distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{simulate, try_replicate};
use crate::error::{invalid, Error, Result};
use crate::fm::{fm_solve, subsample, EmpiricalMeasure, DEFAULT_SUPPORT_CAP};
use crate::model::{point, DeclaredConstants, HybridState, Observable, PdmpModel, Point};
use crate::rng::RngStream;
use crate::stats::{self, mean_stderr, pairwise_sum, Estimate};

/// Primary constants `(M, ζ, L, a, b)` together with the rate `λ` and every
/// derived constant of the drift proof.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisConstants {
    pub m_flow: f64,
    pub zeta: f64,
    pub l: f64,
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
    /// `⌈2ζ⌉`.
    pub m: u32,
    pub eta: f64,
    pub d: f64,
    pub gamma_lemma: f64,
    pub c_lemma: f64,
    pub a_prop: f64,
    pub b_prop: f64,
}

fn factorial(m: u32) -> f64 {
    (1..=m).map(f64::from).product()
}

/// `sup_{t≥0} (t^m + 1) e^{−λt}`.
///
/// The derivative vanishes where `h(t) = m t^{m−1} − λ(t^m + 1)` does. For
/// `m ≥ 1`, `m t^{m−1} − λ t^m` peaks at `(m−1)/λ`; if `h` stays negative
/// there the function is decreasing and the sup is the value 1 at `t = 0`.
/// Otherwise the maximizer is the root of `h` in `((m−1)/λ, m/λ)`, found by
/// bisection to machine precision, and compared with the value at 0.
pub fn sup_poly_exp(m: u32, lambda: f64) -> f64 {
    if m == 0 {
        return 2.0;
    }
    let mf = f64::from(m);
    let value = |t: f64| (t.powi(m as i32) + 1.0) * (-lambda * t).exp();
    let h = |t: f64| mf * t.powi(m as i32 - 1) - lambda * (t.powi(m as i32) + 1.0);
    let lo0 = (mf - 1.0) / lambda;
    if h(lo0) <= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (lo0, mf / lambda);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    value(0.5 * (lo + hi)).max(1.0)
}

impl HypothesisConstants {
    /// Fails unless `2aL² < 1` and the primaries are in range.
    pub fn new(primaries: &DeclaredConstants, lambda: f64) -> Result<Self> {
        let DeclaredConstants { m, zeta, l, a, b } = *primaries;
        if !(m >= 0.0 && zeta >= 0.0 && l > 0.0 && a > 0.0 && b >= 0.0 && lambda > 0.0) {
            return Err(invalid(
                "constants",
                "need M >= 0, zeta >= 0, L > 0, a > 0, b >= 0, lambda > 0",
            ));
        }
        let eta = 2.0 * a * l * l;
        if !(eta < 1.0) {
            return Err(invalid("balance", format!("2aL² = {eta} is not below 1")));
        }
        let mm = (2.0 * zeta).ceil() as u32;
        let mfact = factorial(mm);
        let lam_m = lambda.powi(-(mm as i32));
        let d = 2.0 * a * m * m * mfact + b;
        let gamma_lemma = (1.0 - eta) * lambda;
        let c_lemma = d / (1.0 - eta) * (1.0 + lam_m);
        let a_prop = 2.0 * l * l;
        let b_prop = 2.0 * (l * l * c_lemma + m * m * (mfact * lam_m + 1.0) + m * m * sup_poly_exp(mm, lambda));
        Ok(Self {
            m_flow: m,
            zeta,
            l,
            a,
            b,
            lambda,
            m: mm,
            eta,
            d,
            gamma_lemma,
            c_lemma,
            a_prop,
            b_prop,
        })
    }

    pub fn primaries(&self) -> DeclaredConstants {
        DeclaredConstants {
            m: self.m_flow,
            zeta: self.zeta,
            l: self.l,
            a: self.a,
            b: self.b,
        }
    }

    /// Recomputes the derived fields from the primaries.
    pub fn recompute(&self) -> Result<Self> {
        Self::new(&self.primaries(), self.lambda)
    }

    /// `e^{−Γt₀}V² + C`.
    pub fn genlap_bound(&self, v2: f64, t0: f64) -> f64 {
        (-self.gamma_lemma * t0).exp() * v2 + self.c_lemma
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub eta: f64,
    pub pass: bool,
}

/// `2aL² < 1`.
pub fn check_balance(primaries: &DeclaredConstants) -> BalanceReport {
    let eta = 2.0 * primaries.a * primaries.l * primaries.l;
    BalanceReport { eta, pass: eta < 1.0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct S1Report {
    pub pass: bool,
    pub worst_ratio: f64,
    /// `(t, max_i ρ_Y(S_i(t,y*), y*), M t^ζ)`.
    pub grid: Vec<(f64, f64, f64)>,
}

/// `max_i ρ_Y(S_i(t,y*), y*) ≤ M t^ζ` on `t_grid` (`t^0 = 1`).
pub fn check_s1(model: &PdmpModel, t_grid: &[f64], m_claim: f64, zeta: f64) -> Result<S1Report> {
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t > 0.0)) {
        return Err(invalid("t_grid", "need a nonempty grid of positive times"));
    }
    let anchor = model.anchor();
    let mut worst: f64 = 0.0;
    let mut grid = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let disp = (0..model.regimes())
            .map(|i| model.rho_y(&model.semiflow(i).flow(t, anchor), anchor))
            .fold(0.0, f64::max);
        let bound = if zeta == 0.0 { m_claim } else { m_claim * t.powf(zeta) };
        let ratio = if disp == 0.0 {
            0.0
        } else if bound == 0.0 {
            f64::INFINITY
        } else {
            disp / bound
        };
        worst = worst.max(ratio);
        grid.push((t, disp, bound));
    }
    Ok(S1Report {
        pass: worst <= 1.0 + 1e-9,
        worst_ratio: worst,
        grid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct S2Report {
    pub pass: bool,
    pub l_hat: f64,
    pub pairs_used: usize,
}

/// Largest contraction ratio `ρ_Y(S_i(t,y₁),S_i(t,y₂))/ρ_Y(y₁,y₂)` over random
/// pairs within distance 5 of the anchor, every regime and every grid time.
pub fn check_s2(
    model: &PdmpModel,
    t_grid: &[f64],
    pair_samples: usize,
    rng: &RngStream,
    claimed_l: f64,
) -> Result<S2Report> {
    if pair_samples == 0 {
        return Err(invalid("pair_samples", "need at least one pair"));
    }
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t >= 0.0)) {
        return Err(invalid("t_grid", "need a nonempty grid of nonnegative times"));
    }
    let anchor = model.anchor();
    let mut r = rng.split(0);
    let mut l_hat: f64 = 0.0;
    let mut used = 0;
    for _ in 0..pair_samples {
        let y1: Point = anchor.iter().map(|a| a + 10.0 * r.uniform() - 5.0).collect();
        let y2: Point = anchor.iter().map(|a| a + 10.0 * r.uniform() - 5.0).collect();
        let d0 = model.rho_y(&y1, &y2);
        if d0 == 0.0 {
            continue;
        }
        used += 1;
        for i in 0..model.regimes() {
            let s = model.semiflow(i);
            for &t in t_grid {
                l_hat = l_hat.max(model.rho_y(&s.flow(t, &y1), &s.flow(t, &y2)) / d0);
            }
        }
    }
    Ok(S2Report {
        pass: l_hat <= claimed_l * (1.0 + 1e-9),
        l_hat,
        pairs_used: used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct J1Row {
    pub y: Point,
    pub v2: f64,
    pub second_moment: Estimate,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct J1Report {
    pub pass: bool,
    pub a_hat: f64,
    pub b_hat: f64,
    /// Smallest `bound + 4·stderr − estimate` over the grid.
    pub worst_margin: f64,
    pub rows: Vec<J1Row>,
}

/// Monte-Carlo `E ρ_Y²(Y′, y*)` under `J(y, ·)` against `aρ_Y²(y,y*) + b`.
pub fn check_j1(model: &PdmpModel, y_grid: &[Point], n_mc: usize, rng: &RngStream, a: f64, b: f64) -> Result<J1Report> {
    if n_mc < 1000 {
        return Err(invalid("n_mc", "need at least 1000 Monte-Carlo draws"));
    }
    if y_grid.is_empty() {
        return Err(invalid("y_grid", "must be nonempty"));
    }
    let anchor = model.anchor();
    let rows = y_grid
        .par_iter()
        .enumerate()
        .map(|(k, y)| {
            if y.len() != model.dim() {
                return Err(invalid("y_grid", format!("points must have dimension {}", model.dim())));
            }
            let mut r = rng.split(k as u64);
            let draws = if model.jump_kernel().is_deterministic() {
                1
            } else {
                n_mc
            };
            let xs: Vec<f64> = (0..draws)
                .map(|_| {
                    let yp = model.jump_kernel().sample(y, &mut r);
                    let d = model.rho_y(&yp, anchor);
                    d * d
                })
                .collect();
            let v = model.rho_y(y, anchor);
            Ok(J1Row {
                y: y.clone(),
                v2: v * v,
                second_moment: mean_stderr(&xs),
                bound: a * v * v + b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let margin = rows
        .iter()
        .map(|r| r.bound + 4.0 * r.second_moment.stderr - r.second_moment.value)
        .fold(f64::INFINITY, f64::min);
    let xs: Vec<f64> = rows.iter().map(|r| r.v2).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.second_moment.value).collect();
    let (a_hat, b_hat) = match stats::line_fit(&xs, &ys) {
        Some(f) => (f.slope, f.intercept),
        None => (f64::NAN, stats::mean(&ys)),
    };
    Ok(J1Report {
        pass: margin >= 0.0,
        a_hat,
        b_hat,
        worst_margin: margin,
        rows,
    })
}

/// Monte-Carlo `P(t)V²(x)` on `x_grid × t_grid`: `out[x][t]`.
pub fn lyapunov_moment_surface(
    model: &PdmpModel,
    x_grid: &[HybridState],
    t_grid: &[f64],
    n_rep: usize,
    rng: &RngStream,
) -> Result<Vec<Vec<Estimate>>> {
    if t_grid.is_empty() || t_grid.windows(2).any(|w| !(w[0] < w[1])) || !(t_grid[0] > 0.0) {
        return Err(invalid("t_grid", "need increasing positive times"));
    }
    let horizon = *t_grid.last().unwrap();
    x_grid
        .iter()
        .enumerate()
        .map(|(k, x)| {
            model.validate_state(x)?;
            let rows = try_replicate(n_rep, &rng.split(k as u64), |_, mut r| {
                let tr = simulate(model, x, horizon, &mut r)?;
                Ok(tr
                    .states_at(model, t_grid)?
                    .iter()
                    .map(|s| {
                        let v = model.lyapunov(s);
                        v * v
                    })
                    .collect::<Vec<f64>>())
            })?;
            Ok((0..t_grid.len())
                .map(|j| mean_stderr(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
                .collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub x: HybridState,
    pub t: f64,
    pub moment: Estimate,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftFit {
    pub a_hat: f64,
    pub gamma_hat: f64,
    pub b_hat: f64,
    pub fit_r2: f64,
    /// Worst `(estimate − 4·stderr − bound)₊ / bound` over the grid.
    pub residual_max: f64,
    /// Largest standard error on the probe surface.
    pub noise_floor: f64,
    /// Too few decaying points for a rate fit.
    pub degenerate: bool,
    pub pass: bool,
    pub rows: Vec<DriftRow>,
}

pub const DRIFT_RESIDUAL_TOL: f64 = 0.05;

/// Fits `P(t)V²(x) ≤ Âe^{−Γ̂t}V²(x) + B̂`.
///
/// `B̂` is the largest top-quartile plateau over the rows. `Γ̂` is minus the
/// slope of a weighted line fit of `log((P(t)V² − B̂)/V²)` over points with
/// `V(x) > 0` whose excess over `B̂` is at least four standard errors and whose
/// relative error is at most 10%. `Â` is the larger of the fitted intercept and
/// the smallest value that covers every such point.
pub fn fit_drift(
    model: &PdmpModel,
    x_grid: &[HybridState],
    t_grid: &[f64],
    n_rep: usize,
    rng: &RngStream,
) -> Result<DriftFit> {
    if n_rep < 100 {
        return Err(invalid("n_rep", "need at least 100 replicas"));
    }
    if x_grid.is_empty() {
        return Err(invalid("x_grid", "must be nonempty"));
    }
    let surface = lyapunov_moment_surface(model, x_grid, t_grid, n_rep, rng)?;
    let nt = t_grid.len();
    let q0 = (3 * nt) / 4;
    let b_hat = surface
        .iter()
        .map(|row| stats::mean(&row[q0.min(nt - 1)..].iter().map(|e| e.value).collect::<Vec<_>>()))
        .fold(0.0, f64::max);
    let noise_floor = surface.iter().flatten().map(|e| e.stderr).fold(0.0, f64::max);

    let mut ts = Vec::new();
    let mut ls = Vec::new();
    let mut ws = Vec::new();
    let mut signal = Vec::new();
    for (x, row) in x_grid.iter().zip(&surface) {
        let v = model.lyapunov(x);
        if v == 0.0 {
            continue;
        }
        let v2 = v * v;
        for (&t, e) in t_grid.iter().zip(row) {
            let excess = e.value - b_hat;
            if excess <= 4.0 * e.stderr || e.stderr > 0.1 * excess {
                continue;
            }
            let rel = (e.stderr / excess).max(1e-6);
            ts.push(t);
            ls.push((excess / v2).ln());
            ws.push(1.0 / (rel * rel));
            signal.push((t, excess / v2));
        }
    }
    let fit = stats::weighted_line_fit(&ts, &ls, &ws);
    let (gamma_hat, a_fit, r2, degenerate) = match fit {
        Some(f) if -f.slope > 0.0 => (-f.slope, f.intercept.exp(), f.r2, false),
        _ => (f64::NAN, f64::NAN, 0.0, true),
    };
    let a_hat = if degenerate {
        f64::NAN
    } else {
        signal
            .iter()
            .map(|(t, r)| r * (gamma_hat * t).exp())
            .fold(a_fit, f64::max)
    };
    let mut residual_max: f64 = 0.0;
    let mut rows = Vec::new();
    for (x, row) in x_grid.iter().zip(&surface) {
        let v = model.lyapunov(x);
        for (&t, e) in t_grid.iter().zip(row) {
            let bound = if degenerate {
                b_hat
            } else {
                a_hat * (-gamma_hat * t).exp() * v * v + b_hat
            };
            let over = e.value - 4.0 * e.stderr - bound;
            if over > 0.0 {
                residual_max = residual_max.max(if bound > 0.0 { over / bound } else { f64::INFINITY });
            }
            rows.push(DriftRow {
                x: x.clone(),
                t,
                moment: *e,
                bound,
            });
        }
    }
    Ok(DriftFit {
        a_hat,
        gamma_hat,
        b_hat,
        fit_r2: r2,
        residual_max,
        noise_floor,
        degenerate,
        pass: !degenerate && residual_max <= DRIFT_RESIDUAL_TOL,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLapRow {
    pub x: HybridState,
    pub t0: f64,
    pub series: Estimate,
    pub bound: f64,
    /// `bound + 4·stderr − series`.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLapReport {
    pub pass: bool,
    pub rows: Vec<GenLapRow>,
}

/// Monte-Carlo value of `Σ_n P̄ⁿU_{t₀}(x, 0) = E_x Σ_{τ_n ≤ t₀} e^{−λ(t₀−τ_n)} V²(Φ_n)`
/// against `e^{−Γt₀}V²(x) + C`.
pub fn check_genlap(
    model: &PdmpModel,
    constants: &HypothesisConstants,
    x_grid: &[HybridState],
    t0_grid: &[f64],
    n_rep: usize,
    rng: &RngStream,
) -> Result<GenLapReport> {
    constants.recompute()?;
    if t0_grid.iter().any(|t| !(*t >= 0.0)) {
        return Err(invalid("t0_grid", "times must be nonnegative"));
    }
    if n_rep < 2 {
        return Err(invalid("n_rep", "need at least two replicas"));
    }
    let lambda = model.rate();
    let mut rows = Vec::new();
    for (k, x) in x_grid.iter().enumerate() {
        model.validate_state(x)?;
        let v = model.lyapunov(x);
        for (j, &t0) in t0_grid.iter().enumerate() {
            let series = if t0 == 0.0 {
                Estimate::new(v * v, 0.0)
            } else {
                let vals = try_replicate(n_rep, &rng.split_path(&[k as u64, j as u64]), |_, mut r| {
                    let tr = simulate(model, x, t0, &mut r)?;
                    let terms: Vec<f64> = tr
                        .jumps()
                        .iter()
                        .map(|jp| {
                            let vn = model.lyapunov(&jp.state);
                            (-lambda * (t0 - jp.tau)).exp() * vn * vn
                        })
                        .collect();
                    Ok(pairwise_sum(&terms))
                })?;
                mean_stderr(&vals)
            };
            let bound = constants.genlap_bound(v * v, t0);
            rows.push(GenLapRow {
                x: x.clone(),
                t0,
                series,
                bound,
                margin: bound + 4.0 * series.stderr - series.value,
            });
        }
    }
    Ok(GenLapReport {
        pass: rows.iter().all(|r| r.margin >= 0.0),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityRow {
    pub t: f64,
    pub distance: f64,
    pub noise_floor: f64,
}

/// Fitted constants of `d_FM(δ_x P(t), μ*) ≤ ϰ(V(x)+1)^{1/2} e^{−γt}`; these are
/// fits, not certified bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityEstimate {
    pub gamma_hat: f64,
    pub kappa_hat: f64,
    pub fit_r2: f64,
    pub no_signal: bool,
    /// Number of leading grid points used in the fit.
    pub window: usize,
    pub rows: Vec<ErgodicityRow>,
}

impl ErgodicityEstimate {
    /// `‖g‖_BL ϰ̂ (V+1)^{1/2} e^{−γ̂T}/γ̂`, when a usable fit exists.
    pub fn tail_bound(&self, g: &Observable, v: f64, trunc_t: f64) -> Option<f64> {
        if self.no_signal || !(self.gamma_hat > 0.0) {
            return None;
        }
        Some(g.bl_norm() * self.kappa_hat * (v + 1.0).sqrt() * (-self.gamma_hat * trunc_t).exp() / self.gamma_hat)
    }
}

fn ensemble_states(
    model: &PdmpModel,
    x: &HybridState,
    t_grid: &[f64],
    n: usize,
    rng: &RngStream,
) -> Result<Vec<Vec<HybridState>>> {
    let horizon = *t_grid.last().unwrap();
    let paths = try_replicate(n, rng, |_, mut r| {
        simulate(model, x, horizon, &mut r)?.states_at(model, t_grid)
    })?;
    Ok((0..t_grid.len())
        .map(|j| paths.iter().map(|p| p[j].clone()).collect())
        .collect())
}

/// Distances between the laws of `Ψ(t)` from two starts, with a same-law
/// noise floor from a second ensemble per start. The fit window is the
/// leading run of grid times where the distance is at least twice the floor.
pub fn probe_ergodicity(
    model: &PdmpModel,
    init_a: &HybridState,
    init_b: &HybridState,
    t_grid: &[f64],
    ensemble: usize,
    fm_subsample: usize,
    rng: &RngStream,
) -> Result<ErgodicityEstimate> {
    if ensemble < 100 {
        return Err(invalid("ensemble", "need at least 100 paths per start"));
    }
    if fm_subsample == 0 {
        return Err(invalid("fm_subsample", "must be positive"));
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| !(w[0] < w[1])) || !(t_grid[0] > 0.0) {
        return Err(invalid("t_grid", "need increasing positive times"));
    }
    model.validate_state(init_a)?;
    model.validate_state(init_b)?;
    let ens = [init_a, init_b, init_a, init_b]
        .iter()
        .enumerate()
        .map(|(k, x)| ensemble_states(model, x, t_grid, ensemble, &rng.split(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let metric = model.metric();
    let rows = (0..t_grid.len())
        .into_par_iter()
        .map(|j| {
            let sub = |e: usize| -> Result<EmpiricalMeasure> {
                let mu = EmpiricalMeasure::uniform(ens[e][j].clone())?;
                if ensemble > fm_subsample {
                    subsample(&mu, fm_subsample, &mut rng.split_path(&[4, j as u64, e as u64]))
                } else {
                    Ok(mu)
                }
            };
            let m: Vec<EmpiricalMeasure> = (0..4).map(sub).collect::<Result<_>>()?;
            let d = |p: usize, q: usize| -> Result<f64> {
                Ok(fm_solve(&m[p], &m[q], metric, DEFAULT_SUPPORT_CAP.max(2 * fm_subsample))?.value)
            };
            let distance = d(0, 1)?;
            let floor = 0.5 * (d(0, 2)? + d(1, 3)?);
            Ok(ErgodicityRow {
                t: t_grid[j],
                distance,
                noise_floor: floor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let window = rows
        .iter()
        .take_while(|r| r.distance >= 2.0 * r.noise_floor && r.distance > 0.0)
        .count();
    let norm = (model.lyapunov(init_a) + 1.0)
        .sqrt()
        .max((model.lyapunov(init_b) + 1.0).sqrt());
    let ts: Vec<f64> = rows[..window].iter().map(|r| r.t).collect();
    let ls: Vec<f64> = rows[..window].iter().map(|r| r.distance.ln()).collect();
    let (gamma_hat, kappa_hat, fit_r2, no_signal) = match stats::line_fit(&ts, &ls) {
        Some(f) if window >= 2 => (-f.slope, f.intercept.exp() / norm, f.r2, false),
        _ => (f64::NAN, f64::NAN, 0.0, true),
    };
    Ok(ErgodicityEstimate {
        gamma_hat,
        kappa_hat,
        fit_r2,
        no_signal,
        window,
        rows,
    })
}

/// Grid of scalar points as `Point`s.
pub fn scalar_grid(ys: &[f64]) -> Vec<Point> {
    ys.iter().map(|&y| point(&[y])).collect()
}

/// Convenience error for callers that require a usable ergodicity fit.
pub fn require_signal(e: &ErgodicityEstimate) -> Result<()> {
    if e.no_signal {
        Err(Error::Insufficient(
            "ergodicity probe found no decay above the noise floor".into(),
        ))
    } else {
        Ok(())
    }
}
