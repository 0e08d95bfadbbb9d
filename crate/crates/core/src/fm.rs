//! Empirical measures and the exact Fortet–Mourier (bounded-Lipschitz)
//! distance between them.
//!
//! For finitely supported measures the supremum over `‖f‖_BL ≤ 1` is the
//! linear program
//!
//! ```text
//! maximize   Σ_k f_k (μ_k − ν_k)
//! subject to −1 ≤ f_k ≤ 1,   |f_k − f_l| ≤ ρ(x_k, x_l)
//! ```
//!
//! over the union support. Its optimum is attained on the support and any
//! optimal vector extends to all of `X` without changing the value
//! (McShane extension), so the program is exact, not a discretisation.
//!
//! The program is solved through its dual. Because both measures have unit
//! mass, a vector is feasible (up to a constant shift) exactly when it is
//! 1-Lipschitz for the truncated metric `min(ρ, 2)`, and the dual is the
//! uncapacitated transport problem with cost `min(ρ, 2)`. That is solved by
//! successive shortest paths with node potentials; the potentials give back
//! an optimal `f`, which is returned as a certificate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{HybridMetric, HybridState};
use crate::rng::RngStream;

pub const DEFAULT_SUPPORT_CAP: usize = 2000;

/// Weighted point set on `X`; a probability measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    points: Vec<HybridState>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Weights must be nonnegative and sum to one within `1e-12`.
    pub fn new(points: Vec<HybridState>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if points.len() != weights.len() {
            return Err(Error::Misaligned(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("weights", "must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("weights", format!("sum to {total}, not 1")));
        }
        Ok(Self { points, weights })
    }

    /// Rescales nonnegative weights to unit mass.
    pub fn normalized(points: Vec<HybridState>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(invalid("weights", "total mass must be positive"));
        }
        Self::new(points, weights.into_iter().map(|w| w / total).collect())
            .map_err(|_| invalid("weights", "could not normalize"))
    }

    pub fn uniform(points: Vec<HybridState>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        let w = 1.0 / points.len() as f64;
        let weights = vec![w; points.len()];
        Ok(Self { points, weights })
    }

    pub fn dirac(x: HybridState) -> Self {
        Self {
            points: vec![x],
            weights: vec![1.0],
        }
    }

    pub fn points(&self) -> &[HybridState] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `⟨f, μ⟩`.
    pub fn integrate<F: Fn(&HybridState) -> f64>(&self, f: F) -> f64 {
        let terms: Vec<f64> = self.points.iter().zip(&self.weights).map(|(x, w)| w * f(x)).collect();
        crate::stats::pairwise_sum(&terms)
    }

    fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect()
    }

    /// One point drawn by weight.
    pub fn sample(&self, rng: &mut RngStream) -> &HybridState {
        &self.points[rng.categorical(&self.cumulative())]
    }
}

/// `m` i.i.d. draws by weight, returned with uniform weights.
pub fn subsample(mu: &EmpiricalMeasure, m: usize, rng: &mut RngStream) -> Result<EmpiricalMeasure> {
    if m == 0 {
        return Err(invalid("m", "subsample size must be at least 1"));
    }
    let cum = mu.cumulative();
    let points = (0..m).map(|_| mu.points[rng.categorical(&cum)].clone()).collect();
    EmpiricalMeasure::uniform(points)
}

/// Distance value plus an optimal test function on the union support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmSolution {
    pub value: f64,
    /// `(x_k, f_k)` with `|f_k| ≤ 1` and `|f_k − f_l| ≤ ρ(x_k, x_l)`.
    pub certificate: Vec<(HybridState, f64)>,
    /// `Σ_k f_k (μ_k − ν_k)` for the certificate; equals `value` up to rounding.
    pub certificate_value: f64,
}

pub fn fm_distance(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, metric: &HybridMetric) -> Result<f64> {
    Ok(fm_solve(mu, nu, metric, DEFAULT_SUPPORT_CAP)?.value)
}

pub fn fm_solve(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    metric: &HybridMetric,
    support_cap: usize,
) -> Result<FmSolution> {
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let (support, net) = union_support(mu, nu);
    if support.len() > support_cap {
        return Err(Error::SupportCapExceeded {
            size: support.len(),
            cap: support_cap,
        });
    }
    let sources: Vec<usize> = (0..support.len()).filter(|&k| net[k] > 0.0).collect();
    let sinks: Vec<usize> = (0..support.len()).filter(|&k| net[k] < 0.0).collect();
    if sources.is_empty() || sinks.is_empty() {
        let certificate = support.into_iter().map(|x| (x, 0.0)).collect();
        return Ok(FmSolution {
            value: 0.0,
            certificate,
            certificate_value: 0.0,
        });
    }
    let cost = |k: usize, l: usize| metric.rho(&support[k], &support[l]).min(2.0);
    let supply: Vec<f64> = sources.iter().map(|&k| net[k]).collect();
    let demand: Vec<f64> = sinks.iter().map(|&l| -net[l]).collect();
    let costs: Vec<f64> = sources
        .iter()
        .flat_map(|&k| sinks.iter().map(move |&l| (k, l)))
        .map(|(k, l)| cost(k, l))
        .collect();
    let tp = transport(&supply, &demand, &costs)?;

    // McShane extension of the sink potentials to every support point.
    let sink_f: Vec<f64> = tp.sink_potential.iter().map(|p| -p).collect();
    let mut f: Vec<f64> = (0..support.len())
        .map(|j| {
            sinks
                .iter()
                .zip(&sink_f)
                .map(|(&l, fl)| fl + cost(j, l))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let mid = 0.5 * (hi + lo);
    for v in f.iter_mut() {
        *v = (*v - mid).clamp(-1.0, 1.0);
    }
    let certificate_value = crate::stats::pairwise_sum(&f.iter().zip(&net).map(|(a, b)| a * b).collect::<Vec<_>>());
    let value = tp.cost.clamp(0.0, 2.0);
    if (certificate_value - value).abs() > 1e-7 {
        return Err(Error::Solver(format!(
            "dual certificate value {certificate_value} disagrees with transport cost {value}"
        )));
    }
    Ok(FmSolution {
        value,
        certificate: support.into_iter().zip(f).collect(),
        certificate_value,
    })
}

fn state_key(x: &HybridState) -> (usize, Vec<u64>) {
    (x.regime, x.y.iter().map(|v| (v + 0.0).to_bits()).collect())
}

/// Union of the supports with identical points merged; returns the points and
/// the net mass `μ_k − ν_k`.
fn union_support(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> (Vec<HybridState>, Vec<f64>) {
    let mut index: HashMap<(usize, Vec<u64>), usize> = HashMap::new();
    let mut points = Vec::new();
    let mut net: Vec<f64> = Vec::new();
    let mut add = |x: &HybridState, w: f64| {
        let k = *index.entry(state_key(x)).or_insert_with(|| {
            points.push(x.clone());
            net.push(0.0);
            points.len() - 1
        });
        net[k] += w;
    };
    for (x, w) in mu.points.iter().zip(&mu.weights) {
        add(x, *w);
    }
    for (x, w) in nu.points.iter().zip(&nu.weights) {
        add(x, -*w);
    }
    (points, net)
}

struct TransportSolution {
    cost: f64,
    sink_potential: Vec<f64>,
}

const MASS_EPS: f64 = 1e-15;

/// Uncapacitated transport by successive shortest paths on the bipartite
/// residual graph (sources → sinks forward, reverse arcs on positive flow).
/// `costs` is row-major `supply.len() × demand.len()` and nonnegative.
fn transport(supply: &[f64], demand: &[f64], costs: &[f64]) -> Result<TransportSolution> {
    let ns = supply.len();
    let nd = demand.len();
    let mut excess = supply.to_vec();
    let mut deficit = demand.to_vec();
    let mut pot_s = vec![0.0; ns];
    let mut pot_d = vec![0.0; nd];
    // Positive flows per sink: (source, amount).
    let mut flows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nd];

    let mut dist_s = vec![0.0; ns];
    let mut dist_d = vec![0.0; nd];
    let mut done_s = vec![false; ns];
    let mut done_d = vec![false; nd];
    let mut pred_d = vec![usize::MAX; nd];
    let mut pred_s = vec![usize::MAX; ns];

    let max_iter = 50 * (ns + nd) + 1000;
    let mut iter = 0;
    loop {
        let remaining_s: f64 = excess.iter().sum();
        let remaining_d: f64 = deficit.iter().sum();
        if remaining_s <= MASS_EPS * 16.0 || remaining_d <= MASS_EPS * 16.0 {
            break;
        }
        iter += 1;
        if iter > max_iter {
            return Err(Error::Solver("transport did not converge".into()));
        }
        for k in 0..ns {
            dist_s[k] = if excess[k] > MASS_EPS { 0.0 } else { f64::INFINITY };
            done_s[k] = false;
            pred_s[k] = usize::MAX;
        }
        for l in 0..nd {
            dist_d[l] = f64::INFINITY;
            done_d[l] = false;
            pred_d[l] = usize::MAX;
        }
        // Dense Dijkstra with linear-scan selection.
        let sink = loop {
            let mut best = f64::INFINITY;
            let mut pick: Option<(bool, usize)> = None;
            for k in 0..ns {
                if !done_s[k] && dist_s[k] < best {
                    best = dist_s[k];
                    pick = Some((true, k));
                }
            }
            for l in 0..nd {
                if !done_d[l] && dist_d[l] < best {
                    best = dist_d[l];
                    pick = Some((false, l));
                }
            }
            let Some((is_source, v)) = pick else {
                return Err(Error::Solver("no augmenting path with mass remaining".into()));
            };
            if is_source {
                done_s[v] = true;
                let row = &costs[v * nd..(v + 1) * nd];
                for l in 0..nd {
                    if done_d[l] {
                        continue;
                    }
                    let reduced = (row[l] + pot_s[v] - pot_d[l]).max(0.0);
                    let nd_ = best + reduced;
                    if nd_ < dist_d[l] {
                        dist_d[l] = nd_;
                        pred_d[l] = v;
                    }
                }
            } else {
                done_d[v] = true;
                if deficit[v] > MASS_EPS {
                    break v;
                }
                for &(k, _) in &flows[v] {
                    if done_s[k] {
                        continue;
                    }
                    let reduced = (-costs[k * nd + v] + pot_d[v] - pot_s[k]).max(0.0);
                    let nd_ = best + reduced;
                    if nd_ < dist_s[k] {
                        dist_s[k] = nd_;
                        pred_s[k] = v;
                    }
                }
            }
        };
        let dt = dist_d[sink];
        for k in 0..ns {
            pot_s[k] += dist_s[k].min(dt);
        }
        for l in 0..nd {
            pot_d[l] += dist_d[l].min(dt);
        }

        // Bottleneck along the path sink ← source ← sink ← ... ← root source.
        let mut delta = deficit[sink];
        let mut l = sink;
        let root = loop {
            let k = pred_d[l];
            match pred_s[k] {
                usize::MAX => break k,
                prev_l => {
                    let on_arc = flows[prev_l].iter().find(|(s, _)| *s == k).map_or(0.0, |(_, a)| *a);
                    delta = delta.min(on_arc);
                    l = prev_l;
                }
            }
        };
        delta = delta.min(excess[root]);

        let mut l = sink;
        loop {
            let k = pred_d[l];
            add_flow(&mut flows[l], k, delta);
            match pred_s[k] {
                usize::MAX => break,
                prev_l => {
                    add_flow(&mut flows[prev_l], k, -delta);
                    l = prev_l;
                }
            }
        }
        excess[root] -= delta;
        if excess[root] <= MASS_EPS {
            excess[root] = 0.0;
        }
        deficit[sink] -= delta;
        if deficit[sink] <= MASS_EPS {
            deficit[sink] = 0.0;
        }
    }
    let terms: Vec<f64> = flows
        .iter()
        .enumerate()
        .flat_map(|(l, fl)| fl.iter().map(move |&(k, a)| (k, l, a)))
        .map(|(k, l, a)| a * costs[k * nd + l])
        .collect();
    Ok(TransportSolution {
        cost: crate::stats::pairwise_sum(&terms),
        sink_potential: pot_d,
    })
}

fn add_flow(arcs: &mut Vec<(usize, f64)>, k: usize, amount: f64) {
    if let Some(pos) = arcs.iter().position(|(s, _)| *s == k) {
        arcs[pos].1 += amount;
        if arcs[pos].1 <= MASS_EPS {
            arcs.swap_remove(pos);
        }
    } else if amount > MASS_EPS {
        arcs.push((k, amount));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric() -> HybridMetric {
        HybridMetric::euclidean(1.0)
    }

    fn s(y: f64, i: usize) -> HybridState {
        HybridState::scalar(y, i)
    }

    #[test]
    fn identical_measures_are_at_distance_zero() {
        let mu = EmpiricalMeasure::new(vec![s(0.0, 0), s(1.0, 1)], vec![0.3, 0.7]).unwrap();
        assert_eq!(fm_distance(&mu, &mu, &metric()).unwrap(), 0.0);
    }

    #[test]
    fn diracs() {
        let m = metric();
        for (a, b) in [(0.0, 0.3), (0.0, 1.7), (1.0, 5.0)] {
            let d = fm_distance(&EmpiricalMeasure::dirac(s(a, 0)), &EmpiricalMeasure::dirac(s(b, 0)), &m).unwrap();
            assert!((d - (b - a).abs().min(2.0)).abs() < 1e-12);
        }
        let d = fm_distance(
            &EmpiricalMeasure::dirac(s(0.0, 0)),
            &EmpiricalMeasure::dirac(s(0.5, 1)),
            &m,
        )
        .unwrap();
        assert!((d - 1.5).abs() < 1e-12);
    }

    #[test]
    fn certificate_is_feasible() {
        let mut rng = RngStream::from_seed(4);
        let pts = |rng: &mut RngStream, n: usize| -> Vec<HybridState> {
            (0..n)
                .map(|_| s(3.0 * rng.uniform(), (rng.uniform() * 2.0) as usize))
                .collect()
        };
        let mu = EmpiricalMeasure::uniform(pts(&mut rng, 40)).unwrap();
        let nu = EmpiricalMeasure::uniform(pts(&mut rng, 30)).unwrap();
        let sol = fm_solve(&mu, &nu, &metric(), 2000).unwrap();
        let cert = &sol.certificate;
        for (x, f) in cert {
            assert!(f.abs() <= 1.0 + 1e-12);
            for (z, g) in cert {
                assert!((f - g).abs() <= metric().rho(x, z) + 1e-9);
            }
        }
        assert!((sol.value - sol.certificate_value).abs() < 1e-9);
    }

    #[test]
    fn support_cap_enforced() {
        let pts: Vec<HybridState> = (0..30).map(|k| s(k as f64, 0)).collect();
        let mu = EmpiricalMeasure::uniform(pts).unwrap();
        let nu = EmpiricalMeasure::dirac(s(0.5, 0));
        assert!(matches!(
            fm_solve(&mu, &nu, &metric(), 10),
            Err(Error::SupportCapExceeded { size: 31, cap: 10 })
        ));
    }

    #[test]
    fn subsample_basics() {
        let mut rng = RngStream::from_seed(8);
        let mu = EmpiricalMeasure::new(vec![s(0.0, 0), s(1.0, 0)], vec![0.25, 0.75]).unwrap();
        let one = subsample(&mu, 1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.weights(), &[1.0]);
        assert!(subsample(&mu, 0, &mut rng).is_err());
    }

    #[test]
    fn weights_validated() {
        assert!(EmpiricalMeasure::new(vec![s(0.0, 0)], vec![0.5]).is_err());
        assert!(EmpiricalMeasure::new(vec![], vec![]).is_err());
        assert!(EmpiricalMeasure::normalized(vec![s(0.0, 0), s(1.0, 0)], vec![2.0, 2.0]).is_ok());
    }
}
