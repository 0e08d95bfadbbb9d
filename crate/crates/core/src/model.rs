//! Domain types for randomly switched semiflow processes and the built-in
//! example models.
//!
//! A model lives on `X = Y × I` with `Y = ℝ^d` and a finite regime set `I`.
//! Between jumps the continuous coordinate follows the semiflow of the current
//! regime; jumps arrive at rate `λ`, the regime is redrawn from the routing
//! row and the continuous coordinate from the jump kernel evaluated at the
//! pre-jump position.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;

/// Continuous coordinate. Inline storage covers every built-in model.
pub type Point = SmallVec<[f64; 4]>;

pub fn point(ys: &[f64]) -> Point {
    SmallVec::from_slice(ys)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub y: Point,
    pub regime: usize,
}

impl HybridState {
    pub fn new(y: &[f64], regime: usize) -> Self {
        Self { y: point(y), regime }
    }

    pub fn scalar(y: f64, regime: usize) -> Self {
        Self::new(&[y], regime)
    }
}

pub type MetricFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Metric on the continuous coordinate.
#[derive(Clone)]
pub enum YMetric {
    Euclidean,
    Manhattan,
    Max,
    Custom(MetricFn),
}

impl fmt::Debug for YMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            YMetric::Euclidean => write!(f, "Euclidean"),
            YMetric::Manhattan => write!(f, "Manhattan"),
            YMetric::Max => write!(f, "Max"),
            YMetric::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl YMetric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            YMetric::Euclidean => {
                if a.len() == 1 {
                    (a[0] - b[0]).abs()
                } else {
                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                }
            }
            YMetric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            YMetric::Max => a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
            YMetric::Custom(f) => f(a, b),
        }
    }

    /// Whether `|y1[0] - y2[0]| <= distance(y1, y2)` is guaranteed, which is
    /// what the built-in observables rely on for their Lipschitz certificate.
    pub fn dominates_first_coordinate(&self) -> bool {
        !matches!(self, YMetric::Custom(_))
    }
}

/// `ρ((y1,i1),(y2,i2)) = ρ_Y(y1,y2) + c·[i1 ≠ i2]`.
#[derive(Clone, Debug)]
pub struct HybridMetric {
    pub y_metric: YMetric,
    pub regime_weight: f64,
}

impl HybridMetric {
    pub fn euclidean(regime_weight: f64) -> Self {
        Self {
            y_metric: YMetric::Euclidean,
            regime_weight,
        }
    }

    pub fn rho_y(&self, a: &[f64], b: &[f64]) -> f64 {
        self.y_metric.distance(a, b)
    }

    pub fn rho(&self, a: &HybridState, b: &HybridState) -> f64 {
        let jump = if a.regime == b.regime { 0.0 } else { self.regime_weight };
        self.rho_y(&a.y, &b.y) + jump
    }
}

pub trait Semiflow: Send + Sync + fmt::Debug {
    /// `S(t, y)`.
    fn flow(&self, t: f64, y: &[f64]) -> Point;
}

/// `S(t, y) = c + e^{-αt}(y - c)`: relaxation toward `center` at rate `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFlow {
    pub rate: f64,
    pub center: Point,
}

impl Semiflow for AffineFlow {
    fn flow(&self, t: f64, y: &[f64]) -> Point {
        if t == 0.0 {
            return point(y);
        }
        let e = (-self.rate * t).exp();
        y.iter()
            .zip(self.center.iter())
            .map(|(yk, ck)| ck + e * (yk - ck))
            .collect()
    }
}

/// Jump kernel exposed as a sampler: a draw from `J(y, ·)`.
pub trait JumpKernel: Send + Sync + fmt::Debug {
    fn sample(&self, y: &[f64], rng: &mut RngStream) -> Point;

    fn is_deterministic(&self) -> bool {
        false
    }
}

/// `y' = κy + ξ` with independent `ξ_k ~ Uniform[-β, β]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineUniformJump {
    pub kappa: f64,
    pub beta: f64,
}

impl JumpKernel for AffineUniformJump {
    fn sample(&self, y: &[f64], rng: &mut RngStream) -> Point {
        y.iter()
            .map(|yk| self.kappa * yk + self.beta * (2.0 * rng.uniform() - 1.0))
            .collect()
    }

    fn is_deterministic(&self) -> bool {
        self.beta == 0.0
    }
}

/// `y' = κy` (a Dirac kernel).
#[derive(Clone, Debug, PartialEq)]
pub struct DiracScaleJump {
    pub kappa: f64,
}

impl JumpKernel for DiracScaleJump {
    fn sample(&self, y: &[f64], _rng: &mut RngStream) -> Point {
        y.iter().map(|yk| self.kappa * yk).collect()
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Parameter value in a model override table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    List(Vec<f64>),
}

pub type Overrides = BTreeMap<String, ParamValue>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    /// Implementer-chosen default.
    Default,
    Override,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParam {
    pub name: String,
    pub value: ParamValue,
    pub source: ParamSource,
}

/// Constants for the flow/jump conditions that the model's construction
/// guarantees: `max_i ρ(S_i(t,y*),y*) ≤ M t^ζ`, `ρ(S_i(t,y1),S_i(t,y2)) ≤ Lρ(y1,y2)`
/// and `∫ρ²(u,y*)J(y,du) ≤ aρ²(y,y*) + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeclaredConstants {
    pub m: f64,
    pub zeta: f64,
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

pub struct ModelParts {
    pub name: String,
    pub rate: f64,
    pub routing: Vec<Vec<f64>>,
    pub semiflows: Vec<Arc<dyn Semiflow>>,
    pub jump: Arc<dyn JumpKernel>,
    pub metric: HybridMetric,
    pub anchor: Point,
    pub declared: Option<DeclaredConstants>,
    pub params: Vec<ModelParam>,
    pub warnings: Vec<String>,
}

/// A fully validated process specification. Immutable and cheap to clone.
#[derive(Clone, Debug)]
pub struct PdmpModel {
    name: String,
    rate: f64,
    routing: Vec<Vec<f64>>,
    routing_cum: Vec<Vec<f64>>,
    semiflows: Vec<Arc<dyn Semiflow>>,
    jump: Arc<dyn JumpKernel>,
    metric: HybridMetric,
    anchor: Point,
    dim: usize,
    declared: Option<DeclaredConstants>,
    params: Vec<ModelParam>,
    warnings: Vec<String>,
}

const SEMIFLOW_CHECKS: usize = 64;

impl PdmpModel {
    pub fn new(parts: ModelParts) -> Result<Self> {
        let ModelParts {
            name,
            rate,
            routing,
            semiflows,
            jump,
            metric,
            anchor,
            declared,
            params,
            warnings,
        } = parts;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(invalid("rate", format!("jump rate must be positive, got {rate}")));
        }
        let n = semiflows.len();
        if n == 0 {
            return Err(invalid("semiflows", "at least one regime is required"));
        }
        if routing.len() != n || routing.iter().any(|r| r.len() != n) {
            return Err(invalid(
                "routing",
                format!("routing must be {n}×{n} to match the regime count"),
            ));
        }
        for (i, row) in routing.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(invalid(
                    "routing",
                    format!("row {i} has a negative or non-finite entry"),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(invalid("routing", format!("row {i} sums to {s}, not 1")));
            }
        }
        if !(metric.regime_weight > 0.0 && metric.regime_weight.is_finite()) {
            return Err(invalid("regime_weight", "regime weight c must be positive"));
        }
        let dim = anchor.len();
        if dim == 0 {
            return Err(invalid(
                "anchor",
                "the continuous coordinate needs at least one component",
            ));
        }
        let routing_cum = routing
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect();
        let model = Self {
            name,
            rate,
            routing,
            routing_cum,
            semiflows,
            jump,
            metric,
            anchor,
            dim,
            declared,
            params,
            warnings,
        };
        model.check_semiflow_law(SEMIFLOW_CHECKS, &mut RngStream::from_seed(0x5eed_f10e))?;
        Ok(model)
    }

    /// Spot-checks `S_i(0,y) = y` and `S_i(s, S_i(t,y)) = S_i(s+t, y)` on
    /// random `(s, t, y)`. Returns the worst relative composition defect.
    pub fn check_semiflow_law(&self, samples: usize, rng: &mut RngStream) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (i, flow) in self.semiflows.iter().enumerate() {
            for _ in 0..samples {
                let y: Point = self.anchor.iter().map(|a| a + 10.0 * rng.uniform() - 5.0).collect();
                let s = 2.0 * rng.uniform();
                let t = 2.0 * rng.uniform();
                let y0 = flow.flow(0.0, &y);
                if y0.len() != self.dim {
                    return Err(invalid("semiflows", format!("regime {i} changes the dimension")));
                }
                if self.rho_y(&y0, &y) > 1e-12 {
                    return Err(invalid("semiflows", format!("regime {i} violates S(0,y)=y")));
                }
                let lhs = flow.flow(s, &flow.flow(t, &y));
                let rhs = flow.flow(s + t, &y);
                let scale = 1.0 + self.rho_y(&y, &self.anchor);
                let defect = self.rho_y(&lhs, &rhs) / scale;
                if !(defect <= 1e-9) {
                    return Err(invalid(
                        "semiflows",
                        format!("regime {i} violates the semiflow law at s={s}, t={t}"),
                    ));
                }
                worst = worst.max(defect);
            }
        }
        Ok(worst)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn regimes(&self) -> usize {
        self.semiflows.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn routing(&self) -> &[Vec<f64>] {
        &self.routing
    }

    pub(crate) fn routing_cumulative(&self, i: usize) -> &[f64] {
        &self.routing_cum[i]
    }

    pub fn semiflow(&self, i: usize) -> &dyn Semiflow {
        self.semiflows[i].as_ref()
    }

    pub fn jump_kernel(&self) -> &dyn JumpKernel {
        self.jump.as_ref()
    }

    pub fn metric(&self) -> &HybridMetric {
        &self.metric
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn declared_constants(&self) -> Option<DeclaredConstants> {
        self.declared
    }

    pub fn params(&self) -> &[ModelParam] {
        &self.params
    }

    /// Hypothesis preconditions the parameters violate. Non-fatal.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn rho_y(&self, a: &[f64], b: &[f64]) -> f64 {
        self.metric.rho_y(a, b)
    }

    pub fn rho(&self, a: &HybridState, b: &HybridState) -> f64 {
        self.metric.rho(a, b)
    }

    /// Lyapunov function `V(y, i) = ρ_Y(y, y*)`.
    pub fn lyapunov(&self, x: &HybridState) -> f64 {
        self.rho_y(&x.y, &self.anchor)
    }

    /// State at the anchor in regime `i`.
    pub fn anchor_state(&self, regime: usize) -> HybridState {
        HybridState {
            y: self.anchor.clone(),
            regime,
        }
    }

    pub fn validate_state(&self, x: &HybridState) -> Result<()> {
        if x.regime >= self.regimes() {
            return Err(Error::InvalidState(format!(
                "regime {} out of range for a model with {} regimes",
                x.regime,
                self.regimes()
            )));
        }
        if x.y.len() != self.dim {
            return Err(Error::InvalidState(format!(
                "state has dimension {}, model has {}",
                x.y.len(),
                self.dim
            )));
        }
        if x.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite coordinate".into()));
        }
        Ok(())
    }

    /// Flow `x` forward by `t` without jumping.
    pub fn flow_state(&self, x: &HybridState, t: f64) -> HybridState {
        HybridState {
            y: self.semiflows[x.regime].flow(t, &x.y),
            regime: x.regime,
        }
    }
}

/// Jump specification of a custom affine model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
pub enum JumpSpec {
    #[serde(rename = "affine-uniform")]
    AffineUniform { kappa: f64, beta: f64 },
    #[serde(rename = "dirac-scale")]
    DiracScale { kappa: f64 },
}

/// A custom model with affine relaxation flows: regime `i` relaxes toward
/// `centers[i]` at rate `alphas[i]`.
#[derive(Clone, Debug)]
pub struct AffineModelSpec {
    pub name: String,
    pub rate: f64,
    pub alphas: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub routing: Vec<Vec<f64>>,
    pub jump: JumpSpec,
    pub anchor: Vec<f64>,
    pub regime_weight: f64,
    pub y_metric: YMetric,
}

impl AffineModelSpec {
    pub fn build(&self, params: Vec<ModelParam>) -> Result<PdmpModel> {
        let d = self.anchor.len();
        if self.alphas.len() != self.centers.len() {
            return Err(invalid("centers", "need one center per regime rate"));
        }
        if self.centers.iter().any(|c| c.len() != d) {
            return Err(invalid("centers", format!("every center must have dimension {d}")));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(invalid("alpha", "flow rates must be finite"));
        }
        let semiflows: Vec<Arc<dyn Semiflow>> = self
            .alphas
            .iter()
            .zip(&self.centers)
            .map(|(&rate, c)| Arc::new(AffineFlow { rate, center: point(c) }) as Arc<dyn Semiflow>)
            .collect();
        let (jump, kappa): (Arc<dyn JumpKernel>, f64) = match self.jump {
            JumpSpec::AffineUniform { kappa, beta } => {
                if !(beta >= 0.0 && beta.is_finite()) || !kappa.is_finite() {
                    return Err(invalid("jump", "affine-uniform needs finite κ and β ≥ 0"));
                }
                (Arc::new(AffineUniformJump { kappa, beta }), kappa)
            }
            JumpSpec::DiracScale { kappa } => {
                if !kappa.is_finite() {
                    return Err(invalid("jump", "dirac-scale needs finite κ"));
                }
                (Arc::new(DiracScaleJump { kappa }), kappa)
            }
        };
        let declared = self.declared_constants();
        let mut warnings = Vec::new();
        if self.alphas.iter().any(|&a| a < 0.0) {
            warnings.push("a flow rate is negative: no finite Lipschitz constant L for the flows".to_string());
        }
        if let Some(dc) = declared {
            let eta = 2.0 * dc.a * dc.l * dc.l;
            if eta >= 1.0 {
                warnings.push(format!(
                    "balance condition 2aL² < 1 fails: 2·{}·{}² = {eta} (κ = {kappa})",
                    dc.a, dc.l
                ));
            }
        }
        PdmpModel::new(ModelParts {
            name: self.name.clone(),
            rate: self.rate,
            routing: self.routing.clone(),
            semiflows,
            jump,
            metric: HybridMetric {
                y_metric: self.y_metric.clone(),
                regime_weight: self.regime_weight,
            },
            anchor: point(&self.anchor),
            declared,
            params,
            warnings,
        })
    }

    /// Constants implied by the affine construction with respect to the
    /// Euclidean metric. `None` when a flow expands (no finite `L`) or the
    /// metric is not Euclidean.
    pub fn declared_constants(&self) -> Option<DeclaredConstants> {
        if !matches!(self.y_metric, YMetric::Euclidean) || self.alphas.iter().any(|&a| a < 0.0) {
            return None;
        }
        let dist =
            |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() };
        // |S_i(t,y*) - y*| = (1 - e^{-α t})|c_i - y*| ≤ |c_i - y*| (only if α > 0)
        let m = self
            .alphas
            .iter()
            .zip(&self.centers)
            .map(|(&a, c)| if a > 0.0 { dist(c, &self.anchor) } else { 0.0 })
            .fold(0.0, f64::max);
        let d = self.anchor.len() as f64;
        let anchor_norm2: f64 = self.anchor.iter().map(|v| v * v).sum();
        let (kappa, noise) = match self.jump {
            JumpSpec::AffineUniform { kappa, beta } => (kappa, d * beta * beta / 3.0),
            JumpSpec::DiracScale { kappa } => (kappa, 0.0),
        };
        // E|κy + ξ - y*|² = |κ(y - y*) + (κ - 1)y*|² + noise
        let (a, b) = if anchor_norm2 == 0.0 {
            (kappa * kappa, noise)
        } else {
            (
                2.0 * kappa * kappa,
                2.0 * (kappa - 1.0) * (kappa - 1.0) * anchor_norm2 + noise,
            )
        };
        // a must be strictly positive; κ = 0 still admits any tiny a.
        Some(DeclaredConstants {
            m,
            zeta: 0.0,
            l: 1.0,
            a: a.max(f64::MIN_POSITIVE),
            b,
        })
    }
}

struct ParamReader<'a> {
    overrides: &'a Overrides,
    used: Vec<String>,
    params: Vec<ModelParam>,
}

impl<'a> ParamReader<'a> {
    fn new(overrides: &'a Overrides) -> Self {
        Self {
            overrides,
            used: Vec::new(),
            params: Vec::new(),
        }
    }

    fn scalar(&mut self, name: &str, default: f64) -> Result<f64> {
        self.used.push(name.to_string());
        let (v, source) = match self.overrides.get(name) {
            None => (default, ParamSource::Default),
            Some(ParamValue::Scalar(v)) => (*v, ParamSource::Override),
            Some(ParamValue::List(_)) => return Err(invalid(name, "expected a number")),
        };
        if !v.is_finite() {
            return Err(invalid(name, "must be finite"));
        }
        self.params.push(ModelParam {
            name: name.to_string(),
            value: ParamValue::Scalar(v),
            source,
        });
        Ok(v)
    }

    fn list(&mut self, name: &str, default: &[f64], len: usize) -> Result<Vec<f64>> {
        self.used.push(name.to_string());
        let (v, source) = match self.overrides.get(name) {
            None => (default.to_vec(), ParamSource::Default),
            Some(ParamValue::List(v)) => (v.clone(), ParamSource::Override),
            Some(ParamValue::Scalar(_)) => return Err(invalid(name, format!("expected a list of {len} numbers"))),
        };
        if v.len() != len {
            return Err(invalid(name, format!("expected {len} values, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid(name, "must be finite"));
        }
        self.params.push(ModelParam {
            name: name.to_string(),
            value: ParamValue::List(v.clone()),
            source,
        });
        Ok(v)
    }

    fn finish(self) -> Result<Vec<ModelParam>> {
        if let Some(bad) = self.overrides.keys().find(|k| !self.used.contains(k)) {
            return Err(invalid(bad, "unknown parameter for this model"));
        }
        Ok(self.params)
    }
}

pub const BUILTIN_MODELS: [&str; 2] = ["contract-multijump", "two-regime-ou"];

/// Built-in models. Defaults are implementer-chosen and reported as such
/// through [`PdmpModel::params`].
///
/// * `contract-multijump`: one regime, `S(t,y) = e^{-αt}y`, `J(y,·) = δ_{κy}`;
///   defaults `α = 1, κ = 0.5, λ = 1, y* = 0, c = 1`.
/// * `two-regime-ou`: `S_i(t,y) = c_i + e^{-α_i t}(y - c_i)`, `y' = κy + ξ`
///   with `ξ ~ U[-β, β]`, routing `[[1-p, p], [q, 1-q]]`; defaults
///   `α = (1, 2), c = (0, 1), κ = 0.5, β = 1, λ = 1, p = q = 0.5`.
pub fn builtin_model(name: &str, overrides: &Overrides) -> Result<PdmpModel> {
    let mut r = ParamReader::new(overrides);
    let spec = match name {
        "contract-multijump" => {
            let alpha = r.scalar("alpha", 1.0)?;
            let kappa = r.scalar("kappa", 0.5)?;
            let rate = r.scalar("rate", 1.0)?;
            let c = r.scalar("regime_weight", 1.0)?;
            AffineModelSpec {
                name: name.to_string(),
                rate,
                alphas: vec![alpha],
                centers: vec![vec![0.0]],
                routing: vec![vec![1.0]],
                jump: JumpSpec::DiracScale { kappa },
                anchor: vec![0.0],
                regime_weight: c,
                y_metric: YMetric::Euclidean,
            }
        }
        "two-regime-ou" => {
            let alphas = r.list("alpha", &[1.0, 2.0], 2)?;
            let centers = r.list("centers", &[0.0, 1.0], 2)?;
            let kappa = r.scalar("kappa", 0.5)?;
            let beta = r.scalar("beta", 1.0)?;
            let rate = r.scalar("rate", 1.0)?;
            let p = r.scalar("p", 0.5)?;
            let q = r.scalar("q", 0.5)?;
            let c = r.scalar("regime_weight", 1.0)?;
            for (n, v) in [("p", p), ("q", q)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(invalid(n, "switching probability must lie in [0, 1]"));
                }
            }
            AffineModelSpec {
                name: name.to_string(),
                rate,
                alphas,
                centers: centers.iter().map(|&c| vec![c]).collect(),
                routing: vec![vec![1.0 - p, p], vec![q, 1.0 - q]],
                jump: JumpSpec::AffineUniform { kappa, beta },
                anchor: vec![0.0],
                regime_weight: c,
                y_metric: YMetric::Euclidean,
            }
        }
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    let params = r.finish()?;
    spec.build(params)
}

/// Built-in observable families.
#[derive(Clone)]
pub enum ObservableKind {
    /// `clamp(y_0, -R, R)`.
    ClampLinear {
        radius: f64,
    },
    /// `cos(ω y_0)`.
    Cosine {
        freq: f64,
    },
    /// Piecewise-linear interpolation in `y_0`, flat beyond the end knots.
    Tabulated {
        knots: Vec<f64>,
        values: Vec<f64>,
    },
    Constant {
        value: f64,
    },
    Custom {
        name: String,
        f: Arc<dyn Fn(&HybridState) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for ObservableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservableKind::ClampLinear { radius } => write!(f, "ClampLinear {{ radius: {radius} }}"),
            ObservableKind::Cosine { freq } => write!(f, "Cosine {{ freq: {freq} }}"),
            ObservableKind::Tabulated { knots, values } => {
                write!(f, "Tabulated {{ knots: {knots:?}, values: {values:?} }}")
            }
            ObservableKind::Constant { value } => write!(f, "Constant {{ value: {value} }}"),
            ObservableKind::Custom { name, .. } => write!(f, "Custom {{ name: {name:?} }}"),
        }
    }
}

/// Bounded Lipschitz observable with certified sup bound and Lipschitz
/// constant (with respect to the hybrid metric, for metrics that dominate
/// the first coordinate).
#[derive(Clone, Debug)]
pub struct Observable {
    kind: ObservableKind,
    sup_bound: f64,
    lip_const: f64,
    mean_under_mu_star: Option<f64>,
}

impl Observable {
    pub fn clamp_linear(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid("radius", "clamp radius must be positive"));
        }
        Ok(Self::from_parts(ObservableKind::ClampLinear { radius }, radius, 1.0))
    }

    pub fn cosine(freq: f64) -> Result<Self> {
        if !freq.is_finite() {
            return Err(invalid("freq", "must be finite"));
        }
        Ok(Self::from_parts(ObservableKind::Cosine { freq }, 1.0, freq.abs()))
    }

    pub fn tabulated(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(invalid("knots", "need matching, nonempty knots and values"));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("knots", "knots must be strictly increasing"));
        }
        if values.iter().chain(&knots).any(|v| !v.is_finite()) {
            return Err(invalid("values", "must be finite"));
        }
        let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lip = knots
            .windows(2)
            .zip(values.windows(2))
            .map(|(k, v)| ((v[1] - v[0]) / (k[1] - k[0])).abs())
            .fold(0.0, f64::max);
        Ok(Self::from_parts(ObservableKind::Tabulated { knots, values }, sup, lip))
    }

    pub fn constant(value: f64) -> Self {
        Self::from_parts(ObservableKind::Constant { value }, value.abs(), 0.0)
    }

    /// Caller certifies `sup_bound` and `lip_const`.
    pub fn custom(
        name: &str,
        f: impl Fn(&HybridState) -> f64 + Send + Sync + 'static,
        sup_bound: f64,
        lip_const: f64,
    ) -> Self {
        Self::from_parts(
            ObservableKind::Custom {
                name: name.to_string(),
                f: Arc::new(f),
            },
            sup_bound,
            lip_const,
        )
    }

    fn from_parts(kind: ObservableKind, sup_bound: f64, lip_const: f64) -> Self {
        Self {
            kind,
            sup_bound,
            lip_const,
            mean_under_mu_star: None,
        }
    }

    pub fn kind(&self) -> &ObservableKind {
        &self.kind
    }

    pub fn eval(&self, x: &HybridState) -> f64 {
        match &self.kind {
            ObservableKind::ClampLinear { radius } => x.y[0].clamp(-radius, *radius),
            ObservableKind::Cosine { freq } => (freq * x.y[0]).cos(),
            ObservableKind::Tabulated { knots, values } => interpolate(knots, values, x.y[0]),
            ObservableKind::Constant { value } => *value,
            ObservableKind::Custom { f, .. } => f(x),
        }
    }

    /// `Some(c)` when the observable is identically `c`.
    pub fn constant_value(&self) -> Option<f64> {
        match &self.kind {
            ObservableKind::Constant { value } => Some(*value),
            ObservableKind::Tabulated { values, .. } if values.iter().all(|v| *v == values[0]) => Some(values[0]),
            _ => None,
        }
    }

    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    pub fn lip_const(&self) -> f64 {
        self.lip_const
    }

    /// `‖g‖_BL = max(‖g‖_∞, Lip(g))`.
    pub fn bl_norm(&self) -> f64 {
        self.sup_bound.max(self.lip_const)
    }

    pub fn mean_under_mu_star(&self) -> Option<f64> {
        self.mean_under_mu_star
    }

    pub fn set_mean_under_mu_star(&mut self, mean: f64) {
        self.mean_under_mu_star = Some(mean);
    }

    pub fn with_mean_under_mu_star(mut self, mean: f64) -> Self {
        self.set_mean_under_mu_star(mean);
        self
    }

    /// `ḡ = g - ⟨g, μ*⟩` as a closure. Fails when the mean is missing.
    pub fn centered(&self) -> Result<impl Fn(&HybridState) -> f64 + Sync + '_> {
        let m = self.mean_under_mu_star.ok_or(Error::MissingMean)?;
        Ok(move |x: &HybridState| self.eval(x) - m)
    }
}

fn interpolate(knots: &[f64], values: &[f64], y: f64) -> f64 {
    if y <= knots[0] {
        return values[0];
    }
    let last = knots.len() - 1;
    if y >= knots[last] {
        return values[last];
    }
    let k = knots.partition_point(|&k| k <= y);
    let (k0, k1) = (knots[k - 1], knots[k]);
    let w = (y - k0) / (k1 - k0);
    values[k - 1] + w * (values[k] - values[k - 1])
}
