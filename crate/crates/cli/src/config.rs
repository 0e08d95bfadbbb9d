//! Experiment configuration.
//!
//! TOML, every table closed (`deny_unknown_fields`). Durations carry their
//! unit in the key name (`horizon_time`, `burn_in_time`, ...), expressed in
//! the model's time unit. Keys that fall back to a default are listed in
//! [`Resolved::defaults`] and echoed in every report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pdmpclt::analysis::{default_clamp_radius, CorrectorSettings};
use pdmpclt::model::{
    builtin_model, AffineModelSpec, DeclaredConstants, HybridState, JumpSpec, Observable, Overrides, PdmpModel, YMetric,
};
use pdmpclt::rng::{purpose, RngStream};

use crate::CliError;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    pub observable: ObservableBlock,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub builtin: Option<String>,
    #[serde(default)]
    pub overrides: Overrides,
    pub custom: Option<CustomModel>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Euclidean,
    Manhattan,
    Max,
}

impl MetricName {
    pub fn y_metric(self) -> YMetric {
        match self {
            MetricName::Euclidean => YMetric::Euclidean,
            MetricName::Manhattan => YMetric::Manhattan,
            MetricName::Max => YMetric::Max,
        }
    }
}

/// Affine relaxation model: regime `i` relaxes toward `centers[i]` at rate
/// `alpha[i]`.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModel {
    pub name: Option<String>,
    pub rate: f64,
    pub alpha: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub routing: Vec<Vec<f64>>,
    pub jump: JumpSpec,
    pub anchor: Vec<f64>,
    pub regime_weight: Option<f64>,
    pub y_metric: Option<MetricName>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum ObservableBlock {
    #[serde(rename = "clamp-linear")]
    ClampLinear { radius: Option<f64> },
    #[serde(rename = "cosine")]
    Cosine { freq: f64 },
    #[serde(rename = "tabulated")]
    Tabulated { knots: Vec<f64>, values: Vec<f64> },
    #[serde(rename = "constant")]
    Constant { value: f64 },
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct State {
    pub y: Vec<f64>,
    pub regime: usize,
}

impl State {
    pub fn hybrid(&self) -> HybridState {
        HybridState::new(&self.y, self.regime)
    }

    fn from_hybrid(x: &HybridState) -> Self {
        Self {
            y: x.y.to_vec(),
            regime: x.regime,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub seed: Option<u64>,
    pub start: Option<State>,
    #[serde(default)]
    pub mean: MeanBlock,
    #[serde(default)]
    pub mu_star: MuStarBlock,
    #[serde(default)]
    pub simulate: SimulateBlock,
    #[serde(default)]
    pub check: CheckBlock,
    #[serde(default)]
    pub sigma2: Sigma2Block,
    #[serde(default)]
    pub clt: CltBlock,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MeanBlock {
    pub burn_in_time: Option<f64>,
    pub horizon_time: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MuStarBlock {
    pub points: Option<usize>,
    pub burn_in_time: Option<f64>,
    pub spacing_time: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub horizon_time: Option<f64>,
    pub replicas: Option<usize>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsBlock {
    pub m: f64,
    pub zeta: f64,
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CheckBlock {
    pub constants: Option<ConstantsBlock>,
    pub s_times: Option<Vec<f64>>,
    pub pair_samples: Option<usize>,
    pub j1_offsets: Option<Vec<f64>>,
    pub j1_draws: Option<usize>,
    pub drift_starts: Option<Vec<State>>,
    pub drift_times: Option<Vec<f64>>,
    pub drift_replicas: Option<usize>,
    pub genlap_starts: Option<Vec<State>>,
    pub genlap_t0_times: Option<Vec<f64>>,
    pub genlap_replicas: Option<usize>,
    pub ergodicity_start_a: Option<State>,
    pub ergodicity_start_b: Option<State>,
    pub ergodicity_times: Option<Vec<f64>>,
    pub ergodicity_ensemble: Option<usize>,
    pub ergodicity_subsample: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Sigma2Block {
    pub trunc_time: Option<f64>,
    pub grid_step_time: Option<f64>,
    pub chi_replicas: Option<usize>,
    pub qv_paths: Option<usize>,
    pub qv_increments: Option<usize>,
    pub tail_bound: Option<bool>,
    pub max_agreement_z: Option<f64>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum CltStart {
    /// Replicas start from the stationary sample.
    MuStar,
    /// Replicas start from `run.start`.
    Point,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Sigma2Ref {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CltBlock {
    pub horizon_time: Option<f64>,
    pub replicas: Option<usize>,
    pub alpha: Option<f64>,
    pub acceptance: Option<bool>,
    pub eps_dirac: Option<f64>,
    pub start: Option<CltStart>,
    pub sigma2: Option<Sigma2Ref>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Every run parameter with defaults filled in.
#[derive(Clone, Debug, Serialize)]
pub struct RunParams {
    pub seed: u64,
    pub start: State,
    pub mean_burn_in_time: f64,
    pub mean_horizon_time: f64,
    pub mu_star_points: usize,
    pub mu_star_burn_in_time: f64,
    pub mu_star_spacing_time: f64,
    pub simulate_horizon_time: f64,
    pub simulate_replicas: usize,
    pub check: CheckParams,
    pub sigma2: Sigma2Params,
    pub clt: CltParams,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckParams {
    pub constants: Option<DeclaredConstants>,
    pub s_times: Vec<f64>,
    pub pair_samples: usize,
    pub j1_points: Vec<Vec<f64>>,
    pub j1_draws: usize,
    pub drift_starts: Vec<State>,
    pub drift_times: Vec<f64>,
    pub drift_replicas: usize,
    pub genlap_starts: Vec<State>,
    pub genlap_t0_times: Vec<f64>,
    pub genlap_replicas: usize,
    pub ergodicity_start_a: State,
    pub ergodicity_start_b: State,
    pub ergodicity_times: Vec<f64>,
    pub ergodicity_ensemble: usize,
    pub ergodicity_subsample: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Sigma2Params {
    pub corrector: CorrectorSettings,
    pub qv_paths: usize,
    pub qv_increments: usize,
    pub tail_bound: bool,
    pub max_agreement_z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CltParams {
    pub horizon_time: f64,
    pub replicas: usize,
    pub alpha: f64,
    pub acceptance: bool,
    pub eps_dirac: f64,
    pub start: CltStart,
    pub sigma2: Option<Sigma2Ref>,
}

/// A validated experiment: model, observable and run parameters.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub model: PdmpModel,
    pub observable: Observable,
    pub run: RunParams,
    pub out_dir: PathBuf,
    /// Dotted keys that took their default value.
    pub defaults: Vec<String>,
}

struct Defaults(Vec<String>);

impl Defaults {
    fn take<T: Clone>(&mut self, key: &str, v: &Option<T>, default: impl FnOnce() -> T) -> T {
        match v {
            Some(x) => x.clone(),
            None => {
                self.0.push(key.to_string());
                default()
            }
        }
    }
}

fn config_err(e: pdmpclt::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|k| lo * (r * k as f64).exp()).collect()
}

fn linear(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn require_positive(key: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key} must be positive and finite, got {v}")))
    }
}

fn require_times(key: &str, v: &[f64]) -> Result<(), CliError> {
    if v.is_empty() {
        return Err(CliError::Config(format!("{key} must be nonempty")));
    }
    if v.iter().any(|t| !(*t > 0.0 && t.is_finite())) || v.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CliError::Config(format!("{key} must be increasing positive times")));
    }
    Ok(())
}

fn require_count(key: &str, v: usize, min: usize) -> Result<(), CliError> {
    if v >= min {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key} must be at least {min}, got {v}")))
    }
}

pub fn build_model(block: &ModelBlock) -> Result<PdmpModel, CliError> {
    match (&block.builtin, &block.custom) {
        (Some(name), None) => builtin_model(name, &block.overrides).map_err(config_err),
        (None, Some(c)) => {
            if !block.overrides.is_empty() {
                return Err(CliError::Config("model.overrides only apply to built-in models".into()));
            }
            AffineModelSpec {
                name: c.name.clone().unwrap_or_else(|| "custom".into()),
                rate: c.rate,
                alphas: c.alpha.clone(),
                centers: c.centers.clone(),
                routing: c.routing.clone(),
                jump: c.jump.clone(),
                anchor: c.anchor.clone(),
                regime_weight: c.regime_weight.unwrap_or(1.0),
                y_metric: c.y_metric.unwrap_or(MetricName::Euclidean).y_metric(),
            }
            .build(Vec::new())
            .map_err(config_err)
        }
        _ => Err(CliError::Config(
            "model needs exactly one of `builtin` or `custom`".into(),
        )),
    }
}

impl Resolved {
    /// Validates the configuration. `seed_override` replaces `run.seed`;
    /// `out_override` replaces `output.dir`.
    pub fn new(
        config: ExperimentConfig,
        seed_override: Option<u64>,
        out_override: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        let model = build_model(&config.model)?;
        let mut d = Defaults(Vec::new());
        let seed = seed_override
            .or(config.run.seed)
            .ok_or_else(|| CliError::Config("run.seed is required (or pass --seed)".into()))?;
        let unit = 1.0 / model.rate();
        let anchor = model.anchor().to_vec();
        let at = |offset: f64, regime: usize| {
            let mut y = anchor.clone();
            y[0] += offset;
            State { y, regime }
        };
        let regimes = model.regimes();
        let r = &config.run;

        let start = d.take("run.start", &r.start, || State::from_hybrid(&model.anchor_state(0)));
        let mean_burn_in_time = d.take("run.mean.burn_in_time", &r.mean.burn_in_time, || 100.0 * unit);
        let mean_horizon_time = d.take("run.mean.horizon_time", &r.mean.horizon_time, || 1e6 * unit);
        let mu_star_points = d.take("run.mu_star.points", &r.mu_star.points, || 1000);
        let mu_star_burn_in_time = d.take("run.mu_star.burn_in_time", &r.mu_star.burn_in_time, || {
            mean_burn_in_time
        });
        let mu_star_spacing_time = d.take("run.mu_star.spacing_time", &r.mu_star.spacing_time, || 2.0 * unit);
        let simulate_horizon_time = d.take("run.simulate.horizon_time", &r.simulate.horizon_time, || 100.0 * unit);
        let simulate_replicas = d.take("run.simulate.replicas", &r.simulate.replicas, || 1);

        let c = &r.check;
        let constants = match c.constants {
            Some(k) => Some(DeclaredConstants {
                m: k.m,
                zeta: k.zeta,
                l: k.l,
                a: k.a,
                b: k.b,
            }),
            None => {
                d.0.push("run.check.constants".into());
                model.declared_constants()
            }
        };
        let check = CheckParams {
            constants,
            s_times: d.take("run.check.s_times", &c.s_times, || {
                geometric(0.01 * unit, 100.0 * unit, 25)
            }),
            pair_samples: d.take("run.check.pair_samples", &c.pair_samples, || 1000),
            j1_points: match &c.j1_offsets {
                Some(o) => o.iter().map(|&v| at(v, 0).y).collect(),
                None => {
                    d.0.push("run.check.j1_offsets".into());
                    [0.0, 0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|&v| at(v, 0).y).collect()
                }
            },
            j1_draws: d.take("run.check.j1_draws", &c.j1_draws, || 10_000),
            drift_starts: d.take("run.check.drift_starts", &c.drift_starts, || {
                [0.0, 1.0, 2.0, 4.0]
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| at(v, k % regimes))
                    .collect()
            }),
            drift_times: d.take("run.check.drift_times", &c.drift_times, || {
                linear(0.5 * unit, 12.0 * unit, 24)
            }),
            drift_replicas: d.take("run.check.drift_replicas", &c.drift_replicas, || 10_000),
            genlap_starts: d.take("run.check.genlap_starts", &c.genlap_starts, || {
                [0.0, 1.0, 3.0].iter().map(|&v| at(v, 0)).collect()
            }),
            genlap_t0_times: d.take("run.check.genlap_t0_times", &c.genlap_t0_times, || {
                scaled(&[1.0, 5.0, 10.0], unit)
            }),
            genlap_replicas: d.take("run.check.genlap_replicas", &c.genlap_replicas, || 10_000),
            ergodicity_start_a: d.take("run.check.ergodicity_start_a", &c.ergodicity_start_a, || at(4.0, 0)),
            ergodicity_start_b: d.take("run.check.ergodicity_start_b", &c.ergodicity_start_b, || at(0.0, 0)),
            ergodicity_times: d.take("run.check.ergodicity_times", &c.ergodicity_times, || {
                linear(0.25 * unit, 4.0 * unit, 16)
            }),
            ergodicity_ensemble: d.take("run.check.ergodicity_ensemble", &c.ergodicity_ensemble, || 400),
            ergodicity_subsample: d.take("run.check.ergodicity_subsample", &c.ergodicity_subsample, || 200),
        };

        let s = &r.sigma2;
        let defaults = CorrectorSettings::default_for(&model, 200);
        let sigma2 = Sigma2Params {
            corrector: CorrectorSettings {
                trunc_t: d.take("run.sigma2.trunc_time", &s.trunc_time, || defaults.trunc_t),
                grid_step: d.take("run.sigma2.grid_step_time", &s.grid_step_time, || defaults.grid_step),
                n_rep: d.take("run.sigma2.chi_replicas", &s.chi_replicas, || defaults.n_rep),
            },
            qv_paths: d.take("run.sigma2.qv_paths", &s.qv_paths, || 100),
            qv_increments: d.take("run.sigma2.qv_increments", &s.qv_increments, || 16),
            tail_bound: d.take("run.sigma2.tail_bound", &s.tail_bound, || true),
            max_agreement_z: d.take("run.sigma2.max_agreement_z", &s.max_agreement_z, || 3.0),
        };

        let k = &r.clt;
        let clt = CltParams {
            horizon_time: d.take("run.clt.horizon_time", &k.horizon_time, || 200.0 * unit),
            replicas: d.take("run.clt.replicas", &k.replicas, || 2000),
            alpha: d.take("run.clt.alpha", &k.alpha, || 0.01),
            acceptance: d.take("run.clt.acceptance", &k.acceptance, || true),
            eps_dirac: d.take("run.clt.eps_dirac", &k.eps_dirac, || pdmpclt::clt::DEFAULT_EPS_DIRAC),
            start: d.take("run.clt.start", &k.start, || CltStart::MuStar),
            sigma2: k.sigma2,
        };

        let run = RunParams {
            seed,
            start,
            mean_burn_in_time,
            mean_horizon_time,
            mu_star_points,
            mu_star_burn_in_time,
            mu_star_spacing_time,
            simulate_horizon_time,
            simulate_replicas,
            check,
            sigma2,
            clt,
        };
        validate(&run, &model)?;

        let observable = match &config.observable {
            ObservableBlock::ClampLinear { radius } => {
                let radius = match radius {
                    Some(r) => *r,
                    None => {
                        d.0.push("observable.radius".into());
                        let rng = RngStream::from_seed(seed).split(purpose::RADIUS);
                        default_clamp_radius(&model, &run.start.hybrid(), run.mean_burn_in_time.max(unit), &rng)
                            .map_err(|e| CliError::Runtime(e.to_string()))?
                    }
                };
                Observable::clamp_linear(radius)
            }
            ObservableBlock::Cosine { freq } => Observable::cosine(*freq),
            ObservableBlock::Tabulated { knots, values } => Observable::tabulated(knots.clone(), values.clone()),
            ObservableBlock::Constant { value } => Ok(Observable::constant(*value)),
        }
        .map_err(config_err)?;

        let out_dir = d.take("output.dir", &out_override.or(config.output.dir.clone()), || {
            PathBuf::from("pdmpclt-out")
        });
        Ok(Self {
            config,
            model,
            observable,
            run,
            out_dir,
            defaults: d.0,
        })
    }

    pub fn root_rng(&self) -> RngStream {
        RngStream::from_seed(self.run.seed)
    }
}

fn validate(run: &RunParams, model: &PdmpModel) -> Result<(), CliError> {
    let state = |key: &str, s: &State| {
        model
            .validate_state(&s.hybrid())
            .map_err(|e| CliError::Config(format!("{key}: {e}")))
    };
    state("run.start", &run.start)?;
    require_positive("run.mean.horizon_time", run.mean_horizon_time)?;
    if !(run.mean_burn_in_time >= 0.0) {
        return Err(CliError::Config("run.mean.burn_in_time must be nonnegative".into()));
    }
    if !(run.mu_star_burn_in_time >= 0.0) {
        return Err(CliError::Config("run.mu_star.burn_in_time must be nonnegative".into()));
    }
    require_count("run.mu_star.points", run.mu_star_points, 2)?;
    require_positive("run.mu_star.spacing_time", run.mu_star_spacing_time)?;
    require_positive("run.simulate.horizon_time", run.simulate_horizon_time)?;
    require_count("run.simulate.replicas", run.simulate_replicas, 1)?;

    let c = &run.check;
    require_times("run.check.s_times", &c.s_times)?;
    require_count("run.check.pair_samples", c.pair_samples, 1)?;
    if c.j1_points.is_empty() {
        return Err(CliError::Config("run.check.j1_offsets must be nonempty".into()));
    }
    require_count("run.check.j1_draws", c.j1_draws, 1000)?;
    if c.drift_starts.is_empty() || c.genlap_starts.is_empty() {
        return Err(CliError::Config(
            "run.check.drift_starts and genlap_starts must be nonempty".into(),
        ));
    }
    for s in c.drift_starts.iter().chain(&c.genlap_starts) {
        state("run.check starts", s)?;
    }
    state("run.check.ergodicity_start_a", &c.ergodicity_start_a)?;
    state("run.check.ergodicity_start_b", &c.ergodicity_start_b)?;
    require_times("run.check.drift_times", &c.drift_times)?;
    require_count("run.check.drift_replicas", c.drift_replicas, 100)?;
    if c.genlap_t0_times.is_empty() || c.genlap_t0_times.iter().any(|t| !(*t >= 0.0)) {
        return Err(CliError::Config(
            "run.check.genlap_t0_times must be nonempty and nonnegative".into(),
        ));
    }
    require_count("run.check.genlap_replicas", c.genlap_replicas, 2)?;
    require_times("run.check.ergodicity_times", &c.ergodicity_times)?;
    require_count("run.check.ergodicity_ensemble", c.ergodicity_ensemble, 100)?;
    require_count("run.check.ergodicity_subsample", c.ergodicity_subsample, 1)?;

    let s = &run.sigma2;
    require_positive("run.sigma2.trunc_time", s.corrector.trunc_t)?;
    require_positive("run.sigma2.grid_step_time", s.corrector.grid_step)?;
    require_count("run.sigma2.chi_replicas", s.corrector.n_rep, 2)?;
    require_count("run.sigma2.qv_paths", s.qv_paths, 2)?;
    require_count("run.sigma2.qv_increments", s.qv_increments, 2)?;

    let k = &run.clt;
    require_positive("run.clt.horizon_time", k.horizon_time)?;
    require_count("run.clt.replicas", k.replicas, 2)?;
    if !(k.alpha > 0.0 && k.alpha < 1.0) {
        return Err(CliError::Config(format!(
            "run.clt.alpha must lie in (0, 1), got {}",
            k.alpha
        )));
    }
    require_positive("run.clt.eps_dirac", k.eps_dirac)?;
    if k.acceptance && k.replicas < pdmpclt::clt::MIN_ACCEPTANCE_REPLICAS {
        return Err(CliError::Config(format!(
            "run.clt.replicas = {} is below {} for an acceptance run",
            k.replicas,
            pdmpclt::clt::MIN_ACCEPTANCE_REPLICAS
        )));
    }
    if let Some(s) = k.sigma2 {
        if !(s.value >= 0.0 && s.stderr >= 0.0) {
            return Err(CliError::Config(
                "run.clt.sigma2 needs value >= 0 and stderr >= 0".into(),
            ));
        }
    }
    Ok(())
}
