use std::path::Path;

use serde_json::{json, Value};

use pdmpclt::analysis::{
    corrector_on_support, decompose_ensemble, estimate_mean_mu_star, qv_slope, sample_mu_star, sigma2_green,
    sigma2_martingale, CorrectorEstimate, MonteCarloCorrector, Sigma2Report,
};
use pdmpclt::clt::{cdf_plot_data, clt_samples, CltReport};
use pdmpclt::engine::{simulate, try_replicate, InitialLaw, Trajectory};
use pdmpclt::fm::{fm_solve, EmpiricalMeasure};
use pdmpclt::hypotheses::{
    check_balance, check_genlap, check_j1, check_s1, check_s2, fit_drift, probe_ergodicity, ErgodicityEstimate,
    HypothesisConstants,
};
use pdmpclt::model::{point, HybridMetric, HybridState, Observable};
use pdmpclt::rng::purpose;
use pdmpclt::stats::Estimate;

use crate::config::{CltStart, MetricName, Resolved};
use crate::output::{fmt_f64, report_header, Outputs};
use crate::CliError;

/// Exit status of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

fn rt(e: pdmpclt::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn state_columns(dim: usize) -> Vec<String> {
    (0..dim).map(|k| format!("y{k}")).collect()
}

fn state_fields(x: &HybridState) -> Vec<String> {
    let mut v = vec![x.regime.to_string()];
    v.extend(x.y.iter().map(|y| fmt_f64(*y)));
    v
}

fn skeleton_rows(tr: &Trajectory, replica: Option<usize>) -> Vec<Vec<String>> {
    tr.jumps()
        .iter()
        .map(|j| {
            let mut row = Vec::new();
            if let Some(r) = replica {
                row.push(r.to_string());
            }
            row.push(fmt_f64(j.tau));
            row.extend(state_fields(&j.state));
            row
        })
        .collect()
}

pub fn simulate_cmd(res: &Resolved) -> Result<Verdict, CliError> {
    let mut out = Outputs::create(&res.out_dir)?;
    let x0 = res.run.start.hybrid();
    let horizon = res.run.simulate_horizon_time;
    let n = res.run.simulate_replicas;
    let rng = res.root_rng().split(purpose::SIMULATE);
    let trajs: Vec<Trajectory> =
        try_replicate(n, &rng, |_, mut r| simulate(&res.model, &x0, horizon, &mut r)).map_err(rt)?;
    let mut header: Vec<String> = vec!["tau".into(), "regime".into()];
    header.extend(state_columns(res.model.dim()));
    if n == 1 {
        out.csv("trajectory.csv", &header, skeleton_rows(&trajs[0], None))?;
    } else {
        header.insert(0, "replica".into());
        let rows = trajs.iter().enumerate().flat_map(|(r, tr)| skeleton_rows(tr, Some(r)));
        out.csv("ensemble.csv", &header, rows)?;
    }
    let mut rep = report_header("simulate", res);
    rep.insert("horizon_time".into(), json!(horizon));
    rep.insert("replicas".into(), json!(n));
    rep.insert(
        "jump_counts".into(),
        json!(trajs.iter().map(|t| t.jump_count()).collect::<Vec<_>>()),
    );
    out.json("simulate.json", &rep)?;
    out.finish("simulate", res)?;
    println!(
        "simulate: {n} replica(s) to horizon {horizon} written to {}",
        res.out_dir.display()
    );
    Ok(Verdict::Pass)
}

/// Results shared between `sigma2`, `clt` and `full-report`.
struct Session<'a> {
    res: &'a Resolved,
    g: Observable,
    mean: Estimate,
    mu_star: EmpiricalMeasure,
}

impl<'a> Session<'a> {
    fn new(res: &'a Resolved) -> Result<Self, CliError> {
        let root = res.root_rng();
        let mut g = res.observable.clone();
        let start = res.run.start.hybrid();
        let mean = estimate_mean_mu_star(
            &res.model,
            &mut g,
            &start,
            res.run.mean_burn_in_time,
            res.run.mean_horizon_time,
            &root.split(purpose::MEAN),
        )
        .map_err(rt)?;
        let mu_star = sample_mu_star(
            &res.model,
            &start,
            res.run.mu_star_points,
            res.run.mu_star_burn_in_time,
            res.run.mu_star_spacing_time,
            &root.split(purpose::MU_STAR),
        )
        .map_err(rt)?;
        Ok(Self { res, g, mean, mu_star })
    }
}

struct CheckOutcome {
    report: Value,
    margins: Vec<Vec<String>>,
    pass: bool,
}

fn entry(name: &str, pass: bool, worst_margin: Option<f64>, detail: Value) -> Value {
    json!({ "name": name, "pass": pass, "worst_margin": worst_margin, "detail": detail })
}

fn run_ergodicity(res: &Resolved) -> Result<ErgodicityEstimate, CliError> {
    let c = &res.run.check;
    probe_ergodicity(
        &res.model,
        &c.ergodicity_start_a.hybrid(),
        &c.ergodicity_start_b.hybrid(),
        &c.ergodicity_times,
        c.ergodicity_ensemble,
        c.ergodicity_subsample,
        &res.root_rng().split(purpose::ERGODICITY),
    )
    .map_err(rt)
}

fn run_checks(res: &Resolved) -> Result<CheckOutcome, CliError> {
    let c = &res.run.check;
    let model = &res.model;
    let rng = res.root_rng().split(purpose::CHECK);
    let mut entries = Vec::new();
    let mut margins = Vec::new();

    let constants = c.constants;
    let hyp = constants.map(|k| HypothesisConstants::new(&k, model.rate()));
    match constants {
        None => entries.push(entry(
            "balance",
            false,
            None,
            json!({ "reason": "no constants declared by the model; set run.check.constants" }),
        )),
        Some(k) => {
            let b = check_balance(&k);
            entries.push(entry("balance", b.pass, Some(1.0 - b.eta), json!(b)));
            let s1 = check_s1(model, &c.s_times, k.m, k.zeta).map_err(rt)?;
            entries.push(entry("s1", s1.pass, Some(1.0 - s1.worst_ratio), json!(s1)));
            let s2 = check_s2(model, &c.s_times, c.pair_samples, &rng.split(1), k.l).map_err(rt)?;
            entries.push(entry("s2", s2.pass, Some(k.l - s2.l_hat), json!(s2)));
            let pts: Vec<_> = c.j1_points.iter().map(|y| point(y)).collect();
            let j1 = check_j1(model, &pts, c.j1_draws, &rng.split(2), k.a, k.b).map_err(rt)?;
            entries.push(entry("j1", j1.pass, Some(j1.worst_margin), json!(j1)));
        }
    }

    let starts: Vec<HybridState> = c.drift_starts.iter().map(|s| s.hybrid()).collect();
    let drift = fit_drift(model, &starts, &c.drift_times, c.drift_replicas, &rng.split(3)).map_err(rt)?;
    for row in &drift.rows {
        let mut r = vec!["drift".to_string()];
        r.extend(state_fields(&row.x));
        r.extend([row.t, row.moment.value, row.moment.stderr, row.bound].map(fmt_f64));
        r.push(fmt_f64(row.bound + 4.0 * row.moment.stderr - row.moment.value));
        margins.push(r);
    }
    entries.push(entry("drift", drift.pass, Some(-drift.residual_max), json!(drift)));

    match &hyp {
        Some(Ok(h)) => {
            let gs: Vec<HybridState> = c.genlap_starts.iter().map(|s| s.hybrid()).collect();
            let gl = check_genlap(model, h, &gs, &c.genlap_t0_times, c.genlap_replicas, &rng.split(4)).map_err(rt)?;
            for row in &gl.rows {
                let mut r = vec!["genlap".to_string()];
                r.extend(state_fields(&row.x));
                r.extend([row.t0, row.series.value, row.series.stderr, row.bound, row.margin].map(fmt_f64));
                margins.push(r);
            }
            let worst = gl.rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
            entries.push(entry("genlap", gl.pass, Some(worst), json!(gl)));
        }
        Some(Err(e)) => entries.push(entry("genlap", false, None, json!({ "reason": e.to_string() }))),
        None => entries.push(entry("genlap", false, None, json!({ "reason": "no constants" }))),
    }

    let erg = run_ergodicity(res)?;
    entries.push(entry(
        "ergodicity",
        !erg.no_signal,
        None,
        json!({ "estimate": erg, "note": "fitted constants, not certified bounds" }),
    ));

    let pass = entries.iter().all(|e| e["pass"] == json!(true));
    let constants_json = match hyp {
        Some(Ok(h)) => json!(h),
        _ => json!(constants),
    };
    let mut rep = report_header("check", res);
    rep.insert("constants".into(), constants_json);
    rep.insert("checks".into(), Value::Array(entries));
    rep.insert("pass".into(), json!(pass));
    Ok(CheckOutcome {
        report: Value::Object(rep),
        margins,
        pass,
    })
}

fn margin_header(dim: usize) -> Vec<String> {
    let mut h = vec!["check".to_string(), "regime".to_string()];
    h.extend(state_columns(dim));
    h.extend(["t", "estimate", "stderr", "bound", "margin"].map(String::from));
    h
}

fn print_checks(report: &Value) {
    if let Some(list) = report["checks"].as_array() {
        for e in list {
            let verdict = if e["pass"] == json!(true) { "pass" } else { "FAIL" };
            println!("check {:<11} {verdict}", e["name"].as_str().unwrap_or("?"));
        }
    }
}

pub fn check_cmd(res: &Resolved) -> Result<Verdict, CliError> {
    let mut out = Outputs::create(&res.out_dir)?;
    let o = run_checks(res)?;
    out.json("check.json", &o.report)?;
    out.csv("check_margins.csv", &margin_header(res.model.dim()), o.margins)?;
    out.finish("check", res)?;
    print_checks(&o.report);
    Ok(Verdict::from_pass(o.pass))
}

struct Sigma2Outcome {
    report: Value,
    chi_rows: Vec<Vec<String>>,
    combined: Estimate,
    pass: bool,
}

fn run_sigma2(s: &Session) -> Result<Sigma2Outcome, CliError> {
    let res = s.res;
    let p = &res.run.sigma2;
    let root = res.root_rng();
    let model = &res.model;
    let erg = if p.tail_bound { Some(run_ergodicity(res)?) } else { None };

    let chi: Vec<CorrectorEstimate> = corrector_on_support(
        model,
        &s.g,
        &s.mu_star,
        &p.corrector,
        &root.split(purpose::CORRECTOR).split(0),
    )
    .map_err(rt)?
    .into_iter()
    .map(|mut c| {
        c.tail_bound = erg
            .as_ref()
            .and_then(|e| e.tail_bound(&s.g, model.lyapunov(&c.x), c.trunc_t));
        c
    })
    .collect();
    let chi_est: Vec<Estimate> = chi.iter().map(|c| c.as_estimate()).collect();
    let green = sigma2_green(&s.g, &chi_est, &s.mu_star).map_err(rt)?;

    let mc =
        MonteCarloCorrector::new(model, &s.g, p.corrector, &root.split(purpose::CORRECTOR).split(1)).map_err(rt)?;
    let mart = sigma2_martingale(model, &s.g, &mc, &s.mu_star, &root.split(purpose::SIGMA2)).map_err(rt)?;
    let decomps = decompose_ensemble(
        model,
        &s.g,
        &mc,
        &InitialLaw::Mixture(s.mu_star.clone()),
        p.qv_increments as f64,
        1.0,
        p.qv_paths,
        &root.split(purpose::QV),
    )
    .map_err(rt)?;
    let qv = qv_slope(&decomps, p.qv_increments).map_err(rt)?;
    let tail = chi
        .iter()
        .filter_map(|c| c.tail_bound)
        .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))));
    let report = Sigma2Report::new(mart, green, qv, p.corrector.trunc_t, tail);
    let combined = report.combined();
    let pass = report.agreement_z <= p.max_agreement_z;

    let chi_rows = chi
        .iter()
        .map(|c| {
            let mut r = state_fields(&c.x);
            r.extend([c.value, c.stat_err, c.grid_err].map(fmt_f64));
            r.push(c.tail_bound.map(fmt_f64).unwrap_or_default());
            r
        })
        .collect();

    let mut rep = report_header("sigma2", res);
    rep.insert("mean_under_mu_star".into(), json!(s.mean));
    rep.insert("mu_star_points".into(), json!(s.mu_star.len()));
    rep.insert("corrector".into(), json!(p.corrector));
    rep.insert("sigma2_mart".into(), json!(report.sigma2_mart));
    rep.insert("sigma2_green".into(), json!(report.sigma2_green));
    rep.insert("qv_slope".into(), json!(report.qv_slope));
    rep.insert(
        "stderrs".into(),
        json!({
            "sigma2_mart": report.sigma2_mart.stderr,
            "sigma2_green": report.sigma2_green.stderr,
            "qv_slope": report.qv_slope.stderr,
        }),
    );
    rep.insert("agreement_z".into(), json!(report.agreement_z));
    rep.insert("max_agreement_z".into(), json!(p.max_agreement_z));
    rep.insert("trunc_T".into(), json!(report.trunc_t));
    rep.insert("tail_bound".into(), json!(report.tail_bound));
    rep.insert("sigma2_combined".into(), json!(combined));
    rep.insert("ergodicity".into(), json!(erg));
    rep.insert("pass".into(), json!(pass));
    Ok(Sigma2Outcome {
        report: Value::Object(rep),
        chi_rows,
        combined,
        pass,
    })
}

fn chi_header(dim: usize) -> Vec<String> {
    let mut h = vec!["regime".to_string()];
    h.extend(state_columns(dim));
    h.extend(["chi", "stat_err", "grid_err", "tail_bound"].map(String::from));
    h
}

pub fn sigma2_cmd(res: &Resolved) -> Result<Verdict, CliError> {
    let mut out = Outputs::create(&res.out_dir)?;
    let s = Session::new(res)?;
    let o = run_sigma2(&s)?;
    out.json("sigma2.json", &o.report)?;
    out.csv("chi_table.csv", &chi_header(res.model.dim()), o.chi_rows)?;
    out.finish("sigma2", res)?;
    println!(
        "sigma2: mart {} green {} qv {} agreement_z {:.3}",
        o.report["sigma2_mart"]["value"],
        o.report["sigma2_green"]["value"],
        o.report["qv_slope"]["value"],
        o.report["agreement_z"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(Verdict::from_pass(o.pass))
}

struct CltOutcome {
    report: Value,
    samples: Vec<f64>,
    sigma: f64,
    pass: bool,
}

fn run_clt(s: &Session, sigma2_ref: Estimate) -> Result<CltOutcome, CliError> {
    let res = s.res;
    let p = &res.run.clt;
    let init = match p.start {
        CltStart::MuStar => InitialLaw::Mixture(s.mu_star.clone()),
        CltStart::Point => InitialLaw::Point(res.run.start.hybrid()),
    };
    let samples = clt_samples(
        &res.model,
        &s.g,
        &init,
        p.horizon_time,
        p.replicas,
        &res.root_rng().split(purpose::CLT),
    )
    .map_err(rt)?;
    let report = CltReport::from_samples(samples, p.horizon_time, sigma2_ref, p.alpha, p.eps_dirac).map_err(rt)?;
    let mut rep = report_header("clt", res);
    rep.insert("mean_under_mu_star".into(), json!(s.mean));
    rep.insert("start".into(), json!(p.start));
    rep.insert("acceptance".into(), json!(p.acceptance));
    rep.insert("t".into(), json!(report.t));
    rep.insert("n_rep".into(), json!(report.n_rep));
    rep.insert("alpha".into(), json!(report.alpha));
    rep.insert("sample_mean".into(), json!(report.sample_mean));
    rep.insert("sample_var".into(), json!(report.sample_var));
    rep.insert("sigma2_ref".into(), json!(report.sigma2_ref));
    rep.insert("ks_stat".into(), json!(report.ks_stat));
    rep.insert("ks_threshold".into(), json!(report.ks_threshold));
    rep.insert("ks".into(), json!(report.ks));
    rep.insert("mean_ok".into(), json!(report.mean_ok));
    rep.insert("variance_z".into(), json!(report.variance_z));
    rep.insert("pass".into(), json!(report.pass));
    Ok(CltOutcome {
        report: Value::Object(rep),
        sigma: sigma2_ref.value.max(0.0).sqrt(),
        pass: report.pass,
        samples: report.samples,
    })
}

fn write_clt_files(out: &mut Outputs, o: &CltOutcome) -> Result<(), CliError> {
    out.csv(
        "clt_samples.csv",
        &["sample".to_string()],
        o.samples.iter().map(|v| vec![fmt_f64(*v)]),
    )?;
    let header = ["u", "empirical_cdf", "normal_cdf"].map(String::from);
    let rows = cdf_plot_data(&o.samples, o.sigma)
        .into_iter()
        .map(|(u, e, f)| vec![fmt_f64(u), fmt_f64(e), fmt_f64(f)]);
    out.csv("clt_cdf.csv", &header, rows)
}

fn print_clt(r: &Value) {
    let f = |v: &Value| v.as_f64().unwrap_or(f64::NAN);
    let verdict = if r["pass"] == json!(true) { "pass" } else { "FAIL" };
    let conc = &r["ks"]["mode"]["concentration"];
    if conc.is_object() {
        println!(
            "clt: sigma2 {} is zero, q99 |S| {:.4} (eps {}) -> {verdict}",
            r["sigma2_ref"]["value"],
            f(&conc["q99_abs"]),
            conc["eps"]
        );
    } else {
        println!(
            "clt: ks {:.4} (threshold {:.4}) mean {:.4} var {:.4} vs sigma2 {} -> {verdict}",
            f(&r["ks_stat"]),
            f(&r["ks_threshold"]),
            f(&r["sample_mean"]),
            f(&r["sample_var"]),
            r["sigma2_ref"]["value"]
        );
    }
}

pub fn clt_cmd(res: &Resolved) -> Result<Verdict, CliError> {
    let mut out = Outputs::create(&res.out_dir)?;
    let s = Session::new(res)?;
    let sigma2_ref = match res.run.clt.sigma2 {
        Some(r) => Estimate::new(r.value, r.stderr),
        None => {
            let o = run_sigma2(&s)?;
            out.json("sigma2.json", &o.report)?;
            out.csv("chi_table.csv", &chi_header(res.model.dim()), o.chi_rows)?;
            o.combined
        }
    };
    let o = run_clt(&s, sigma2_ref)?;
    out.json("clt.json", &o.report)?;
    write_clt_files(&mut out, &o)?;
    out.finish("clt", res)?;
    print_clt(&o.report);
    Ok(Verdict::from_pass(o.pass))
}

pub fn full_report_cmd(res: &Resolved) -> Result<Verdict, CliError> {
    let mut out = Outputs::create(&res.out_dir)?;
    let check = run_checks(res)?;
    print_checks(&check.report);
    let s = Session::new(res)?;
    let sig = run_sigma2(&s)?;
    let sigma2_ref = match res.run.clt.sigma2 {
        Some(r) => Estimate::new(r.value, r.stderr),
        None => sig.combined,
    };
    let clt = run_clt(&s, sigma2_ref)?;
    print_clt(&clt.report);
    let pass = check.pass && sig.pass && clt.pass;
    let mut rep = report_header("full-report", res);
    rep.insert("check".into(), check.report);
    rep.insert("sigma2".into(), sig.report);
    rep.insert("clt".into(), clt.report.clone());
    rep.insert("pass".into(), json!(pass));
    out.json("full_report.json", &rep)?;
    out.csv("check_margins.csv", &margin_header(res.model.dim()), check.margins)?;
    out.csv("chi_table.csv", &chi_header(res.model.dim()), sig.chi_rows)?;
    write_clt_files(&mut out, &clt)?;
    out.finish("full-report", res)?;
    Ok(Verdict::from_pass(pass))
}

/// Reads an empirical measure: header `regime,y0[,y1..][,weight]`.
/// Without a weight column the points get uniform weights.
pub fn read_measure(path: &Path) -> Result<EmpiricalMeasure, CliError> {
    let cfg = |e: String| CliError::Config(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| cfg(e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| cfg(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some("regime") {
        return Err(cfg("first column must be `regime`".into()));
    }
    let weighted = header.last().map(String::as_str) == Some("weight");
    let dim = header.len() - 1 - usize::from(weighted);
    if dim == 0 {
        return Err(cfg("need at least one coordinate column".into()));
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| cfg(e.to_string()))?;
        let field = |j: usize| -> Result<f64, CliError> {
            rec.get(j)
                .ok_or_else(|| cfg(format!("row {} is short", k + 1)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| cfg(format!("row {}: {e}", k + 1)))
        };
        let regime = rec
            .get(0)
            .unwrap_or("")
            .trim()
            .parse::<usize>()
            .map_err(|e| cfg(format!("row {}: regime: {e}", k + 1)))?;
        let y = (1..=dim).map(field).collect::<Result<Vec<f64>, _>>()?;
        points.push(HybridState::new(&y, regime));
        weights.push(if weighted { field(dim + 1)? } else { 1.0 });
    }
    EmpiricalMeasure::normalized(points, weights).map_err(|e| cfg(e.to_string()))
}

pub fn fm_cmd(
    a: &Path,
    b: &Path,
    regime_weight: f64,
    y_metric: MetricName,
    support_cap: usize,
    dual: Option<&Path>,
) -> Result<Verdict, CliError> {
    if !(regime_weight >= 0.0 && regime_weight.is_finite()) {
        return Err(CliError::Config("--regime-weight must be nonnegative".into()));
    }
    let mu = read_measure(a)?;
    let nu = read_measure(b)?;
    let dims: Vec<usize> = mu.points().iter().chain(nu.points()).map(|x| x.y.len()).collect();
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(CliError::Config("both measures must have the same dimension".into()));
    }
    let metric = HybridMetric {
        y_metric: y_metric.y_metric(),
        regime_weight,
    };
    let sol = fm_solve(&mu, &nu, &metric, support_cap).map_err(rt)?;
    println!("{}", fmt_f64(sol.value));
    if let Some(path) = dual {
        let dim = dims[0];
        let mut header = vec!["regime".to_string()];
        header.extend(state_columns(dim));
        header.push("f".into());
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        w.write_record(&header).map_err(|e| CliError::Runtime(e.to_string()))?;
        for (x, f) in &sol.certificate {
            let mut r = state_fields(x);
            r.push(fmt_f64(*f));
            w.write_record(&r).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(Verdict::Pass)
}
