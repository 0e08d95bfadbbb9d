use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdmpclt::fm::{fm_distance, EmpiricalMeasure};
use pdmpclt::model::{HybridMetric, HybridState};
use serde_json::Value;

const QUICK: &str = r#"
[model]
builtin = "two-regime-ou"

[observable]
kind = "cosine"
freq = 1.0

[run]
seed = 5

[run.mean]
horizon_time = 2e4

[run.mu_star]
points = 200

[run.simulate]
horizon_time = 10.0

[run.check]
s_times = [0.1, 1.0, 10.0]
pair_samples = 200
j1_draws = 2000
drift_replicas = 500
drift_times = [0.5, 1.0, 2.0, 4.0, 6.0, 8.0]
genlap_replicas = 500
ergodicity_ensemble = 100
ergodicity_subsample = 100

[run.sigma2]
trunc_time = 10.0
grid_step_time = 0.1
chi_replicas = 50
qv_paths = 50
qv_increments = 8

[run.clt]
horizon_time = 20.0
replicas = 500
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn file(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn pdmpclt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdmpclt")).args(args).output().unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    pdmpclt(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn check_named<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap()
}

#[test]
fn simulate_single_replica() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", QUICK);
    let out = s.out("sim");
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("tau,regime,y0\n0,0,0\n"), "{csv}");
    let manifest = json(out.join("manifest.json"));
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["outputs"]["trajectory.csv"].is_string());
    assert!(manifest["volatile"]["created_unix_secs"].is_u64());
    assert_eq!(json(out.join("simulate.json"))["schema_version"], 1);
}

#[test]
fn seed_flag_overrides_config() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", QUICK);
    run("simulate", &cfg, &s.out("a"), &[]);
    run("simulate", &cfg, &s.out("b"), &["--seed", "6"]);
    let read = |d: &str| std::fs::read(s.out(d).join("trajectory.csv")).unwrap();
    assert_ne!(read("a"), read("b"));
    assert_eq!(json(s.out("b").join("manifest.json"))["seed"], 6);
}

#[test]
fn missing_seed_is_a_config_error() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", &QUICK.replace("seed = 5", ""));
    let o = run("simulate", &cfg, &s.out("x"), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.seed"));
    assert!(!s.out("x").exists());
}

#[test]
fn misspelled_key_is_a_config_error() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", &QUICK.replace("horizon_time = 10.0", "horizon = 10.0"));
    let o = run("simulate", &cfg, &s.out("x"), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));
}

#[test]
fn missing_config_file() {
    let s = Sandbox::new();
    assert_eq!(code(&run("check", &s.out("nope.toml"), &s.out("x"), &[])), 2);
}

#[test]
fn zero_workers_is_rejected() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", QUICK);
    assert_eq!(code(&run("simulate", &cfg, &s.out("x"), &["--workers", "0"])), 2);
}

#[test]
fn check_passes_on_relaxation_model() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", QUICK);
    let out = s.out("chk");
    let o = run("check", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r = json(out.join("check.json"));
    assert_eq!(r["pass"], true);
    for name in ["balance", "s1", "s2", "j1", "drift", "genlap", "ergodicity"] {
        assert_eq!(check_named(&r, name)["pass"], true, "{name}");
    }
    let margins = std::fs::read_to_string(out.join("check_margins.csv")).unwrap();
    assert!(margins.starts_with("check,regime,y0,t,estimate,stderr,bound,margin\n"));
}

#[test]
fn strong_jumps_fail_the_balance_condition() {
    let s = Sandbox::new();
    let text = QUICK.replace(
        "builtin = \"two-regime-ou\"",
        "builtin = \"two-regime-ou\"\n[model.overrides]\nkappa = 0.8",
    );
    let cfg = s.file("c.toml", &text);
    let out = s.out("chk");
    assert_eq!(code(&run("check", &cfg, &out, &[])), 1);
    let r = json(out.join("check.json"));
    let balance = check_named(&r, "balance");
    assert_eq!(balance["pass"], false);
    assert!((balance["detail"]["eta"].as_f64().unwrap() - 1.28).abs() < 1e-12);
    assert_eq!(check_named(&r, "genlap")["pass"], false);
}

#[test]
fn contraction_drift_rate_is_reported() {
    let s = Sandbox::new();
    let text = QUICK
        .replace("two-regime-ou", "contract-multijump")
        .replace("drift_replicas = 500", "drift_replicas = 4000")
        .replace("drift_times = [0.5, 1.0, 2.0, 4.0, 6.0, 8.0]", "");
    let cfg = s.file("c.toml", &text);
    let out = s.out("chk");
    assert_eq!(code(&run("check", &cfg, &out, &[])), 0);
    let gamma = check_named(&json(out.join("check.json")), "drift")["detail"]["gamma_hat"]
        .as_f64()
        .unwrap();
    assert!((gamma / 2.75 - 1.0).abs() <= 0.1, "{gamma}");
}

#[test]
fn sigma2_on_relaxation_model() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", QUICK);
    let out = s.out("s2");
    let o = run("sigma2", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(out.join("sigma2.json"));
    for key in [
        "sigma2_mart",
        "sigma2_green",
        "qv_slope",
        "agreement_z",
        "trunc_T",
        "stderrs",
        "schema_version",
    ] {
        assert!(!r[key].is_null(), "{key}");
    }
    assert!(r["agreement_z"].as_f64().unwrap() <= 3.0);
    let table = std::fs::read_to_string(out.join("chi_table.csv")).unwrap();
    assert!(table.starts_with("regime,y0,chi,stat_err,grid_err,tail_bound\n"));
    assert_eq!(table.lines().count(), 201);
}

#[test]
fn sigma2_vanishes_on_contraction_model() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", &QUICK.replace("two-regime-ou", "contract-multijump"));
    let out = s.out("s2");
    assert_eq!(code(&run("sigma2", &cfg, &out, &[])), 0);
    let r = json(out.join("sigma2.json"));
    for key in ["sigma2_mart", "sigma2_green", "qv_slope"] {
        assert!(r[key]["value"].as_f64().unwrap().abs() <= 1e-9, "{key}");
    }
}

#[test]
fn constant_observable_gives_exact_zeros() {
    let s = Sandbox::new();
    let cfg = s.file(
        "c.toml",
        &QUICK.replace("kind = \"cosine\"\nfreq = 1.0", "kind = \"constant\"\nvalue = 2.5"),
    );
    let out = s.out("s2");
    assert_eq!(code(&run("sigma2", &cfg, &out, &[])), 0);
    let r = json(out.join("sigma2.json"));
    for key in ["sigma2_mart", "sigma2_green", "qv_slope"] {
        assert_eq!(r[key]["value"], 0.0, "{key}");
        assert_eq!(r[key]["stderr"], 0.0, "{key}");
    }
}

#[test]
fn clt_with_given_variance() {
    let s = Sandbox::new();
    let text = format!("{QUICK}\n[run.clt.sigma2]\nvalue = 0.08\nstderr = 0.01\n");
    let cfg = s.file("c.toml", &text);
    let out = s.out("clt");
    let o = run("clt", &cfg, &out, &[]);
    assert!([0, 1].contains(&code(&o)));
    let r = json(out.join("clt.json"));
    assert_eq!(r["sigma2_ref"]["value"], 0.08);
    assert_eq!(r["n_rep"], 500);
    assert_eq!(code(&o) == 0, r["pass"] == true);
    assert!(!out.join("sigma2.json").exists());
    let cdf = std::fs::read_to_string(out.join("clt_cdf.csv")).unwrap();
    assert!(cdf.starts_with("u,empirical_cdf,normal_cdf\n"));
    assert_eq!(cdf.lines().count(), 501);
}

#[test]
fn degenerate_clt_passes_concentration_test() {
    let s = Sandbox::new();
    let text = QUICK
        .replace("two-regime-ou", "contract-multijump")
        .replace("horizon_time = 20.0", "horizon_time = 200.0")
        .replace("seed = 5", "seed = 5\nstart = { y = [1.0], regime = 0 }")
        .replace("\nreplicas = 500", "\nreplicas = 500\nstart = \"point\"");
    let cfg = s.file("c.toml", &text);
    let out = s.out("clt");
    let o = run("clt", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r = json(out.join("clt.json"));
    assert!(r["ks"]["mode"]["concentration"].is_object(), "{}", r["ks"]);
}

#[test]
fn small_acceptance_run_is_refused() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", &QUICK.replace("\nreplicas = 500", "\nreplicas = 10"));
    let o = run("clt", &cfg, &s.out("x"), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("500"));
}

#[test]
fn full_report_bundles_everything() {
    let s = Sandbox::new();
    let cfg = s.file("c.toml", QUICK);
    let out = s.out("full");
    let o = run("full-report", &cfg, &out, &[]);
    let r = json(out.join("full_report.json"));
    assert_eq!(r["schema_version"], 1);
    for key in ["check", "sigma2", "clt"] {
        assert_eq!(r[key]["schema_version"], 1, "{key}");
    }
    assert_eq!(code(&o) == 0, r["pass"] == true);
    let manifest = json(out.join("manifest.json"));
    assert_eq!(manifest["command"], "full-report");
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 5);
}

#[test]
fn fm_identical_files() {
    let s = Sandbox::new();
    let a = s.file("a.csv", "regime,y0,y1\n0,1.0,2.0\n1,-1.0,0.5\n");
    let o = pdmpclt(&["fm", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "0");
}

#[test]
fn fm_points_at_distance_three() {
    let s = Sandbox::new();
    let a = s.file("a.csv", "regime,y0\n0,0\n");
    let b = s.file("b.csv", "regime,y0\n0,3\n");
    let dual = s.out("dual.csv");
    let o = pdmpclt(&[
        "fm",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--dual",
        dual.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "2");
    let text = std::fs::read_to_string(dual).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let f: Vec<f64> = rdr.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(f.len(), 2);
    assert!(((f[0] - f[1]).abs() - 2.0).abs() < 1e-9, "{f:?}");
}

#[test]
fn fm_three_point_clouds_match_library() {
    let s = Sandbox::new();
    let a = s.file("a.csv", "regime,y0,weight\n0,0.2,1\n1,0.9,3\n0,-0.5,2\n");
    let b = s.file("b.csv", "regime,y0,weight\n0,0.2,2\n1,0.9,1\n0,-0.5,1\n");
    let pts = vec![
        HybridState::scalar(0.2, 0),
        HybridState::scalar(0.9, 1),
        HybridState::scalar(-0.5, 0),
    ];
    let mu = EmpiricalMeasure::normalized(pts.clone(), vec![1.0, 3.0, 2.0]).unwrap();
    let nu = EmpiricalMeasure::normalized(pts, vec![2.0, 1.0, 1.0]).unwrap();
    for (flag, w) in [("1", 1.0), ("0.25", 0.25)] {
        let want = fm_distance(&mu, &nu, &HybridMetric::euclidean(w)).unwrap();
        let o = pdmpclt(&["fm", a.to_str().unwrap(), b.to_str().unwrap(), "--regime-weight", flag]);
        let got: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn fm_rejects_bad_input() {
    let s = Sandbox::new();
    let a = s.file("a.csv", "regime,y0\n0,0\n");
    let bad = s.file("bad.csv", "y0\n0\n");
    let wide = s.file("wide.csv", "regime,y0,y1\n0,0,0\n");
    for other in [&bad, &wide, &s.out("missing.csv")] {
        let o = pdmpclt(&["fm", a.to_str().unwrap(), other.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{}", other.display());
    }
    let o = pdmpclt(&["fm", a.to_str().unwrap(), a.to_str().unwrap(), "--regime-weight", "-1"]);
    assert_eq!(code(&o), 2);
}
