use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fpt::commands::SurfaceFile;
use serde_json::Value;

fn fpt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpt")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const WIENER: &str = r#"
seed = 5
[[synthetic]]
name = "w"
sigma = 0.001
continuous_monitoring = true
clock = "uniform"
clock_step_seconds = 60
session_seconds = 7200
paths = 20000
[grid]
level_count = 30
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn empty_input_exits_3_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "empty.csv", "");
    let o = fpt(dir.path(), &["--out", "out", "estimate", "empty.csv"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn header_only_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "h.csv", "timestamp,price\n");
    let o = fpt(dir.path(), &["--out", "out", "ingest", "h.csv"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = fpt(dir.path(), &["estimate", "nope.csv"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn unknown_family_exits_2_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = fpt(dir.path(), &["fit", "--family", "gaussian"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "seed = \"x\"\n");
    assert_eq!(code(&fpt(dir.path(), &["--config", bad.to_str().unwrap(), "estimate"])), 2);
    let unknown = write(dir.path(), "unknown.toml", "sede = 3\n");
    assert_eq!(code(&fpt(dir.path(), &["--config", unknown.to_str().unwrap(), "estimate"])), 2);
    // no data source at all
    assert_eq!(code(&fpt(dir.path(), &["estimate"])), 2);
    // two data sources
    write(dir.path(), "t.csv", "t,p\n1577865600,100\n");
    let both = write(dir.path(), "both.toml", &format!("{WIENER}\n[data]\nfiles = [\"t.csv\"]\n"));
    assert_eq!(code(&fpt(dir.path(), &["--config", both.to_str().unwrap(), "estimate"])), 2);
    let zero = fpt(dir.path(), &["--threads", "0", "--config", "unknown.toml", "estimate"]);
    assert_eq!(code(&zero), 2);
}

#[test]
fn synthetic_wiener_estimate_matches_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w.toml", WIENER);
    let o = fpt(dir.path(), &["--config", cfg.to_str().unwrap(), "--out", "out", "estimate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: SurfaceFile = serde_json::from_slice(&fs::read(dir.path().join("out/w.surface.json")).unwrap()).unwrap();
    let oracle = doc.oracle.unwrap();
    assert!(oracle.fraction >= 0.95, "{oracle:?}");
    assert_eq!(doc.provenance.schema, "fpt.surface/1");
    let csv = fs::read_to_string(dir.path().join("out/w.surface.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert!(first.contains(&format!("config_hash={}", doc.provenance.config_hash)));
    assert_eq!(csv.lines().nth(1).unwrap(), "market,wing,x,t_seconds,w,n,crossings,vt,se");
    assert!(fs::read_to_string(dir.path().join("out/w.gap.csv")).unwrap().contains("w_gauss"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w.toml", &WIENER.replace("paths = 20000", "paths = 2000"));
    let c = cfg.to_str().unwrap();
    for (out, threads) in [("a", "1"), ("b", "3")] {
        assert_eq!(code(&fpt(dir.path(), &["--config", c, "--out", out, "--threads", threads, "estimate"])), 0);
    }
    for f in ["w.surface.json", "w.surface.csv", "w.gap.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn config_values_override_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w.toml", &WIENER.replace("paths = 20000", "paths = 500"));
    let c = cfg.to_str().unwrap();
    let o = fpt(dir.path(), &["--config", c, "--seed", "99", "--out", "out", "synth"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(dir.path().join("out/synth.json"))["provenance"]["seed"], 5);
}

#[test]
fn ingest_cleans_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    // 2020-01-02 is a Thursday; the session is 08:00-16:30 UTC trimmed by 30 minutes
    let rows = [
        "timestamp,price,volume",
        "2020-01-02T08:10:00Z,100.0,1",
        "2020-01-02T09:00:00Z,100.5,2",
        "2020-01-02T09:00:00Z,100.7,3",
        "2020-01-02T09:30:00Z,bad,1",
        "2020-01-02T10:00:00Z,101.0,1",
        "2020-01-02T10:30:00Z,100.9,1",
    ];
    write(dir.path(), "es.csv", &(rows.join("\n") + "\n"));
    let cfg = write(dir.path(), "i.toml", "[format]\nvolume = \"volume\"\ntimestamp = \"timestamp\"\nprice = \"price\"\nmalformed_tolerance = 0.5\n");
    let o = fpt(dir.path(), &["--config", cfg.to_str().unwrap(), "--out", "out", "ingest", "es.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(dir.path().join("out/es.cleaning.json"));
    assert_eq!(report["provenance"]["schema"], "fpt.cleaning/1");
    let parse = &report["files"][0]["parse"];
    assert_eq!(parse["malformed"], 1);
    assert_eq!(parse["collapsed"], 1);
    assert_eq!(report["cleaning"]["trimmed"], 1);
    assert_eq!(report["cleaning"]["output_records"], 3);
    let ticks = fs::read_to_string(dir.path().join("out/es.ticks.csv")).unwrap();
    let rows: Vec<&str> = ticks.lines().skip(2).collect();
    assert_eq!(rows, ["1577955600000,100.7,5,0", "1577959200000,101,1,0", "1577961000000,100.9,1,0"]);
}

#[test]
fn collapse_rules() {
    let dir = tempfile::tempdir().unwrap();
    let small = WIENER.replace("paths = 20000", "paths = 3000");
    let cfg = write(dir.path(), "w.toml", &small);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&fpt(dir.path(), &["--config", c, "--out", "est", "estimate"])), 0);

    // one market: market dispersion refused, the others produced
    let o = fpt(dir.path(), &["--out", "one", "collapse", "--surface", "est/w.surface.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let one = json(dir.path().join("one/collapse.json"));
    assert!(one["theta_mkt"].is_null());
    assert!(one["table"][0]["theta_x_pos"].as_f64().unwrap() > 0.0);
    assert!(one["table"][0]["theta_t_neg"].as_f64().unwrap() > 0.0);

    // identical duplicated input: no dispersion between the copies
    let o = fpt(dir.path(), &["--out", "dup", "collapse", "--surface", "est/w.surface.json", "--surface", "est/w.surface.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dup = json(dir.path().join("dup/collapse.json"));
    assert_eq!(dup["theta_mkt"]["theta_pos"], 0.0);
    assert_eq!(dup["theta_mkt"]["theta_neg"], 0.0);
    assert_eq!(dup["table"][0]["theta_x_pos"], dup["table"][1]["theta_x_pos"]);

    // surfaces from different grids are not mixed
    let other = write(dir.path(), "o.toml", &small.replace("level_count = 30", "level_count = 31"));
    assert_eq!(code(&fpt(dir.path(), &["--config", other.to_str().unwrap(), "--out", "est2", "estimate"])), 0);
    let o = fpt(dir.path(), &["--out", "mix", "collapse", "--surface", "est/w.surface.json", "--surface", "est2/w.surface.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("refusing to mix"));

    // a single horizon leaves fewer than two curves
    let single = write(dir.path(), "s.toml", &(small.clone() + "horizons_seconds = [1800]\n"));
    let o = fpt(dir.path(), &["--config", single.to_str().unwrap(), "--out", "single", "collapse"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!dir.path().join("single").exists());
}

#[test]
fn surrogate_on_iid_data_finds_no_change() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "iid.toml",
        "seed = 2\n[[synthetic]]\nname = \"g\"\nprocess = \"iid_walk\"\nincrements = \"laplace\"\nsigma = 0.001\nclock = \"uniform\"\nclock_step_seconds = 60\npaths = 5000\n[surrogate]\nreplicates = 2\n",
    );
    let o = fpt(dir.path(), &["--config", cfg.to_str().unwrap(), "--out", "out", "surrogate", "--kind", "shuffle-returns"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(dir.path().join("out/g.shuffle_returns.report.json"));
    assert_eq!(report["summary"]["verdict"], "no significant change");
    assert!(!dir.path().join("out/g.shuffle_times.report.json").exists());
    for f in ["g.shuffle_returns.r0.surface.json", "g.shuffle_returns.r1.surface.json", "g.shuffle_returns.pooled.surface.json"] {
        let doc = json(dir.path().join("out").join(f));
        assert_eq!(doc["surrogate"]["kind"], "shuffle_returns");
        assert_eq!(doc["surrogate"]["replicates"], 2);
    }
    let cmp = fs::read_to_string(dir.path().join("out/g.shuffle_returns.comparison.csv")).unwrap();
    assert_eq!(cmp.lines().nth(1).unwrap(), "market,kind,wing,x,t_seconds,w_original,w_surrogate,diff,z");
}

fn model_surface_file(beta: f64, b: f64) -> SurfaceFile {
    use fpt_core::estimator::Quantity;
    use fpt_core::{eval_model, Family, FptSurface, HorizonGrid, LevelGrid, WingSurface};
    use rand::SeedableRng;
    use rand_distr::{Binomial, Distribution};
    let horizons = HorizonGrid::default_minutes();
    let scale = (b * 1800.0).sqrt();
    let mags = fpt_core::math::log_space(0.01 * scale, 10.0 * scale, 40);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let mut wing = || {
        let (mut values, mut n, mut crossings) = (vec![], vec![], vec![]);
        for &x in &mags {
            for j in 0..horizons.len() {
                let k = Binomial::new(100_000, eval_model(Family::Weibull, beta, b, x, horizons.seconds(j))).unwrap().sample(&mut rng);
                values.push(k as f64 / 1e5);
                n.push(100_000);
                crossings.push(k);
            }
        }
        WingSurface { values, n, crossings }
    };
    let (positive, negative) = (wing(), wing());
    let vt = (0..horizons.len()).map(|j| Some((b * horizons.seconds(j)).sqrt())).collect();
    let surface = FptSurface {
        market: "model".into(),
        quantity: Quantity::Fpt,
        levels: LevelGrid::symmetric(&mags).unwrap(),
        horizons,
        positive,
        negative,
        vt,
        pooled_cells: 0,
    };
    let provenance = fpt::output::Provenance::new(&fpt::RunConfig::default(), "estimate", "fpt.surface/1");
    SurfaceFile {
        provenance,
        level_mode: fpt::commands::LevelMode::Explicit,
        reference_seconds: 1800,
        reference_scale: None,
        surrogate: None,
        oracle: None,
        surface,
    }
}

#[test]
fn fit_recovers_weibull_parameters_in_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (beta, b) = (1.21, 1.05e-4);
    fs::write(dir.path().join("m.json"), serde_json::to_vec(&model_surface_file(beta, b)).unwrap()).unwrap();
    let o = fpt(dir.path(), &["--out", "out", "fit", "--family", "weibull", "--surface", "m.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/fits.csv")).unwrap();
    let mut lines = csv.lines().skip(1);
    assert_eq!(lines.next().unwrap(), "market,wing,beta,beta_se,b,b_se,alpha,alpha_se,a,a_se,rmse_weibull,rmse_student");
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f[i].parse::<f64>().unwrap();
        assert!((num(2) - beta).abs() <= 2.0 * num(3), "{line}");
        assert!((num(4) - b).abs() <= 2.0 * num(5), "{line}");
        assert!(f[6].is_empty() && f[11].is_empty());
        rows += 1;
    }
    assert_eq!(rows, 2);
    assert!(!dir.path().join("out/crossover.csv").exists());
}

#[test]
fn fit_writes_crossover_and_per_horizon_tables() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.json"), serde_json::to_vec(&model_surface_file(1.03, 1.1e-4)).unwrap()).unwrap();
    let o = fpt(dir.path(), &["--out", "out", "fit", "--per-horizon", "--surface", "m.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let crossover = fs::read_to_string(dir.path().join("out/crossover.csv")).unwrap();
    assert_eq!(crossover.lines().count(), 2 + 2 * 39);
    let per = fs::read_to_string(dir.path().join("out/fits_per_horizon.csv")).unwrap();
    assert_eq!(per.lines().count(), 2 + 2 * 2 * 7);
    let fits = json(dir.path().join("out/fits.json"));
    assert_eq!(fits["fits"].as_array().unwrap().len(), 4);
    assert_eq!(fits["inputs"][0]["schema"], "fpt.surface/1");
}
