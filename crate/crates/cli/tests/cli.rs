mod common;

use std::fs;

use common::*;
use mortvi::checkpoint::{Checkpoint, Fitted};
use mortvi::hmd::{HmdRecord, HmdTable};
use mortvi::inference::initialize;
use mortvi::model::ModelSpec;
use mortvi::MortalityPanel;
use serde_json::Value;

const FIT: &[&str] = &["--first-train-year", "1990", "--train-len", "20", "--latent-dim", "1"];

fn setup(panel: &MortalityPanel) -> tempfile::TempDir {
    let root = tempfile::tempdir().unwrap();
    write_panel(panel, &root.path().join("panel.csv"));
    root
}

fn hmd_table(panel: &MortalityPanel, exposures: bool) -> HmdTable {
    let mut records = Vec::new();
    for t in 0..panel.n_years() {
        for a in 0..panel.n_ages() {
            let v = if exposures { panel.exposure(a, t) } else { panel.deaths(a, t) };
            records.push(HmdRecord { year: panel.first_year() + t as i32, age: a as u32, open_age: false, value: Some(v) });
        }
    }
    HmdTable { records }
}

#[test]
fn ingest_builds_the_panel_and_reruns_from_its_sidecar() {
    let panel = affine_panel(2000, 8, 5, 1);
    let root = tempfile::tempdir().unwrap();
    let data = dir(root.path(), "hmd");
    fs::write(data.join("Deaths_1x1.txt"), hmd_table(&panel, false).to_hmd_string("Deaths")).unwrap();
    fs::write(data.join("Exposures_1x1.txt"), hmd_table(&panel, true).to_hmd_string("Exposures")).unwrap();
    let deaths_before = read(data.join("Deaths_1x1.txt"));

    let out = mortvi(&["ingest", "--age-cap", "5", "--out", "a"], root.path());
    assert_eq!(out.status.code(), Some(2), "no inputs is a config error");

    let status = std::process::Command::new(env!("CARGO_BIN_EXE_mortvi"))
        .args(["ingest", "--age-cap", "5", "--out", "a"])
        .env("MORTVI_DATA_DIR", &data)
        .current_dir(root.path())
        .status()
        .unwrap();
    assert!(status.success());
    let built = MortalityPanel::read_csv(fs::File::open(root.path().join("a/panel.csv")).unwrap()).unwrap();
    assert_eq!(built.n_ages(), 6);
    assert_eq!(built.n_years(), 5);
    for t in 0..5 {
        let top: f64 = (5..8).map(|a| panel.deaths(a, t)).sum();
        assert_eq!(built.deaths(5, t), top);
        assert_eq!(built.deaths(2, t), panel.deaths(2, t));
    }

    ok(&["ingest", "--config", "a/ingest.json", "--out", "b"], root.path());
    assert_eq!(read(root.path().join("a/panel.csv")), read(root.path().join("b/panel.csv")));
    assert_eq!(read(root.path().join("a/ingest.json")), read(root.path().join("b/ingest.json")));
    assert_eq!(read(data.join("Deaths_1x1.txt")), deaths_before);
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let panel = affine_panel(1990, 10, 25, 2);
    let root = setup(&panel);
    let mut args = vec!["fit", "--panel", "panel.csv", "--steps", "0", "--out", "f"];
    args.extend_from_slice(FIT);
    ok(&args, root.path());
    let ckpt = Checkpoint::load(&root.path().join("f/checkpoint.json")).unwrap();
    let (model0, guide0) = initialize(&ModelSpec::affine(1, 10), &panel.years(1990, 20).unwrap()).unwrap();
    match &ckpt.fitted {
        Fitted::Latent { model, guide, final_elbo, .. } => {
            assert_eq!(model, &model0);
            assert_eq!(guide, &guide0);
            assert_eq!(*final_elbo, None);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(ckpt.first_year, 1990);
    assert_eq!(ckpt.last_year(), 2009);
}

#[test]
fn fit_is_deterministic_and_reproducible_from_the_sidecar() {
    let panel = affine_panel(1990, 10, 25, 3);
    let root = setup(&panel);
    let mut args = vec!["fit", "--panel", "panel.csv", "--steps", "60", "--seed", "11", "--out", "a"];
    args.extend_from_slice(FIT);
    ok(&args, root.path());
    let last = args.len() - FIT.len() - 1;
    args[last] = "b";
    ok(&args, root.path());
    ok(&["fit", "--config", "a/fit.json", "--out", "c"], root.path());
    for f in ["checkpoint.json", "elbo.csv", "fit.json"] {
        let a = read(root.path().join("a").join(f));
        assert_eq!(a, read(root.path().join("b").join(f)), "{f} differs between runs");
        assert_eq!(a, read(root.path().join("c").join(f)), "{f} differs after sidecar rerun");
    }
    let elbo = String::from_utf8(read(root.path().join("a/elbo.csv"))).unwrap();
    assert!(elbo.starts_with("step,elbo\n"));
    assert_eq!(elbo.lines().count(), 61);

    // A different seed changes the trajectory.
    ok(&["fit", "--config", "a/fit.json", "--seed", "12", "--out", "d"], root.path());
    assert_ne!(read(root.path().join("a/checkpoint.json")), read(root.path().join("d/checkpoint.json")));
}

#[test]
fn forecast_bands_widen_and_rerun_identically() {
    let panel = affine_panel(1990, 6, 25, 4);
    let root = setup(&panel);
    let mut args = vec!["fit", "--panel", "panel.csv", "--steps", "200", "--out", "f"];
    args.extend_from_slice(FIT);
    ok(&args, root.path());
    ok(&["forecast", "--panel", "panel.csv", "--out", "f", "--horizon", "10", "--samples", "400"], root.path());
    ok(&["forecast", "--config", "f/forecast.json", "--out", "g"], root.path());
    assert_eq!(read(root.path().join("f/forecast.csv")), read(root.path().join("g/forecast.csv")));

    let side: Value = serde_json::from_slice(&read(root.path().join("f/forecast.json"))).unwrap();
    assert_eq!(side["notes"]["exposures"], "carried-forward");
    assert_eq!(side["settings"]["seed"], 0);

    let mut rdr = csv::Reader::from_path(root.path().join("f/forecast.csv")).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["age", "year", "horizon", "mean_rate", "sd_rate", "lower", "upper", "mean_deaths"]);
    let rows: Vec<Vec<f64>> =
        rdr.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 60);
    for r in &rows {
        assert!(r[5] >= 0.0 && r[6] >= r[3] && r[3] > 0.0);
    }
    for age in 0..6 {
        let sd = |h: f64| rows.iter().find(|r| r[0] == age as f64 && r[2] == h).unwrap()[4];
        assert!(sd(10.0) > sd(1.0), "age {age}");
        let year = rows.iter().find(|r| r[0] == age as f64 && r[2] == 1.0).unwrap()[1];
        assert_eq!(year, 2010.0);
    }

    // Observed exposures are used when the panel covers the horizon.
    ok(&["forecast", "--panel", "panel.csv", "--out", "h", "--checkpoint", "f/checkpoint.json", "--horizon", "5"], root.path());
    let side: Value = serde_json::from_slice(&read(root.path().join("h/forecast.json"))).unwrap();
    assert_eq!(side["notes"]["exposures"], "observed");
}

#[test]
fn lee_carter_checkpoint_forecasts() {
    let panel = lee_carter_panel(1990, 8, 25, 5);
    let root = setup(&panel);
    ok(&["fit", "--panel", "panel.csv", "--model", "lee-carter", "--first-train-year", "1990", "--train-len", "20", "--out", "f"], root.path());
    let ckpt = Checkpoint::load(&root.path().join("f/checkpoint.json")).unwrap();
    assert_eq!(ckpt.variant(), "lee-carter");
    assert!(!root.path().join("f/elbo.csv").exists());
    ok(&["forecast", "--panel", "panel.csv", "--out", "f", "--horizon", "3"], root.path());
    let text = String::from_utf8(read(root.path().join("f/forecast.csv"))).unwrap();
    assert_eq!(text.lines().count(), 1 + 8 * 3);
}

fn aggregate(path: impl AsRef<std::path::Path>) -> Vec<Value> {
    serde_json::from_slice::<Vec<Value>>(&read(path)).unwrap()
}

fn row<'a>(rows: &'a [Value], model: &str) -> &'a Value {
    rows.iter().find(|r| r["model"] == model).unwrap_or_else(|| panic!("no {model} row in {rows:?}"))
}

#[test]
fn saturated_scorer_has_unit_r_squared() {
    let panel = affine_panel(1990, 6, 12, 6);
    let root = setup(&panel);
    ok(
        &["evaluate", "--panel", "panel.csv", "--model", "saturated", "--train-len", "8", "--eval-len", "4",
          "--sweep-start", "1990", "--sweep-end", "1990", "--out", "e"],
        root.path(),
    );
    let rows = aggregate(root.path().join("e/aggregate.json"));
    assert_eq!(rows.len(), 2);
    assert_eq!(row(&rows, "saturated")["r_squared"], 1.0);
    assert_eq!(row(&rows, "intercept")["r_squared"], 0.0);
    let report = String::from_utf8(read(root.path().join("e/report.csv"))).unwrap();
    assert!(report.starts_with("model,first_train_year,horizon,log_score\n"));
    assert_eq!(report.lines().count(), 1 + 2 * 4);
}

#[test]
fn latent_dim_sweep_is_independent_of_job_count() {
    let panel = affine_panel(1990, 6, 16, 7);
    let root = setup(&panel);
    let base = ["evaluate", "--panel", "panel.csv", "--model", "affine", "--latent-dim", "1,2", "--steps", "40",
        "--samples", "100", "--train-len", "10", "--eval-len", "3", "--sweep-start", "1990", "--sweep-end", "1993"];
    let mut a = base.to_vec();
    a.extend(["--jobs", "1", "--out", "a"]);
    ok(&a, root.path());
    let mut b = base.to_vec();
    b.extend(["--jobs", "4", "--out", "b"]);
    ok(&b, root.path());
    ok(&["evaluate", "--config", "a/evaluate.json", "--out", "c"], root.path());
    for f in ["report.csv", "aggregate.json", "evaluate.json"] {
        let x = read(root.path().join("a").join(f));
        assert_eq!(x, read(root.path().join("b").join(f)), "{f}");
        assert_eq!(x, read(root.path().join("c").join(f)), "{f}");
    }
    let rows = aggregate(root.path().join("a/aggregate.json"));
    let names: Vec<&str> = rows.iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(names, ["affine-d1", "affine-d2", "intercept", "saturated"]);
    assert!(rows.iter().all(|r| r["n_windows"] == 4));
}

#[test]
fn lee_carter_wins_on_its_own_model_class() {
    let panel = lee_carter_panel(1970, 12, 40, 8);
    let root = setup(&panel);
    ok(
        &["compare", "--panel", "panel.csv", "--models", "affine-d1,lee-carter", "--steps", "300", "--samples", "300",
          "--train-len", "30", "--eval-len", "5", "--sweep-start", "1970", "--sweep-end", "1975", "--out", "c"],
        root.path(),
    );
    let rows = aggregate(root.path().join("c/aggregate.json"));
    let score = |m: &str| row(&rows, m)["mean_log_score"].as_f64().unwrap();
    assert!(score("lee-carter") > score("affine-d1"), "{rows:?}");
    assert!(score("lee-carter") > score("intercept"));
    assert!(score("saturated") >= score("lee-carter"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let panel = affine_panel(1990, 4, 12, 9);
    let root = setup(&panel);
    fs::write(root.path().join("bad.json"), "{\"stepz\": 5}").unwrap();
    fs::write(root.path().join("bad.toml"), "tau = -1.0\n").unwrap();
    fs::write(root.path().join("broken.csv"), "year,age,deaths,exposure\n1990,0,-3,10\n").unwrap();
    let code = |args: &[&str]| mortvi(args, root.path()).status.code();
    assert_eq!(code(&["fit", "--config", "bad.json", "--panel", "panel.csv"]), Some(2));
    assert_eq!(code(&["fit", "--config", "bad.toml", "--panel", "panel.csv"]), Some(2));
    assert_eq!(code(&["fit", "--config", "missing.json"]), Some(2));
    assert_eq!(code(&["fit", "--model", "rbf", "--rbf-count", "0", "--panel", "panel.csv"]), Some(2));
    assert_eq!(code(&["fit", "--latent-dim", "1,2", "--panel", "panel.csv"]), Some(2));
    assert_eq!(code(&["compare", "--models", "plat", "--panel", "panel.csv"]), Some(2));
    assert_eq!(code(&["fit", "--bogus-flag"]), Some(2));
    assert_eq!(code(&["fit"]), Some(2));
    // Data and module errors.
    assert_eq!(code(&["fit", "--panel", "broken.csv", "--first-train-year", "1990", "--train-len", "2"]), Some(1));
    assert_eq!(code(&["fit", "--panel", "panel.csv", "--first-train-year", "1900"]), Some(1));
    assert_eq!(code(&["forecast", "--panel", "panel.csv", "--checkpoint", "nowhere.json"]), Some(1));
}
