//! End-to-end tests of the command-line binary and the cross-mode
//! likelihood ordering.

use std::path::Path;
use std::process::{Command, Output};

use structgp::config::RunConfig;
use structgp::data::{ObservationSet, Record};
use structgp::fit::{self, FitMode, FitSettings};
use structgp::learn::LagrangianConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structgp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Small simulated data set shared by several tests.
fn simulate(dir: &Path, extra: &[&str]) {
    let dir = dir.to_string_lossy().into_owned();
    let mut args = vec![
        "simulate",
        "--output-dir",
        dir.as_str(),
        "--set",
        "sim_k=2",
        "--set",
        "sim_subjects=10",
        "--set",
        "obs_per_task=7",
        "--set",
        "mean_degree=1.0",
        "--set",
        "seed=5",
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
}

#[test]
fn simulate_writes_expected_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&a, &[]);
    simulate(&b, &[]);
    let csv_a = std::fs::read_to_string(a.join("observations.csv")).unwrap();
    let csv_b = std::fs::read_to_string(b.join("observations.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "same seed must give byte-identical output");
    // header + r * k * obs_per_task rows
    assert_eq!(csv_a.lines().count(), 1 + 10 * 2 * 7);
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("ground_truth.json")).unwrap())
            .unwrap();
    assert!(truth.get("config").is_some(), "config echo missing");
    assert!(truth.get("truth").is_some());
}

#[test]
fn exit_codes_distinguish_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--output-dir", &path(dir.path(), "x"), "--set", "nope=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "fit",
        "--data",
        &path(dir.path(), "missing.csv"),
        "--output-dir",
        &path(dir.path(), "y"),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["simulate", "--output-dir", &path(dir.path(), "z"), "--set", "gamma=2.0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_predict_eval_pipeline_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&sim, &[]);
    let data = path(&sim, "observations.csv");
    let fit_dir = path(dir.path(), "fit");
    run_ok(&[
        "fit",
        "--data",
        &data,
        "--output-dir",
        &fit_dir,
        "--set",
        "mode=independent",
        "--set",
        "adam_steps=50",
        "--set",
        "seed=5",
    ]);
    let model: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(&fit_dir).join("model.json")).unwrap(),
    )
    .unwrap();
    // the config echo is the fully resolved RunConfig
    let echoed: RunConfig = serde_json::from_value(model["config"].clone()).unwrap();
    let mut expected = RunConfig::default();
    for (key, value) in [
        ("sim_k", "2"),
        ("sim_subjects", "10"),
        ("obs_per_task", "7"),
        ("mean_degree", "1.0"),
        ("seed", "5"),
        ("mode", "independent"),
        ("adam_steps", "50"),
    ] {
        expected.set(key, value).unwrap();
    }
    assert_eq!(echoed, expected);
    assert!(Path::new(&fit_dir).join("graph.dot").exists());

    let forecast = path(dir.path(), "forecast.csv");
    run_ok(&[
        "predict",
        "--bundle",
        &path(Path::new(&fit_dir), "model.json"),
        "--data",
        &data,
        "--condition-before",
        "7",
        "--query-after",
        "7",
        "--output",
        &forecast,
    ]);
    let forecast_text = std::fs::read_to_string(&forecast).unwrap();
    assert!(forecast_text.starts_with("subject_id,task_id,time,mean,variance,lo95,hi95"));
    let n_forecast = forecast_text.lines().count() - 1;
    assert!(n_forecast > 0);

    // truth rows aligned with the forecast: the same window filter
    let obs_text = std::fs::read_to_string(&data).unwrap();
    let truth_rows: Vec<&str> = obs_text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap() >= 7.0)
        .collect();
    assert_eq!(truth_rows.len(), n_forecast);
    let truth_path = path(dir.path(), "truth.csv");
    std::fs::write(
        &truth_path,
        format!("subject_id,task_id,time,value\n{}\n", truth_rows.join("\n")),
    )
    .unwrap();

    let metrics = path(dir.path(), "metrics.json");
    run_ok(&[
        "eval",
        "--forecast",
        &forecast,
        "--truth",
        &truth_path,
        "--output",
        &metrics,
        "--bootstrap",
        "100",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(report["config"].is_object());
    assert!(report["macro"]["rmse"].as_f64().unwrap() > 0.0);
    let cov = report["macro"]["coverage95"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cov));
    assert!(report["bootstrap95"]["rmse"].as_array().unwrap().len() == 2);

    // export-graph round trip
    let dot = path(dir.path(), "graph.dot");
    run_ok(&[
        "export-graph",
        "--bundle",
        &path(Path::new(&fit_dir), "model.json"),
        "--output",
        &dot,
    ]);
    let dot_text = std::fs::read_to_string(&dot).unwrap();
    assert!(dot_text.starts_with("digraph structure {"));
}

#[test]
fn eval_rejects_misaligned_rows() {
    let dir = tempfile::tempdir().unwrap();
    let forecast = path(dir.path(), "f.csv");
    let truth = path(dir.path(), "t.csv");
    std::fs::write(
        &forecast,
        "subject_id,task_id,time,mean,variance,lo95,hi95\na,x,1.0,0.0,1.0,-2.0,2.0\n",
    )
    .unwrap();
    std::fs::write(&truth, "subject_id,task_id,time,value\nb,x,1.0,0.5\n").unwrap();
    let out = run(&["eval", "--forecast", &forecast, "--truth", &truth, "--output", &path(dir.path(), "m.json")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn predict_with_empty_conditioning_returns_the_prior() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&sim, &[]);
    let fit_dir = path(dir.path(), "fit");
    run_ok(&[
        "fit",
        "--data",
        &path(&sim, "observations.csv"),
        "--output-dir",
        &fit_dir,
        "--set",
        "mode=independent",
        "--set",
        "adam_steps=30",
        "--set",
        "learn_noise=false",
        "--set",
        "noise_init=0.1",
    ]);
    let query = path(dir.path(), "query.csv");
    std::fs::write(&query, "subject_id,task_id,time\nnew_subject,task_0,4.0\n").unwrap();
    let forecast = path(dir.path(), "forecast.csv");
    run_ok(&[
        "predict",
        "--bundle",
        &path(Path::new(&fit_dir), "model.json"),
        "--query",
        &query,
        "--output",
        &forecast,
    ]);
    let text = std::fs::read_to_string(&forecast).unwrap();
    let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let mean: f64 = fields[3].parse().unwrap();
    let variance: f64 = fields[4].parse().unwrap();
    assert_eq!(mean, 0.0);
    // unit prior variance plus the fixed noise variance
    assert!((variance - 1.01).abs() < 1e-9, "variance {variance}");
}

#[test]
fn predict_reproduces_a_conditioning_point_when_noise_is_tiny() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&sim, &[]);
    let fit_dir = path(dir.path(), "fit");
    run_ok(&[
        "fit",
        "--data",
        &path(&sim, "observations.csv"),
        "--output-dir",
        &fit_dir,
        "--set",
        "mode=independent",
        "--set",
        "adam_steps=30",
        "--set",
        "learn_noise=false",
        "--set",
        "noise_init=1e-4",
    ]);
    let conditioning = path(dir.path(), "cond.csv");
    std::fs::write(
        &conditioning,
        "subject_id,task_id,time,value\ns,task_0,2.0,0.731\n",
    )
    .unwrap();
    let query = path(dir.path(), "query.csv");
    std::fs::write(&query, "subject_id,task_id,time\ns,task_0,2.0\n").unwrap();
    let forecast = path(dir.path(), "forecast.csv");
    run_ok(&[
        "predict",
        "--bundle",
        &path(Path::new(&fit_dir), "model.json"),
        "--query",
        &query,
        "--conditioning",
        &conditioning,
        "--output",
        &forecast,
    ]);
    let text = std::fs::read_to_string(&forecast).unwrap();
    let mean: f64 = text.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((mean - 0.731).abs() < 1e-4, "mean {mean}");
}

#[test]
fn lp_fixed_freezes_the_graph_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&sim, &[]);
    let base = path(dir.path(), "base");
    run_ok(&[
        "fit",
        "--data",
        &path(&sim, "observations.csv"),
        "--output-dir",
        &base,
        "--set",
        "mode=independent",
        "--set",
        "adam_steps=30",
    ]);
    let frozen = path(dir.path(), "frozen");
    run_ok(&[
        "fit",
        "--data",
        &path(&sim, "observations.csv"),
        "--output-dir",
        &frozen,
        "--set",
        "mode=lp-fixed",
        "--set",
        "epochs=1",
        "--set",
        "adam_steps=20",
        "--graph-bundle",
        &path(Path::new(&base), "model.json"),
    ]);
    let load = |p: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(Path::new(p).join("model.json")).unwrap())
            .unwrap()
    };
    assert_eq!(load(&base)["params"], load(&frozen)["params"]);
    assert!(load(&frozen)["pathways"].is_object());
}

/// More constrained modes can never fit the training data better:
/// no-structure <= structgp <= independent in NMLL.
#[test]
fn mode_lattice_orders_training_nmll() {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let k = 2;
    let subjects = 20;
    let mut records = Vec::new();
    for subject in 0..subjects {
        for _ in 0..8 {
            records.push(Record {
                subject,
                task: rng.gen_range(0..k),
                time: rng.gen_range(0.0..8.0),
                value: rng.gen_range(-1.5..1.5),
            });
        }
    }
    let obs = ObservationSet::new(records, k, subjects).unwrap();
    let settings = |mode: FitMode| FitSettings {
        mode,
        lambda_grid: vec![0.05],
        lagrangian: LagrangianConfig {
            inner_steps: 200,
            max_outer: 8,
            ..Default::default()
        },
        adam_steps: 400,
        learn_noise: true,
        seed: 9,
        ..Default::default()
    };
    let nmll = |mode: FitMode| fit::fit(&obs, &settings(mode), None).unwrap().nmll;
    let independent = nmll(FitMode::Independent);
    let structured = nmll(FitMode::StructGp);
    let unconstrained = nmll(FitMode::NoStructure);
    assert!(
        structured <= independent + 1e-6,
        "structgp {structured} vs independent {independent}"
    );
    assert!(
        unconstrained <= structured + 1e-6,
        "no-structure {unconstrained} vs structgp {structured}"
    );
}
