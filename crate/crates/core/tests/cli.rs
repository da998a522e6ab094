//! End-to-end runs of the `xfile` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use xfile::io::{load_model, read_csv_matrix, read_dense};
use xfile::rng::stream;

fn xfile(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xfile"))
        .args(args)
        .env("XFILE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Rank-2 data with a few missing cells plus one raw covariate per side.
fn write_inputs(dir: &Path, nonneg: bool) {
    let (n, p) = (14, 12);
    let mut rng = stream(21, "cli-data", &[]);
    let mut normal = |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
    let u = normal(n, 2);
    let v = normal(p, 2);
    let mut y = u.dot(&v.t()) * 3.0 + normal(n, p) * 0.2;
    if nonneg {
        y.mapv_inplace(|v| v.max(0.0));
    }
    let lines = |m: &Array2<f64>, skip: bool| -> String {
        let mut text = String::new();
        for (i, row) in m.rows().into_iter().enumerate() {
            let fields: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, v)| if skip && (i * m.ncols() + j) % 17 == 3 { String::new() } else { v.to_string() })
                .collect();
            text.push_str(&fields.join(","));
            text.push('\n');
        }
        text
    };
    fs::write(dir.join("y.csv"), lines(&y, true)).unwrap();
    fs::write(dir.join("x.csv"), lines(&normal(n, 1), false)).unwrap();
    fs::write(dir.join("w.csv"), lines(&normal(p, 1), false)).unwrap();
    fs::write(dir.join("all.csv"), lines(&Array2::ones((n, p)), false)).unwrap();
}

fn fit_into(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let paths = [dir.join("y.csv"), dir.join("x.csv"), dir.join("w.csv"), dir.join(out)];
    let mut args = vec![
        "fit",
        "--data",
        s(&paths[0]),
        "--covariates",
        s(&paths[1]),
        "--metacovariates",
        s(&paths[2]),
        "--seed",
        "5",
        "--out-dir",
        s(&paths[3]),
    ];
    args.extend_from_slice(extra);
    xfile(&args)
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = xfile(&[]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr) + String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage"));
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(xfile(&["bogus"]).status.code(), Some(2));
    assert_eq!(xfile(&["fit", "--nope"]).status.code(), Some(2));
}

#[test]
fn prior_emits_a_pmf() {
    let out = xfile(&["prior", "--alpha", "5", "--delta", "0", "--draws", "1000", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("k,probability"));
    let total: f64 = lines.map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(String::from_utf8_lossy(&out.stderr).contains("E[k]"));
}

#[test]
fn missing_input_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let out = xfile(&["fit", "--data", s(&dir.path().join("absent.csv")), "--out-dir", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("m").exists());
}

#[test]
fn fit_then_predict_reproduces_fitted_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_inputs(d, false);
    let out = fit_into(d, "model", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "contributions.csv", "rank.txt", "logpost_trace.csv", "fitted.csv", "config_used.json"] {
        assert!(d.join("model").join(f).exists(), "{f}");
    }
    let pred_path = d.join("pred.csv");
    let out = xfile(&["predict", "--model", s(&d.join("model")), "--mask", s(&d.join("all.csv")), "--out", s(&pred_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let fitted = read_dense(&d.join("model/fitted.csv"), false).unwrap();
    let data = read_csv_matrix(&d.join("y.csv"), false).unwrap();
    let mut rdr = csv::Reader::from_path(&pred_path).unwrap();
    let mut seen = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let (i, j): (usize, usize) = (rec[0].parse().unwrap(), rec[1].parse().unwrap());
        let v: f64 = rec[2].parse().unwrap();
        if data.mask[[i, j]] {
            assert_eq!(v.to_bits(), fitted[[i, j]].to_bits(), "cell ({i}, {j})");
        }
        seen += 1;
    }
    assert_eq!(seen, fitted.len());

    // the echoed configuration repeats the run exactly
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("model/config_used.json")).unwrap()).unwrap();
    fs::write(d.join("hyper.json"), cfg["hyper"].to_string()).unwrap();
    let again = fit_into(d, "model2", &["--config", s(&d.join("hyper.json"))]);
    assert!(again.status.success());
    for f in ["contributions.csv", "fitted.csv", "logpost_trace.csv"] {
        assert_eq!(fs::read(d.join("model").join(f)).unwrap(), fs::read(d.join("model2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn nonneg_fit_writes_both_scales() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_inputs(d, true);
    let out = fit_into(d, "model", &["--transform", "nonneg"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let latent = read_dense(&d.join("model/fitted_latent.csv"), false).unwrap();
    let observed = read_dense(&d.join("model/fitted_observed.csv"), false).unwrap();
    assert_eq!(observed, latent.mapv(|v| v.max(0.0)));
}

#[test]
fn export_writes_consistent_analysis_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_inputs(d, false);
    assert!(fit_into(d, "model", &[]).status.success());
    let model = load_model(&d.join("model")).unwrap();
    assert!(model.fit.rank >= 1, "test data should give at least one factor");
    let out = xfile(&[
        "export",
        "--model",
        s(&d.join("model")),
        "--out-dir",
        s(&d.join("exp")),
        "--grid-rows",
        "3",
        "--grid-cols",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let e = d.join("exp");

    let arch = read_dense(&e.join("archetypes.csv"), false).unwrap();
    assert_eq!(arch.dim(), (12, model.fit.rank));
    for (h, c) in model.fit.contributions.iter().enumerate() {
        for j in 0..12 {
            let expected = if c.phi[j] { c.v_tilde[j] } else { 0.0 };
            assert_eq!(arch[[j, h]], expected);
        }
    }
    let signs = read_dense(&e.join("loading_signs.csv"), false).unwrap();
    assert!(signs.iter().all(|&v| v == -1.0 || v == 0.0 || v == 1.0));
    let sim = read_dense(&e.join("similarity.csv"), false).unwrap();
    assert_eq!(sim.dim(), (14, 14));
    assert!((0..14).all(|i| sim[[i, i]] == 1.0));

    for h in 1..=model.fit.rank {
        let bytes = fs::read(e.join(format!("archetype_{h}.pgm"))).unwrap();
        let header = b"P5\n4 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12);
        let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(e.join(format!("archetype_{h}.json"))).unwrap()).unwrap();
        assert!(side["min"].as_f64().unwrap() <= side["max"].as_f64().unwrap());
    }
    assert!(e.join("config_used.json").exists());

    let bad = xfile(&["export", "--model", s(&d.join("model")), "--out-dir", s(&d.join("exp2")), "--grid-rows", "5", "--grid-cols", "5"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn simulate_reports_are_reproducible_without_timing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("sc.json"),
        r#"{"n":20,"p":20,"k_true":2,"q_x":2,"q_w":2,"dgp":"multiplicative","holdout_fraction":0.2,"n_replicates":3,"seed":4}"#,
    )
    .unwrap();
    fs::write(d.join("hp.json"), r#"{"n_restarts":2,"max_inner_iters":100}"#).unwrap();
    for name in ["a", "b"] {
        let out = xfile(&[
            "simulate",
            "--scenario",
            s(&d.join("sc.json")),
            "--config",
            s(&d.join("hp.json")),
            "--out",
            s(&d.join(name).join("report.csv")),
            "--no-timing",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read_to_string(d.join("a/report.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b/report.csv")).unwrap());
    let rows: Vec<&str> = a.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "replicate,model,rmse,rank_selected,wall_time_ms,error");
    assert_eq!(rows.len(), 1 + 2 * 3);
    assert!(d.join("a/config_used.json").exists());
}
