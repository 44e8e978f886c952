use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn encp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_encp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = encp(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"{"name":"cli","group":"C2",
 "data":{"kind":"gmm","group":"C2","px":1,"qy":1,"n_g":2,"spec_seed":1,"sample_seed":2,"n_samples":200},
 "model":{"hidden_layers":1,"hidden_width":4,"r":4},
 "train":{"epochs":2,"batch_size":32},
 "seeds":[0,1],
 "eval":{"n_bins":20},
 "sweep":{"train_sizes":[50,100]}}"#;

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn group_inspect_reports_exact_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["group", "inspect", "--group", "D3", "--dim", "2"], dir.path());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["order"], 6);
    assert_eq!(v["axioms_hold"], true);
    assert_eq!(v["irreps"].as_array().unwrap().len(), 3);
    assert!(v["regular"]["block_residual"].as_f64().unwrap() < 1e-10);
    assert!(v["regular"]["q_orthogonality_error"].as_f64().unwrap() < 1e-12);
    let mults: u64 = v["regular"]["blocks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["multiplicity"].as_u64().unwrap() * b["dim"].as_u64().unwrap())
        .sum();
    assert_eq!(mults, 6);
}

#[test]
fn unknown_group_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = encp(&["group", "inspect", "--group", "Q8"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(&["gmm", "generate", "--group", "C4", "--px", "2", "--n", "50", "--seed", "3", "--out", name], dir.path());
    }
    let a = fs::read(dir.path().join("a/dataset.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/dataset.csv")).unwrap());
    let (header, rows) = csv_rows(&dir.path().join("a/dataset.csv"));
    assert_eq!(header, ["x_0", "x_1", "y_0"]);
    assert_eq!(rows.len(), 50);
}

#[test]
fn train_eval_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), CONFIG).unwrap();
    ok(&["train", "--config", "cfg.json", "--out", "run"], d);
    for f in ["config.json", "report.json", "timing.json", "seed0-n140/model.ckpt", "seed1-n140/history.json"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    assert!(!d.join("run/sweep.csv").exists());

    ok(&["gmm", "generate", "--group", "C2", "--n-g", "2", "--spec-seed", "1", "--seed", "9", "--n", "120", "--out", "test"], d);
    ok(&["eval", "--run", "run", "--data", "test", "--out", "eval.json"], d);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        assert_eq!(r["n_test"], 120);
        assert!(r["invariance_error"].as_f64().unwrap() <= 1e-10);
    }

    fs::write(d.join("xs.csv"), "x\n0.5\n-0.5\n2\n").unwrap();
    ok(&["infer", "regress", "--run", "run", "--x-file", "xs.csv", "--out", "z.csv", "--seed", "1"], d);
    let (header, z) = csv_rows(&d.join("z.csv"));
    assert_eq!(header, ["zhat_0"]);
    assert_eq!(z.len(), 3);
    // the C2 action flips both x and y
    assert!((z[0][0] + z[1][0]).abs() < 1e-10);

    ok(&["infer", "quantile", "--run", "run", "--x-file", "xs.csv", "--alpha", "0.1,0.9", "--out", "q.csv"], d);
    let (header, q) = csv_rows(&d.join("q.csv"));
    assert_eq!(header, ["y0_q0.1", "y0_q0.1_out_of_range", "y0_q0.9", "y0_q0.9_out_of_range"]);
    for row in &q {
        assert!(row[0] <= row[2]);
    }
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), CONFIG).unwrap();
    ok(&["sweep", "--config", "cfg.json", "--out", "sw"], d);
    let text = fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);

    let no_sweep = CONFIG.replace(",\n \"sweep\":{\"train_sizes\":[50,100]}", "");
    fs::write(d.join("plain.json"), no_sweep).unwrap();
    let out = encp(&["sweep", "--config", "plain.json", "--out", "sw2"], d);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), CONFIG.replace(r#""epochs":2"#, r#""epochs":"two""#)).unwrap();
    let out = encp(&["train", "--config", "bad.json", "--out", "run"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.epochs"), "{err}");

    fs::write(d.join("bad2.json"), CONFIG.replace(r#""r":4"#, r#""r":3"#)).unwrap();
    let out = encp(&["train", "--config", "bad2.json", "--out", "run"], d);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.r"));
}
