use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn gap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gap"))
        .args(args)
        .env_remove("GAP_SEED")
        .output()
        .expect("spawn gap")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn tiny(kind: &str, shots: usize, iterations: usize) -> String {
    format!(
        r#"{{"kind": "{kind}", "shots": {shots}, "iterations": {iterations}, "batch_size": 2,
            "layer_sizes": [1, 8, 8, 1], "k_train": 1, "k_test": 2, "log_every": 2, "eval_query": 20}}"#
    )
}

fn train(dir: &Path, name: &str, config: &str) -> String {
    let cfg = write_config(dir, &format!("{name}.json"), config);
    let out = dir.join(name);
    let o = gap(&["train", "--quiet", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.to_str().unwrap().to_owned()
}

#[test]
fn train_then_eval_writes_run_files() {
    let dir = TempDir::new().unwrap();
    let run = train(dir.path(), "gap", &tiny("gap", 5, 4));
    for f in ["config.json", "losses.csv", "state.bin"] {
        assert!(Path::new(&run).join(f).exists(), "{f}");
    }
    let o = gap(&["eval", "--run", &run, "--n-tasks", "10", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,shots,mean_mse,ci95"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], &["GAP", "5"]);
    assert!(row[2].parse::<f64>().unwrap() >= 0.0);
    let eval = fs::read_to_string(Path::new(&run).join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 11);
}

#[test]
fn rerun_gives_identical_losses() {
    let dir = TempDir::new().unwrap();
    let a = train(dir.path(), "a", &tiny("meta_sgd", 5, 6));
    let b = train(dir.path(), "b", &tiny("meta_sgd", 5, 6));
    for f in ["losses.csv", "state.bin"] {
        assert_eq!(fs::read(Path::new(&a).join(f)).unwrap(), fs::read(Path::new(&b).join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gap_seed_overrides_config_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("identity", 5, 2));
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_gap"))
            .args(["train", "--quiet", "--config", &cfg, "--out", out.to_str().unwrap()])
            .env("GAP_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read(out.join("state.bin")).unwrap()
    };
    assert_ne!(run("1", "s1"), run("2", "s2"));
    let saved = fs::read_to_string(dir.path().join("s1/config.json")).unwrap();
    assert!(saved.contains("\"seed\": 1"));
}

#[test]
fn zero_iterations_saves_the_initialisation() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("gap", 5, 50));
    let out = dir.path().join("run");
    let o = gap(&["train", "--quiet", "--config", &cfg, "--out", out.to_str().unwrap(), "--iterations", "0"]);
    assert!(o.status.success());
    let losses = fs::read_to_string(out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1);
    assert!(out.join("state.bin").exists());
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = TempDir::new().unwrap();
    for (body, field) in [
        (r#"{"alpha": -1.0}"#, "alpha"),
        (r#"{"shots": 0}"#, "shots"),
        (r#"{"learning_rate": 0.1}"#, "learning_rate"),
        (r#"{"kind": "adagrad"}"#, "kind"),
    ] {
        let cfg = write_config(dir.path(), "bad.json", body);
        let o = gap(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
        assert!(String::from_utf8_lossy(&o.stderr).contains(field), "{body}");
    }
    let o = gap(&["train", "--config", dir.path().join("none.json").to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_3() {
    let dir = TempDir::new().unwrap();
    let body = r#"{"kind": "identity", "iterations": 5, "alpha": 1e200, "layer_sizes": [1, 8, 1]}"#;
    let cfg = write_config(dir.path(), "c.json", body);
    let o = gap(&["train", "--quiet", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_or_corrupt_state_exits_4() {
    let dir = TempDir::new().unwrap();
    let o = gap(&["eval", "--run", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let run = train(dir.path(), "r", &tiny("gap", 5, 2));
    let state = Path::new(&run).join("state.bin");
    let bytes = fs::read(&state).unwrap();
    fs::write(&state, &bytes[..bytes.len() / 2]).unwrap();
    let o = gap(&["eval", "--run", &run, "--n-tasks", "4"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn table_orders_rows_and_fills_missing_cells() {
    let o = gap(&["table", "--format", "csv"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "method,5-shot,10-shot,20-shot\n");

    let dir = TempDir::new().unwrap();
    let gap5 = train(dir.path(), "gap5", &tiny("gap", 5, 2));
    let maml10 = train(dir.path(), "maml10", &tiny("identity", 10, 2));
    let sgd5 = train(dir.path(), "sgd5", &tiny("meta_sgd", 5, 2));
    for run in [&gap5, &maml10] {
        assert!(gap(&["eval", "--run", run, "--n-tasks", "6"]).status.success());
    }
    let o = gap(&["table", "--format", "csv", &gap5, &sgd5, &maml10]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("MAML,N/A,") && lines[1].ends_with(",N/A"));
    assert_eq!(lines[2], "Meta-SGD,N/A,N/A,N/A");
    assert!(lines[3].starts_with("GAP,") && lines[3].contains('±') && lines[3].ends_with(",N/A,N/A"));

    let md = stdout(&gap(&["table", &gap5]));
    assert!(md.starts_with("| Method | 5-shot | 10-shot | 20-shot |\n|---|---|---|---|\n| GAP |"));
}

#[test]
fn verify_reports_and_sets_exit_code() {
    let o = gap(&["verify", "--suite", "pd", "--trials", "30"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.lines().count() >= 3);
    assert!(text.lines().all(|l| l.ends_with("PASS")));

    let o = gap(&["verify", "--suite", "unknown"]);
    assert_eq!(o.status.code(), Some(2));

    let o = gap(&["verify", "--suite", "variance", "--trials", "10"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_exits_1_when_a_check_fails() {
    let o = gap(&["verify", "--suite", "cosine", "--n-grid", "64,16", "--trials", "20"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().next().unwrap().ends_with("FAIL"));
}

#[test]
fn fig3_writes_the_cosine_curve() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("fig3/curve.csv");
    let o = gap(&["fig3", "--m", "4", "--n-grid", "16,256", "--trials", "20", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,mean_abs_cos,analytic_ref");
    let parse = |l: &str| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>();
    let (a, b) = (parse(lines[1]), parse(lines[2]));
    assert!(b[1] < a[1]);
    assert!((a[2] - (2.0 / (std::f64::consts::PI * 16.0)).sqrt()).abs() < 1e-12);
    assert_eq!(gap(&["fig3", "--m", "1", "--out", "x.csv"]).status.code(), Some(2));
}
