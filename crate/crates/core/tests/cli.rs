use std::path::Path;
use std::process::Command;

fn run(args: &[&str], config: Option<&str>, dir: &Path) -> (i32, String, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_siamese-servo"));
    if let Some(c) = config {
        let p = dir.join(format!("config-{}.json", args[0]));
        std::fs::write(&p, c).unwrap();
        cmd.arg("--config").arg(p);
    }
    let out = cmd.args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into(), String::from_utf8_lossy(&out.stderr).into())
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn tolerance_runs_with_embedded_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tol");
    let (code, stdout, _) = run(&["tolerance", "--out", out.to_str().unwrap()], None, dir.path());
    assert_eq!(code, 0);
    assert!(stdout.contains("reproduced 80/80 cells; monotone frontier: true"), "{stdout}");
    let j: serde_json::Value = serde_json::from_str(&read(out.join("tolerance.json"))).unwrap();
    assert_eq!(j["fit"]["misclassified"], 0);
    assert_eq!(read(out.join("tolerance.txt")), stdout);
}

#[test]
fn custom_tolerance_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"tolerance": {"grid": {"theta_deg": [0, 1], "offset_mm": [0.2, 0.4], "pass": [[true, true], [true, false]]}}}"#;
    let (code, stdout, _) = run(&["tolerance", "--out", dir.path().join("t").to_str().unwrap()], Some(cfg), dir.path());
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("reproduced 4/4"));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["tolerance"], Some(r#"{"tolerence": {}}"#), dir.path());
    assert_eq!(code, 1, "{err}");
    let out = dir.path().join("bad");
    let (code, _, _) = run(&["generate", "--out", out.to_str().unwrap()], Some(r#"{"generate": {"connectors": ["Q7"]}}"#), dir.path());
    assert_eq!(code, 1);
    assert!(!out.exists());
    let (code, _, _) = run(&["eval", "--out", dir.path().join("e").to_str().unwrap()], Some(r#"{"eval": {"dataset": "/nonexistent"}}"#), dir.path());
    assert_eq!(code, 1);
    let (code, _, _) = run(&["bogus"], None, dir.path());
    assert_eq!(code, 1);
}

#[test]
fn generate_train_resume_eval_servo() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let gen = r#"{"generate": {"samples_per_connector": 40, "val_size": 5, "test_size": 5}}"#;
    let (code, stdout, err) = run(&["generate", "--seed", "3", "--out", data.to_str().unwrap()], Some(gen), d);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("A1: 40 samples, train 30 / val 5 / test 5"), "{stdout}");
    assert_eq!(read(data.join("A1/labels.jsonl")).lines().count(), 40);
    // refuses to overwrite
    let (code, _, _) = run(&["generate", "--out", data.to_str().unwrap()], Some(gen), d);
    assert_eq!(code, 1);

    let train = format!(r#"{{"train": {{"dataset": "{}", "config": {{"epochs": 1, "pairs_per_epoch": 64, "halving_epochs": []}}}}}}"#, data.display());
    let run_dir = d.join("run");
    let (code, _, err) = run(&["train", "--seed", "5", "--out", run_dir.to_str().unwrap()], Some(&train), d);
    assert_eq!(code, 0, "{err}");
    assert!(run_dir.join("last.ckpt").is_file() && run_dir.join("best.ckpt").is_file());
    let csv = read(run_dir.join("metrics.csv"));
    assert!(csv.starts_with("epoch,learning_rate,train_loss,val_loss,e_x,e_y,e_z,e_roll,e_pitch,e_yaw\n"));
    assert_eq!(csv.lines().count(), 2);

    let resume = train.replace(r#""epochs": 1"#, r#""epochs": 2"#).replace(r#""halving_epochs": []}"#, r#""halving_epochs": []}, "resume": true"#);
    let (code, stdout, err) = run(&["train", "--seed", "5", "--out", run_dir.to_str().unwrap()], Some(&resume), d);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("trained epochs 2..2"), "{stdout}");
    let csv = read(run_dir.join("metrics.csv"));
    assert_eq!(csv.lines().nth(2).unwrap().split(',').next(), Some("2"));

    let eval = format!(r#"{{"eval": {{"dataset": "{}", "checkpoint": "{}"}}}}"#, data.display(), run_dir.join("best.ckpt").display());
    let (code, stdout, err) = run(&["eval", "--out", d.join("eval").to_str().unwrap()], Some(&eval), d);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("identity"));
    let rows = read(d.join("eval/eval_errors.csv"));
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.lines().nth(1).unwrap().starts_with("A1,model,25,"));
    let curves = read(d.join("eval/pass_fraction.csv"));
    assert_eq!(curves.lines().count(), 1 + 6 * 31);

    let perfect = format!(r#"{{"eval": {{"dataset": "{}", "perfect_model": true}}}}"#, data.display());
    let (code, stdout, _) = run(&["eval", "--out", d.join("eval0").to_str().unwrap()], Some(&perfect), d);
    assert_eq!(code, 0);
    let row = stdout.lines().find(|l| l.contains("perfect")).unwrap();
    let cells: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cells[..3], ["A1", "perfect", "25"]);
    assert!(cells[3..].iter().all(|c| *c == "0.0000"), "{row}");

    let servo = format!(r#"{{"servo": {{"checkpoint": "{}", "trials": 3}}}}"#, run_dir.join("best.ckpt").display());
    let (code, stdout, err) = run(&["servo", "--out", d.join("servo").to_str().unwrap()], Some(&servo), d);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("Overall"));
}

#[test]
fn perfect_servo_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let one = r#"{"servo": {"perfect_model": true, "trials": 6, "connectors": ["A1", "B3"]}}"#;
    let (code, stdout, err) = run(&["servo", "--out", d.join("one").to_str().unwrap()], Some(one), d);
    assert_eq!(code, 0, "{err}");
    let row: Vec<&str> = stdout.lines().find(|l| l.starts_with("Overall")).unwrap().split_whitespace().collect();
    assert_eq!(row, ["Overall", "12", "12", "100.0"]);
    let iter = r#"{"servo": {"perfect_model": true, "mode": "iterative", "trials": 4, "range_scale": 3.0}}"#;
    let out = d.join("iter");
    let (code, stdout, err) = run(&["servo", "--seed", "9", "--out", out.to_str().unwrap()], Some(iter), d);
    assert_eq!(code, 0, "{err}");
    for vis in ["100%", "50%", "30%"] {
        assert!(stdout.lines().any(|l| l.contains(&format!(" {vis} "))), "{stdout}");
    }
    let logs: Vec<_> = std::fs::read_dir(out.join("episodes")).unwrap().collect();
    assert_eq!(logs.len(), 12);
    let line = read(out.join("episodes/A1_vis030_trial000.jsonl"));
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["iter", "pose", "predicted_delta", "true_error"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    // same seed, same bytes
    let again = d.join("iter2");
    run(&["servo", "--seed", "9", "--out", again.to_str().unwrap()], Some(iter), d);
    for f in ["servo_summary.csv", "servo_trials.csv", "servo_summary.txt", "servo_config.json"] {
        assert_eq!(read(out.join(f)), read(again.join(f)), "{f}");
    }
}
