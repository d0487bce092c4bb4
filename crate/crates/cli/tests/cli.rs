use std::path::Path;
use std::process::{Command, Output};

fn omsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omsd")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn verify_prop1_prints_the_closed_form() {
    let out = omsd(&["verify-prop1", "--n", "4"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "4");
    assert_eq!(fields[1].parse::<f64>().unwrap(), 0.875);
    assert!((fields[2].parse::<f64>().unwrap() - 0.875).abs() < 1e-12);
}

#[test]
fn missing_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = omsd(&["pipeline", "--config", p(&dir.path().join("absent.json"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn corrupted_dataset_exits_with_format_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.omsd");
    assert_eq!(code(&omsd(&["gen-data", "--env", "mode-bandit", "--n", "100", "--out", p(&data)])), 0);
    let mut bytes = std::fs::read(&data).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&data, bytes).unwrap();
    let out = omsd(&["train-critic", "--data", p(&data), "--out", p(&dir.path().join("c"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn small_bandit_flow_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("bandit.omsd");
    let art = d.join("art");
    let critic_cfg = d.join("critic.json");
    let diff_cfg = d.join("diffusion.json");
    let ext_cfg = d.join("extract.json");
    let run_dir = d.join("run");
    let report = d.join("report.csv");
    let log = d.join("run/trainlog.csv");
    let pca = d.join("pca");
    std::fs::write(&critic_cfg, r#"{"hidden":[16],"batch_size":64,"steps_per_epoch":50,"epochs":2}"#).unwrap();
    std::fs::write(&diff_cfg, r#"{"hidden":[16],"steps":200,"batch_size":64}"#).unwrap();
    std::fs::write(&ext_cfg, r#"{"hidden":[16],"steps":100,"batch_size":16,"eval_interval":50,"eval_episodes":1}"#).unwrap();
    let runs: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--env", "bandit", "--n", "2000", "--seed", "3", "--out", p(&data)],
        vec!["train-critic", "--data", p(&data), "--config", p(&critic_cfg), "--out", p(&art)],
        vec!["train-diffusion", "--data", p(&data), "--kind", "joint", "--config", p(&diff_cfg), "--out", p(&art)],
        vec![
            "extract", "--data", p(&data), "--artifacts", p(&art), "--algorithm", "brpo_jal", "--config", p(&ext_cfg),
            "--critic-config", p(&critic_cfg), "--out", p(&run_dir),
        ],
        vec!["evaluate", "--data", p(&data), "--actors", p(&run_dir), "--episodes", "5", "--out", p(&report)],
        vec!["viz", "--data", p(&data), "--log", p(&log), "--points", "200", "--out", p(&pca)],
    ];
    for args in &runs {
        let out = omsd(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["run/final_actor0.ckpt", "run/trainlog.csv", "report.csv", "pca.svg", "pca.csv"] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let missing = omsd(&["extract", "--data", p(&data), "--artifacts", p(&art), "--algorithm", "omsd", "--out", p(&d.join("x"))]);
    assert_eq!(code(&missing), 2);
}
