use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"seed = 3
[task]
count = 400
[field]
hidden = 8
blocks = 1
[pretrain]
steps = 20
batch_size = 32
[annotate]
records = 300
[align]
steps = 5
k = 4
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn diffalign(args: &[&str], config: Option<&Path>, out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffalign"));
    cmd.args(args).env_remove("DIFFALIGN_OUT");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    cmd.output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_writes_the_documented_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let run = tmp.path().join("run");
    ok(&diffalign(&["pretrain"], Some(&cfg), Some(&run)));
    for f in ["behavior.ckpt", "pretrain_metrics.csv", "config.snapshot", "dataset.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("pretrain_metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss\n"));
    assert_eq!(metrics.lines().count(), 21);

    ok(&diffalign(&["annotate"], Some(&cfg), Some(&run)));
    ok(&diffalign(&["finetune", "--fraction", "0.01"], Some(&cfg), Some(&run)));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("finetune_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["total_records"], 300);
    assert_eq!(summary["used_records"], 3);

    ok(&diffalign(&["grid", "--field", "behavior", "--t", "0.0"], Some(&cfg), Some(&run)));
    let csv = std::fs::read_to_string(run.join("grid_behavior.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 64);
    assert!(rows.iter().all(|r| r.split(',').count() == 64));
    let pgm = std::fs::read(run.join("grid_behavior.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    ok(&diffalign(&["grid", "--field", "target"], Some(&cfg), Some(&run)));
}

#[test]
fn sampling_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let run = tmp.path().join("run");
    ok(&diffalign(&["pretrain"], Some(&cfg), Some(&run)));
    let args = ["sample", "--field", "behavior", "--n", "1", "--seed", "7"];
    let a = diffalign(&args, Some(&cfg), Some(&run));
    let b = diffalign(&args, Some(&cfg), Some(&run));
    ok(&a);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).lines().count(), 1);
    let c = diffalign(&["sample", "--field", "behavior", "--n", "1", "--seed", "8"], Some(&cfg), Some(&run));
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn missing_dataset_exits_2_with_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("dataset = \"/no/such/file.csv\"\n{TINY}"));
    let o = diffalign(&["pretrain"], Some(&cfg), Some(&tmp.path().join("run")));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/file.csv"));
}

#[test]
fn bad_configs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[align]\nbeta = -1.0\n");
    assert_eq!(diffalign(&["pretrain"], Some(&cfg), Some(tmp.path())).status.code(), Some(2));
    let cfg = write_config(tmp.path(), TINY);
    let o = diffalign(&["finetune", "--fraction", "1.5"], Some(&cfg), Some(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn architecture_mismatch_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let run = tmp.path().join("run");
    ok(&diffalign(&["pretrain"], Some(&cfg), Some(&run)));
    ok(&diffalign(&["annotate"], Some(&cfg), Some(&run)));
    let wider = write_config(tmp.path(), &TINY.replace("hidden = 8", "hidden = 16"));
    let o = diffalign(&["finetune"], Some(&wider), Some(&run));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn output_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let env_dir = tmp.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_diffalign"))
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .env("DIFFALIGN_OUT", &env_dir)
        .output()
        .unwrap();
    ok(&o);
    assert!(env_dir.join("behavior.ckpt").exists());
}

#[test]
fn verify_prints_margins_and_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = diffalign(&["verify", "--suite", "all"], None, Some(tmp.path()));
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("margin"));
    assert!(!text.contains("FAIL"));
    assert!(text.lines().filter(|l| l.ends_with("PASS")).count() >= 10);
    let csv = std::fs::read_to_string(tmp.path().join("verify.csv")).unwrap();
    assert!(csv.starts_with("check,value,threshold,bound,margin,pass"));
}
