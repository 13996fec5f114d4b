use std::path::Path;
use std::process::{Command, Output};

fn flowleak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowleak")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let text = format!(
        r#"name = "cli"
seed = 2
out_dir = "{}"

[data]
classes = 4
clients = 2
client_size = 8
eval_size = 8

[model]
kind = "mlp"
hidden = [8]

[fl]
epochs = 1
batch_size = 4
round = 1

[target]
epochs = 1

[flow]
steps = 20
hidden = [16]
train_size = 32

[attack]
max_iters = 5

[sweep]
lambdas = [0.0, 1.4e-5]
"#,
        dir.display()
    );
    let path = dir.join("cli.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn every_subcommand_runs_on_a_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("cli");

    ok(&flowleak(&["gen-data", "--config", &cfg]));
    assert!(run.join("data/seed-2/target").is_dir());

    ok(&flowleak(&["train-fl", "--config", &cfg]));
    assert!(run.join("seed-2/fl-none.csv").exists());

    ok(&flowleak(&["train-flow", "--config", &cfg]));
    assert!(run.join("flow.json").exists());

    ok(&flowleak(&["probe-flow", "--config", &cfg]));
    let msf = std::fs::read_to_string(run.join("msf.csv")).unwrap();
    assert!(msf.lines().count() > 1);

    let out = ok(&flowleak(&["attack", "--config", &cfg]));
    assert_eq!(out.lines().filter(|l| l.starts_with("seed 2 ")).count(), 2);

    let out = ok(&flowleak(&["sweep", "--config", &cfg, "--seed", "5"]));
    assert!(out.lines().any(|l| l.starts_with("seed 5 ")));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    ok(&flowleak(&["report", "--config", &cfg, "--seed", "5"]));
    assert!(run.join("summary.csv").exists());
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "name = \"x\"\nseed = 1\nbogus = 3\n").unwrap();
    let out = flowleak(&["sweep", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
