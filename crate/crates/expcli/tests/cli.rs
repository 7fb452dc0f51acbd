use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const BASE: &str = r#"
seed = 5
rounds = 6
clients_per_round = 4
server_lr = 1.0
eval_every = 2
backend = "parallel:3"

[dataset]
source = "synthetic"
num_clients = 12
sizes = { kind = "log_normal", mu = 2.0, sigma = 0.5 }
task = { kind = "classification", num_features = 3, num_classes = 3, alpha = 0.5 }

[model]
kind = "mlp"
layer_sizes = [3, 5, 3]
activation = "tanh"

[client]
batch_size = 4
num_epochs = 2
lr = 0.1

[bench]
cohort_sizes = [1, 4]
backends = ["sequential", "parallel:2"]
warmup_rounds = 0
measured_rounds = 2
"#;

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "exp.toml", BASE);
    for out in ["a", "b"] {
        let o = fedsim(&["run", "--config", "exp.toml", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "final_params.json", "metrics.dat"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let csv = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("round,train_loss,eval_accuracy,eval_cross_entropy"));
    assert_eq!(fs::read_to_string(dir.path().join("a/timing.csv")).unwrap().lines().count(), 7);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "exp.toml", BASE);
    assert!(fedsim(&["run", "--config", "exp.toml", "--out", "a", "--seed", "9"], dir.path()).status.success());
    let o = fedsim(&["run", "--config", "a/config.resolved.toml", "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(dir.path().join("a/metrics.csv")).unwrap(),
        fs::read(dir.path().join("b/metrics.csv")).unwrap()
    );
}

#[test]
fn eval_cadence_beyond_rounds_leaves_eval_empty() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "exp.toml", &BASE.replace("eval_every = 2", "eval_every = 100"));
    assert!(fedsim(&["run", "--config", "exp.toml", "--out", "o"], dir.path()).status.success());
    let csv = fs::read_to_string(dir.path().join("o/metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",,"), "{line}");
    }
}

#[test]
fn bad_config_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "exp.toml", &BASE.replace("batch_size = 4", "batch_size = 0"));
    let o = fedsim(&["run", "--config", "exp.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("client.batch_size"));

    write(dir.path(), "typo.toml", &BASE.replace("lr = 0.1", "lr = 0.1\nmomentum = 0.9"));
    let o = fedsim(&["run", "--config", "typo.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));

    assert_eq!(fedsim(&["run"], dir.path()).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
seed = 1
rounds = 50
clients_per_round = 2
server_lr = 1.0

[dataset]
source = "synthetic"
num_clients = 4
sizes = { kind = "fixed", n = 10 }
task = { kind = "linear", num_features = 4 }

[model]
kind = "linear"
num_features = 4

[client]
batch_size = 2
num_epochs = 3
lr = 1000.0
"#;
    write(dir.path(), "exp.toml", cfg);
    let o = fedsim(&["run", "--config", "exp.toml"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_then_inspect_and_train_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"
num_clients = 30
sizes = { kind = "log_normal", mu = 2.5, sigma = 0.8 }
task = { kind = "linear", num_features = 2, noise = 0.1 }
"#;
    write(dir.path(), "gen.toml", spec);
    assert_eq!(fedsim(&["generate", "--config", "gen.toml", "--out", "x.fds"], dir.path()).status.code(), Some(2));
    for f in ["a.fds", "b.fds"] {
        let o = fedsim(&["generate", "--config", "gen.toml", "--out", f, "--seed", "4"], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(dir.path().join("a.fds")).unwrap(), fs::read(dir.path().join("b.fds")).unwrap());

    let o = fedsim(&["inspect", "--data", "a.fds"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("num_examples,num_clients"));
    let clients: usize = lines.map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(clients, 30);

    let exp = r#"
seed = 2
rounds = 20
clients_per_round = 5
server_lr = 1.0

[dataset]
source = "file"
path = "a.fds"

[model]
kind = "linear"
num_features = 2

[client]
batch_size = 5
lr = 0.05
"#;
    write(dir.path(), "exp.toml", exp);
    let o = fedsim(&["run", "--config", "exp.toml", "--out", "r"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = fedsim(&["eval", "--config", "exp.toml", "--out", "r", "--params", "r/final_params.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = fs::read_to_string(dir.path().join("r/eval.csv")).unwrap();
    assert!(eval.lines().next().unwrap().contains("mse"));
}

#[test]
fn bench_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "exp.toml", BASE);
    let o = fedsim(&["bench", "--config", "exp.toml", "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let dat = fs::read_to_string(dir.path().join("b/bench.dat")).unwrap();
    assert_eq!(dat.matches("# backend").count(), 2);
}
