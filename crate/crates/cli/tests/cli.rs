use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn magec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = magec(args);
    assert!(
        out.status.success(),
        "magec {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, nodes: usize, seed: u64) -> String {
    let path = dir.join(name);
    ok(&["graph", "generate", "--nodes", &nodes.to_string(), "--seed", &seed.to_string(), "--out", p(&path)]);
    path.to_str().unwrap().to_string()
}

const TINY: &str = "episode_len = 50\nenvs = 2\nepochs = 1\nminibatches = 2\nlayers = 2\nhidden = 8\ncritic_hidden = 8\n";

fn tiny_train(dir: &Path, graph: &str, out: &str) {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    ok(&[
        "train", "--graph", graph, "--out", out, "--agents", "2", "--total-steps", "300", "--config", p(&cfg),
        "--checkpoint-every", "2",
    ]);
}

#[test]
fn generate_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.graph", 8, 1);
    let b = generate(dir.path(), "b.graph", 8, 1);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = generate(dir.path(), "c.graph", 8, 2);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let out = ok(&["graph", "validate", &a]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("8 nodes"));
}

#[test]
fn validate_rejects_bad_graph() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.graph");
    fs::write(&path, "nodes 3\nnode 0 0 0\nnode 1 1 0\nnode 2 5 5\nedges 1\nedge 0 1\n").unwrap();
    let out = magec(&["graph", "validate", p(&path)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("disconnected"));
}

#[test]
fn magec_evaluation_requires_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(dir.path(), "g.graph", 6, 3);
    let out = magec(&["evaluate", "--graph", &g, "--policy", "magec", "--out", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_policy_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(dir.path(), "g.graph", 6, 3);
    let out = magec(&["evaluate", "--graph", &g, "--policy", "oracle", "--out", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
}

#[test]
fn train_on_one_graph_evaluate_on_another() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.graph", 7, 1);
    let b = generate(dir.path(), "b.graph", 13, 2);
    let run = dir.path().join("run");
    tiny_train(dir.path(), &a, p(&run));
    for f in ["actor.ckpt", "critic.ckpt", "policy-info.txt", "train_metrics.csv", "train.cfg"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("train_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert_eq!(fs::read_dir(run.join("checkpoints")).unwrap().count(), 1);

    let eval = dir.path().join("eval");
    ok(&[
        "evaluate", "--graph", &b, "--policy", "magec", "--checkpoint", p(&run), "--agents", "5", "--horizon", "60",
        "--repeats", "2", "--obs-radius", "10", "--comm-success", "0.5", "--attrition", "20:1,40:3", "--out", p(&eval),
    ]);
    for f in ["metrics_run0.csv", "metrics_run1.csv", "metrics_mean.csv", "summary.json", "plot.svg"] {
        assert!(eval.join(f).is_file(), "missing {f}");
    }
    let run0 = fs::read_to_string(eval.join("metrics_run0.csv")).unwrap();
    assert_eq!(run0.lines().count(), 1 + 60);
    let summary = fs::read_to_string(eval.join("summary.json")).unwrap();
    assert!(summary.contains("\"magec\""));
}

#[test]
fn repeated_commands_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(dir.path(), "g.graph", 8, 4);
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    tiny_train(dir.path(), &g, p(&r1));
    tiny_train(dir.path(), &g, p(&r2));
    for f in ["actor.ckpt", "critic.ckpt", "train_metrics.csv"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f} differs");
    }
    let eval = |out: &Path| {
        ok(&[
            "evaluate", "--graph", &g, "--checkpoint", p(&r1.join("actor.ckpt")), "--agents", "3", "--horizon", "80",
            "--seeds", "5,6", "--obs-radius", "6", "--comm-success", "0.3", "--out", p(out),
        ]);
    };
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    eval(&e1);
    eval(&e2);
    for f in ["metrics_run0.csv", "metrics_run1.csv", "metrics_mean.csv", "summary.json", "plot.svg"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn compare_sorts_and_checks_horizons() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(dir.path(), "g.graph", 9, 5);
    let eval = |policy: &str, horizon: &str, out: &str| {
        ok(&[
            "evaluate", "--graph", &g, "--policy", policy, "--agents", "2", "--horizon", horizon, "--repeats", "2",
            "--out", p(&dir.path().join(out)),
        ]);
    };
    eval("random", "150", "random");
    eval("greedy", "150", "greedy");
    eval("greedy", "90", "short");
    let cmp = dir.path().join("cmp");
    let out = ok(&[
        "compare",
        &format!("rw={}", p(&dir.path().join("random"))),
        p(&dir.path().join("greedy")),
        "--out",
        p(&cmp),
    ]);
    assert!(!out.stdout.is_empty());
    let table = fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    let score = |r: &str| r.split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!(score(rows[0]) <= score(rows[1]));
    assert!(rows.iter().any(|r| r.starts_with("rw,")));
    assert!(cmp.join("comparison.svg").is_file());

    let out = magec(&[
        "compare",
        p(&dir.path().join("random")),
        p(&dir.path().join("short")),
        "--out",
        p(&dir.path().join("bad")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("random") && err.contains("short"), "{err}");
}
