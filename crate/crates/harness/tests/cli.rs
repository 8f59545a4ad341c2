use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcnet::nn::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes MNIST-format files where class k is a bright bar at one of ten positions.
fn write_synthetic_mnist(dir: &Path, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let mut images = vec![0, 0, 8, 3];
        for v in [n as u32, 28, 28] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        let mut labels = vec![0, 0, 8, 1];
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            let label = (i * 7 + rng.random_range(0..10)) % 10;
            let (oy, ox) = (4 + label / 5 * 12, 2 + label % 5 * 5);
            for y in 0..28 {
                for x in 0..28 {
                    let on = (oy..oy + 8).contains(&y) && (ox..ox + 5).contains(&x);
                    images.push(if on { 230 } else { rng.random_range(0..50) });
                }
            }
            labels.push(label as u8);
        }
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
    }
}

fn write_config(path: &Path, data: &Path, model: &str, steps: usize) {
    let text = format!(
        r#"
[data]
path = "{}"

[model]
preset = "custom"
layers = ["conv4", "pool", "conv8", "pool"]
{model}

[train]
batch_size = 16
total_steps = {steps}
lr = 0.01
lr_schedule = "constant"
log_every = 10
eval_examples = 40
eval_batch_size = 20

[attack]
examples = 40
"#,
        data.display()
    );
    fs::write(path, text).unwrap();
}

fn dcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcnet"))
        .args(args)
        .env("DCNET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

struct Fixture {
    _root: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture(model: &str, steps: usize) -> Fixture {
    let root = tempfile::tempdir().unwrap();
    let path = root.path().to_path_buf();
    write_synthetic_mnist(&path.join("mnist"), 200, 40);
    let config = path.join("config.toml");
    write_config(&config, &path.join("mnist"), model, steps);
    Fixture {
        _root: root,
        root: path,
        config,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_attack_and_export() {
    let f = fixture("", 40);
    let run = f.root.join("run");
    let out = ok(&dcnet(&[
        "train",
        "--config",
        s(&f.config),
        "--out",
        s(&run),
        "--seed",
        "4",
    ]));
    assert!(out.contains("test accuracy"));
    for file in [
        "metrics.csv",
        "timing.csv",
        "final.ckpt",
        "summary.json",
        "config.toml",
    ] {
        assert!(run.join(file).exists(), "missing {file}");
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert!(summary["test_acc"].as_f64().unwrap() > 0.5, "{summary}");

    let eval = ok(&dcnet(&[
        "eval",
        "--config",
        s(&f.config),
        "--out",
        s(&run),
    ]));
    let acc = format!("{:.4}", summary["test_acc"].as_f64().unwrap());
    assert!(eval.contains(&acc), "{eval} vs {acc}");

    let attack = ok(&dcnet(&[
        "attack",
        "--config",
        s(&f.config),
        "--out",
        s(&run),
    ]));
    assert!(attack.starts_with("attack,epsilon,tau,iterations,examples,accuracy,max_linf\nnone,"));
    let rows: Vec<Vec<String>> = attack
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    let acc_of = |i: usize| rows[i][5].parse::<f64>().unwrap();
    assert!(acc_of(2) <= acc_of(1) + 1e-12, "{attack}");
    for row in &rows[1..] {
        assert!(row[6].parse::<f64>().unwrap() <= 8.0 / 255.0);
    }
    assert_eq!(fs::read_to_string(run.join("attack.csv")).unwrap(), attack);

    let long = f.root.join("long.csv");
    ok(&dcnet(&["export-csv", s(&run), "--out", s(&long)]));
    let text = fs::read_to_string(&long).unwrap();
    assert!(text.starts_with("run,step,metric,value\nrun,10,train_loss,"));
    // 4 rows of 4 scalar metrics, 3 kernel norms and 2 radii.
    assert_eq!(text.lines().count(), 1 + 4 * 9);
}

#[test]
fn same_seed_gives_identical_metrics_and_different_seed_does_not() {
    let f = fixture("", 20);
    let runs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| f.root.join(n)).collect();
    for (run, seed) in runs.iter().zip(["1", "1", "2"]) {
        ok(&dcnet(&[
            "train",
            "--config",
            s(&f.config),
            "--out",
            s(run),
            "--seed",
            seed,
        ]));
    }
    let read = |p: &PathBuf| fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&runs[0]), read(&runs[1]));
    assert_ne!(read(&runs[0]), read(&runs[2]));
}

#[test]
fn adv_train_writes_a_run() {
    let f = fixture("", 10);
    let run = f.root.join("adv");
    ok(&dcnet(&[
        "adv-train",
        "--config",
        s(&f.config),
        "--out",
        s(&run),
    ]));
    assert!(run.join("final.ckpt").exists());
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn gradcheck_reports_every_group() {
    let f = fixture("magnitude = \"sphere\"\nangular = \"cosine\"", 0);
    let out = ok(&dcnet(&["gradcheck", "--config", s(&f.config)]));
    assert!(out.contains("operator points"));
    assert!(out.contains("input"));
    assert!(out.trim_end().ends_with("(tolerance 1e-4)"));
    assert!(out.contains("PASS"));
}

#[test]
fn bad_configs_fail_cleanly() {
    let f = fixture("", 10);
    fs::write(&f.config, "[train]\nbatch_size = 0\n").unwrap();
    let out = dcnet(&["train", "--config", s(&f.config)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch sizes"));

    fs::write(&f.config, "[train]\nbatchsize = 4\n").unwrap();
    let out = dcnet(&["train", "--config", s(&f.config)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));

    let out = dcnet(&["eval", "--init", s(&f.root.join("missing.ckpt"))]);
    assert!(!out.status.success());
}

#[test]
fn missing_dataset_is_reported() {
    let f = fixture("", 10);
    fs::remove_file(f.root.join("mnist/train-images-idx3-ubyte")).unwrap();
    let out = dcnet(&[
        "train",
        "--config",
        s(&f.config),
        "--out",
        s(&f.root.join("r")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-images-idx3-ubyte"));
}

#[test]
fn standard_checkpoint_initializes_decoupled_directions() {
    let f = fixture("operator = \"standard\"", 10);
    let source = f.root.join("standard");
    ok(&dcnet(&[
        "train",
        "--config",
        s(&f.config),
        "--out",
        s(&source),
    ]));

    write_config(&f.config, &f.root.join("mnist"), "magnitude = \"tanh\"", 0);
    let target = f.root.join("decoupled");
    let ckpt = source.join("final.ckpt");
    ok(&dcnet(&[
        "train",
        "--config",
        s(&f.config),
        "--out",
        s(&target),
        "--init",
        s(&ckpt),
    ]));

    let src = Checkpoint::load(&ckpt).unwrap();
    let dst = Checkpoint::load(&target.join("final.ckpt")).unwrap();
    let find =
        |c: &Checkpoint, name: &str| c.tensors.iter().find(|t| t.name == name).cloned().unwrap();
    for name in ["0.weight", "3.weight"] {
        let (a, b) = (find(&src, name), find(&dst, name));
        assert_eq!(a.shape, b.shape);
        let d = a.shape[1];
        for (ra, rb) in a.data.chunks(d).zip(b.data.chunks(d)) {
            let (na, nb) = (
                ra.iter().map(|v| v * v).sum::<f64>().sqrt(),
                rb.iter().map(|v| v * v).sum::<f64>().sqrt(),
            );
            for (u, v) in ra.iter().zip(rb) {
                assert!((u / na - v / nb).abs() < 1e-12, "{name}: directions differ");
            }
        }
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(target.join("summary.json")).unwrap()).unwrap();
    let loaded: Vec<&str> = summary["initialized_from"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(loaded.contains(&"0.weight"));
}
