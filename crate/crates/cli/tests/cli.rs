use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 4
[model]
kind = "mlp"
widths = [4, 8, 3]
[data]
kind = "blobs"
classes = 3
dims = 4
train = 240
eval = 60
separation = 2.0
[bitloss]
gamma = 1.0
scheme = "equal"
[schedule]
learn_epochs = 2
finetune_epochs = 2
batch_size = 32
"#;

fn bitprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitprune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bitprune(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    bitprune(args).status.code().unwrap()
}

fn setup(config: &str) -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.path().join("run");
    (dir, cfg.display().to_string(), out.display().to_string())
}

fn p(dir: &str, file: &str) -> String {
    Path::new(dir).join(file).display().to_string()
}

#[test]
fn full_pipeline() {
    let (_tmp, cfg, out) = setup(CONFIG);
    let log = ok(&["train", "--config", &cfg, "--out", &out, "--gamma", "0.7"]);
    assert_eq!(log.lines().count(), 2);
    let resolved = std::fs::read_to_string(p(&out, "resolved_config.toml")).unwrap();
    assert!(resolved.contains("gamma = 0.7"), "{resolved}");
    for f in ["learn.ckpt", "records.jsonl", "summary.json"] {
        assert!(Path::new(&p(&out, f)).exists(), "{f}");
    }

    // fine-tuning straight from the learned checkpoint is refused
    assert_eq!(
        code(&["finetune", "--checkpoint", &p(&out, "learn.ckpt")]),
        2
    );

    let first = ok(&["round", "--checkpoint", &p(&out, "learn.ckpt")]);
    let bits = |s: &str| -> Vec<String> {
        s.lines()
            .filter(|l| l.contains("->") && !l.starts_with("mean"))
            .map(|l| l.rsplit("-> ").next().unwrap().to_string())
            .collect()
    };
    let again = ok(&["round", "--checkpoint", &p(&out, "rounded.ckpt")]);
    assert_eq!(bits(&first), bits(&again));
    assert!(!bits(&first).is_empty());

    let log = ok(&["finetune", "--checkpoint", &p(&out, "rounded.ckpt")]);
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("finetune")));

    let acc = ok(&[
        "eval",
        "--checkpoint",
        &p(&out, "finetune.ckpt"),
        "--integer-bits",
    ]);
    assert!(
        acc.starts_with("accuracy ") && acc.contains("integer bitlengths, 60 samples"),
        "{acc}"
    );

    let est = ok(&["estimate", "--checkpoint", &p(&out, "finetune.ckpt")]);
    assert!(est.contains("stripes"), "{est}");
    let cost: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p(&out, "cost.json")).unwrap()).unwrap();
    assert!(cost["relative_bit_ops"].as_f64().unwrap() > 0.0);

    let report = ok(&["report", "--out", &out]);
    assert!(
        report.contains("Weights # of bits") && report.contains("Activations # of bits"),
        "{report}"
    );
}

#[test]
fn untrained_checkpoint_estimates_at_baseline() {
    let (_tmp, cfg, out) = setup(CONFIG);
    ok(&["train", "--config", &cfg, "--out", &out, "--epochs", "0"]);
    ok(&["estimate", "--checkpoint", &p(&out, "learn.ckpt")]);
    let cost: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p(&out, "cost.json")).unwrap()).unwrap();
    assert_eq!(cost["relative_bit_ops"].as_f64(), Some(1.0));
    for a in cost["accelerators"].as_array().unwrap() {
        assert_eq!(a["speedup"].as_f64(), Some(1.0), "{a}");
        assert_eq!(a["memory_ratio"].as_f64(), Some(1.0), "{a}");
    }
}

#[test]
fn config_errors_exit_2() {
    let (_tmp, cfg, out) = setup(&CONFIG.replace("seed = 4", "seed = 4\nbogus = 1"));
    let res = bitprune(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("bogus"));

    let (_tmp, cfg, out) = setup(CONFIG);
    assert_eq!(
        code(&["train", "--config", &cfg, "--out", &out, "--scheme", "fancy"]),
        2
    );
    assert_eq!(
        code(&["train", "--config", &cfg, "--out", &out, "--gamma", "-1"]),
        2
    );
    assert_eq!(code(&["train", "--out", &out]), 2);
}

#[test]
fn divergence_exits_3() {
    let (_tmp, cfg, out) = setup(CONFIG);
    assert_eq!(
        code(&["train", "--config", &cfg, "--out", &out, "--lr", "1e12"]),
        3
    );
}

#[test]
fn io_errors_exit_4() {
    let (tmp, cfg, out) = setup(CONFIG);
    assert_eq!(code(&["train", "--config", &p(&out, "missing.toml")]), 4);
    ok(&["train", "--config", &cfg, "--out", &out, "--epochs", "1"]);
    let ckpt = p(&out, "learn.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    let broken = tmp.path().join("run").join("broken.ckpt");
    std::fs::write(&broken, &bytes).unwrap();
    assert_eq!(
        code(&["round", "--checkpoint", &broken.display().to_string()]),
        4
    );
    bytes.truncate(20);
    std::fs::write(&broken, &bytes).unwrap();
    assert_eq!(
        code(&["eval", "--checkpoint", &broken.display().to_string()]),
        4
    );
}
