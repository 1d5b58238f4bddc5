use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn clustvit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clustvit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn clustvit")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        let o = clustvit(&["gen", "--out", out, "--count", "3", "--seed", "5"], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
    assert_eq!(a.len(), 1 + 9 * 3);
    assert_eq!(a, b);

    let o = clustvit(&["gen", "--out", "a", "--count", "3"], d);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = clustvit(&["gen", "--out", "a", "--count", "3", "--force", "--seed", "6"], d);
    assert_eq!(code(&o), 0);
    assert_ne!(tree(&d.join("a")), b);
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&clustvit(&["frobnicate"], tmp.path())), 1);
    assert_eq!(code(&clustvit(&["gen"], tmp.path())), 1);
    assert_eq!(code(&clustvit(&["--help"], tmp.path())), 0);
    assert_eq!(code(&clustvit(&["train", "--", "--schedule.power=0"], tmp.path())), 1);
    assert_eq!(code(&clustvit(&["train", "--", "--no_such_field=3"], tmp.path())), 1);
}

#[test]
fn missing_dataset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = clustvit(&["train", "--", "--data_root=nowhere"], tmp.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn diverging_run_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&clustvit(&["gen", "--out", "data", "--count", "4"], d)), 0);
    let o = clustvit(
        &[
            "train",
            "--",
            "--data_root=data",
            "--out_dir=run",
            "--schedule.base_lr=1e12",
            "--schedule.total_iters=20",
            "--batch_size=2",
        ],
        d,
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteration"));
}

#[test]
fn train_then_eval_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&clustvit(&["gen", "--out", "data", "--count", "4"], d)), 0);
    let args = [
        "train",
        "--",
        "--data_root=data",
        "--out_dir=run",
        "--schedule.total_iters=3",
        "--batch_size=2",
        "--log_every=1",
        "--checkpoint_every=2",
        "--eval_warmup=1",
        "--eval_iters=2",
    ];
    let o = clustvit(&args, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "run_id", "metrics.csv", "checkpoint_2.ckpt", "model.ckpt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    // a second identical run reproduces every non-timing output
    let o = clustvit(&[&args[..3], &["--out_dir=run2"], &args[4..]].concat(), d);
    assert_eq!(code(&o), 0);
    assert_eq!(metrics, fs::read_to_string(d.join("run2/metrics.csv")).unwrap());
    assert_eq!(fs::read(d.join("run/model.ckpt")).unwrap(), fs::read(d.join("run2/model.ckpt")).unwrap());

    let o = clustvit(&["eval", "--run", "run", "--visuals", "1"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["eval.csv", "cost.csv", "cost_summary.csv", "token_histogram.csv", "eval_summary.json"] {
        assert!(d.join("run/eval_val").join(f).exists(), "{f}");
    }

    // evaluating with a config for a different architecture is refused
    let cfg = fs::read_to_string(d.join("run/config.json")).unwrap();
    let other = cfg.replace("\"clusters\": 3,", "\"clusters\": 5,");
    assert_ne!(cfg, other);
    fs::write(d.join("other.json"), other).unwrap();
    let o = clustvit(&["eval", "--run", "run", "--config", "other.json"], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("encoder.clusters: 5 vs 3"));
}

#[test]
fn profile_lists_every_reachable_length() {
    let tmp = tempfile::tempdir().unwrap();
    let o = clustvit(&["profile"], tmp.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| l.contains(',')).collect();
    // k = 3 on 64 patches: lengths 4..=65
    assert_eq!(rows.len(), 62);
    assert!(rows[0].starts_with("4,"));
    assert!(text.contains("break-even"));
    let o = clustvit(&["profile", "--scale", "base", "--image", "512"], tmp.path());
    assert_eq!(code(&o), 0);
    let o = clustvit(&["profile", "--scale", "gigantic"], tmp.path());
    assert_eq!(code(&o), 1);
}
