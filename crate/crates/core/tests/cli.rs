use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_splitformer");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let path = dir.join(format!("tiny_{epochs}.toml"));
    let text = format!(
        r#"[model]
variant = "ee_baseline"
d_model = 16
n_heads = 2
d_ff = 32
conv_kernel = 3
n_layers = 2
exit_every = 1
n_exits = 2
vocab_size = 65

[train]
batch_size = 8
epochs = {epochs}
average_last_k = 2
warmup_steps = 4
seed = 3
"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn gen(dir: &Path, utts: usize) -> std::path::PathBuf {
    let out = dir.join("data");
    ok(&["gen-data", "--out", s(&out), "--utts", &utts.to_string(), "--seed", "4"]);
    out
}

#[test]
fn gen_data_splits_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), 50);
    let b = dir.path().join("again");
    ok(&["gen-data", "--out", s(&b), "--utts", "50", "--seed", "4"]);
    let lines = |p: &Path, f: &str| fs::read_to_string(p.join(f)).unwrap().lines().count();
    assert_eq!((lines(&a, "train.tsv"), lines(&a, "dev.tsv"), lines(&a, "test.tsv")), (40, 5, 5));
    for f in ["train.tsv", "dev.tsv", "test.tsv", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let mut feats: Vec<_> = fs::read_dir(a.join("feats")).unwrap().map(|e| e.unwrap().path()).collect();
    feats.sort();
    assert_eq!(feats.len(), 50);
    for p in feats {
        assert_eq!(fs::read(&p).unwrap(), fs::read(b.join("feats").join(p.file_name().unwrap())).unwrap());
    }
}

#[test]
fn invalid_arguments_fail_with_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--out", s(dir.path()), "--utts", "0"]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["profile"]).status.code(), Some(2));
    let missing = run(&["eval", "--model", s(&dir.path().join("none.ckpt")), "--data", s(dir.path())]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn profile_reports_every_exit() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["profile", "--variant", "splitformer", "--frames", "1000", "--out", s(dir.path())]);
    assert!(stdout.contains("splitformer"));
    let csv = fs::read_to_string(dir.path().join("profile.csv")).unwrap();
    let rows: Vec<Vec<u128>> = csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.windows(2).all(|w| w[0][2] < w[1][2] && w[0][3] < w[1][3]));
    assert!(dir.path().join("breakdown.csv").exists());
    assert!(dir.path().join("resolved_config.toml").exists());
}

#[test]
fn train_eval_decode_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 60);
    let cfg = tiny_config(dir.path(), 2);
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    assert_eq!(header, "step,epoch,lr,joint_loss,per_exit_loss_1,per_exit_loss_2");
    // 48 training utterances in batches of 8 over two epochs
    assert_eq!(metrics.lines().count() - 1, 12);
    assert!(out.join("checkpoints/epoch_0002.ckpt").exists());
    assert!(out.join("averaged.ckpt").exists());
    assert!(out.join("resolved_config.toml").exists());

    let model = out.join("averaged.ckpt");
    let ev = dir.path().join("eval");
    ok(&["eval", "--model", s(&model), "--data", s(&data), "--decode", "beam", "--timing-repeats", "1", "--out", s(&ev)]);
    let report = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "exit,wer,token_err,blank_frac,params,flops");
    assert_eq!(report.lines().count(), 3);
    assert!(ev.join("timing.csv").exists());

    let greedy = dir.path().join("greedy");
    let beam = dir.path().join("beam1");
    ok(&["eval", "--model", s(&model), "--data", s(&data), "--out", s(&greedy)]);
    ok(&["eval", "--model", s(&model), "--data", s(&data), "--decode", "beam", "--beam-width", "1", "--blank-prune", "1.0", "--out", s(&beam)]);
    assert_eq!(fs::read(greedy.join("report.csv")).unwrap(), fs::read(beam.join("report.csv")).unwrap());

    let feats = fs::read_dir(data.join("feats")).unwrap().next().unwrap().unwrap().path();
    let text = ok(&["decode", "--model", s(&model), "--features", s(&feats), "--vocab", s(&data.join("vocab.txt"))]);
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("exit 1\t"));
    let one = ok(&["decode", "--model", s(&model), "--features", s(&feats), "--exit", "1"]);
    assert_eq!(one.lines().count(), 1);
}

#[test]
fn resume_continues_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 60);
    let full = dir.path().join("full");
    ok(&["train", "--config", s(&tiny_config(dir.path(), 3)), "--data", s(&data), "--out", s(&full)]);

    let split = dir.path().join("split");
    ok(&["train", "--config", s(&tiny_config(dir.path(), 2)), "--data", s(&data), "--out", s(&split)]);
    ok(&["train", "--config", s(&tiny_config(dir.path(), 3)), "--data", s(&data), "--out", s(&split), "--resume"]);

    let a = fs::read_to_string(full.join("metrics.csv")).unwrap();
    let b = fs::read_to_string(split.join("metrics.csv")).unwrap();
    let lr = |t: &str| t.lines().map(|l| l.split(',').take(3).collect::<Vec<_>>().join(",")).collect::<Vec<_>>();
    assert_eq!(lr(&a), lr(&b));
    assert_eq!(a, b);
    assert_eq!(
        fs::read(full.join("checkpoints/epoch_0003.ckpt")).unwrap(),
        fs::read(split.join("checkpoints/epoch_0003.ckpt")).unwrap()
    );
}
