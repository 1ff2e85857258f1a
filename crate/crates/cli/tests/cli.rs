use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refsketch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn refsketch")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(&["extract", "--ckpt", "c.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["--device", "gpu", "config-dump"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochz = 1\n").unwrap();
    let out = run(&["--config", s(&cfg), "config-dump"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    let out = run(&["--out-dir", s(dir.path()), "evaluate", "--ckpt", "none.ckpt", "--dataset", "none", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_dump_precedence_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[train]\nepochs = 7\nbatch = 2\n").unwrap();
    let defaults = String::from_utf8(ok(&["config-dump"]).stdout).unwrap();
    for line in ["epochs = 100", "batch = 4", "lr = 0.0002", "style_line_start = 5.0", "style_line_end = 0.5", "lambda_cyc = 10.0", "lambda_adv = 1.0"] {
        assert!(defaults.contains(line), "missing `{line}`");
    }
    let args = ["--config", s(&cfg), "config-dump", "train", "--color-dir", "c", "--sketch-dir", "k", "--epochs", "1"];
    let a = ok(&args).stdout;
    assert_eq!(a, ok(&args).stdout);
    let text = String::from_utf8(a).unwrap();
    let train = &text[text.find("[train]").unwrap()..];
    assert!(train.contains("epochs = 1\n"));
    assert!(train.contains("batch = 2\n"));
    assert!(train.contains("lr = 0.0002\n"));
    // the dump reads back as a config file and reproduces itself
    let dumped = dir.path().join("dumped.toml");
    std::fs::write(&dumped, &text).unwrap();
    assert_eq!(String::from_utf8(ok(&["--config", s(&dumped), "config-dump"]).stdout).unwrap(), text);
}

#[test]
fn end_to_end_pipeline_stays_in_out_dirs() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let style = data.join("style");
    let unpaired = data.join("unpaired");
    let eval = data.join("eval");
    ok(&["--out-dir", s(&style), "synth-corpus", "--kind", "style", "--count", "4", "--size", "32"]);
    ok(&["--out-dir", s(&unpaired), "synth-corpus", "--kind", "unpaired", "--count", "2", "--size", "32"]);
    ok(&["--out-dir", s(&eval), "synth-corpus", "--kind", "eval", "--size", "16"]);
    let inputs = files_under(&data);

    let enc_dir = root.path().join("enc");
    ok(&[
        "--out-dir", s(&enc_dir), "pretrain-style", "--corpus", s(&style.join("manifest.csv")), "--out", "style.safetensors",
        "--epochs", "1", "--base-channels", "2", "--resolution", "32",
    ]);
    let encoder = enc_dir.join("style.safetensors");
    assert!(encoder.exists() && enc_dir.join("pretrain_log.csv").exists());

    ok(&[
        "--out-dir", s(&enc_dir), "export-embeddings", "--encoder", s(&encoder), "--manifest", s(&style.join("manifest.csv")),
        "--out", "emb.csv", "--resolution", "32",
    ]);
    let emb = std::fs::read_to_string(enc_dir.join("emb.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 16);
    assert_eq!(emb.lines().next().unwrap().split(',').count(), 2 + 128);

    let run_dir = root.path().join("run");
    ok(&[
        "--out-dir", s(&run_dir), "--seed", "5", "train", "--color-dir", s(&unpaired.join("color")), "--sketch-dir",
        s(&unpaired.join("sketch")), "--style-encoder", s(&encoder), "--epochs", "1", "--batch", "2", "--resolution", "32",
        "--base-channels", "2", "--discriminator-channels", "4",
    ]);
    let ckpt = run_dir.join("epoch_1.ckpt");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(std::fs::read_to_string(run_dir.join("run_config.toml")).unwrap().contains("seed = 5"));

    let content = unpaired.join("color").join(std::fs::read_dir(unpaired.join("color")).unwrap().next().unwrap().unwrap().file_name());
    let reference = eval.join("style2").join("00.png");
    ok(&["--out-dir", s(&run_dir), "extract", "--ckpt", s(&ckpt), "--content", s(&content), "--reference", s(&reference), "--out", "o.png"]);
    assert!(run_dir.join("o.png").exists());

    ok(&["--out-dir", s(&run_dir), "cyclic-eval", "--ckpt", s(&ckpt), "--dataset", s(&eval), "--out", "cyclic.json", "--against", "ground-truth", "--resolution", "32"]);
    ok(&["--out-dir", s(&run_dir), "evaluate", "--ckpt", s(&ckpt), "--dataset", s(&eval), "--out", "eval.json", "--resolution", "32"]);
    assert!(std::fs::read_to_string(run_dir.join("eval.json")).unwrap().contains("\"n_pairs\": 100"));
    let report = std::fs::read_to_string(run_dir.join("cyclic.json")).unwrap();
    assert!(report.contains("ground-truth") && run_dir.join("cyclic.csv").exists());

    let cur = root.path().join("curate");
    let sketches = style.join("style1");
    ok(&["--out-dir", s(&cur), "curate", "styles", "--images", s(&sketches), "--k", "2", "--resolution", "32"]);
    let labels = std::fs::read_to_string(cur.join("styles.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 4);
    ok(&["--out-dir", s(&cur), "curate", "cull", "--images", s(&sketches), "--k", "2", "--rounds", "1", "--resolution", "32"]);
    assert!(cur.join("clusters_round1.csv").exists() && !cur.join("kept.csv").exists());
    ok(&["--out-dir", s(&cur), "curate", "cull", "--images", s(&sketches), "--k", "2", "--rounds", "1", "--resolution", "32", "--keep", "0,1"]);
    assert_eq!(std::fs::read_to_string(cur.join("kept.csv")).unwrap().lines().count(), 1 + 4);

    // nothing was written next to the inputs
    assert_eq!(files_under(&data), inputs);
    let top: Vec<_> = std::fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top.len(), 4, "{top:?}");
}
