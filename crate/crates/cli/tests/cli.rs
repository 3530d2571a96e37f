use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ffdconv::audio::{encode_wav_pcm16, WaveClip};
use ffdconv::io::read_tensor_file;

fn ffdconv(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffdconv"))
        .args(args)
        .current_dir(dir)
        .env("FFDCONV_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = ffdconv(args, dir);
    assert_eq!(
        code(&out),
        0,
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL_RUN: &str = "data.train_clips=16\ndata.val_clips=8\ntrain.batch_size=8\n";

fn small_run(dir: &Path) -> PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    cfg
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> usize {
    rows[0]
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name} in {:?}", rows[0]))
}

#[test]
fn gradcheck_f64_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--dtype", "f64", "--instances", "3"], dir.path());
    assert!(stdout.contains("ddf"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn gradcheck_can_run_a_single_op() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--op", "softmax", "--instances", "2"], dir.path());
    assert!(stdout.contains("softmax"));
    assert!(!stdout.contains("conv2d"));
}

#[test]
fn train_then_evaluate_reproduces_validation_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    ok(
        &[
            "train", "--config", "run.cfg", "--epochs", "2", "--seed", "5", "--out", "run",
        ],
        d,
    );
    for f in ["model.ffdc", "metrics.csv", "run.cfg"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }
    let history = csv_rows(&d.join("run/metrics.csv"));
    assert_eq!(history.len(), 3);
    ok(&["evaluate", "--checkpoint", "run/model.ffdc", "--out", "eval.csv"], d);
    let eval = csv_rows(&d.join("eval.csv"));
    assert_eq!(eval.len(), 2);
    assert_eq!(eval[1][column(&eval, "clips")], "8");
    for metric in ["eb_f1", "ib_f1"] {
        let trained: f64 = history[2][column(&history, metric)].parse().unwrap();
        let scored: f64 = eval[1][column(&eval, metric)].parse().unwrap();
        assert!((0.0..=1.0).contains(&scored));
        assert!((trained - scored).abs() < 1e-6, "{metric}: {trained} vs {scored}");
    }
}

#[test]
fn training_runs_in_double_precision_on_stored_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    ok(&["synth-data", "--seed", "1", "--clips", "12", "--out", "train"], d);
    ok(&["synth-data", "--seed", "2", "--clips", "6", "--out", "val"], d);
    ok(
        &[
            "train",
            "--config",
            "run.cfg",
            "--epochs",
            "1",
            "--dtype",
            "f64",
            "--variant",
            "ftd",
            "--window",
            "1",
            "--attention",
            "off",
            "--data",
            "train",
            "--val",
            "val",
            "--out",
            "run",
        ],
        d,
    );
    let cfg = std::fs::read_to_string(d.join("run/run.cfg")).unwrap();
    assert!(cfg.contains("model.window=1"), "{cfg}");
    assert!(cfg.contains("model.attention=off"), "{cfg}");
    assert!(cfg.contains("ftd"), "{cfg}");
    let stdout = ok(
        &[
            "evaluate",
            "--checkpoint",
            "run/model.ffdc",
            "--data",
            "val",
            "--out",
            "e.csv",
            "--dtype",
            "f64",
        ],
        d,
    );
    assert!(stdout.starts_with("clips,loss,eb_precision"));
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth-data", "--seed", "7", "--clips", "5", "--out", "a"], d);
    ok(&["synth-data", "--seed", "7", "--clips", "5", "--out", "b"], d);
    ok(&["synth-data", "--seed", "8", "--clips", "5", "--out", "c"], d);
    let (a, b, c) = (files(&d.join("a")), files(&d.join("b")), files(&d.join("c")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn featurize_and_dump_activations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("wav")).unwrap();
    // 127 hops of 256 samples give 128 frames.
    let samples: Vec<f64> = (0..127 * 256).map(|i| 0.3 * (i as f64 * 0.2).sin()).collect();
    let clip = WaveClip::new(samples, 16000).unwrap();
    std::fs::write(d.join("wav/tone.wav"), encode_wav_pcm16(&clip)).unwrap();
    std::fs::write(d.join("feat.cfg"), "n_mels=64\n").unwrap();

    ok(
        &[
            "featurize",
            "--input",
            "wav",
            "--out",
            "feat",
            "--feature-config",
            "feat.cfg",
        ],
        d,
    );
    let t = read_tensor_file(d.join("feat/tone.ffdt")).unwrap();
    assert_eq!(t.shape(), &[128, 64]);
    assert!(std::fs::read_to_string(d.join("feat/features.cfg"))
        .unwrap()
        .contains("n_mels=64"));

    small_run(d);
    ok(&["train", "--config", "run.cfg", "--epochs", "1", "--out", "run"], d);
    ok(
        &[
            "dump-activations",
            "--checkpoint",
            "run/model.ffdc",
            "--input",
            "feat/tone.ffdt",
            "--out",
            "act",
        ],
        d,
    );
    let layer0 = read_tensor_file(d.join("act/layer0.ffdt")).unwrap();
    assert_eq!(layer0.shape().len(), 3);
    let bands = csv_rows(&d.join("act/layer0_bands.csv"));
    assert_eq!(bands[0][0], "frame");
    assert_eq!(bands[0].len(), layer0.shape()[2] + 1);
    assert_eq!(bands.len(), layer0.shape()[1] + 1);

    // The .wav path featurizes on the fly and must agree.
    ok(
        &[
            "dump-activations",
            "--checkpoint",
            "run/model.ffdc",
            "--input",
            "wav/tone.wav",
            "--feature-config",
            "feat.cfg",
            "--out",
            "act2",
        ],
        d,
    );
    assert_eq!(
        std::fs::read(d.join("act/layer0.ffdt")).unwrap(),
        std::fs::read(d.join("act2/layer0.ffdt")).unwrap()
    );
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&ffdconv(&["train", "--bogus"], d)), 1);
    assert_eq!(code(&ffdconv(&["frobnicate"], d)), 1);
    assert_eq!(code(&ffdconv(&["--help"], d)), 0);
    assert_eq!(
        code(&ffdconv(
            &["evaluate", "--checkpoint", "missing.ffdc", "--out", "x.csv"],
            d
        )),
        2
    );
    std::fs::write(d.join("bad.cfg"), "model.colour=3\n").unwrap();
    assert_eq!(code(&ffdconv(&["train", "--config", "bad.cfg", "--out", "r"], d)), 1);
    std::fs::write(d.join("junk.cfg"), "no equals sign\n").unwrap();
    assert_eq!(
        code(&ffdconv(&["synth-data", "--config", "junk.cfg", "--out", "s"], d)),
        1
    );
    std::fs::write(d.join("short.ffdc"), b"FFDC\x01").unwrap();
    let out = ffdconv(&["evaluate", "--checkpoint", "short.ffdc", "--out", "x.csv"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("short.ffdc"));
    assert_eq!(code(&ffdconv(&["gradcheck", "--op", "nosuch"], d)), 1);
    assert_eq!(
        code(&ffdconv(&["featurize", "--input", "missing_dir", "--out", "f"], d)),
        2
    );
}
