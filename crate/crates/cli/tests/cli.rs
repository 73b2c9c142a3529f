use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cipherimg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cipherimg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

/// Runs a command that must succeed and returns its stdout summary.
fn ok(args: &[&str], cwd: &Path) -> Value {
    let out = cipherimg(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1, "summary is one line: {text}");
    serde_json::from_str(&text).unwrap()
}

/// Runs a command that must fail and returns (exit code, error line).
fn err(args: &[&str], cwd: &Path) -> (i32, Value) {
    let out = cipherimg(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let text = String::from_utf8(out.stderr).unwrap();
    assert_eq!(text.lines().count(), 1, "error is one line: {text}");
    (out.status.code().unwrap(), serde_json::from_str(&text).unwrap())
}

fn toy_setup(dir: &Path) {
    ok(&["keygen", "--seed", "5", "--out", "k.toml"], dir);
    ok(
        &[
            "dataset", "synth", "--out", "raw", "--n", "40", "--n-train", "32", "--height", "16", "--width", "16",
            "--channels", "3", "--seed", "2",
        ],
        dir,
    );
}

#[test]
fn keygen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(&["keygen", "--seed", "9", "--out", "a.toml"], dir.path());
    let b = ok(&["keygen", "--seed", "9", "--out", "b.toml"], dir.path());
    assert_eq!(a["fingerprint"], b["fingerprint"]);
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.toml"), read("b.toml"));
    assert!(dir.path().join("a.run.json").exists());
}

#[test]
fn clean_decryption_is_perfect_and_noisy_is_not() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_setup(d);
    ok(&["encrypt", "--dataset", "raw", "--key", "k.toml", "--out", "enc"], d);
    let s = ok(&["decrypt", "--dataset", "enc", "--key", "k.toml", "--out", "dec", "--panels", "2"], d);
    assert_eq!(s["mean_psnr"], "inf");
    assert_eq!(s["mean_ssim"], 1.0);
    assert_eq!(s["n_samples"], 8);
    assert!(d.join("dec/panels/test_00001.png").exists());
    assert!(!d.join("dec/panels/test_00002.png").exists());
    let csv = std::fs::read_to_string(d.join("dec/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("sample_id,psnr,ssim,finite"));
    assert_eq!(csv.lines().count(), 9);

    ok(
        &[
            "encrypt", "--dataset", "raw", "--key", "k.toml", "--sigma", "0.01", "--seed", "3", "--out", "encn",
        ],
        d,
    );
    let s = ok(&["decrypt", "--dataset", "encn", "--key", "k.toml", "--round", "--out", "decn"], d);
    assert_ne!(s["mean_psnr"], "inf");
    assert!(s["mean_ssim"].as_f64().unwrap() < 0.1);
}

#[test]
fn encryption_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_setup(d);
    for out in ["e1", "e2"] {
        ok(
            &[
                "--workers", "2", "encrypt", "--dataset", "raw", "--key", "k.toml", "--cipher", "cbc", "--sigma", "0.02",
                "--out", out,
            ],
            d,
        );
    }
    for f in ["manifest.json", "train_cipher.cimg", "test_cipher.cimg", "test_plain.cimg"] {
        assert_eq!(
            std::fs::read(d.join("e1").join(f)).unwrap(),
            std::fs::read(d.join("e2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn baseline_mean_matches_on_raw_and_encrypted_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_setup(d);
    ok(&["encrypt", "--dataset", "raw", "--key", "k.toml", "--mode", "uint8", "--out", "enc"], d);
    let a = ok(&["baseline-mean", "--dataset", "raw", "--out", "b1"], d);
    let b = ok(&["baseline-mean", "--dataset", "enc", "--out", "b2"], d);
    assert_eq!(a["mean_psnr"], b["mean_psnr"]);
    assert_eq!(a["n_train"], 32);
    let p = a["mean_psnr"].as_f64().unwrap();
    assert!(p.is_finite() && p > 0.0);
}

#[test]
fn train_then_eval_with_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_setup(d);
    ok(&["encrypt", "--dataset", "raw", "--key", "k.toml", "--mode", "uint8", "--out", "enc"], d);
    std::fs::write(
        d.join("net.toml"),
        "in_channels = 3\nout_channels = 3\nbase_width = 4\ndepth = 1\n",
    )
    .unwrap();
    std::fs::write(d.join("train.toml"), "batch_size = 8\nepochs = 5\nval_fraction = 0.125\n").unwrap();
    let t = ok(
        &[
            "--deterministic", "train", "--dataset", "enc", "--net", "net.toml", "--train", "train.toml", "--epochs",
            "2", "--out", "run",
        ],
        d,
    );
    assert_eq!(t["epochs"], 2);
    assert_eq!(t["n_val"], 4);
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let stamp: Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/run_config.json")).unwrap()).unwrap();
    assert_eq!(stamp["resolved"]["train"]["epochs"], 2);
    assert_eq!(stamp["resolved"]["train"]["deterministic"], true);

    let e = ok(
        &[
            "eval", "--checkpoint", "run/model.ckpt", "--dataset", "enc", "--out", "ev", "--limit", "3", "--panels",
            "1",
        ],
        d,
    );
    assert_eq!(e["n_samples"], 3);
    assert!(d.join("ev/eval_log.json").exists());
    assert!(d.join("ev/panels/test_00000.png").exists());
}

#[test]
fn failures_exit_nonzero_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_setup(d);

    let (code, e) = err(&["encrypt", "--dataset", "raw", "--key", "k.toml", "--cipher", "ecb", "--out", "x"], d);
    assert_eq!((code, e["error"].as_str()), (2, Some("usage")));

    let (code, e) = err(&["decrypt", "--dataset", "missing", "--key", "k.toml", "--out", "x"], d);
    assert_eq!((code, e["error"].as_str()), (4, Some("io")));

    let (code, e) = err(&["decrypt", "--dataset", "raw", "--key", "k.toml", "--out", "x"], d);
    assert_eq!((code, e["error"].as_str()), (3, Some("invalid_argument")));

    ok(&["encrypt", "--dataset", "raw", "--key", "k.toml", "--out", "enc"], d);
    ok(&["keygen", "--seed", "6", "--out", "other.toml"], d);
    let (code, e) = err(&["decrypt", "--dataset", "enc", "--key", "other.toml", "--out", "x"], d);
    assert_eq!(code, 3);
    assert!(e["message"].as_str().unwrap().contains("--force"));

    // inputs are never written to
    let (code, _) = err(&["encrypt", "--dataset", "raw", "--key", "k.toml", "--out", "raw"], d);
    assert_eq!(code, 3);
    assert!(!d.join("raw/train_cipher.cimg").exists());

    let (code, e) = err(&["encrypt", "--dataset", "raw", "--key", "k.toml", "--sigma=-1", "--out", "y"], d);
    assert_eq!((code, e["error"].as_str()), (3, Some("invalid_argument")));
}
