use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cgan_core::runtime::imageio;

fn cgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cgan(args);
    assert!(
        out.status.success(),
        "cgan {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "n = 2
m = 4
latent_dim = 4
hidden_dim = 8
image_size = 16
generator_width = 4
discriminator_width = 4
encoder_width = 4
checkpoint_every = 2
synthetic_count = 12
";

/// Trains a tiny model and returns its last checkpoint.
fn train(dir: &Path, variant: &str, iterations: u64) -> PathBuf {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.join(format!("run-{variant}"));
    let it = iterations.to_string();
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--variant", variant, "--iterations", &it]);
    out.join(format!("ckpt_{iterations}"))
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    v
}

#[test]
fn train_writes_log_config_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "cgan-a", 3);
    let run = ckpt.parent().unwrap();
    assert!(run.join("ckpt_2").is_file());
    assert!(ckpt.is_file());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["gan"].as_f64().unwrap().is_finite());
    }
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("variant = \"cgan-a\""), "{cfg}");
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "cgan", 2);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["sample", "--ckpt", s(&ckpt), "--out", s(&a), "--count", "5", "--seed", "7"]);
    ok(&["sample", "--ckpt", s(&ckpt), "--out", s(&b), "--count", "5", "--seed", "7"]);
    ok(&["sample", "--ckpt", s(&ckpt), "--out", s(&c), "--count", "5", "--seed", "8"]);
    let (pa, pb, pc) = (pngs(&a), pngs(&b), pngs(&c));
    assert_eq!(pa.len(), 6);
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_ne!(fs::read(&pa[0]).unwrap(), fs::read(&pc[0]).unwrap());
}

/// Scalar over-compositing of RGBA layers read back from disk.
fn recompose(layers: &[PathBuf]) -> Vec<f64> {
    let imgs: Vec<_> = layers.iter().map(|p| imageio::read_rgba(p).unwrap()).collect();
    let plane = imgs[0].shape()[1] * imgs[0].shape()[2];
    let mut out = vec![0.0; 3 * plane];
    for img in &imgs {
        let d = img.data();
        for c in 0..3 {
            for p in 0..plane {
                let a = d[3 * plane + p];
                out[c * plane + p] = out[c * plane + p] * (1.0 - a) + d[c * plane + p] * a;
            }
        }
    }
    out
}

#[test]
fn decompose_exports_consistent_layers() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "cgan-a", 2);
    let out = dir.path().join("dec");
    ok(&["decompose", "--ckpt", s(&ckpt), "--out", s(&out), "--count", "3", "--seed", "1"]);
    for k in 0..3 {
        let sample = out.join(format!("sample_{k:04}"));
        let layers = [sample.join("layer_1.png"), sample.join("layer_2.png")];
        let last = imageio::read_rgb(&sample.join("composite_2.png")).unwrap();
        let recomposed = recompose(&layers);
        let worst = recomposed
            .iter()
            .zip(last.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0, "sample {k}: {worst}");
        // The first composite is the first layer over black.
        let first = imageio::read_rgb(&sample.join("composite_1.png")).unwrap();
        assert!(recompose(&layers[..1]).iter().zip(first.data()).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
        assert!(sample.join("preview.png").is_file());
    }
}

#[test]
fn encoder_commands_need_a_vae_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "cgan", 1);
    let img = dir.path().join("x.png");
    imageio::write_rgb(&img, &cgan_core::Tensor::full(&[3, 20, 24], 0.3)).unwrap();
    let out = dir.path().join("o");
    for args in [
        vec!["reconstruct", "--ckpt", s(&ckpt), "--image", s(&img), "--out", s(&out)],
        vec!["swap", "--ckpt", s(&ckpt), "--image-a", s(&img), "--image-b", s(&img), "--encoder", "0", "--out", s(&out)],
    ] {
        let res = cgan(&args);
        assert!(!res.status.success());
        let err = String::from_utf8_lossy(&res.stderr);
        assert!(err.contains("configuration error") && err.contains("encoders"), "{err}");
    }
}

#[test]
fn encoder_commands_on_a_vae_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "cgan-vae", 1);
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    imageio::write_rgb(&a, &cgan_core::Tensor::full(&[3, 32, 32], 0.3)).unwrap();
    imageio::write_rgb(&b, &cgan_core::Tensor::full(&[3, 16, 16], 0.9)).unwrap();
    let out = dir.path().join("o");
    ok(&["reconstruct", "--ckpt", s(&ckpt), "--image", s(&a), "--out", s(&out)]);
    let r = imageio::read_rgb(&out.join("reconstruction.png")).unwrap();
    assert_eq!(r.shape(), &[3, 16 + 2 * 2, 2 * 16 + 3 * 2]);
    ok(&["swap", "--ckpt", s(&ckpt), "--image-a", s(&a), "--image-b", s(&b), "--encoder", "1", "--out", s(&out)]);
    assert!(out.join("swap.png").is_file());
    let res = cgan(&["swap", "--ckpt", s(&ckpt), "--image-a", s(&a), "--image-b", s(&b), "--encoder", "2", "--out", s(&out)]);
    assert!(!res.status.success());
}

#[test]
fn fix_z1_grid_shape() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "cgan", 1);
    let out = dir.path().join("g");
    ok(&["fix-z1", "--ckpt", s(&ckpt), "--rows", "2", "--cols", "3", "--seed", "4", "--out", s(&out)]);
    let g = imageio::read_rgb(&out.join("fix_z1.png")).unwrap();
    assert_eq!(g.shape(), &[3, 2 * 16 + 3 * 2, 3 * 16 + 4 * 2]);
}

#[test]
fn eval_of_a_set_against_itself_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let test = dir.path().join("test");
    ok(&["synth", "--out", s(&test), "--count", "6", "--size", "16", "--seed", "3"]);
    let out = dir.path().join("eval");
    let stdout = ok(&["eval", "--samples", s(&test), "--test", s(&test), "--out", s(&out)]);
    assert!(stdout.contains("Q = 1.0000"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("q_report.json")).unwrap()).unwrap();
    assert!((report["q"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let csv = fs::read_to_string(out.join("q_items.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let ckpt = train(dir.path(), "cgan", 1);
    let out = dir.path().join("eval2");
    ok(&["eval", "--ckpt", s(&ckpt), "--count", "4", "--test", s(&test), "--out", s(&out)]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("q_report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 4);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let full = train(dir.path(), "cgan-vae-a", 4);
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("split");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--variant", "cgan-vae-a", "--iterations", "2"]);
    ok(&[
        "train", "--config", s(&cfg), "--out", s(&out), "--variant", "cgan-vae-a", "--iterations", "4",
        "--resume", s(&out.join("ckpt_2")),
    ]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(out.join("ckpt_4")).unwrap());
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log, fs::read_to_string(full.parent().unwrap().join("train_log.jsonl")).unwrap());
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "n = 2\nlearning_rate = 1\n").unwrap();
    let res = cgan(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("learning_rate"));

    let res = cgan(&["sample", "--ckpt", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("missing"));

    let res = cgan(&["train", "--out", s(dir.path()), "--variant", "gan"]);
    assert!(!res.status.success());
}
