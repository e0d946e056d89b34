use std::path::Path;
use std::process::{Command, Output};

use roadfield::encoding::{EncoderConfig, HashGridConfig, HashingMode};
use roadfield::experiments::desk_config;
use roadfield::io::{read_ply, Manifest, RunConfig};
use roadfield::synthetic::{CameraPath, SceneSpec, TextureSpec};

fn roadfield(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadfield"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_setup(dir: &Path) {
    let mut texture = TextureSpec::default();
    texture.manholes.truncate(1);
    let scene = SceneSpec {
        length: 12.0,
        texture,
        camera: CameraPath {
            count: 4,
            ..CameraPath::default()
        },
        holes: vec![],
        image_width: 64,
        image_height: 24,
        ..SceneSpec::default()
    };
    std::fs::write(dir.join("scene.json"), serde_json::to_string(&scene).unwrap()).unwrap();
    let mut cfg = desk_config(Path::new("data"), EncoderConfig::Hash(HashGridConfig {
        num_levels: 3,
        base_resolution: 4,
        per_level_scale: 2.0,
        table_size: 1 << 9,
        feature_dim: 2,
        mode: HashingMode::Hashed,
    }));
    cfg.train.height_steps = 30;
    cfg.train.height_batch = 128;
    cfg.train.appearance_epochs = 2;
    cfg.train.samples_per_frame = 512;
    cfg.train.appearance_batch = 256;
    cfg.eval.samples_per_frame = 2048;
    cfg.eval.export_step = 0.5;
    std::fs::write(dir.join("run.toml"), cfg.to_toml().unwrap()).unwrap();
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = roadfield(&["train", "--bogus"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn eval_without_checkpoint_names_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let o = roadfield(&["eval", "--run", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.starts_with("error: checkpoint:"), "{e}");
    assert!(e.contains("model.ckpt"), "{e}");
}

#[test]
fn missing_dataset_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = roadfield(&["train", "--dataset", "absent", "--out", "r"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error:"), "{}", stderr(&o));
    assert!(!dir.path().join("r/model.ckpt").exists());
}

#[test]
fn config_prints_parseable_toml() {
    let dir = tempfile::tempdir().unwrap();
    for enc in ["hash", "pe"] {
        let o = roadfield(&["config", "--encoder", enc, "--dataset", "d"], dir.path());
        assert!(o.status.success());
        let cfg = RunConfig::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
        assert_eq!(cfg.dataset, Path::new("d"));
    }
}

#[test]
fn train_eval_export_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_setup(d);
    let ok = |args: &[&str]| {
        let o = roadfield(args, d);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&["gen", "--out", "data", "--scene", "scene.json", "--seed", "5"]);
    ok(&["train", "--config", "run.toml", "--out", "run"]);
    for f in ["model.ckpt", "loss.csv", "manifest.toml", "config.toml"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let manifest = Manifest::load(&d.join("run/manifest.toml")).unwrap();
    assert_eq!(manifest.config, RunConfig::load(&d.join("run.toml")).unwrap());
    let csv = std::fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert!(csv.starts_with("step,stage,"));

    // A finished run resumes as a no-op.
    let ckpt = std::fs::read(d.join("run/model.ckpt")).unwrap();
    ok(&["train", "--config", "run.toml", "--out", "run", "--resume"]);
    assert_eq!(std::fs::read(d.join("run/model.ckpt")).unwrap(), ckpt);

    // A different config cannot resume it.
    let mut other = RunConfig::load(&d.join("run.toml")).unwrap();
    other.train.seed += 1;
    std::fs::write(d.join("other.toml"), other.to_toml().unwrap()).unwrap();
    let o = roadfield(&["train", "--config", "other.toml", "--out", "run", "--resume"], d);
    assert!(stderr(&o).starts_with("error: config:"), "{}", stderr(&o));

    ok(&["eval", "--run", "run"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["frames"], 4);
    assert!(report["miou"].as_f64().unwrap() >= 0.0);

    ok(&["export", "--run", "run", "--out", "exp", "--views", "2", "--format", "ppm"]);
    let mesh = read_ply(&d.join("exp/surface.ply")).unwrap();
    assert!(!mesh.faces.is_empty());
    assert!(d.join("exp/surface_semantic.ply").exists());
    let views = std::fs::read_dir(d.join("exp"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count();
    assert_eq!(views, 4);
}
