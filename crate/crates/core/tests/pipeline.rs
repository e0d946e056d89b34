use std::path::Path;

use roadfield::encoding::{EncoderConfig, HashGridConfig, HashingMode, PeConfig};
use roadfield::experiments::{desk_config, evaluate, generate, new_trainer, prepare, run_prepared, train_in_epochs};
use roadfield::io::{export_surface, read_ply, Experiment, RunConfig};
use roadfield::synthetic::{CameraPath, SceneSpec, TextureSpec};
use roadfield::training::{load_checkpoint, save_checkpoint, Stage};

fn tiny_scene() -> SceneSpec {
    let mut texture = TextureSpec::default();
    texture.manholes.truncate(1);
    SceneSpec {
        length: 16.0,
        texture,
        camera: CameraPath {
            count: 5,
            ..CameraPath::default()
        },
        holes: vec![],
        image_width: 96,
        image_height: 32,
        ..SceneSpec::default()
    }
}

fn tiny_config(root: &Path, encoder: EncoderConfig) -> RunConfig {
    let mut cfg = desk_config(root, encoder);
    cfg.train.height_steps = 60;
    cfg.train.height_batch = 256;
    cfg.train.appearance_epochs = 2;
    cfg.train.samples_per_frame = 1024;
    cfg.train.appearance_batch = 256;
    cfg.eval.samples_per_frame = 4096;
    cfg
}

fn small_hash() -> EncoderConfig {
    EncoderConfig::Hash(HashGridConfig {
        num_levels: 4,
        base_resolution: 4,
        per_level_scale: 2.0,
        table_size: 1 << 10,
        feature_dim: 2,
        mode: HashingMode::Hashed,
    })
}

#[test]
fn generate_train_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &tiny_scene(), 3).unwrap();
    let cfg = tiny_config(dir.path(), small_hash());
    let prepared = prepare(&cfg).unwrap();
    let out = run_prepared(&cfg, &prepared).unwrap();
    let r = &out.report;
    assert_eq!(r.frames, 5);
    assert!(r.masked_pixels > 0);
    assert!(r.psnr_db.unwrap().is_finite());
    assert!((0.0..=1.0).contains(&r.miou));
    assert_eq!(r.manhole_coverage.as_ref().unwrap().len(), 1);
    assert!(r.hole_rmse.unwrap().hole.is_none());
    assert_eq!(r.config["height_source"], "lidar");

    let ply = dir.path().join("s.ply");
    let s = export_surface(&out.trainer.model, &prepared.bounds, 0.5, &ply).unwrap();
    assert_eq!(s.vertices, 33 * 21);
    let mesh = read_ply(&ply).unwrap();
    assert_eq!(mesh.faces.len(), 2 * 32 * 20);
    let sem = read_ply(&s.semantic_path).unwrap();
    assert_eq!(sem.vertices, mesh.vertices);
}

#[test]
fn resume_between_epochs_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &tiny_scene(), 3).unwrap();
    let cfg = tiny_config(dir.path(), small_hash());
    let prepared = prepare(&cfg).unwrap();

    let mut full = new_trainer(&cfg, prepared.bounds).unwrap();
    train_in_epochs(&mut full, &prepared, |_| Ok(())).unwrap();

    let ckpt = dir.path().join("mid.ckpt");
    let mut part = new_trainer(&cfg, prepared.bounds).unwrap();
    let mut saves = 0;
    let stop = train_in_epochs(&mut part, &prepared, |t| {
        saves += 1;
        save_checkpoint(t, &ckpt)?;
        if t.progress.epoch == 1 {
            return Err(roadfield::Error::Config("interrupted".into()));
        }
        Ok(())
    });
    assert!(stop.is_err());
    assert_eq!(saves, 2);
    let mut resumed = load_checkpoint(&ckpt).unwrap();
    train_in_epochs(&mut resumed, &prepared, |_| Ok(())).unwrap();
    assert_eq!(resumed.model.digest(), full.model.digest());
    assert_eq!(resumed.trace, full.trace);
    let a = evaluate(&resumed.model, &prepared, &cfg).unwrap();
    let b = evaluate(&full.model, &prepared, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sequential_frames_spike_at_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &tiny_scene(), 3).unwrap();
    let mut cfg = tiny_config(dir.path(), small_hash());
    cfg.train.appearance_epochs = 4;
    cfg.train.samples_per_frame = 4096;
    let prepared = prepare(&cfg).unwrap();
    let out = run_prepared(&cfg, &prepared).unwrap();
    let app: Vec<_> = out
        .trainer
        .trace
        .records()
        .iter()
        .filter(|r| r.stage == Stage::Appearance && r.epoch.unwrap() > 0)
        .collect();
    let (mut first, mut rest) = (Vec::new(), Vec::new());
    for (i, r) in app.iter().enumerate() {
        let c = r.loss_c.unwrap();
        if i == 0 || app[i - 1].frame != r.frame {
            first.push(c);
        } else {
            rest.push(c);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&first) > mean(&rest), "boundary {} vs within {}", mean(&first), mean(&rest));
}

#[test]
fn experiments_change_only_semantic_supervision() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &tiny_scene(), 3).unwrap();
    let mut cfg = tiny_config(dir.path(), EncoderConfig::Pe(PeConfig::new(4).unwrap()));
    let base = prepare(&cfg).unwrap();
    for exp in [Experiment::Sparse { fraction: 0.4 }, Experiment::Noise { ratio: 0.3 }] {
        cfg.experiment = exp;
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.height, base.height);
        assert_eq!(p.reference_frames.len(), base.reference_frames.len());
        for (a, b) in p.train_frames.iter().zip(&base.train_frames) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.camera, b.camera);
        }
        assert!(p.train_frames.iter().zip(&base.train_frames).any(|(a, b)| a.labels != b.labels));
        // same seed, same corruption
        let again = prepare(&cfg).unwrap();
        assert!(again.train_frames.iter().zip(&p.train_frames).all(|(a, b)| a.labels == b.labels));
    }
}
