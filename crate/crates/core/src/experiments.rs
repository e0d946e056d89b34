//! End-to-end runs: generate a scene, prepare supervision, train, evaluate.

use std::path::Path;

use log::info;

use crate::encoding::{EncoderConfig, HashGridConfig, HashingMode, PeConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_views, hole_rmse, manhole_coverage, render_eval_views, EvalReport};
use crate::geometry::{CameraFrame, SceneBounds, DEFAULT_MARGIN};
use crate::io::{dataset_hash, load_dataset, write_dataset, Dataset, Experiment, LoadOptions, Manifest, RunConfig};
use crate::network::{AdamConfig, FieldModel, ModelConfig, SemanticClassSet};
use crate::supervision::{
    ingest_point_cloud, noise_frames, pose_pseudo_points, sparsify_labels, HeightSample, HeightSource, NoiseSpec,
    PatchSpec,
};
use crate::synthetic::{generate_cloud_points, render_frames, CloudSpec, SceneSpec};
use crate::training::{FrameOrder, TrainConfig, Trainer};
use crate::util::{hex, mix_seed};
use sha2::{Digest, Sha256};

/// Renders `spec` and writes it with one simulated cloud per cloud source.
pub fn generate(root: &Path, spec: &SceneSpec, seed: u64) -> Result<()> {
    spec.validate()?;
    let frames = render_frames(spec)?;
    let mut clouds = Vec::new();
    for (i, source) in HeightSource::ALL.into_iter().enumerate() {
        if let Some(cloud) = CloudSpec::for_source(source) {
            clouds.push((source, generate_cloud_points(spec, &cloud, mix_seed(seed, i as u64))?));
        }
    }
    write_dataset(root, &frames, &clouds, &SemanticClassSet::default(), Some(spec))
}

/// Height supervision for `source`: pseudo points from poses or a stored cloud.
pub fn height_samples(ds: &Dataset, source: HeightSource, patch: &PatchSpec) -> Result<Vec<HeightSample>> {
    match source {
        HeightSource::Pose => {
            let poses: Vec<_> = ds.frames.iter().map(|f| f.camera.extrinsics).collect();
            pose_pseudo_points(&poses, patch)
        }
        s => {
            let cloud = ds
                .cloud(s)
                .ok_or_else(|| Error::dataset(&ds.root, format!("no {} point cloud", s.name())))?;
            if cloud.is_empty() {
                return Err(Error::dataset(&ds.root, format!("{} point cloud is empty", s.name())));
            }
            Ok(ingest_point_cloud(cloud, s))
        }
    }
}

/// Training inputs derived from a dataset and a run configuration.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub height: Vec<HeightSample>,
    /// Frames as seen by training, after label sparsification or noise.
    pub train_frames: Vec<CameraFrame>,
    /// Clean frames for evaluation.
    pub reference_frames: Vec<CameraFrame>,
    pub scene: Option<SceneSpec>,
    pub bounds: SceneBounds,
}

pub fn prepare_dataset(ds: Dataset, cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let height = height_samples(&ds, cfg.height_source, &cfg.train.patch)?;
    let bounds = match &ds.scene {
        Some(s) => s.bounds(),
        None => SceneBounds::from_points(
            height
                .iter()
                .map(|s| s.p)
                .chain(ds.frames.iter().map(|f| f.camera.extrinsics.center().xy())),
            DEFAULT_MARGIN,
        )?,
    };
    let classes = cfg.model.classes.len();
    let seed = mix_seed(cfg.train.seed, 0x1abe1);
    let train_frames = match cfg.experiment {
        Experiment::Sparse { fraction } => sparsify_labels(ds.frames.clone(), fraction, seed)?,
        Experiment::Noise { ratio } => noise_frames(ds.frames.clone(), &NoiseSpec { ratio, seed }, classes)?,
        Experiment::Baseline | Experiment::Ablation { .. } => ds.frames.clone(),
    };
    Ok(Prepared {
        height,
        train_frames,
        reference_frames: ds.frames,
        scene: ds.scene,
        bounds,
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let ds = load_dataset(
        &cfg.dataset,
        LoadOptions {
            kitti_axes: cfg.kitti_axes,
        },
    )?;
    prepare_dataset(ds, cfg)
}

pub fn new_trainer(cfg: &RunConfig, bounds: SceneBounds) -> Result<Trainer> {
    let model = FieldModel::new(cfg.effective_model(), bounds, AdamConfig::default())?;
    Trainer::new(model, cfg.train.clone())
}

/// Metrics of a trained model against the clean frames, plus height and
/// manhole metrics when the scene is known.
pub fn evaluate(model: &FieldModel, prepared: &Prepared, cfg: &RunConfig) -> Result<EvalReport> {
    let views = render_eval_views(model, &prepared.reference_frames, &cfg.train.patch, &cfg.eval.sampler());
    let mut report = evaluate_views(model, &views, &prepared.reference_frames)?;
    if let Some(scene) = &prepared.scene {
        report.hole_rmse = Some(hole_rmse(model, scene, cfg.eval.grid_step));
        report.manhole_coverage = Some(manhole_coverage(model, scene, cfg.eval.grid_step));
    }
    report.config = serde_json::to_value(cfg)?;
    Ok(report)
}

/// Trains to completion, calling `checkpoint` after stage 1 and after every
/// stage-2 epoch. Picks up wherever `trainer` left off.
pub fn train_in_epochs(
    trainer: &mut Trainer,
    prepared: &Prepared,
    mut checkpoint: impl FnMut(&Trainer) -> Result<()>,
) -> Result<()> {
    if !trainer.height_done() {
        trainer.train_height(&prepared.height, None)?;
        info!("height stage done after {} steps", trainer.progress.height_step);
        checkpoint(trainer)?;
    }
    let n = prepared.train_frames.len();
    while !trainer.appearance_done() {
        let left = n - trainer.progress.frame_pos;
        trainer.train_appearance(&prepared.train_frames, &prepared.height, Some(left))?;
        info!("epoch {}/{} done", trainer.progress.epoch, trainer.total_epochs());
        checkpoint(trainer)?;
    }
    Ok(())
}

pub fn manifest(cfg: &RunConfig, trainer: &Trainer) -> Result<Manifest> {
    Ok(Manifest {
        crate_version: env!("CARGO_PKG_VERSION").into(),
        dataset_hash: dataset_hash(&cfg.dataset)?,
        model_digest: trainer.model.digest(),
        trace_digest: hex(&Sha256::digest(trainer.trace.to_csv().as_bytes())),
        config: cfg.clone(),
    })
}

pub struct RunOutcome {
    pub trainer: Trainer,
    pub report: EvalReport,
}

pub fn run_prepared(cfg: &RunConfig, prepared: &Prepared) -> Result<RunOutcome> {
    let mut trainer = new_trainer(cfg, prepared.bounds)?;
    info!("training {} height samples, {} frames", prepared.height.len(), prepared.train_frames.len());
    trainer.train(&prepared.height, &prepared.train_frames)?;
    let report = evaluate(&trainer.model, prepared, cfg)?;
    Ok(RunOutcome { trainer, report })
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    run_prepared(cfg, &prepare(cfg)?)
}

/// One run per hash mode, everything else fixed.
pub fn ablate(cfg: &RunConfig, prepared: &Prepared, modes: &[HashingMode]) -> Result<Vec<(HashingMode, RunOutcome)>> {
    modes
        .iter()
        .map(|&mode| {
            let c = RunConfig {
                experiment: Experiment::Ablation { mode },
                ..cfg.clone()
            };
            info!("ablation: {mode:?}");
            Ok((mode, run_prepared(&c, prepared)?))
        })
        .collect()
}

pub const ALL_MODES: [HashingMode; 3] = [HashingMode::Hashed, HashingMode::DenseNoHash, HashingMode::SingleLevel];

/// Hash grid sized for a desk run over the default scene.
pub fn desk_hash() -> HashGridConfig {
    HashGridConfig {
        num_levels: 10,
        base_resolution: 8,
        per_level_scale: 1.6,
        table_size: 1 << 15,
        feature_dim: 2,
        mode: HashingMode::Hashed,
    }
}

pub fn desk_pe() -> PeConfig {
    PeConfig::new(10).expect("valid level count")
}

/// Smaller heads and budgets than the full defaults; trains the default scene
/// in minutes on one core.
pub fn desk_model(encoder: EncoderConfig) -> ModelConfig {
    ModelConfig {
        height_hidden: vec![32; 2],
        color_hidden: vec![32; 2],
        semantic_hidden: vec![32; 2],
        ..ModelConfig::uniform(encoder)
    }
}

pub fn desk_train() -> TrainConfig {
    TrainConfig {
        height_steps: 1500,
        height_batch: 1024,
        appearance_epochs: 4,
        samples_per_frame: 32768,
        appearance_batch: 1024,
        learning_rate: 2e-3,
        seed: 0,
        frame_order: FrameOrder::Sequential,
        ..TrainConfig::default()
    }
}

/// A reduced configuration that finishes quickly on the default scene.
pub fn desk_config(dataset: &Path, encoder: EncoderConfig) -> RunConfig {
    let mut cfg = RunConfig {
        dataset: dataset.to_path_buf(),
        model: desk_model(encoder),
        train: desk_train(),
        ..RunConfig::default()
    };
    cfg.eval.samples_per_frame = 50_000;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::CameraPath;

    fn tiny_scene() -> SceneSpec {
        let mut texture = crate::synthetic::TextureSpec::default();
        texture.manholes.truncate(1);
        SceneSpec {
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
        }
    }

    #[test]
    fn generated_dataset_feeds_every_source() {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &tiny_scene(), 1).unwrap();
        let ds = load_dataset(dir.path(), LoadOptions::default()).unwrap();
        assert_eq!(ds.frames.len(), 4);
        for s in HeightSource::ALL {
            let h = height_samples(&ds, s, &PatchSpec::default()).unwrap();
            assert!(!h.is_empty(), "{s:?}");
            assert!(h.iter().all(|x| x.source == s));
        }
    }

    #[test]
    fn experiments_only_touch_training_frames() {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &tiny_scene(), 1).unwrap();
        let ds = load_dataset(dir.path(), LoadOptions::default()).unwrap();
        let mut cfg = desk_config(dir.path(), EncoderConfig::Pe(desk_pe()));
        cfg.experiment = Experiment::Sparse { fraction: 0.25 };
        let p = prepare_dataset(ds.clone(), &cfg).unwrap();
        assert_eq!(p.train_frames.iter().filter(|f| f.labels.is_some()).count(), 1);
        assert!(p.reference_frames.iter().all(|f| f.labels.is_some()));
        cfg.experiment = Experiment::Noise { ratio: 0.5 };
        let p = prepare_dataset(ds, &cfg).unwrap();
        assert_ne!(p.train_frames[0].labels, p.reference_frames[0].labels);
    }
}
