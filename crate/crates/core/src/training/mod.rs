//! Two-stage optimization: height first, then color and semantics over
//! per-frame sample sets with the height branch frozen.

mod checkpoint;
mod trace;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use trace::{ema, LossRecord, LossTrace, Stage};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::NormCoord2;
use crate::error::{Error, Result};
use crate::geometry::CameraFrame;
use crate::network::{adam_step, FieldModel, HeightField};
use crate::supervision::{sample_frame, AppearanceSample, HeightSample, PatchSpec, SamplerConfig};
use crate::util::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOrder {
    /// Frames in capture order every epoch.
    Sequential,
    /// A fresh seeded permutation every epoch.
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub height_steps: usize,
    pub height_batch: usize,
    pub appearance_epochs: usize,
    /// Samples drawn around each pose per epoch.
    pub samples_per_frame: usize,
    /// Samples per optimizer step within a frame; 0 takes the whole frame in one step.
    #[serde(default)]
    pub appearance_batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub frame_order: FrameOrder,
    #[serde(default)]
    pub patch: PatchSpec,
    #[serde(default)]
    pub drop_ignored: bool,
    /// Extra epochs after stage 2 that update height and appearance together,
    /// re-lifting samples with the current height each frame.
    #[serde(default)]
    pub joint_finetune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            height_steps: 5000,
            height_batch: 4096,
            appearance_epochs: 10,
            samples_per_frame: 200_000,
            appearance_batch: 0,
            learning_rate: 5e-4,
            seed: 0,
            frame_order: FrameOrder::Sequential,
            patch: PatchSpec::default(),
            drop_ignored: false,
            joint_finetune_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height_batch == 0 || self.samples_per_frame == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        self.patch.validate()
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            samples_per_frame: self.samples_per_frame,
            drop_ignored: self.drop_ignored,
            seed: mix_seed(self.seed, 0xA99E),
        }
    }

    /// Frame visiting order for one stage-2 epoch.
    pub fn frame_order_for(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.frame_order == FrameOrder::Shuffled {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.seed, 0x0DE2), epoch as u64)));
        }
        order
    }
}

/// Position of a run, enough to resume it exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub height_step: usize,
    /// Completed stage-2 epochs plus joint epochs.
    pub epoch: usize,
    /// Frames finished within the current epoch.
    pub frame_pos: usize,
    /// Optimizer steps taken over all stages.
    pub global_step: usize,
}

/// Model, configuration, loss trace and progress of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FieldModel,
    pub config: TrainConfig,
    pub trace: LossTrace,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(mut model: FieldModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.height_optimizer.config.learning_rate = config.learning_rate;
        model.appearance_optimizer.config.learning_rate = config.learning_rate;
        model.semantic_optimizer.config.learning_rate = config.learning_rate;
        Ok(Self {
            model,
            config,
            trace: LossTrace::default(),
            progress: Progress::default(),
        })
    }

    pub fn height_done(&self) -> bool {
        self.progress.height_step >= self.config.height_steps
    }

    pub fn total_epochs(&self) -> usize {
        self.config.appearance_epochs + self.config.joint_finetune_epochs
    }

    pub fn appearance_done(&self) -> bool {
        self.progress.epoch >= self.total_epochs()
    }

    /// Runs stage 1 until `height_steps`, or for at most `budget` steps.
    pub fn train_height(&mut self, samples: &[HeightSample], budget: Option<usize>) -> Result<()> {
        if samples.is_empty() && !self.height_done() {
            return Err(Error::Config("no height samples to train on".into()));
        }
        let norm: Vec<NormCoord2> = samples.iter().map(|s| self.model.normalize(s.p)).collect();
        let mut left = budget.unwrap_or(usize::MAX);
        while !self.height_done() && left > 0 {
            self.height_step(samples, &norm)?;
            left -= 1;
        }
        Ok(())
    }

    fn height_step(&mut self, samples: &[HeightSample], norm: &[NormCoord2]) -> Result<()> {
        let step = self.progress.height_step;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.config.seed, 0x4E16), step as u64));
        let n = self.config.height_batch;
        let mut xs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.gen_range(0..samples.len());
            xs.push(norm[i]);
            zs.push(samples[i].z_gt);
        }
        self.model.zero_height_grad();
        let sum = self.model.height_backward(&xs, &zs, 1.0 / n as f64)?;
        let (opt, slots) = self.model.height_update_parts();
        adam_step(slots, opt)?;
        self.progress.height_step += 1;
        self.progress.global_step += 1;
        self.trace.push(LossRecord {
            step: self.progress.global_step,
            stage: Stage::Height,
            loss_z: Some(sum / n as f64),
            loss_c: None,
            loss_s: None,
            frame: None,
            epoch: None,
        })
    }

    /// Runs stage 2 (and any joint epochs) frame by frame, or for at most
    /// `budget` frames. Height samples are only used by joint epochs.
    pub fn train_appearance(&mut self, frames: &[CameraFrame], height: &[HeightSample], budget: Option<usize>) -> Result<()> {
        if frames.is_empty() && !self.appearance_done() {
            return Err(Error::Config("no frames to train on".into()));
        }
        let mut frozen = self.model.height_snapshot();
        let norm: Vec<NormCoord2> = height.iter().map(|s| self.model.normalize(s.p)).collect();
        let mut left = budget.unwrap_or(usize::MAX);
        while !self.appearance_done() && left > 0 {
            let epoch = self.progress.epoch;
            let joint = epoch >= self.config.appearance_epochs;
            let order = self.config.frame_order_for(epoch, frames.len());
            let frame = &frames[order[self.progress.frame_pos]];
            if joint {
                if height.is_empty() {
                    return Err(Error::Config("joint epochs need height samples".into()));
                }
                frozen = self.model.height_snapshot();
            }
            let samples = sample_frame(
                frame,
                &frozen,
                &self.config.patch,
                self.model.bounds(),
                &self.config.sampler(),
                epoch as u64,
            );
            if samples.is_empty() {
                log::warn!("frame {}: no in-view samples, skipped", frame.id);
            } else {
                self.frame_steps(&samples, frame.id)?;
            }
            if joint {
                self.height_step(height, &norm)?;
            }
            self.progress.frame_pos += 1;
            if self.progress.frame_pos == frames.len() {
                self.progress.frame_pos = 0;
                self.progress.epoch += 1;
            }
            left -= 1;
        }
        Ok(())
    }

    fn frame_steps(&mut self, samples: &[AppearanceSample], frame: usize) -> Result<()> {
        let b = match self.config.appearance_batch {
            0 => samples.len(),
            b => b,
        };
        let ignore = self.model.config().classes.ignore;
        for chunk in samples.chunks(b) {
            let xs: Vec<NormCoord2> = chunk.iter().map(|s| self.model.normalize(s.p)).collect();
            let cs: Vec<[f64; 3]> = chunk.iter().map(|s| s.c_gt).collect();
            let ls: Vec<u8> = chunk.iter().map(|s| s.s_gt).collect();
            let labeled = ls.iter().filter(|l| **l != ignore).count();
            let sem_scale = if labeled > 0 { 1.0 / labeled as f64 } else { 0.0 };
            self.model.zero_appearance_grad();
            let sums = self
                .model
                .appearance_backward(&xs, &cs, &ls, 1.0 / chunk.len() as f64, sem_scale)?;
            let (opt, slots) = self.model.color_update_parts();
            adam_step(slots, opt)?;
            // Without labels the semantic branch has no loss term, so its
            // optimizer state is left alone rather than coasting on momentum.
            if labeled > 0 {
                let (opt, slots) = self.model.semantic_update_parts();
                adam_step(slots, opt)?;
            }
            self.progress.global_step += 1;
            self.trace.push(LossRecord {
                step: self.progress.global_step,
                stage: Stage::Appearance,
                loss_z: None,
                loss_c: Some(sums.color / chunk.len() as f64),
                loss_s: (labeled > 0).then(|| sums.semantic / labeled as f64),
                frame: Some(frame),
                epoch: Some(self.progress.epoch),
            })?;
        }
        Ok(())
    }

    /// Both stages to completion.
    pub fn train(&mut self, height: &[HeightSample], frames: &[CameraFrame]) -> Result<()> {
        self.train_height(height, None)?;
        self.train_appearance(frames, height, None)
    }
}

/// Root-mean-square error of a height field against samples.
pub fn height_rmse<H: HeightField + ?Sized>(field: &H, samples: &[HeightSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let pts: Vec<_> = samples.iter().map(|s| s.p).collect();
    let z = field.heights(&pts);
    let se: f64 = z.iter().zip(samples).map(|(a, s)| (a - s.z_gt).powi(2)).sum();
    (se / samples.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{EncoderConfig, HashGridConfig, HashingMode, PeConfig};
    use crate::geometry::{Camera, Coord2, Extrinsics, Intrinsics, SceneBounds, WorldPoint3};
    use crate::network::{AdamConfig, ModelConfig};
    use crate::raster::{LabelMap, RgbImage};
    use crate::supervision::HeightSource;

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

    fn model(enc: EncoderConfig) -> FieldModel {
        let cfg = ModelConfig {
            height_hidden: vec![16, 16],
            color_hidden: vec![16, 16],
            semantic_hidden: vec![16, 16],
            seed: 1,
            ..ModelConfig::uniform(enc)
        };
        FieldModel::new(cfg, SceneBounds::new(0.0, 10.0, -5.0, 5.0, 0.01).unwrap(), AdamConfig::default()).unwrap()
    }

    fn plane(z: f64) -> Vec<HeightSample> {
        (0..400)
            .map(|i| HeightSample {
                p: Coord2::new((i % 20) as f64 * 0.5, (i / 20) as f64 * 0.5 - 5.0),
                z_gt: z,
                source: HeightSource::Synthetic,
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            height_steps: 600,
            height_batch: 128,
            appearance_epochs: 3,
            samples_per_frame: 2000,
            appearance_batch: 500,
            learning_rate: 1e-2,
            seed: 4,
            patch: PatchSpec {
                length: 10.0,
                width: 10.0,
                ..PatchSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    fn frames(color: [f32; 3]) -> Vec<CameraFrame> {
        let k = Intrinsics {
            fx: 20.0,
            fy: 20.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
        };
        (0..3)
            .map(|i| {
                let ext = Extrinsics::looking(WorldPoint3::new(1.0 + i as f64, 0.0, 6.0), 0.0, 1.2);
                CameraFrame::new(
                    i,
                    Camera {
                        extrinsics: ext,
                        intrinsics: k,
                    },
                    RgbImage::new(32, 32, color),
                    Some(LabelMap::new(32, 32, 1)),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn constant_plane_is_learned() {
        let mut t = Trainer::new(model(small_hash()), cfg()).unwrap();
        let data = plane(0.7);
        t.train_height(&data, None).unwrap();
        assert!(height_rmse(&t.model, &data) < 1e-2);
        let steps: Vec<usize> = t.trace.records().iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let m = model(small_hash());
        let d = m.digest();
        let mut t = Trainer::new(
            m,
            TrainConfig {
                height_steps: 0,
                ..cfg()
            },
        )
        .unwrap();
        t.train_height(&plane(1.0), None).unwrap();
        assert_eq!(t.model.digest(), d);
    }

    #[test]
    fn uniform_color_scene_and_frozen_height() {
        let mut t = Trainer::new(model(small_hash()), cfg()).unwrap();
        let data = plane(0.0);
        t.train_height(&data, Some(50)).unwrap();
        t.progress.height_step = t.config.height_steps;
        let before = t.model.height_digest();
        t.config.appearance_epochs = 20;
        t.train_appearance(&frames([0.2, 0.6, 0.4]), &data, None).unwrap();
        assert_eq!(t.model.height_digest(), before);
        let last = t.trace.records().last().unwrap();
        assert!(last.loss_c.unwrap() < 1e-4, "color loss {:?}", last.loss_c);
    }

    #[test]
    fn pe_model_trains_too() {
        let c = TrainConfig {
            height_steps: 2000,
            ..cfg()
        };
        let mut t = Trainer::new(model(EncoderConfig::Pe(PeConfig::new(4).unwrap())), c).unwrap();
        t.train_height(&plane(-0.3), None).unwrap();
        let e = height_rmse(&t.model, &plane(-0.3));
        assert!(e < 1e-2, "rmse {e}");
    }

    #[test]
    fn split_run_matches_uninterrupted() {
        let data = plane(0.25);
        let fr = frames([0.5, 0.1, 0.9]);
        let mut a = Trainer::new(model(small_hash()), cfg()).unwrap();
        a.train_height(&data, Some(40)).unwrap();
        a.progress.height_step = a.config.height_steps;
        let mut b = a.clone();
        a.train_appearance(&fr, &data, None).unwrap();
        b.train_appearance(&fr, &data, Some(4)).unwrap();
        b.train_appearance(&fr, &data, None).unwrap();
        assert_eq!(a.model.digest(), b.model.digest());
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn unlabeled_frames_leave_semantic_branch_alone() {
        let data = plane(0.0);
        let mut fr = frames([0.3, 0.3, 0.3]);
        for f in &mut fr[1..] {
            f.labels = None;
        }
        let mut t = Trainer::new(model(small_hash()), cfg()).unwrap();
        t.progress.height_step = t.config.height_steps;
        t.train_appearance(&fr, &data, Some(1)).unwrap();
        let part = |m: &FieldModel, prefix: &str| -> Vec<Vec<f64>> {
            m.tensors().into_iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v.to_vec()).collect()
        };
        let (sem, color) = (part(&t.model, "semantic"), part(&t.model, "color"));
        let sem_state = t.model.semantic_optimizer.clone();
        t.train_appearance(&fr, &data, Some(2)).unwrap();
        assert_eq!(part(&t.model, "semantic"), sem);
        assert_eq!(t.model.semantic_optimizer, sem_state);
        assert_ne!(part(&t.model, "color"), color);
    }

    #[test]
    fn shuffled_order_is_a_seeded_permutation() {
        let c = TrainConfig {
            frame_order: FrameOrder::Shuffled,
            ..cfg()
        };
        let o = c.frame_order_for(2, 20);
        let mut s = o.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
        assert_eq!(o, c.frame_order_for(2, 20));
        assert_ne!(o, c.frame_order_for(3, 20));
        assert_eq!(cfg().frame_order_for(5, 4), vec![0, 1, 2, 3]);
    }
}
