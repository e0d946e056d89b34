//! Height targets and image-space color/semantic targets.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, sample_color, sample_label, CameraFrame, Coord2, Extrinsics, SceneBounds, WorldPoint3};
use crate::network::HeightField;
use crate::raster::{LabelMap, IGNORE_LABEL};
use crate::util::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightSource {
    Pose,
    Lidar,
    SfmDense,
    SfmSparse,
    Synthetic,
}

impl HeightSource {
    pub const ALL: [HeightSource; 5] = [
        HeightSource::Pose,
        HeightSource::Lidar,
        HeightSource::SfmDense,
        HeightSource::SfmSparse,
        HeightSource::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeightSource::Pose => "pose",
            HeightSource::Lidar => "lidar",
            HeightSource::SfmDense => "sfm_dense",
            HeightSource::SfmSparse => "sfm_sparse",
            HeightSource::Synthetic => "synthetic",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeightSample {
    pub p: Coord2,
    pub z_gt: f64,
    pub source: HeightSource,
}

/// One color/semantic target at a world coordinate, seen from one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppearanceSample {
    pub p: Coord2,
    pub c_gt: [f64; 3],
    pub s_gt: u8,
    pub frame: usize,
}

/// Ground rectangle attached to each pose, in the pose's heading frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Forward extent from the camera, meters.
    pub length: f64,
    /// Lateral extent centered on the camera, meters.
    pub width: f64,
    pub grid_step: f64,
    pub camera_height: f64,
    #[serde(default)]
    pub dedup: bool,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            length: 20.0,
            width: 10.0,
            grid_step: 0.1,
            camera_height: 1.65,
            dedup: false,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("length", self.length),
            ("width", self.width),
            ("grid_step", self.grid_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("patch {name} must be positive, got {v}")));
            }
        }
        if !self.camera_height.is_finite() {
            return Err(Error::Config("camera height must be finite".into()));
        }
        Ok(())
    }

    /// Grid points along (forward, lateral).
    pub fn grid_counts(&self) -> (usize, usize) {
        (
            (self.length / self.grid_step).round() as usize + 1,
            (self.width / self.grid_step).round() as usize + 1,
        )
    }

    /// World xy of a point `forward` ahead and `lateral` to the left of the pose.
    pub fn place(pose: &Extrinsics, forward: f64, lateral: f64) -> Coord2 {
        let c = pose.center();
        let (s, co) = pose.yaw().sin_cos();
        Coord2::new(c.x + forward * co - lateral * s, c.y + forward * s + lateral * co)
    }
}

/// Flat-ground pseudo points on a regular grid ahead of each pose.
pub fn pose_pseudo_points(poses: &[Extrinsics], patch: &PatchSpec) -> Result<Vec<HeightSample>> {
    patch.validate()?;
    let (nf, nl) = patch.grid_counts();
    let mut out = Vec::with_capacity(poses.len() * nf * nl);
    for pose in poses {
        let z = pose.center().z - patch.camera_height;
        for i in 0..nf {
            let f = i as f64 * patch.grid_step;
            for j in 0..nl {
                let l = -patch.width / 2.0 + j as f64 * patch.grid_step;
                out.push(HeightSample {
                    p: PatchSpec::place(pose, f, l),
                    z_gt: z,
                    source: HeightSource::Pose,
                });
            }
        }
    }
    if patch.dedup {
        let mut seen = HashSet::new();
        out.retain(|s| seen.insert((s.p.x.to_bits(), s.p.y.to_bits())));
    }
    Ok(out)
}

pub fn ingest_point_cloud(points: &[WorldPoint3], source: HeightSource) -> Vec<HeightSample> {
    points
        .iter()
        .map(|w| HeightSample {
            p: w.xy(),
            z_gt: w.z,
            source,
        })
        .collect()
}

/// Keeps samples whose height lies between the `lower` and `upper`
/// percentiles (0..=100) of the cloud; a crude ground filter for real data.
pub fn filter_z_percentile(samples: Vec<HeightSample>, lower: f64, upper: f64) -> Result<Vec<HeightSample>> {
    if !(0.0..=100.0).contains(&lower) || !(lower..=100.0).contains(&upper) {
        return Err(Error::Config(format!("invalid percentile band [{lower}, {upper}]")));
    }
    if samples.is_empty() {
        return Ok(samples);
    }
    let mut zs: Vec<f64> = samples.iter().map(|s| s.z_gt).collect();
    zs.sort_by(f64::total_cmp);
    let at = |q: f64| zs[((q / 100.0) * (zs.len() - 1) as f64).round() as usize];
    let (lo, hi) = (at(lower), at(upper));
    Ok(samples.into_iter().filter(|s| s.z_gt >= lo && s.z_gt <= hi).collect())
}

/// How stage-2 coordinates are drawn around each pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub samples_per_frame: usize,
    /// Drop samples whose label is the ignore id instead of keeping them for color.
    #[serde(default)]
    pub drop_ignored: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            samples_per_frame: 200_000,
            drop_ignored: false,
            seed: 0,
        }
    }
}

/// Samples of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub frame: usize,
    pub samples: Vec<AppearanceSample>,
}

/// Lazily yields one [`FrameBatch`] per frame, in the given order.
/// Frames without in-view samples are skipped with a warning.
pub struct AppearanceStream<'a, H: HeightField + ?Sized> {
    frames: &'a [CameraFrame],
    order: Vec<usize>,
    next: usize,
    height: &'a H,
    patch: PatchSpec,
    region: SceneBounds,
    cfg: SamplerConfig,
    epoch: u64,
}

impl<H: HeightField + ?Sized> Iterator for AppearanceStream<'_, H> {
    type Item = FrameBatch;

    fn next(&mut self) -> Option<FrameBatch> {
        while self.next < self.order.len() {
            let frame = &self.frames[self.order[self.next]];
            self.next += 1;
            let samples = sample_frame(frame, self.height, &self.patch, &self.region, &self.cfg, self.epoch);
            if samples.is_empty() {
                log::warn!("frame {}: no in-view samples, skipped", frame.id);
                continue;
            }
            return Some(FrameBatch {
                frame: frame.id,
                samples,
            });
        }
        None
    }
}

/// Stage-2 sample stream. `order` indexes into `frames`; coordinates are
/// drawn inside each pose's patch and clipped to `region`.
pub fn build_appearance_stream<'a, H: HeightField + ?Sized>(
    frames: &'a [CameraFrame],
    order: Vec<usize>,
    height: &'a H,
    patch: PatchSpec,
    region: SceneBounds,
    cfg: SamplerConfig,
    epoch: u64,
) -> AppearanceStream<'a, H> {
    AppearanceStream {
        frames,
        order,
        next: 0,
        height,
        patch,
        region,
        cfg,
        epoch,
    }
}

/// Draws, lifts, projects and looks up the samples of a single frame.
pub fn sample_frame<H: HeightField + ?Sized>(
    frame: &CameraFrame,
    height: &H,
    patch: &PatchSpec,
    region: &SceneBounds,
    cfg: &SamplerConfig,
    epoch: u64,
) -> Vec<AppearanceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, epoch), frame.id as u64));
    let pose = &frame.camera.extrinsics;
    let pts: Vec<Coord2> = (0..cfg.samples_per_frame)
        .map(|_| {
            let f = rng.gen::<f64>() * patch.length;
            let l = (rng.gen::<f64>() - 0.5) * patch.width;
            PatchSpec::place(pose, f, l)
        })
        .filter(|p| p.x >= region.min_x && p.x <= region.max_x && p.y >= region.min_y && p.y <= region.max_y)
        .collect();
    let zs = height.heights(&pts);
    let mut out = Vec::new();
    for (p, z) in pts.into_iter().zip(zs) {
        let Some(px) = project(WorldPoint3::new(p.x, p.y, z), &frame.camera).in_view() else {
            continue;
        };
        let s_gt = frame
            .labels
            .as_ref()
            .map_or(IGNORE_LABEL, |l| sample_label(l, px));
        if cfg.drop_ignored && s_gt == IGNORE_LABEL {
            continue;
        }
        out.push(AppearanceSample {
            p,
            c_gt: sample_color(&frame.image, px),
            s_gt,
            frame: frame.id,
        });
    }
    out
}

/// Number of frames kept labeled at `keep_fraction`.
pub fn labeled_count(n: usize, keep_fraction: f64) -> usize {
    // tolerate representation error such as 0.1 * 30 = 3.0000000000000004
    let k = keep_fraction.clamp(0.0, 1.0) * n as f64;
    ((k - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps label maps on a seeded random subset of `ceil(keep_fraction * n)`
/// frames; the rest lose their labels.
pub fn sparsify_labels(mut frames: Vec<CameraFrame>, keep_fraction: f64, seed: u64) -> Result<Vec<CameraFrame>> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::Config(format!("keep fraction {keep_fraction} outside [0, 1]")));
    }
    let keep = labeled_count(frames.len(), keep_fraction);
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5_9A25)));
    for &i in &idx[keep..] {
        frames[i].labels = None;
    }
    Ok(frames)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("noise ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }
}

/// Flips each labeled pixel with probability `ratio` to a uniformly chosen
/// different class in `0..num_classes`. Ignore pixels are left alone.
pub fn inject_label_noise(map: &LabelMap, spec: &NoiseSpec, num_classes: usize) -> Result<LabelMap> {
    spec.validate()?;
    if num_classes < 2 {
        return Err(Error::Config("label noise needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = map.clone();
    for v in out.data.iter_mut() {
        let flip = rng.gen::<f64>() < spec.ratio;
        let r = rng.gen_range(0..num_classes - 1) as u8;
        if flip && (*v as usize) < num_classes {
            *v = if r >= *v { r + 1 } else { r };
        }
    }
    Ok(out)
}

/// Applies [`inject_label_noise`] to every labeled frame with a per-frame seed
/// derived from `spec.seed` and the frame id.
pub fn noise_frames(mut frames: Vec<CameraFrame>, spec: &NoiseSpec, num_classes: usize) -> Result<Vec<CameraFrame>> {
    for f in frames.iter_mut() {
        if let Some(l) = &f.labels {
            let s = NoiseSpec {
                ratio: spec.ratio,
                seed: mix_seed(spec.seed, f.id as u64),
            };
            f.labels = Some(inject_label_noise(l, &s, num_classes)?);
        }
    }
    Ok(frames)
}
