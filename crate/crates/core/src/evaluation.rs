//! Image metrics, hole-filling error and rendered evaluation views.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_pixel, project, CameraFrame, Coord2, WorldPoint3};
use crate::network::{FieldModel, HeightField, MANHOLE};
use crate::raster::{LabelMap, RgbImage};
use crate::supervision::{sample_frame, PatchSpec, SamplerConfig};
use crate::synthetic::{dense_grid, SceneSpec};

/// Peak signal-to-noise ratio with peak 1.0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    /// Zero error; PSNR is unbounded.
    Identical,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Identical
        } else {
            Psnr::Db(-10.0 * mse.log10())
        }
    }

    /// Value in dB, infinite when identical.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Identical => f64::INFINITY,
        }
    }
}

/// Squared-error accumulator; PSNR of everything added so far.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PsnrAccumulator {
    pub squared_error: f64,
    pub count: usize,
}

impl PsnrAccumulator {
    pub fn add_values(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape("psnr inputs differ in length".into()));
        }
        self.squared_error += pred.iter().zip(gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        self.count += pred.len();
        Ok(())
    }

    /// Adds all channels of the masked pixels.
    pub fn add_image(&mut self, pred: &RgbImage, gt: &RgbImage, mask: &[bool]) -> Result<()> {
        if pred.width != gt.width || pred.height != gt.height || mask.len() != gt.data.len() {
            return Err(Error::Shape("psnr image, reference and mask sizes differ".into()));
        }
        for ((p, g), m) in pred.data.iter().zip(&gt.data).zip(mask) {
            if *m {
                for k in 0..3 {
                    self.squared_error += (p[k] as f64 - g[k] as f64).powi(2);
                }
                self.count += 3;
            }
        }
        Ok(())
    }

    pub fn mse(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.squared_error / self.count as f64
        }
    }

    pub fn psnr(&self) -> Psnr {
        Psnr::from_mse(self.mse())
    }
}

/// PSNR over equal-length value arrays.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<Psnr> {
    let mut acc = PsnrAccumulator::default();
    acc.add_values(pred, gt)?;
    Ok(acc.psnr())
}

pub fn psnr_image(pred: &RgbImage, gt: &RgbImage, mask: &[bool]) -> Result<Psnr> {
    let mut acc = PsnrAccumulator::default();
    acc.add_image(pred, gt, mask)?;
    Ok(acc.psnr())
}

/// Class confusion counts, rows indexed by ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Adds label pairs, skipping pairs whose ground truth is outside the class
    /// set (the ignore id among them). Out-of-set predictions are rejected.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape("label arrays differ in length".into()));
        }
        for (p, g) in pred.iter().zip(gt) {
            let (p, g) = (*p as usize, *g as usize);
            if g >= self.classes {
                continue;
            }
            if p >= self.classes {
                return Err(Error::Shape(format!("predicted class {p} outside the class set")));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn add_masked(&mut self, pred: &LabelMap, gt: &LabelMap, mask: &[bool]) -> Result<()> {
        if pred.data.len() != gt.data.len() || mask.len() != gt.data.len() {
            return Err(Error::Shape("label map sizes differ".into()));
        }
        let (p, g): (Vec<u8>, Vec<u8>) = pred
            .data
            .iter()
            .zip(&gt.data)
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|((p, g), _)| (*p, *g))
            .unzip();
        self.add(&p, &g)
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// IoU per class; `None` for classes absent from the ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let gt_total: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                if gt_total == 0 {
                    return None;
                }
                let pred_total: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
                let tp = self.get(c, c);
                Some(tp as f64 / (gt_total + pred_total - tp) as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth, 0 when none is.
    pub fn miou(&self) -> f64 {
        let v: Vec<f64> = self.iou().into_iter().flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou(pred: &[u8], gt: &[u8], classes: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(MiouReport {
        per_class: cm.iou(),
        miou: cm.miou(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoleRmse {
    pub supervised: f64,
    pub hole: Option<f64>,
}

/// Height RMSE on a regular grid of step `step`, split into points inside and
/// outside the scene's holes.
pub fn hole_rmse<H: HeightField + ?Sized>(field: &H, spec: &SceneSpec, step: f64) -> HoleRmse {
    let (pts, in_hole) = dense_grid(spec, step);
    let z = field.heights(&pts);
    let mut acc = [(0.0, 0usize); 2];
    for ((p, h), zp) in pts.iter().zip(&in_hole).zip(&z) {
        let e = (zp - spec.profile.z(p.x)).powi(2);
        let a = &mut acc[*h as usize];
        a.0 += e;
        a.1 += 1;
    }
    let rmse = |(s, n): (f64, usize)| (n > 0).then(|| (s / n as f64).sqrt());
    HoleRmse {
        supervised: rmse(acc[0]).unwrap_or(0.0),
        hole: rmse(acc[1]),
    }
}

/// Model predictions splatted into one frame's image plane.
#[derive(Clone, Debug)]
pub struct EvalView {
    pub frame: usize,
    pub color: RgbImage,
    pub labels: LabelMap,
    /// Pixels that received a sample and are not background in the reference.
    pub mask: Vec<bool>,
}

impl EvalView {
    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Nearest-pixel splat with a depth test: each sample is `(u, v, depth)` and a
/// payload; the nearest sample per pixel wins.
pub fn splat<T: Copy>(width: usize, height: usize, samples: &[(f64, f64, f64, T)]) -> Vec<Option<(f64, T)>> {
    let mut buf: Vec<Option<(f64, T)>> = vec![None; width * height];
    for &(u, v, d, t) in samples {
        let px = crate::geometry::PixelCoord { u, v, depth: d };
        let (x, y) = nearest_pixel(px, width, height);
        let slot = &mut buf[y * width + x];
        if slot.map_or(true, |(best, _)| d < best) {
            *slot = Some((d, t));
        }
    }
    buf
}

/// Renders predicted color and labels for each frame at sample coordinates
/// drawn around its pose (lifted by the model's height branch).
pub fn render_eval_views(model: &FieldModel, frames: &[CameraFrame], patch: &PatchSpec, sampler: &SamplerConfig) -> Vec<EvalView> {
    let ignore = model.config().classes.ignore;
    frames
        .iter()
        .map(|frame| {
            let samples = sample_frame(frame, model, patch, model.bounds(), sampler, 0);
            let pts: Vec<Coord2> = samples.iter().map(|s| s.p).collect();
            let z = model.heights(&pts);
            let colors = model.colors(&pts);
            let labels = model.labels(&pts);
            let cam = &frame.camera;
            let splats: Vec<(f64, f64, f64, usize)> = pts
                .par_iter()
                .zip(&z)
                .enumerate()
                .filter_map(|(i, (p, z))| {
                    project(WorldPoint3::new(p.x, p.y, *z), cam)
                        .in_view()
                        .map(|px| (px.u, px.v, px.depth, i))
                })
                .collect();
            let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
            let buf = splat(w, h, &splats);
            let mut color = RgbImage::new(w, h, [0.0; 3]);
            let mut lab = LabelMap::new(w, h, ignore);
            let mut mask = vec![false; w * h];
            for (k, slot) in buf.iter().enumerate() {
                if let Some((_, i)) = slot {
                    let background = frame.labels.as_ref().is_some_and(|l| l.data[k] == ignore);
                    if background {
                        continue;
                    }
                    color.data[k] = colors[*i].map(|c| c as f32);
                    lab.data[k] = labels[*i];
                    mask[k] = true;
                }
            }
            EvalView {
                frame: frame.id,
                color,
                labels: lab,
                mask,
            }
        })
        .collect()
}

/// Fraction of each manhole disc's ground grid predicted as manhole.
pub fn manhole_coverage(model: &FieldModel, spec: &SceneSpec, step: f64) -> Vec<f64> {
    spec.texture
        .manholes
        .iter()
        .map(|m| {
            let n = (2.0 * m.radius / step).ceil() as i64;
            let pts: Vec<Coord2> = (-n..=n)
                .flat_map(|i| (-n..=n).map(move |j| Coord2::new(m.x + i as f64 * step, m.y + j as f64 * step)))
                .filter(|p| m.contains(p.x, p.y))
                .collect();
            if pts.is_empty() {
                return 0.0;
            }
            let hits = model.labels(&pts).into_iter().filter(|l| *l == MANHOLE).count();
            hits as f64 / pts.len() as f64
        })
        .collect()
}

/// Which manholes count as detected: at least half the disc labeled manhole.
pub fn manhole_hits(coverage: &[f64]) -> Vec<bool> {
    coverage.iter().map(|c| *c >= 0.5).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// PSNR over all masked pixels of all frames; `None` when identical.
    pub psnr_db: Option<f64>,
    pub psnr_identical: bool,
    /// Mean of per-frame PSNR values, for comparison with the pooled figure.
    pub psnr_frame_mean_db: Option<f64>,
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub hole_rmse: Option<HoleRmse>,
    pub manhole_coverage: Option<Vec<f64>>,
    pub frames: usize,
    pub masked_pixels: usize,
    pub total_pixels: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn coverage(&self) -> f64 {
        if self.total_pixels == 0 {
            0.0
        } else {
            self.masked_pixels as f64 / self.total_pixels as f64
        }
    }
}

/// Metrics of rendered views against reference frames (matched by position).
pub fn evaluate_views(model: &FieldModel, views: &[EvalView], reference: &[CameraFrame]) -> Result<EvalReport> {
    if views.len() != reference.len() {
        return Err(Error::Shape("views and reference frames differ in count".into()));
    }
    let classes = model.num_classes();
    let mut pooled = PsnrAccumulator::default();
    let mut per_frame = Vec::new();
    let mut cm = ConfusionMatrix::new(classes);
    let (mut masked, mut total) = (0, 0);
    for (v, f) in views.iter().zip(reference) {
        let mut acc = PsnrAccumulator::default();
        acc.add_image(&v.color, &f.image, &v.mask)?;
        if acc.count > 0 {
            per_frame.push(acc.psnr().db());
        }
        pooled.add_image(&v.color, &f.image, &v.mask)?;
        if let Some(gt) = &f.labels {
            cm.add_masked(&v.labels, gt, &v.mask)?;
        }
        masked += v.covered();
        total += v.mask.len();
    }
    let psnr = pooled.psnr();
    let finite: Vec<f64> = per_frame.iter().copied().filter(|v| v.is_finite()).collect();
    Ok(EvalReport {
        psnr_db: match psnr {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        },
        psnr_identical: psnr == Psnr::Identical,
        psnr_frame_mean_db: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        class_names: model.config().classes.names.clone(),
        per_class_iou: cm.iou(),
        miou: cm.miou(),
        hole_rmse: None,
        manhole_coverage: None,
        frames: views.len(),
        masked_pixels: masked,
        total_pixels: total,
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::FnHeight;
    use crate::synthetic::HeightProfile;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), Psnr::Identical);
        assert_abs_diff_eq!(psnr(&[1.0, 0.0], &[0.0, 1.0]).unwrap().db(), 0.0);
        // error 0.5 on half the values: MSE 0.125
        let v = psnr(&[0.5, 0.0, 0.5, 0.0], &[0.0; 4]).unwrap().db();
        assert_abs_diff_eq!(v, 9.030899869919436, epsilon = 1e-12);
        assert!(psnr(&[0.0], &[]).is_err());
    }

    #[test]
    fn masked_image_psnr() {
        let gt = RgbImage::new(2, 1, [0.5; 3]);
        let mut pred = gt.clone();
        pred.set(1, 0, [0.0; 3]);
        assert_eq!(psnr_image(&pred, &gt, &[true, false]).unwrap(), Psnr::Identical);
        assert!(psnr_image(&pred, &gt, &[true, true]).unwrap().db().is_finite());
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap().miou, 1.0);
        assert_eq!(miou(&[0, 0], &[1, 1], 2).unwrap().per_class[1], Some(0.0));
        assert_eq!(miou(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap().miou, 0.0);
        // half of a gt-only class region predicted, no false positives
        let r = miou(&[2, 2, 0, 0], &[2, 2, 2, 2], 3).unwrap();
        assert_eq!(r.per_class[2], Some(0.5));
        assert_eq!(r.per_class[0], None);
        assert_eq!(r.miou, 0.5);
        // ignore pixels count nowhere
        assert_eq!(miou(&[1, 0], &[1, 255], 2).unwrap().miou, 1.0);
    }

    #[test]
    fn constant_height_on_square_wave() {
        let spec = SceneSpec {
            holes: vec![],
            ..SceneSpec::default()
        };
        let r = hole_rmse(&FnHeight(|_: Coord2| 0.1), &spec, 0.25);
        assert_abs_diff_eq!(r.supervised, 0.1, epsilon = 1e-12);
        assert_eq!(r.hole, None);
        let exact = spec.profile;
        let perfect = hole_rmse(&FnHeight(move |p: Coord2| exact.z(p.x)), &SceneSpec::default(), 0.25);
        assert_eq!(perfect.supervised, 0.0);
        assert_eq!(perfect.hole, Some(0.0));
        assert!(matches!(spec.profile, HeightProfile::SquareWave { .. }));
    }

    #[test]
    fn nearer_splat_wins() {
        let buf = splat(4, 4, &[(1.2, 2.1, 5.0, 'a'), (0.9, 1.8, 3.0, 'b'), (1.1, 2.0, 4.0, 'c')]);
        assert_eq!(buf[2 * 4 + 1], Some((3.0, 'b')));
        assert_eq!(buf.iter().filter(|b| b.is_some()).count(), 1);
    }

    fn noisy(values: &[f64], amp: f64, seed: u64) -> Vec<f64> {
        let mut s = seed;
        values
            .iter()
            .map(|v| {
                s = crate::util::mix_seed(s, 1);
                let u = (s >> 11) as f64 / (1u64 << 53) as f64;
                v + amp * (2.0 * u - 1.0)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn psnr_drops_as_noise_grows(seed in any::<u64>(), a in 0.01f64..0.3) {
            let gt: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).sin() * 0.5 + 0.5).collect();
            // same noise pattern scaled up
            let unit = noisy(&vec![0.0; 200], 1.0, seed);
            let scaled = |k: f64| -> Vec<f64> { gt.iter().zip(&unit).map(|(g, u)| g + k * u).collect() };
            let lo = psnr(&scaled(a), &gt).unwrap().db();
            let hi = psnr(&scaled(a * 1.5), &gt).unwrap().db();
            prop_assert!(hi < lo);
        }

        #[test]
        fn miou_invariant_to_relabeling(
            labels in proptest::collection::vec((0u8..3, 0u8..3), 1..200),
            perm in Just([0u8, 1, 2]).prop_shuffle(),
        ) {
            let (p, g): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
            let a = miou(&p, &g, 3).unwrap().miou;
            let pp: Vec<u8> = p.iter().map(|v| perm[*v as usize]).collect();
            let gg: Vec<u8> = g.iter().map(|v| perm[*v as usize]).collect();
            let b = miou(&pp, &gg, 3).unwrap().miou;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
