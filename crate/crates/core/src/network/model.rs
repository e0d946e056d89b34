//! The three-headed road field and its reverse-mode gradients.
//!
//! Batches are split into fixed-size chunks that are processed in parallel;
//! per-chunk gradients are reduced in chunk order, so results do not depend
//! on the number of worker threads.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::classes::SemanticClassSet;
use super::loss::semantic_sum_and_grad;
use super::mlp::{HeadGrads, MlpHead, OutputActivation};
use crate::encoding::{Encoder, EncoderConfig, HashGridConfig, InterpRecord, NormCoord2, PeConfig};
use crate::error::{Error, Result};
use crate::geometry::{Coord2, SceneBounds};
use crate::util::{digest_f64, mix_seed};

/// Samples per parallel work item.
pub const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height_encoder: EncoderConfig,
    pub color_encoder: EncoderConfig,
    pub semantic_encoder: EncoderConfig,
    /// Color and semantic heads read one shared encoder (the color one).
    #[serde(default)]
    pub share_appearance_encoder: bool,
    pub height_hidden: Vec<usize>,
    pub color_hidden: Vec<usize>,
    pub semantic_hidden: Vec<usize>,
    #[serde(default)]
    pub classes: SemanticClassSet,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::uniform(EncoderConfig::Hash(HashGridConfig::default()))
    }
}

impl ModelConfig {
    /// Same encoder type for all three branches, default head sizes.
    pub fn uniform(encoder: EncoderConfig) -> Self {
        Self {
            height_encoder: encoder,
            color_encoder: encoder,
            semantic_encoder: encoder,
            share_appearance_encoder: false,
            height_hidden: vec![64; 4],
            color_hidden: vec![64; 2],
            semantic_hidden: vec![64; 2],
            classes: SemanticClassSet::default(),
            seed: 0,
        }
    }

    pub fn pe() -> Self {
        Self::uniform(EncoderConfig::Pe(PeConfig::default()))
    }

    pub fn validate(&self) -> Result<()> {
        self.height_encoder.validate()?;
        self.color_encoder.validate()?;
        if !self.share_appearance_encoder {
            self.semantic_encoder.validate()?;
        }
        self.classes.validate()?;
        for (name, h) in [
            ("height", &self.height_hidden),
            ("color", &self.color_hidden),
            ("semantic", &self.semantic_hidden),
        ] {
            if h.iter().any(|w| *w == 0) {
                return Err(Error::Config(format!("{name} head has a zero-width layer")));
            }
        }
        Ok(())
    }
}

/// An encoder feeding one head.
#[derive(Clone, Debug)]
pub struct Branch {
    pub encoder: Encoder,
    pub head: MlpHead,
}

impl Branch {
    fn forward_batch(&self, xs: &[NormCoord2]) -> Array2<f64> {
        let outs: Vec<Array2<f64>> = xs
            .par_chunks(CHUNK)
            .map(|c| self.head.forward(&self.encoder.encode_batch(c).0))
            .collect();
        concat_rows(outs, self.head.output_dim())
    }
}

fn concat_rows(parts: Vec<Array2<f64>>, cols: usize) -> Array2<f64> {
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut r = 0;
    for p in parts {
        out.slice_mut(ndarray::s![r..r + p.nrows(), ..]).assign(&p);
        r += p.nrows();
    }
    out
}

struct ChunkResult {
    grads: Vec<HeadGrads>,
    d_features: Array2<f64>,
    record: Option<InterpRecord>,
    sums: Vec<f64>,
}

/// Loss callback: `(head index, chunk offset, head output) -> (loss sum, d_output)`.
type LossFn<'a> = dyn Fn(usize, usize, &Array2<f64>) -> (f64, Array2<f64>) + Sync + 'a;

/// Forward + backward over `xs` for one encoder and the heads reading it.
/// Accumulates into the encoder's and heads' gradient buffers and returns the
/// loss sum per head.
fn backprop(encoder: &mut Encoder, heads: &mut [&mut MlpHead], xs: &[NormCoord2], loss: &LossFn) -> Vec<f64> {
    let results: Vec<ChunkResult> = {
        let enc = &*encoder;
        let hs: Vec<&MlpHead> = heads.iter().map(|h| &**h).collect();
        xs.par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let (features, record) = enc.encode_batch(chunk);
                let mut d_features = Array2::zeros(features.raw_dim());
                let mut grads = Vec::with_capacity(hs.len());
                let mut sums = Vec::with_capacity(hs.len());
                for (hi, head) in hs.iter().enumerate() {
                    let cache = head.forward_cached(features.clone());
                    let (sum, d_out) = loss(hi, ci * CHUNK, cache.output());
                    let (g, d_in) = head.backward(&cache, &d_out);
                    d_features += &d_in;
                    grads.push(g);
                    sums.push(sum);
                }
                ChunkResult {
                    grads,
                    d_features,
                    record,
                    sums,
                }
            })
            .collect()
    };
    let mut totals = vec![0.0; heads.len()];
    for r in results {
        for (hi, head) in heads.iter_mut().enumerate() {
            head.accumulate(&r.grads[hi]);
            totals[hi] += r.sums[hi];
        }
        encoder.backward_batch(&r.d_features, r.record.as_ref());
    }
    totals
}

/// Loss sums returned by [`FieldModel::appearance_backward`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AppearanceSums {
    pub color: f64,
    pub semantic: f64,
}

/// Anything that can report road height at world coordinates.
pub trait HeightField {
    fn heights(&self, points: &[Coord2]) -> Vec<f64>;

    fn height_at(&self, p: Coord2) -> f64 {
        self.heights(&[p])[0]
    }
}

/// Adapts a closure into a [`HeightField`].
pub struct FnHeight<F>(pub F);

impl<F: Fn(Coord2) -> f64> HeightField for FnHeight<F> {
    fn heights(&self, points: &[Coord2]) -> Vec<f64> {
        points.iter().map(|p| (self.0)(*p)).collect()
    }
}

/// Immutable copy of a trained height branch.
#[derive(Clone, Debug)]
pub struct HeightSnapshot {
    bounds: SceneBounds,
    branch: Branch,
}

impl HeightField for HeightSnapshot {
    fn heights(&self, points: &[Coord2]) -> Vec<f64> {
        let xs: Vec<NormCoord2> = points.iter().map(|p| self.bounds.normalize(*p)).collect();
        self.branch.forward_batch(&xs).column(0).to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct FieldModel {
    config: ModelConfig,
    bounds: SceneBounds,
    height: Branch,
    color: Branch,
    /// `None` when the semantic head reads the color encoder.
    semantic_encoder: Option<Encoder>,
    semantic_head: MlpHead,
    pub height_optimizer: AdamState,
    /// Color branch, plus the shared encoder when there is one.
    pub appearance_optimizer: AdamState,
    /// Semantic head and its own encoder; stepped only on labeled batches.
    pub semantic_optimizer: AdamState,
}

impl FieldModel {
    pub fn new(config: ModelConfig, bounds: SceneBounds, adam: AdamConfig) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        let s = config.seed;
        let height_encoder = config.height_encoder.build(mix_seed(s, 1))?;
        let color_encoder = config.color_encoder.build(mix_seed(s, 2))?;
        let semantic_encoder = if config.share_appearance_encoder {
            None
        } else {
            Some(config.semantic_encoder.build(mix_seed(s, 3))?)
        };
        let height_head = MlpHead::new(
            height_encoder.output_dim(),
            &config.height_hidden,
            1,
            OutputActivation::Identity,
            mix_seed(s, 4),
        )?;
        let color_head = MlpHead::new(
            color_encoder.output_dim(),
            &config.color_hidden,
            3,
            OutputActivation::Sigmoid,
            mix_seed(s, 5),
        )?;
        let sem_in = semantic_encoder
            .as_ref()
            .unwrap_or(&color_encoder)
            .output_dim();
        let semantic_head = MlpHead::new(
            sem_in,
            &config.semantic_hidden,
            config.classes.len(),
            OutputActivation::Identity,
            mix_seed(s, 6),
        )?;
        let mut model = Self {
            config,
            bounds,
            height: Branch {
                encoder: height_encoder,
                head: height_head,
            },
            color: Branch {
                encoder: color_encoder,
                head: color_head,
            },
            semantic_encoder,
            semantic_head,
            height_optimizer: AdamState::new(adam, &[]),
            appearance_optimizer: AdamState::new(adam, &[]),
            semantic_optimizer: AdamState::new(adam, &[]),
        };
        let sizes = |slots: Vec<(&mut [f64], &[f64])>| slots.iter().map(|(p, _)| p.len()).collect::<Vec<_>>();
        model.height_optimizer = AdamState::new(adam, &sizes(Self::branch_slots(&mut model.height)));
        model.appearance_optimizer = AdamState::new(adam, &sizes(Self::branch_slots(&mut model.color)));
        model.semantic_optimizer = AdamState::new(adam, &sizes(Self::semantic_slots(&mut model.semantic_head, &mut model.semantic_encoder)));
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bounds(&self) -> &SceneBounds {
        &self.bounds
    }

    pub fn height_branch(&self) -> &Branch {
        &self.height
    }

    pub fn height_branch_mut(&mut self) -> &mut Branch {
        &mut self.height
    }

    pub fn color_branch(&self) -> &Branch {
        &self.color
    }

    pub fn color_branch_mut(&mut self) -> &mut Branch {
        &mut self.color
    }

    pub fn semantic_head(&self) -> &MlpHead {
        &self.semantic_head
    }

    pub fn semantic_head_mut(&mut self) -> &mut MlpHead {
        &mut self.semantic_head
    }

    /// The encoder feeding the semantic head.
    pub fn semantic_encoder(&self) -> &Encoder {
        self.semantic_encoder.as_ref().unwrap_or(&self.color.encoder)
    }

    pub fn semantic_encoder_mut(&mut self) -> &mut Encoder {
        self.semantic_encoder.as_mut().unwrap_or(&mut self.color.encoder)
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes.len()
    }

    pub fn normalize(&self, p: Coord2) -> NormCoord2 {
        self.bounds.normalize(p)
    }

    pub fn forward_height(&self, x: NormCoord2) -> f64 {
        let f = Array2::from_shape_vec((1, self.height.encoder.output_dim()), self.height.encoder.encode(x).values)
            .expect("feature shape");
        self.height.head.forward(&f)[[0, 0]]
    }

    pub fn forward_color(&self, x: NormCoord2) -> [f64; 3] {
        let c = self.color.forward_batch(&[x]);
        [c[[0, 0]], c[[0, 1]], c[[0, 2]]]
    }

    pub fn forward_semantic(&self, x: NormCoord2) -> Vec<f64> {
        self.semantic_logits(&[x]).row(0).to_vec()
    }

    pub fn heights_norm(&self, xs: &[NormCoord2]) -> Vec<f64> {
        self.height.forward_batch(xs).column(0).to_vec()
    }

    pub fn colors_norm(&self, xs: &[NormCoord2]) -> Vec<[f64; 3]> {
        self.color
            .forward_batch(xs)
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect()
    }

    pub fn semantic_logits(&self, xs: &[NormCoord2]) -> Array2<f64> {
        let enc = self.semantic_encoder();
        let outs: Vec<Array2<f64>> = xs
            .par_chunks(CHUNK)
            .map(|c| self.semantic_head.forward(&enc.encode_batch(c).0))
            .collect();
        concat_rows(outs, self.num_classes())
    }

    /// Argmax class per coordinate.
    pub fn labels_norm(&self, xs: &[NormCoord2]) -> Vec<u8> {
        self.semantic_logits(xs)
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn colors(&self, pts: &[Coord2]) -> Vec<[f64; 3]> {
        self.colors_norm(&self.normalize_all(pts))
    }

    pub fn labels(&self, pts: &[Coord2]) -> Vec<u8> {
        self.labels_norm(&self.normalize_all(pts))
    }

    pub fn normalize_all(&self, pts: &[Coord2]) -> Vec<NormCoord2> {
        pts.iter().map(|p| self.bounds.normalize(*p)).collect()
    }

    pub fn height_snapshot(&self) -> HeightSnapshot {
        let mut branch = self.height.clone();
        branch.encoder.zero_grad();
        branch.head.zero_grad();
        HeightSnapshot {
            bounds: self.bounds,
            branch,
        }
    }

    pub fn zero_height_grad(&mut self) {
        self.height.encoder.zero_grad();
        self.height.head.zero_grad();
    }

    pub fn zero_appearance_grad(&mut self) {
        self.color.encoder.zero_grad();
        self.color.head.zero_grad();
        if let Some(e) = &mut self.semantic_encoder {
            e.zero_grad();
        }
        self.semantic_head.zero_grad();
    }

    /// Accumulates the gradient of `scale * sum_i (z_i - z_gt_i)^2` into the
    /// height branch and returns the unscaled sum.
    pub fn height_backward(&mut self, xs: &[NormCoord2], z_gt: &[f64], scale: f64) -> Result<f64> {
        if xs.len() != z_gt.len() {
            return Err(Error::Shape("height batch and targets differ in length".into()));
        }
        let loss = move |_: usize, offset: usize, out: &Array2<f64>| {
            let mut d = Array2::zeros(out.raw_dim());
            let mut sum = 0.0;
            for i in 0..out.nrows() {
                let r = out[[i, 0]] - z_gt[offset + i];
                sum += r * r;
                d[[i, 0]] = 2.0 * scale * r;
            }
            (sum, d)
        };
        let Branch { encoder, head } = &mut self.height;
        Ok(backprop(encoder, &mut [head], xs, &loss)[0])
    }

    /// Accumulates gradients of `color_scale * sum ||c - c_gt||^2 +
    /// semantic_scale * sum CE` (ignored labels skipped) into the color and
    /// semantic branches.
    pub fn appearance_backward(
        &mut self,
        xs: &[NormCoord2],
        c_gt: &[[f64; 3]],
        s_gt: &[u8],
        color_scale: f64,
        semantic_scale: f64,
    ) -> Result<AppearanceSums> {
        if xs.len() != c_gt.len() || xs.len() != s_gt.len() {
            return Err(Error::Shape("appearance batch and targets differ in length".into()));
        }
        let ignore = self.config.classes.ignore;
        let color_loss = move |offset: usize, out: &Array2<f64>| {
            let mut d = Array2::zeros(out.raw_dim());
            let mut sum = 0.0;
            for i in 0..out.nrows() {
                for k in 0..3 {
                    let r = out[[i, k]] - c_gt[offset + i][k];
                    sum += r * r;
                    d[[i, k]] = 2.0 * color_scale * r;
                }
            }
            (sum, d)
        };
        let sem_loss = move |offset: usize, out: &Array2<f64>| {
            let labels = &s_gt[offset..offset + out.nrows()];
            let (sum, mut grad, _) = semantic_sum_and_grad(out, labels, ignore);
            grad *= semantic_scale;
            (sum, grad)
        };
        let sums = match &mut self.semantic_encoder {
            None => {
                let loss = move |h: usize, offset: usize, out: &Array2<f64>| {
                    if h == 0 {
                        color_loss(offset, out)
                    } else {
                        sem_loss(offset, out)
                    }
                };
                let Branch { encoder, head } = &mut self.color;
                let t = backprop(encoder, &mut [head, &mut self.semantic_head], xs, &loss);
                AppearanceSums {
                    color: t[0],
                    semantic: t[1],
                }
            }
            Some(sem_encoder) => {
                let Branch { encoder, head } = &mut self.color;
                let c = backprop(encoder, &mut [head], xs, &move |_, o, out| color_loss(o, out))[0];
                let s = backprop(
                    sem_encoder,
                    &mut [&mut self.semantic_head],
                    xs,
                    &move |_, o, out| sem_loss(o, out),
                )[0];
                AppearanceSums {
                    color: c,
                    semantic: s,
                }
            }
        };
        Ok(sums)
    }

    fn branch_slots(branch: &mut Branch) -> Vec<(&mut [f64], &[f64])> {
        let Branch { encoder, head } = branch;
        let mut slots = head.params_and_grads();
        if let Some(g) = encoder.hash_grid_mut() {
            slots.push(g.params_and_grads());
        }
        slots
    }

    /// Parameter/gradient slots of the height branch, in optimizer order.
    pub fn height_slots(&mut self) -> Vec<(&mut [f64], &[f64])> {
        Self::branch_slots(&mut self.height)
    }

    /// Parameter/gradient slots of the color and semantic branches.
    pub fn appearance_slots(&mut self) -> Vec<(&mut [f64], &[f64])> {
        let mut slots = Self::branch_slots(&mut self.color);
        slots.extend(Self::semantic_slots(&mut self.semantic_head, &mut self.semantic_encoder));
        slots
    }

    fn semantic_slots<'a>(head: &'a mut MlpHead, encoder: &'a mut Option<Encoder>) -> Vec<(&'a mut [f64], &'a [f64])> {
        let mut slots = head.params_and_grads();
        if let Some(g) = encoder.as_mut().and_then(|e| e.hash_grid_mut()) {
            slots.push(g.params_and_grads());
        }
        slots
    }

    /// Splits into the height optimizer and height slots for one update.
    pub(crate) fn height_update_parts(&mut self) -> (&mut AdamState, Vec<(&mut [f64], &[f64])>) {
        let slots = Self::branch_slots(&mut self.height);
        (&mut self.height_optimizer, slots)
    }

    pub(crate) fn color_update_parts(&mut self) -> (&mut AdamState, Vec<(&mut [f64], &[f64])>) {
        let slots = Self::branch_slots(&mut self.color);
        (&mut self.appearance_optimizer, slots)
    }

    pub(crate) fn semantic_update_parts(&mut self) -> (&mut AdamState, Vec<(&mut [f64], &[f64])>) {
        let slots = Self::semantic_slots(&mut self.semantic_head, &mut self.semantic_encoder);
        (&mut self.semantic_optimizer, slots)
    }

    /// Named parameter tensors in a stable order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        push_branch(&mut out, "height", &self.height.head, Some(&self.height.encoder));
        push_branch(&mut out, "color", &self.color.head, Some(&self.color.encoder));
        push_branch(&mut out, "semantic", &self.semantic_head, self.semantic_encoder.as_ref());
        out
    }

    /// Restores every tensor listed by [`FieldModel::tensors`], by name.
    pub fn load_tensors(&mut self, mut tensors: Vec<(String, Vec<f64>)>) -> Result<()> {
        let expected: Vec<(String, usize)> = self
            .tensors()
            .into_iter()
            .map(|(n, s)| (n, s.len()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, len), (got_name, got)) in expected.iter().zip(&tensors) {
            if name != got_name || *len != got.len() {
                return Err(Error::Shape(format!(
                    "tensor {got_name} ({} values) does not match {name} ({len} values)",
                    got.len()
                )));
            }
        }
        let mut take = |prefix: &str, head: &mut MlpHead, enc: Option<&mut Encoder>| -> Result<()> {
            let n = 2 * head.layers().len();
            let head_vals: Vec<Vec<f64>> = tensors.drain(..n).map(|(_, v)| v).collect();
            head.set_param_slices(&head_vals)?;
            if let Some(g) = enc.and_then(|e| e.hash_grid_mut()) {
                let (name, v) = tensors.remove(0);
                debug_assert!(name.starts_with(prefix));
                g.set_params(v)?;
            }
            Ok(())
        };
        take("height", &mut self.height.head, Some(&mut self.height.encoder))?;
        take("color", &mut self.color.head, Some(&mut self.color.encoder))?;
        take("semantic", &mut self.semantic_head, self.semantic_encoder.as_mut())?;
        Ok(())
    }

    pub fn height_digest(&self) -> String {
        digest_f64(
            self.tensors()
                .into_iter()
                .filter(|(n, _)| n.starts_with("height."))
                .map(|(_, s)| s),
        )
    }

    pub fn digest(&self) -> String {
        digest_f64(self.tensors().into_iter().map(|(_, s)| s))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }
}

fn push_branch<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, head: &'a MlpHead, enc: Option<&'a Encoder>) {
    for (i, s) in head.param_slices().into_iter().enumerate() {
        let kind = if i % 2 == 0 { "weight" } else { "bias" };
        out.push((format!("{name}.head.{}.{kind}", i / 2), s));
    }
    if let Some(g) = enc.and_then(|e| e.hash_grid()) {
        out.push((format!("{name}.encoder.table"), g.params()));
    }
}

impl HeightField for FieldModel {
    fn heights(&self, points: &[Coord2]) -> Vec<f64> {
        self.heights_norm(&self.normalize_all(points))
    }
}
