//! Trainable multi-resolution 2D feature grid.
//!
//! Every level covers `[-1, 1]^2` with `resolution` cells per axis, so it has
//! `(resolution + 1)^2` vertices. Coarse levels whose vertex count fits the
//! table are indexed densely (row-major, `iy * (res + 1) + ix`); finer levels
//! go through the spatial hash `(ix * P1 XOR iy * P2) mod T` in wrapping
//! 64-bit arithmetic.
//!
//! Corner order inside an [`InterpRecord`] is `(ix, iy)`, `(ix+1, iy)`,
//! `(ix, iy+1)`, `(ix+1, iy+1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncodedFeature, NormCoord2, Provenance};
use crate::error::{Error, Result};

pub const PRIME_X: u64 = 1;
pub const PRIME_Y: u64 = 2_654_435_761;

/// Half-width of the uniform table initialisation.
pub const INIT_RANGE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HashingMode {
    /// Multi-resolution, hashed where a level overflows the table.
    Hashed,
    /// Multi-resolution, every level dense; the table must hold every vertex.
    DenseNoHash,
    /// One level at `base_resolution`, hashed if it overflows.
    SingleLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub num_levels: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    pub table_size: usize,
    pub feature_dim: usize,
    pub mode: HashingMode,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            num_levels: 16,
            base_resolution: 16,
            per_level_scale: 1.5,
            table_size: 1 << 19,
            feature_dim: 2,
            mode: HashingMode::Hashed,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 || self.base_resolution == 0 {
            return Err(Error::Config(
                "hash grid needs at least one level and a positive base resolution".into(),
            ));
        }
        if self.table_size == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "hash grid table size and feature dimension must be positive".into(),
            ));
        }
        if !(self.per_level_scale > 1.0) || !self.per_level_scale.is_finite() {
            return Err(Error::Config(format!(
                "per_level_scale must be a finite value > 1, got {}",
                self.per_level_scale
            )));
        }
        if self.mode == HashingMode::DenseNoHash {
            for level in 0..self.effective_levels() {
                let res = self.resolution(level);
                let vertices = (res + 1) * (res + 1);
                if vertices > self.table_size {
                    return Err(Error::Config(format!(
                        "dense-no-hash level {level} needs {vertices} rows but table_size is {}",
                        self.table_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of levels actually evaluated (1 in single-level mode).
    pub fn effective_levels(&self) -> usize {
        match self.mode {
            HashingMode::SingleLevel => 1,
            _ => self.num_levels,
        }
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as usize
    }

    pub fn finest_resolution(&self) -> usize {
        self.resolution(self.effective_levels() - 1)
    }

    pub fn output_dim(&self) -> usize {
        self.effective_levels() * self.feature_dim
    }

    /// Rows allocated for `level`: every vertex when it fits, otherwise `T`.
    pub fn level_rows(&self, level: usize) -> usize {
        let res = self.resolution(level);
        ((res + 1) * (res + 1)).min(self.table_size)
    }

    /// The single-level ablation of this config, run at its finest resolution.
    pub fn single_level_variant(&self) -> Self {
        Self {
            num_levels: 1,
            base_resolution: self.finest_resolution(),
            mode: HashingMode::SingleLevel,
            ..*self
        }
    }

    /// This grid's ablation variant for `mode`.
    pub fn with_mode(&self, mode: HashingMode) -> Self {
        match mode {
            HashingMode::Hashed => Self { mode, ..*self },
            HashingMode::DenseNoHash => self.dense_variant(),
            HashingMode::SingleLevel => self.single_level_variant(),
        }
    }

    /// The dense multi-resolution ablation; the table grows to hold the finest level.
    pub fn dense_variant(&self) -> Self {
        let res = self.finest_resolution();
        Self {
            table_size: (res + 1) * (res + 1),
            mode: HashingMode::DenseNoHash,
            ..*self
        }
    }
}

/// Table index of the vertex `(ix, iy)` at `level`.
pub fn grid_index(ix: usize, iy: usize, level: usize, cfg: &HashGridConfig) -> Result<usize> {
    let res = cfg.resolution(level);
    if ix > res || iy > res {
        return Err(Error::Config(format!(
            "vertex ({ix}, {iy}) outside level {level} with resolution {res}"
        )));
    }
    let vertices = (res + 1) * (res + 1);
    if cfg.mode == HashingMode::DenseNoHash && vertices > cfg.table_size {
        return Err(Error::Config(format!(
            "dense-no-hash level {level} needs {vertices} rows but table_size is {}",
            cfg.table_size
        )));
    }
    Ok(index_unchecked(ix, iy, res, vertices <= cfg.table_size, cfg.table_size))
}

#[inline]
fn index_unchecked(ix: usize, iy: usize, res: usize, dense: bool, table_size: usize) -> usize {
    if dense {
        iy * (res + 1) + ix
    } else {
        let h = (ix as u64).wrapping_mul(PRIME_X) ^ (iy as u64).wrapping_mul(PRIME_Y);
        (h % table_size as u64) as usize
    }
}

#[derive(Clone, Copy, Debug)]
struct Level {
    resolution: usize,
    dense: bool,
    rows: usize,
    /// Offset of this level's first row in the flat parameter vector.
    offset: usize,
}

/// Bilinear interpolation record for one query: per level, 4 flat row offsets
/// into the parameter vector (already multiplied by F) and their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpRecord {
    pub rows: Vec<[usize; 4]>,
    pub weights: Vec<[f64; 4]>,
}

#[derive(Clone, Debug)]
pub struct HashGrid {
    config: HashGridConfig,
    levels: Vec<Level>,
    params: Vec<f64>,
    grads: Vec<f64>,
}

impl HashGrid {
    pub fn new(config: HashGridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut levels = Vec::with_capacity(config.effective_levels());
        let mut offset = 0;
        for level in 0..config.effective_levels() {
            let resolution = config.resolution(level);
            let vertices = (resolution + 1) * (resolution + 1);
            let rows = config.level_rows(level);
            levels.push(Level {
                resolution,
                dense: vertices <= config.table_size,
                rows,
                offset,
            });
            offset += rows * config.feature_dim;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..offset)
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Ok(Self {
            config,
            levels,
            grads: vec![0.0; offset],
            params,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_rows(&self, level: usize) -> usize {
        self.levels[level].rows
    }

    /// Feature vector stored at `row` of `level`.
    pub fn row(&self, level: usize, row: usize) -> &[f64] {
        let f = self.config.feature_dim;
        let start = self.levels[level].offset + row * f;
        &self.params[start..start + f]
    }

    pub fn row_mut(&mut self, level: usize, row: usize) -> &mut [f64] {
        let f = self.config.feature_dim;
        let start = self.levels[level].offset + row * f;
        &mut self.params[start..start + f]
    }

    pub fn grad_row(&self, level: usize, row: usize) -> &[f64] {
        let f = self.config.feature_dim;
        let start = self.levels[level].offset + row * f;
        &self.grads[start..start + f]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub(crate) fn params_and_grads(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.params, &self.grads)
    }

    pub(crate) fn set_params(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "hash table expects {} values, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params = values;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Interpolation corners and weights for one level.
    #[inline]
    fn corners(&self, level: &Level, x: NormCoord2) -> ([usize; 4], [f64; 4]) {
        let res = level.resolution;
        let f = self.config.feature_dim;
        let locate = |t: f64| {
            let pos = (t + 1.0) * 0.5 * res as f64;
            let cell = (pos.floor() as usize).min(res - 1);
            (cell, pos - cell as f64)
        };
        let (ix, fx) = locate(x.x());
        let (iy, fy) = locate(x.y());
        let idx = |cx: usize, cy: usize| {
            level.offset
                + index_unchecked(cx, cy, res, level.dense, self.config.table_size) * f
        };
        (
            [idx(ix, iy), idx(ix + 1, iy), idx(ix, iy + 1), idx(ix + 1, iy + 1)],
            [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        )
    }

    /// Encodes `x` into `out` and appends the interpolation record.
    pub(crate) fn encode_into(&self, x: NormCoord2, out: &mut [f64], record: &mut InterpRecord) {
        let f = self.config.feature_dim;
        for (li, level) in self.levels.iter().enumerate() {
            let (rows, weights) = self.corners(level, x);
            let dst = &mut out[li * f..(li + 1) * f];
            dst.iter_mut().for_each(|v| *v = 0.0);
            for (r, w) in rows.iter().zip(weights) {
                for (k, v) in dst.iter_mut().enumerate() {
                    *v += w * self.params[r + k];
                }
            }
            record.rows.push(rows);
            record.weights.push(weights);
        }
    }

    /// Scatters `upstream` (one F-slice per level per query, queries laid out
    /// consecutively) into the gradient accumulators.
    pub(crate) fn accumulate(&mut self, upstream: &[f64], record: &InterpRecord) {
        let f = self.config.feature_dim;
        debug_assert_eq!(upstream.len(), record.rows.len() * f);
        for ((rows, weights), g) in record
            .rows
            .iter()
            .zip(&record.weights)
            .zip(upstream.chunks_exact(f))
        {
            for (r, w) in rows.iter().zip(weights) {
                for (k, gk) in g.iter().enumerate() {
                    self.grads[r + k] += w * gk;
                }
            }
        }
    }
}

impl InterpRecord {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            rows: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
        }
    }
}

/// Encodes one coordinate, returning the features and the record needed by
/// [`encode_hash_backward`].
pub fn encode_hash(x: NormCoord2, grid: &HashGrid) -> (EncodedFeature, InterpRecord) {
    let mut values = vec![0.0; grid.output_dim()];
    let mut record = InterpRecord::with_capacity(grid.num_levels());
    grid.encode_into(x, &mut values, &mut record);
    (
        EncodedFeature {
            values,
            provenance: Provenance::Hash(grid.config),
        },
        record,
    )
}

/// Accumulates `weight * upstream` into every corner touched by the forward pass.
pub fn encode_hash_backward(
    upstream_grad: &[f64],
    recorded: &InterpRecord,
    grid: &mut HashGrid,
) -> Result<()> {
    let expected = recorded.rows.len() * grid.config.feature_dim;
    if upstream_grad.len() != expected || recorded.rows.len() % grid.num_levels() != 0 {
        return Err(Error::Shape(format!(
            "upstream gradient has {} values, record expects {expected}",
            upstream_grad.len()
        )));
    }
    grid.accumulate(upstream_grad, recorded);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn small(mode: HashingMode, table_size: usize) -> HashGridConfig {
        HashGridConfig {
            num_levels: 3,
            base_resolution: 2,
            per_level_scale: 2.0,
            table_size,
            feature_dim: 2,
            mode,
        }
    }

    fn to_norm(pos: f64, res: usize) -> f64 {
        pos / res as f64 * 2.0 - 1.0
    }

    #[test]
    fn dense_row_major_index() {
        let cfg = small(HashingMode::Hashed, 1 << 10);
        assert_eq!(grid_index(2, 1, 0, &cfg).unwrap(), 5);
    }

    #[test]
    fn hashed_index_matches_big_integer_oracle() {
        let cfg = HashGridConfig {
            num_levels: 1,
            base_resolution: 1000,
            per_level_scale: 2.0,
            table_size: 1 << 14,
            feature_dim: 2,
            mode: HashingMode::Hashed,
        };
        // (3 XOR (7 * 2654435761 mod 2^64)) mod 2^14, evaluated with arbitrary precision
        assert_eq!(grid_index(3, 7, 0, &cfg).unwrap(), 5076);
    }

    #[test]
    fn origin_maps_to_zero_in_every_mode() {
        for mode in [
            HashingMode::Hashed,
            HashingMode::DenseNoHash,
            HashingMode::SingleLevel,
        ] {
            let cfg = small(mode, 1 << 10);
            assert_eq!(grid_index(0, 0, 0, &cfg).unwrap(), 0);
        }
        let hashed = HashGridConfig {
            table_size: 4,
            ..small(HashingMode::Hashed, 4)
        };
        assert_eq!(grid_index(0, 0, 2, &hashed).unwrap(), 0);
    }

    #[test]
    fn dense_mode_rejects_small_tables() {
        let cfg = small(HashingMode::DenseNoHash, 20);
        assert!(cfg.validate().is_err());
        assert!(grid_index(0, 0, 2, &cfg).is_err());
        assert!(HashGrid::new(cfg, 0).is_err());
    }

    #[test]
    fn output_dims() {
        let cfg = HashGridConfig::default();
        assert_eq!(cfg.output_dim(), 32);
        assert_eq!(cfg.single_level_variant().output_dim(), 2);
        assert_eq!(cfg.resolution(0), 16);
        assert_eq!(cfg.resolution(1), 24);
        assert_eq!(cfg.resolution(2), 36);
    }

    #[test]
    fn table_shapes_match_config() {
        let cfg = small(HashingMode::Hashed, 16);
        let grid = HashGrid::new(cfg, 1).unwrap();
        assert_eq!(grid.level_rows(0), 9);
        assert_eq!(grid.level_rows(1), 16);
        assert_eq!(grid.level_rows(2), 16);
        assert_eq!(grid.params().len(), (9 + 16 + 16) * 2);
        assert!(grid.params().iter().all(|v| v.abs() <= INIT_RANGE));
    }

    #[test]
    fn corner_query_returns_corner_feature() {
        let cfg = small(HashingMode::Hashed, 1 << 10);
        let mut grid = HashGrid::new(cfg, 3).unwrap();
        let row = grid_index(1, 2, 0, &cfg).unwrap();
        grid.row_mut(0, row).copy_from_slice(&[0.7, -0.3]);
        let x = NormCoord2::new(to_norm(1.0, 2), to_norm(2.0, 2));
        let (feat, record) = encode_hash(x, &grid);
        assert_eq!(&feat.values[0..2], &[0.7, -0.3]);
        let w = record.weights[0];
        assert_eq!(w.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(w.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn cell_center_is_mean_of_corners() {
        let cfg = small(HashingMode::Hashed, 1 << 10);
        let mut grid = HashGrid::new(cfg, 3).unwrap();
        let values = [[1.0, 2.0], [3.0, -2.0], [5.0, 0.5], [-1.0, 4.0]];
        for (k, (cx, cy)) in [(0, 1), (1, 1), (0, 2), (1, 2)].into_iter().enumerate() {
            let row = grid_index(cx, cy, 0, &cfg).unwrap();
            grid.row_mut(0, row).copy_from_slice(&values[k]);
        }
        let x = NormCoord2::new(to_norm(0.5, 2), to_norm(1.5, 2));
        let (feat, record) = encode_hash(x, &grid);
        assert_eq!(record.weights[0], [0.25; 4]);
        assert_abs_diff_eq!(feat.values[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(feat.values[1], 1.125, epsilon = 1e-15);
    }

    #[test]
    fn backward_routes_upstream_by_weight() {
        let cfg = small(HashingMode::Hashed, 1 << 10);
        let mut grid = HashGrid::new(cfg, 3).unwrap();
        let g = [0.4, -1.2];
        let corner = NormCoord2::new(to_norm(1.0, 2), to_norm(1.0, 2));
        let (_, rec) = encode_hash(corner, &grid);
        let mut upstream = vec![0.0; cfg.output_dim()];
        upstream[0..2].copy_from_slice(&g);
        encode_hash_backward(&upstream, &rec, &mut grid).unwrap();
        let touched = grid_index(1, 1, 0, &cfg).unwrap();
        assert_eq!(grid.grad_row(0, touched), &g);
        let nonzero = grid.grads().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 2);

        grid.zero_grad();
        assert!(grid.grads().iter().all(|v| *v == 0.0));

        let center = NormCoord2::new(to_norm(0.5, 2), to_norm(0.5, 2));
        let (_, rec) = encode_hash(center, &grid);
        encode_hash_backward(&upstream, &rec, &mut grid).unwrap();
        for (cx, cy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let row = grid_index(cx, cy, 0, &cfg).unwrap();
            assert_eq!(grid.grad_row(0, row), &[0.25 * g[0], 0.25 * g[1]]);
        }
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let cfg = small(HashingMode::Hashed, 1 << 10);
        let mut grid = HashGrid::new(cfg, 3).unwrap();
        let (_, rec) = encode_hash(NormCoord2::new(0.1, 0.2), &grid);
        assert!(encode_hash_backward(&[1.0], &rec, &mut grid).is_err());
    }

    #[test]
    fn table_gradient_matches_finite_differences() {
        // scalar loss: sum_i c_i * feature_i over a handful of queries
        let cfg = HashGridConfig {
            table_size: 12,
            ..small(HashingMode::Hashed, 12)
        };
        let mut grid = HashGrid::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in grid.params_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let queries: Vec<NormCoord2> = (0..6)
            .map(|_| NormCoord2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let coeffs: Vec<f64> = (0..cfg.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |g: &HashGrid| -> f64 {
            queries
                .iter()
                .map(|q| {
                    let (f, _) = encode_hash(*q, g);
                    let lin: f64 = f.values.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
                    lin * lin
                })
                .sum()
        };
        for q in &queries {
            let (f, rec) = encode_hash(*q, &grid);
            let lin: f64 = f.values.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
            let upstream: Vec<f64> = coeffs.iter().map(|c| 2.0 * lin * c).collect();
            encode_hash_backward(&upstream, &rec, &mut grid).unwrap();
        }
        let analytic = grid.grads().to_vec();
        let h = 1e-4;
        for i in 0..analytic.len() {
            let orig = grid.params()[i];
            grid.params_mut()[i] = orig + h;
            let plus = loss(&grid);
            grid.params_mut()[i] = orig - h;
            let minus = loss(&grid);
            grid.params_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let tol = 1e-4 * analytic[i].abs().max(fd.abs()) + 1e-9;
            assert!((fd - analytic[i]).abs() <= tol, "entry {i}: {} vs {}", analytic[i], fd);
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(x in -1.0f64..=1.0, y in -1.0f64..=1.0) {
            let grid = HashGrid::new(small(HashingMode::Hashed, 32), 0).unwrap();
            let (_, rec) = encode_hash(NormCoord2::new(x, y), &grid);
            for w in rec.weights {
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                prop_assert!(w.iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn continuous_across_cell_edges(y in -0.9f64..0.9, edge in 1usize..8, level in 0usize..3) {
            let cfg = small(HashingMode::Hashed, 24);
            let mut grid = HashGrid::new(cfg, 2).unwrap();
            for (i, v) in grid.params_mut().iter_mut().enumerate() {
                *v = ((i * 37 % 11) as f64 - 5.0) / 5.0;
            }
            let res = cfg.resolution(level);
            prop_assume!(edge < res);
            let x_edge = to_norm(edge as f64, res);
            let mut prev = f64::INFINITY;
            for eps in [1e-3, 1e-5, 1e-7] {
                let (a, _) = encode_hash(NormCoord2::new(x_edge - eps, y), &grid);
                let (b, _) = encode_hash(NormCoord2::new(x_edge + eps, y), &grid);
                let d = (a.values[level * 2] - b.values[level * 2]).abs();
                prop_assert!(d <= prev + 1e-12);
                prev = d;
            }
            prop_assert!(prev < 1e-5);
        }

        #[test]
        fn dense_levels_never_collide(level in 0usize..3) {
            let cfg = small(HashingMode::DenseNoHash, 100);
            let res = cfg.resolution(level);
            let mut seen = std::collections::HashSet::new();
            for iy in 0..=res {
                for ix in 0..=res {
                    prop_assert!(seen.insert(grid_index(ix, iy, level, &cfg).unwrap()));
                }
            }
        }
    }
}
