//! Coordinate encoders: fixed sinusoidal features and the trainable
//! multi-resolution grid.

mod hash;
mod pe;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use hash::{
    encode_hash, encode_hash_backward, grid_index, HashGrid, HashGridConfig, HashingMode,
    InterpRecord, INIT_RANGE, PRIME_X, PRIME_Y,
};
pub use pe::{encode_pe, encode_pe_into, encode_pe_jacobian, PeConfig};

use crate::error::{Error, Result};

static CLAMPED: AtomicU64 = AtomicU64::new(0);

/// Number of coordinates clamped into `[-1, 1]` since process start.
pub fn clamped_count() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}

/// A 2D coordinate normalized to `[-1, 1]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormCoord2 {
    x: f64,
    y: f64,
}

impl NormCoord2 {
    /// Clamps out-of-range components and bumps [`clamped_count`].
    pub fn new(x: f64, y: f64) -> Self {
        let cx = x.clamp(-1.0, 1.0);
        let cy = y.clamp(-1.0, 1.0);
        if cx != x || cy != y {
            CLAMPED.fetch_add(1, Ordering::Relaxed);
        }
        Self { x: cx, y: cy }
    }

    /// Strict constructor.
    pub fn try_new(x: f64, y: f64) -> Result<Self> {
        if (-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y) {
            Ok(Self { x, y })
        } else {
            Err(Error::OutOfRange { x, y })
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Pe(PeConfig),
    Hash(HashGridConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFeature {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderConfig {
    Pe(PeConfig),
    Hash(HashGridConfig),
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            EncoderConfig::Pe(c) => c.output_dim(),
            EncoderConfig::Hash(c) => c.output_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderConfig::Pe(c) => c.validate(),
            EncoderConfig::Hash(c) => c.validate(),
        }
    }

    pub fn build(&self, seed: u64) -> Result<Encoder> {
        Ok(match self {
            EncoderConfig::Pe(c) => {
                c.validate()?;
                Encoder::Pe(*c)
            }
            EncoderConfig::Hash(c) => Encoder::Hash(HashGrid::new(*c, seed)?),
        })
    }

    pub fn is_hash(&self) -> bool {
        matches!(self, EncoderConfig::Hash(_))
    }

    /// Switches a hash grid to its ablation variant; no-op for positional encodings.
    pub fn set_hash_mode(&mut self, mode: HashingMode) {
        if let EncoderConfig::Hash(c) = self {
            *c = c.with_mode(mode);
        }
    }
}

/// An encoder instance; the hash variant owns its trainable tables.
#[derive(Clone, Debug)]
pub enum Encoder {
    Pe(PeConfig),
    Hash(HashGrid),
}

impl Encoder {
    pub fn config(&self) -> EncoderConfig {
        match self {
            Encoder::Pe(c) => EncoderConfig::Pe(*c),
            Encoder::Hash(g) => EncoderConfig::Hash(*g.config()),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config().output_dim()
    }

    pub fn encode(&self, x: NormCoord2) -> EncodedFeature {
        match self {
            Encoder::Pe(c) => encode_pe(x, c),
            Encoder::Hash(g) => encode_hash(x, g).0,
        }
    }

    /// Encodes a batch into an `n x dim` matrix; the record is `Some` for
    /// trainable encoders.
    pub fn encode_batch(&self, xs: &[NormCoord2]) -> (Array2<f64>, Option<InterpRecord>) {
        let dim = self.output_dim();
        let mut out = Array2::zeros((xs.len(), dim));
        let flat = out.as_slice_mut().expect("standard layout");
        match self {
            Encoder::Pe(c) => {
                for (x, row) in xs.iter().zip(flat.chunks_exact_mut(dim)) {
                    encode_pe_into(*x, c, row);
                }
                (out, None)
            }
            Encoder::Hash(g) => {
                let mut record = InterpRecord::with_capacity(xs.len() * g.num_levels());
                for (x, row) in xs.iter().zip(flat.chunks_exact_mut(dim)) {
                    g.encode_into(*x, row, &mut record);
                }
                (out, Some(record))
            }
        }
    }

    /// Routes `d_features` (`n x dim`) into the table gradients.
    pub fn backward_batch(&mut self, d_features: &Array2<f64>, record: Option<&InterpRecord>) {
        if let (Encoder::Hash(g), Some(rec)) = (self, record) {
            let flat = d_features.as_slice().expect("standard layout");
            g.accumulate(flat, rec);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Encoder::Hash(g) = self {
            g.zero_grad();
        }
    }

    pub fn hash_grid(&self) -> Option<&HashGrid> {
        match self {
            Encoder::Hash(g) => Some(g),
            Encoder::Pe(_) => None,
        }
    }

    pub fn hash_grid_mut(&mut self) -> Option<&mut HashGrid> {
        match self {
            Encoder::Hash(g) => Some(g),
            Encoder::Pe(_) => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.hash_grid().map_or(0, |g| g.params().len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_and_counts() {
        let before = clamped_count();
        let p = NormCoord2::new(1.5, -0.2);
        assert_eq!((p.x(), p.y()), (1.0, -0.2));
        assert!(clamped_count() > before);
        assert!(NormCoord2::try_new(1.5, 0.0).is_err());
        assert!(NormCoord2::try_new(1.0, -1.0).is_ok());
    }

    #[test]
    fn batch_matches_single() {
        let cfg = HashGridConfig {
            num_levels: 4,
            base_resolution: 3,
            per_level_scale: 1.7,
            table_size: 64,
            feature_dim: 3,
            mode: HashingMode::Hashed,
        };
        for enc in [
            EncoderConfig::Pe(PeConfig::new(4).unwrap()).build(0).unwrap(),
            EncoderConfig::Hash(cfg).build(9).unwrap(),
        ] {
            let xs: Vec<_> = (0..7)
                .map(|i| NormCoord2::new(i as f64 * 0.27 - 0.9, 0.8 - i as f64 * 0.21))
                .collect();
            let (batch, _) = enc.encode_batch(&xs);
            for (i, x) in xs.iter().enumerate() {
                assert_eq!(batch.row(i).to_vec(), enc.encode(*x).values);
            }
            assert_eq!(batch.ncols(), enc.output_dim());
        }
    }

    #[test]
    fn encoder_config_serde_round_trip() {
        let cfgs = [
            EncoderConfig::Pe(PeConfig::default()),
            EncoderConfig::Hash(HashGridConfig::default()),
        ];
        for c in cfgs {
            let s = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<EncoderConfig>(&s).unwrap(), c);
        }
    }
}
