//! Sinusoidal positional encoding.
//!
//! Each input component `t` is lifted to
//! `(sin(2^0 π t), cos(2^0 π t), ..., sin(2^(L-1) π t), cos(2^(L-1) π t))`.
//! For a 2D input the output is the x block followed by the y block, so the
//! layout is `[x: sin f0, cos f0, sin f1, cos f1, ...][y: same]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{EncodedFeature, NormCoord2, Provenance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeConfig {
    pub num_frequencies: usize,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self { num_frequencies: 10 }
    }
}

impl PeConfig {
    pub fn new(num_frequencies: usize) -> Result<Self> {
        let cfg = Self { num_frequencies };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies == 0 {
            return Err(Error::Config(
                "positional encoding needs at least one frequency".into(),
            ));
        }
        Ok(())
    }

    /// Features per scalar input component.
    pub fn dim_per_component(&self) -> usize {
        2 * self.num_frequencies
    }

    /// Features for a 2D coordinate.
    pub fn output_dim(&self) -> usize {
        4 * self.num_frequencies
    }
}

/// Writes the encoding of `x` into `out` (length `cfg.output_dim()`).
pub fn encode_pe_into(x: NormCoord2, cfg: &PeConfig, out: &mut [f64]) {
    let l = cfg.num_frequencies;
    debug_assert_eq!(out.len(), 4 * l);
    for (block, t) in [x.x(), x.y()].into_iter().enumerate() {
        let base = block * 2 * l;
        let mut freq = PI;
        for k in 0..l {
            let (s, c) = (freq * t).sin_cos();
            out[base + 2 * k] = s;
            out[base + 2 * k + 1] = c;
            freq *= 2.0;
        }
    }
}

pub fn encode_pe(x: NormCoord2, cfg: &PeConfig) -> EncodedFeature {
    let mut values = vec![0.0; cfg.output_dim()];
    encode_pe_into(x, cfg, &mut values);
    EncodedFeature {
        values,
        provenance: Provenance::Pe(*cfg),
    }
}

/// Analytic Jacobian of [`encode_pe`]: one `[d/dx, d/dy]` row per output feature.
pub fn encode_pe_jacobian(x: NormCoord2, cfg: &PeConfig) -> Vec<[f64; 2]> {
    let l = cfg.num_frequencies;
    let mut jac = vec![[0.0; 2]; 4 * l];
    for (block, t) in [x.x(), x.y()].into_iter().enumerate() {
        let base = block * 2 * l;
        let mut freq = PI;
        for k in 0..l {
            let (s, c) = (freq * t).sin_cos();
            jac[base + 2 * k][block] = freq * c;
            jac[base + 2 * k + 1][block] = -freq * s;
            freq *= 2.0;
        }
    }
    jac
}
