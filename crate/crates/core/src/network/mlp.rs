use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub struct Dense {
    /// `in x out`, so a batch forward is `x · w + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

impl Dense {
    fn he_uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((inputs, outputs), |_| rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(outputs),
            grad_weight: Array2::zeros((inputs, outputs)),
            grad_bias: Array1::zeros(outputs),
        }
    }
}

/// Per-layer parameter gradients, produced by [`MlpHead::backward`].
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl HeadGrads {
    pub fn add_assign(&mut self, other: &HeadGrads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Activations kept from a forward pass.
#[derive(Clone, Debug)]
pub struct HeadCache {
    /// Input of every layer; entry 0 is the encoded batch.
    inputs: Vec<Array2<f64>>,
    /// Post-activation output.
    output: Array2<f64>,
}

impl HeadCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// A ReLU feed-forward head with an identity or sigmoid output.
#[derive(Clone, Debug)]
pub struct MlpHead {
    layers: Vec<Dense>,
    output: OutputActivation,
}

impl MlpHead {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        output: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.iter().any(|w| *w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense::he_uniform(w[0], w[1], &mut rng))
            .collect();
        Ok(Self { layers, output })
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.nrows()];
        dims.extend(self.layers.iter().map(|l| l.weight.ncols()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.ncols()).unwrap_or(0)
    }

    pub fn activation(&self) -> OutputActivation {
        self.output
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// Zeroes the weights of the final layer, leaving its bias in place.
    pub fn zero_output_weights(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.fill(0.0);
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            a = a.dot(&layer.weight) + &layer.bias;
            if i < last {
                a.mapv_inplace(relu);
            }
        }
        self.apply_output(&mut a);
        a
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> HeadCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight) + &layer.bias;
            if i < last {
                z.mapv_inplace(relu);
            }
            inputs.push(a);
            a = z;
        }
        self.apply_output(&mut a);
        HeadCache { inputs, output: a }
    }

    fn apply_output(&self, a: &mut Array2<f64>) {
        if self.output == OutputActivation::Sigmoid {
            a.mapv_inplace(sigmoid);
        }
    }

    /// Backpropagates `d_output` (gradient w.r.t. the post-activation output).
    /// Returns parameter gradients and the gradient w.r.t. the head input.
    pub fn backward(&self, cache: &HeadCache, d_output: &Array2<f64>) -> (HeadGrads, Array2<f64>) {
        let mut dz = match self.output {
            OutputActivation::Identity => d_output.to_owned(),
            OutputActivation::Sigmoid => {
                let mut d = d_output.to_owned();
                d.zip_mut_with(&cache.output, |g, y| *g *= y * (1.0 - y));
                d
            }
        };
        let n = self.layers.len();
        let mut weight = vec![Array2::zeros((0, 0)); n];
        let mut bias = vec![Array1::zeros(0); n];
        for i in (0..n).rev() {
            let input = &cache.inputs[i];
            weight[i] = input.t().dot(&dz);
            bias[i] = dz.sum_axis(Axis(0));
            let mut da = dz.dot(&self.layers[i].weight.t());
            if i > 0 {
                // input of layer i is relu(z_{i-1})
                da.zip_mut_with(input, |g, a| {
                    if *a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            dz = da;
        }
        (HeadGrads { weight, bias }, dz)
    }

    pub fn accumulate(&mut self, grads: &HeadGrads) {
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weight.iter().zip(&grads.bias))
        {
            layer.grad_weight += gw;
            layer.grad_bias += gb;
        }
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.grad_weight.fill(0.0);
            layer.grad_bias.fill(0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub(crate) fn params_and_grads(&mut self) -> Vec<(&mut [f64], &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            let Dense {
                weight,
                bias,
                grad_weight,
                grad_bias,
            } = layer;
            out.push((
                weight.as_slice_mut().expect("standard layout"),
                grad_weight.as_slice().expect("standard layout"),
            ));
            out.push((
                bias.as_slice_mut().expect("standard layout"),
                grad_bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub(crate) fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &self.layers {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub(crate) fn set_param_slices(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != 2 * self.layers.len() {
            return Err(Error::Shape("head tensor count mismatch".into()));
        }
        for (layer, pair) in self.layers.iter_mut().zip(values.chunks_exact(2)) {
            let w = layer.weight.as_slice_mut().expect("standard layout");
            let b = layer.bias.as_slice_mut().expect("standard layout");
            if pair[0].len() != w.len() || pair[1].len() != b.len() {
                return Err(Error::Shape("head tensor size mismatch".into()));
            }
            w.copy_from_slice(&pair[0]);
            b.copy_from_slice(&pair[1]);
        }
        Ok(())
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
