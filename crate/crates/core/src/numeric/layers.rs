//! Affine layers, GELU, layer normalization and the residual feed-forward
//! block, each with a hand-written backward pass.
//!
//! Parameterized modules hold only the *names* of their tensors; values live
//! in a [`ParamStore`] and gradients are accumulated into [`Gradients`] under
//! the same names.

use rand::Rng;

use super::matrix::DenseMatrix;
use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// `input · weights + bias`, with `bias` broadcast over rows.
pub fn affine_forward(input: &DenseMatrix, weights: &DenseMatrix, bias: &DenseMatrix) -> Result<DenseMatrix> {
    if input.cols() != weights.rows() {
        return Err(Error::shape(
            "affine_forward",
            format!("input cols {}", weights.rows()),
            input.cols(),
        ));
    }
    let mut out = input.matmul(weights)?;
    out.add_row_broadcast(bias)?;
    Ok(out)
}

/// Returns `(d_input, d_weights, d_bias)`.
pub fn affine_backward(
    input: &DenseMatrix,
    weights: &DenseMatrix,
    d_out: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    d_out.ensure_shape("affine_backward", input.rows(), weights.cols())?;
    let d_input = d_out.matmul_t(weights)?;
    let d_weights = input.t_matmul(d_out)?;
    let d_bias = d_out.sum_rows();
    Ok((d_input, d_weights, d_bias))
}

/// sqrt(2/π)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/π) (x + 0.044715 x³)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn gelu_forward(input: &DenseMatrix) -> DenseMatrix {
    input.map(gelu)
}

/// Chain rule through GELU given the pre-activation `input`.
pub fn gelu_backward(input: &DenseMatrix, d_out: &DenseMatrix) -> Result<DenseMatrix> {
    input.zip_map(d_out, |x, g| gelu_derivative(x) * g)
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: DenseMatrix,
    inv_std: Vec<f64>,
}

/// Per-row layer normalization with learnable gain and shift.
pub fn layer_norm_forward(
    input: &DenseMatrix,
    gain: &DenseMatrix,
    shift: &DenseMatrix,
) -> Result<(DenseMatrix, LayerNormCache)> {
    let width = input.cols();
    gain.ensure_shape("layer_norm gain", 1, width)?;
    shift.ensure_shape("layer_norm shift", 1, width)?;
    let mut normalized = DenseMatrix::zeros(input.rows(), width);
    let mut out = DenseMatrix::zeros(input.rows(), width);
    let mut inv_std = Vec::with_capacity(input.rows());
    for r in 0..input.rows() {
        let row = input.row(r);
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for (c, &x) in row.iter().enumerate() {
            let n = (x - mean) * is;
            normalized.set(r, c, n);
            out.set(r, c, n * gain.get(0, c) + shift.get(0, c));
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(d_input, d_gain, d_shift)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &DenseMatrix,
    d_out: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let (rows, width) = cache.normalized.shape();
    d_out.ensure_shape("layer_norm_backward", rows, width)?;
    let mut d_input = DenseMatrix::zeros(rows, width);
    let mut d_gain = DenseMatrix::zeros(1, width);
    let d_shift = d_out.sum_rows();
    let w = width as f64;
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let dy = d_out.row(r);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..width {
            let dxhat = dy[c] * gain.get(0, c);
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat[c];
            d_gain.data_mut()[c] += dy[c] * xhat[c];
        }
        let is = cache.inv_std[r];
        for c in 0..width {
            let dxhat = dy[c] * gain.get(0, c);
            d_input.set(r, c, is / w * (w * dxhat - sum_dxhat - xhat[c] * sum_dxhat_xhat));
        }
    }
    Ok((d_input, d_gain, d_shift))
}

/// Affine layer whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{name}.weight` (Glorot uniform) and `{name}.bias` (zeros).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert_glorot(weight.clone(), in_dim, out_dim, rng);
        store.insert(bias.clone(), DenseMatrix::zeros(1, out_dim), false);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    pub fn forward(&self, store: &ParamStore, input: &DenseMatrix) -> Result<DenseMatrix> {
        affine_forward(input, store.get(&self.weight)?, store.get(&self.bias)?)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        input: &DenseMatrix,
        d_out: &DenseMatrix,
        grads: &mut Gradients,
    ) -> Result<DenseMatrix> {
        let (d_input, d_weight, d_bias) = affine_backward(input, store.get(&self.weight)?, d_out)?;
        grads.accumulate(&self.weight, &d_weight)?;
        grads.accumulate(&self.bias, &d_bias)?;
        Ok(d_input)
    }
}

/// Stack of affine layers with GELU between consecutive layers (none after
/// the last one).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<DenseMatrix>,
    /// Pre-activation output of each hidden layer.
    pre_activations: Vec<DenseMatrix>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`; needs at least two entries.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "mlp `{name}` needs >= 2 positive widths, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, store: &ParamStore, input: &DenseMatrix) -> Result<(DenseMatrix, MlpCache)> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape("mlp input width", self.in_dim(), input.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len() - 1);
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(store, &x)?;
            inputs.push(x);
            if i < last {
                x = gelu_forward(&y);
                pre_activations.push(y);
            } else {
                x = y;
            }
        }
        Ok((
            x,
            MlpCache {
                inputs,
                pre_activations,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        d_out: &DenseMatrix,
        grads: &mut Gradients,
    ) -> Result<DenseMatrix> {
        let mut d = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                d = gelu_backward(&cache.pre_activations[i], &d)?;
            }
            d = self.layers[i].backward(store, &cache.inputs[i], &d, grads)?;
        }
        Ok(d)
    }
}

/// Pre-norm transformer-style feed-forward block:
/// `out = x + W₂ · gelu(W₁ · LN(x) + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    gain: String,
    shift: String,
    expand: Linear,
    contract: Linear,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    norm: LayerNormCache,
    normed: DenseMatrix,
    hidden_pre: DenseMatrix,
    hidden: DenseMatrix,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        expansion: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 || expansion == 0 {
            return Err(Error::Config(format!(
                "residual block `{name}` needs positive width and expansion"
            )));
        }
        let gain = format!("{name}.norm.gain");
        let shift = format!("{name}.norm.shift");
        store.insert(gain.clone(), DenseMatrix::filled(1, width, 1.0), false);
        store.insert(shift.clone(), DenseMatrix::zeros(1, width), false);
        let expand = Linear::new(store, &format!("{name}.expand"), width, width * expansion, rng);
        let contract = Linear::new(store, &format!("{name}.contract"), width * expansion, width, rng);
        Ok(Self {
            gain,
            shift,
            expand,
            contract,
            width,
        })
    }

    pub fn expand(&self) -> &Linear {
        &self.expand
    }

    pub fn contract(&self) -> &Linear {
        &self.contract
    }

    pub fn forward(&self, store: &ParamStore, input: &DenseMatrix) -> Result<(DenseMatrix, ResidualCache)> {
        if input.cols() != self.width {
            return Err(Error::shape("residual block width", self.width, input.cols()));
        }
        let (normed, norm) = layer_norm_forward(input, store.get(&self.gain)?, store.get(&self.shift)?)?;
        let hidden_pre = self.expand.forward(store, &normed)?;
        let hidden = gelu_forward(&hidden_pre);
        let mut out = self.contract.forward(store, &hidden)?;
        out.add_assign(input)?;
        Ok((
            out,
            ResidualCache {
                norm,
                normed,
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ResidualCache,
        d_out: &DenseMatrix,
        grads: &mut Gradients,
    ) -> Result<DenseMatrix> {
        let d_hidden = self.contract.backward(store, &cache.hidden, d_out, grads)?;
        let d_hidden_pre = gelu_backward(&cache.hidden_pre, &d_hidden)?;
        let d_normed = self.expand.backward(store, &cache.normed, &d_hidden_pre, grads)?;
        let (mut d_input, d_gain, d_shift) = layer_norm_backward(&cache.norm, store.get(&self.gain)?, &d_normed)?;
        grads.accumulate(&self.gain, &d_gain)?;
        grads.accumulate(&self.shift, &d_shift)?;
        d_input.add_assign(d_out)?;
        Ok(d_input)
    }
}
