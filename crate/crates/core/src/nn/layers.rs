use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Uniform He initialisation: `U(-a, a)` with `a = sqrt(6 / fan_in)`, whose
/// standard deviation is `sqrt(2 / fan_in)`.
pub fn he_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

fn uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, a: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

/// 3×3 reflect-padded convolution: weights `[out × in × 3 × 3]`, bias `[out]`.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(rng, vec![out_ch, in_ch, 3, 3], in_ch * 9));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        ConvParams { weight, bias, in_ch, out_ch }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d_reflect(x, w, b)
    }

    pub fn num_scalars(&self) -> usize {
        self.out_ch * self.in_ch * 9 + self.out_ch
    }
}

/// Size-preserving 3×3 transposed convolution (stride 1, padding 1):
/// weights `[in × out × 3 × 3]`, bias `[out]`.
#[derive(Clone, Debug)]
pub struct TransposedConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl TransposedConvParams {
    /// Only stride 1 with padding 1 keeps `H×W` for a 3×3 kernel
    /// (`out = (H-1)·stride - 2·padding + 3`); anything else is rejected.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // Size preservation for every H requires stride 1 and 2·padding = 2.
        if stride != 1 || padding != 1 {
            return Err(Error::invalid(format!(
                "transposed conv with stride {stride}, padding {padding} does not preserve spatial size"
            )));
        }
        let weight = store.add(format!("{name}.weight"), he_uniform(rng, vec![in_ch, out_ch, 3, 3], in_ch * 9));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        Ok(TransposedConvParams { weight, bias, in_ch, out_ch })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d_transpose(x, w, b)
    }

    pub fn num_scalars(&self) -> usize {
        self.in_ch * self.out_ch * 9 + self.out_ch
    }
}

/// Running statistics of a batch-norm layer. Not trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BatchNormStats,
}

impl BatchNormParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        BatchNormParams { gamma, beta, stats: BatchNormStats::new(channels) }
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm2d(x, g, b, &mut self.stats, training)
    }
}

/// Dense layer `y = x·Wᵀ + b`: weights `[out × in]`, bias `[out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let a = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, vec![out_dim, in_dim], a));
        let bias = store.add(format!("{name}.bias"), uniform(rng, vec![out_dim], a));
        LinearParams { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// LSTM cell parameters.
///
/// Gate blocks are stacked in the order input, forget, cell, output
/// (`i, f, g, o`), each `hidden` rows tall:
/// `input_weights` is `[4H × D]`, `hidden_weights` `[4H × H]`, `bias` `[4H]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input_weights: ParamId,
    pub hidden_weights: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmParams {
    /// Weights `U(-1/√H, 1/√H)`, biases zero except the forget gate at 1.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let h = hidden_size;
        let a = 1.0 / (h as f64).sqrt();
        let input_weights = store.add(format!("{name}.input_weights"), uniform(rng, vec![4 * h, input_size], a));
        let hidden_weights = store.add(format!("{name}.hidden_weights"), uniform(rng, vec![4 * h, h], a));
        let bias = store.add(format!("{name}.bias"), Tensor::from_fn(vec![4 * h], |i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }));
        LstmParams { input_weights, hidden_weights, bias, input_size, hidden_size }
    }

    pub fn num_scalars(&self) -> usize {
        let h = self.hidden_size;
        4 * h * self.input_size + 4 * h * h + 4 * h
    }

    /// One gated update on a batch: `x`: `B×D`, `h`, `c`: `B×H`.
    ///
    /// `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hs = self.hidden_size;
        let (xs, hsh, cs) = (tape.value(x).shape().to_vec(), tape.value(h).shape().to_vec(), tape.value(c).shape().to_vec());
        if xs.len() != 2 || xs[1] != self.input_size || hsh != [xs[0], hs] || cs != hsh {
            return Err(Error::shape("lstm_step", format!("x {xs:?}, h {hsh:?}, c {cs:?} for D={}, H={hs}", self.input_size)));
        }
        let wx = tape.param(store, self.input_weights);
        let wh = tape.param(store, self.hidden_weights);
        let b = tape.param(store, self.bias);
        lstm_cell(tape, x, h, c, wx, wh, b)
    }
}

/// The LSTM update on explicit weight variables; see [`LstmParams::step`].
/// `wx`: `4H×D`, `wh`: `4H×H`, `b`: `4H`.
pub fn lstm_cell(tape: &mut Tape, x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var) -> Result<(Var, Var)> {
    let hs = tape.value(wh).shape()[1];
    let state = tape.lstm_state(x, h, c, wx, wh, b)?;
    let h_next = tape.narrow(state, 1, 0, hs)?;
    let c_next = tape.narrow(state, 1, hs, hs)?;
    Ok((h_next, c_next))
}
