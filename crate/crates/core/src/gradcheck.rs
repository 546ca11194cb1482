//! Central finite-difference verification of the analytic gradients.
//!
//! Each check builds a scalar loss from freshly drawn inputs, back-propagates
//! once, then re-evaluates the forward pass with every input element nudged
//! by `±h`. The numeric side only ever runs forward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, Tape, Var};
use crate::error::Result;
use crate::nn::{lstm_cell, BatchNormStats};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so near-zero gradient entries
/// are compared with an absolute tolerance of `TOLERANCE · REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward` against central differences of `loss_fn` for every
/// element of every input.
pub fn check_inputs<F>(inputs: &[Tensor], mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v).cloned().expect("leaf gradient")).collect();

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for i in 0..values.len() {
        for j in 0..values[i].numel() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from the ReLU kink by more than the FD step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Weighted-sum head: `loss = Σ r ⊙ y` for a fixed random `r`.
fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type Check = (&'static str, fn(u64) -> Result<f64>);

/// Every differentiable op used by the model.
pub const CHECKS: &[Check] = &[
    ("conv2d_reflect", conv_reflect),
    ("conv2d_transpose", conv_transpose),
    ("batch_norm2d_train", |s| batch_norm(s, true)),
    ("batch_norm2d_infer", |s| batch_norm(s, false)),
    ("relu", |s| activation(s, Activation::Relu)),
    ("sigmoid", |s| activation(s, Activation::Sigmoid)),
    ("tanh", |s| activation(s, Activation::Tanh)),
    ("lstm_step", lstm_step),
    ("linear", linear),
    ("rmse", rmse),
];

pub fn conv_reflect(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, vec![2, 3, 5, 4], -1.0, 1.0);
    let w = uniform(&mut rng, vec![4, 3, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, vec![4], -0.5, 0.5);
    let r = uniform(&mut rng, vec![2, 4, 5, 4], -1.0, 1.0);
    check_inputs(&[x, w, b], |t, v| {
        let y = t.conv2d_reflect(v[0], v[1], v[2])?;
        weighted_sum(t, y, &r)
    })
}

pub fn conv_transpose(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, vec![2, 2, 4, 5], -1.0, 1.0);
    let w = uniform(&mut rng, vec![2, 3, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, vec![3], -0.5, 0.5);
    let r = uniform(&mut rng, vec![2, 3, 4, 5], -1.0, 1.0);
    check_inputs(&[x, w, b], |t, v| {
        let y = t.conv2d_transpose(v[0], v[1], v[2])?;
        weighted_sum(t, y, &r)
    })
}

pub fn batch_norm(seed: u64, training: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, vec![3, 2, 3, 3], -2.0, 2.0);
    let gamma = uniform(&mut rng, vec![2], 0.5, 1.5);
    let beta = uniform(&mut rng, vec![2], -0.5, 0.5);
    let r = uniform(&mut rng, vec![3, 2, 3, 3], -1.0, 1.0);
    let mut stats = BatchNormStats::new(2);
    stats.running_mean = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    stats.running_var = vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
    check_inputs(&[x, gamma, beta], |t, v| {
        let mut s = stats.clone();
        let y = t.batch_norm2d(v[0], v[1], v[2], &mut s, training)?;
        weighted_sum(t, y, &r)
    })
}

pub fn activation(seed: u64, kind: Activation) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(&mut rng, vec![4, 6]);
    let r = uniform(&mut rng, vec![4, 6], -1.0, 1.0);
    check_inputs(&[x], |t, v| {
        let y = t.activation(v[0], kind);
        weighted_sum(t, y, &r)
    })
}

pub fn lstm_step(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, h) = (4, 2, 3);
    let inputs = [
        uniform(&mut rng, vec![b, d], -1.0, 1.0),
        uniform(&mut rng, vec![b, h], -1.0, 1.0),
        uniform(&mut rng, vec![b, h], -1.0, 1.0),
        uniform(&mut rng, vec![4 * h, d], -0.7, 0.7),
        uniform(&mut rng, vec![4 * h, h], -0.7, 0.7),
        uniform(&mut rng, vec![4 * h], -0.5, 0.5),
    ];
    let rh = uniform(&mut rng, vec![b, h], -1.0, 1.0);
    let rc = uniform(&mut rng, vec![b, h], -1.0, 1.0);
    check_inputs(&inputs, |t, v| {
        let (hn, cn) = lstm_cell(t, v[0], v[1], v[2], v[3], v[4], v[5])?;
        let lh = weighted_sum(t, hn, &rh)?;
        let lc = weighted_sum(t, cn, &rc)?;
        t.add(lh, lc)
    })
}

pub fn linear(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, vec![5, 4], -1.0, 1.0);
    let w = uniform(&mut rng, vec![3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, vec![3], -1.0, 1.0);
    let r = uniform(&mut rng, vec![5, 3], -1.0, 1.0);
    check_inputs(&[x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y, &r)
    })
}

pub fn rmse(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = uniform(&mut rng, vec![2, 4, 4], 0.0, 1.0);
    let q = uniform(&mut rng, vec![2, 4, 4], 0.0, 1.0);
    check_inputs(&[p, q], |t, v| t.rmse(v[0], v[1]))
}

/// Runs every check over `seeds`.
pub fn run_suite(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (op, f) in CHECKS {
        for seed in seeds.clone() {
            out.push(GradCheck { op, seed, max_rel_error: f(seed)? });
        }
    }
    Ok(out)
}
