//! The CNN-LSTM fusion network and the CNN-only baseline.
//!
//! Fusion forward pass for a batch of `B` sequences of `T = 10` timesteps:
//!
//! 1. the shared encoder (CNN A) maps each `10×32×32` feature stack to a
//!    single `1×32×32` band;
//! 2. the encodings of the first 9 timesteps are fed, per pixel, as a
//!    length-9 scalar series through an LSTM (batch = `B·1024` pixels,
//!    zero initial state);
//! 3. the final hidden state is projected to one scalar per pixel
//!    (projection omitted when `H = 1`) and reshaped to `32×32`;
//! 4. a size-preserving 3×3 transposed convolution is applied;
//! 5. the result is concatenated with the time-t encoding (`2×32×32`);
//! 6. CNN B, a single reflect-padded 3×3 convolution `2 → 1`;
//! 7. sigmoid.
//!
//! The baseline is the same encoder followed by a sigmoid, reading only the
//! time-t stack.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNormParams, BatchNormStats, ConvParams, LinearParams, LstmParams, ParamStore, TransposedConvParams};
use crate::tensor::Tensor;
use crate::{CHIP_SIZE, N_BANDS, SEQ_LEN};

pub use checkpoint::{from_bytes, load, save, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_SCHEMA_VERSION};

const HW: usize = CHIP_SIZE * CHIP_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fusion,
    Baseline,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Fusion => "fusion",
            ModelKind::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(ModelKind::Fusion),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Architecture hyperparameters. Two models with equal specs have
/// parameter sets of identical names and shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ModelKind,
    /// Channel width of the four encoder blocks.
    pub width: usize,
    /// LSTM hidden size (ignored by the baseline).
    pub hidden: usize,
}

impl ArchSpec {
    pub const DEFAULT_WIDTH: usize = 128;
    pub const DEFAULT_HIDDEN: usize = 32;

    pub fn fusion(width: usize, hidden: usize) -> Self {
        ArchSpec { kind: ModelKind::Fusion, width, hidden }
    }

    pub fn baseline(width: usize) -> Self {
        ArchSpec { kind: ModelKind::Baseline, width, hidden: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("encoder width must be positive"));
        }
        if self.kind == ModelKind::Fusion && self.hidden == 0 {
            return Err(Error::invalid("LSTM hidden size must be positive"));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    ///
    /// Encoder: `(10·w·9 + w) + 3·(w·w·9 + w) + (w·9 + 1) + 4·2w`.
    /// Fusion adds the LSTM `4H·1 + 4H·H + 4H`, the projection `H + 1` when
    /// `H > 1`, the transposed conv `9 + 1` and CNN B `2·9 + 1`.
    pub fn param_count(&self) -> usize {
        let w = self.width;
        let encoder = (N_BANDS * w * 9 + w) + 3 * (w * w * 9 + w) + (w * 9 + 1) + 4 * 2 * w;
        match self.kind {
            ModelKind::Baseline => encoder,
            ModelKind::Fusion => {
                let h = self.hidden;
                let proj = if h > 1 { h + 1 } else { 0 };
                encoder + (4 * h + 4 * h * h + 4 * h) + proj + 10 + 19
            }
        }
    }
}

/// CNN A: four `conv → batchnorm → relu` blocks (`10 → w → w → w → w`)
/// and a final `w → 1` conv with no activation.
#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<ConvParams>,
    norms: Vec<BatchNormParams>,
}

impl Encoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, width: usize) -> Self {
        let mut convs = Vec::with_capacity(5);
        let mut norms = Vec::with_capacity(4);
        let mut in_ch = N_BANDS;
        for i in 0..4 {
            convs.push(ConvParams::new(store, &format!("cnn_a.conv{i}"), in_ch, width, rng));
            norms.push(BatchNormParams::new(store, &format!("cnn_a.bn{i}"), width));
            in_ch = width;
        }
        convs.push(ConvParams::new(store, "cnn_a.conv4", width, 1, rng));
        Encoder { convs, norms }
    }

    /// `x`: `N×10×32×32` → `N×1×32×32`.
    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != N_BANDS || s[2] != CHIP_SIZE || s[3] != CHIP_SIZE {
            return Err(Error::shape("cnn_a", format!("expected N×{N_BANDS}×{CHIP_SIZE}×{CHIP_SIZE}, got {s:?}")));
        }
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(self.norms.iter_mut()) {
            h = conv.forward(tape, store, h)?;
            h = norm.forward(tape, store, h, training)?;
            h = tape.relu(h);
        }
        self.convs[4].forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    arch: ArchSpec,
    seed: u64,
    store: ParamStore,
    cnn_a: Encoder,
    lstm: LstmParams,
    proj: Option<LinearParams>,
    deconv: TransposedConvParams,
    cnn_b: ConvParams,
}

impl FusionModel {
    pub fn new(width: usize, hidden: usize, seed: u64) -> Result<Self> {
        let arch = ArchSpec::fusion(width, hidden);
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cnn_a = Encoder::new(&mut store, &mut rng, width);
        let lstm = LstmParams::new(&mut store, "lstm", 1, hidden, &mut rng);
        let proj = (hidden > 1).then(|| LinearParams::new(&mut store, "proj", hidden, 1, &mut rng));
        let deconv = TransposedConvParams::new(&mut store, "deconv", 1, 1, 1, 1, &mut rng)?;
        let cnn_b = ConvParams::new(&mut store, "cnn_b", 2, 1, &mut rng);
        Ok(FusionModel { arch, seed, store, cnn_a, lstm, proj, deconv, cnn_b })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Applies the shared encoder to a stack of feature images.
    pub fn cnn_a_forward(&mut self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        self.cnn_a.forward(tape, &self.store, x, training)
    }

    /// `seq`: `B×10×10×32×32`, timesteps oldest first → `B×32×32` in (0, 1).
    pub fn forward(&mut self, tape: &mut Tape, seq: Var, training: bool) -> Result<Var> {
        let s = tape.value(seq).shape().to_vec();
        if s.len() != 5 || s[1] != SEQ_LEN || s[2] != N_BANDS || s[3] != CHIP_SIZE || s[4] != CHIP_SIZE {
            return Err(Error::shape(
                "fusion_forward",
                format!("expected B×{SEQ_LEN}×{N_BANDS}×{CHIP_SIZE}×{CHIP_SIZE}, got {s:?}"),
            ));
        }
        let b = s[0];
        let flat = tape.reshape(seq, &[b * SEQ_LEN, N_BANDS, CHIP_SIZE, CHIP_SIZE])?;
        let enc = self.cnn_a.forward(tape, &self.store, flat, training)?;
        let enc = tape.reshape(enc, &[b, SEQ_LEN, HW])?;

        let hs = self.arch.hidden;
        let mut h = tape.constant(Tensor::zeros(vec![b * HW, hs]));
        let mut c = tape.constant(Tensor::zeros(vec![b * HW, hs]));
        for t in 0..SEQ_LEN - 1 {
            let xt = tape.narrow(enc, 1, t, 1)?;
            let xt = tape.reshape(xt, &[b * HW, 1])?;
            (h, c) = self.lstm.step(tape, &self.store, xt, h, c)?;
        }
        let per_pixel = match &self.proj {
            Some(p) => p.forward(tape, &self.store, h)?,
            None => h,
        };
        let img = tape.reshape(per_pixel, &[b, 1, CHIP_SIZE, CHIP_SIZE])?;
        let dec = self.deconv.forward(tape, &self.store, img)?;

        let now = tape.narrow(enc, 1, SEQ_LEN - 1, 1)?;
        let now = tape.reshape(now, &[b, 1, CHIP_SIZE, CHIP_SIZE])?;
        let merged = tape.concat(&[dec, now], 1)?;
        let out = self.cnn_b.forward(tape, &self.store, merged)?;
        let out = tape.sigmoid(out);
        tape.reshape(out, &[b, CHIP_SIZE, CHIP_SIZE])
    }
}

#[derive(Clone, Debug)]
pub struct BaselineCnn {
    arch: ArchSpec,
    seed: u64,
    store: ParamStore,
    cnn: Encoder,
}

impl BaselineCnn {
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        let arch = ArchSpec::baseline(width);
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cnn = Encoder::new(&mut store, &mut rng, width);
        Ok(BaselineCnn { arch, seed, store, cnn })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `x_t`: the time-t feature stack `B×10×32×32` → `B×32×32` in (0, 1).
    pub fn forward(&mut self, tape: &mut Tape, x_t: Var, training: bool) -> Result<Var> {
        let b = tape.value(x_t).shape().first().copied().unwrap_or(0);
        let out = self.cnn.forward(tape, &self.store, x_t, training)?;
        let out = tape.sigmoid(out);
        tape.reshape(out, &[b, CHIP_SIZE, CHIP_SIZE])
    }
}

/// Either model behind one interface.
#[derive(Clone, Debug)]
pub enum Network {
    Fusion(FusionModel),
    Baseline(BaselineCnn),
}

impl Network {
    /// Seeded parameter initialisation.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        Ok(match arch.kind {
            ModelKind::Fusion => Network::Fusion(FusionModel::new(arch.width, arch.hidden, seed)?),
            ModelKind::Baseline => Network::Baseline(BaselineCnn::new(arch.width, seed)?),
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        match self {
            Network::Fusion(m) => &m.arch,
            Network::Baseline(m) => &m.arch,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.arch().kind
    }

    pub fn seed(&self) -> u64 {
        match self {
            Network::Fusion(m) => m.seed,
            Network::Baseline(m) => m.seed,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Network::Fusion(m) => &m.store,
            Network::Baseline(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Network::Fusion(m) => &mut m.store,
            Network::Baseline(m) => &mut m.store,
        }
    }

    fn encoder(&self) -> &Encoder {
        match self {
            Network::Fusion(m) => &m.cnn_a,
            Network::Baseline(m) => &m.cnn,
        }
    }

    fn encoder_mut(&mut self) -> &mut Encoder {
        match self {
            Network::Fusion(m) => &mut m.cnn_a,
            Network::Baseline(m) => &mut m.cnn,
        }
    }

    pub fn batch_norm_stats(&self) -> Vec<&BatchNormStats> {
        self.encoder().norms.iter().map(|n| &n.stats).collect()
    }

    pub fn batch_norm_stats_mut(&mut self) -> Vec<&mut BatchNormStats> {
        self.encoder_mut().norms.iter_mut().map(|n| &mut n.stats).collect()
    }

    /// Number of timesteps the model reads from each sequence.
    pub fn input_steps(&self) -> usize {
        match self {
            Network::Fusion(_) => SEQ_LEN,
            Network::Baseline(_) => 1,
        }
    }

    /// Shape of a batch input: `B×10×10×32×32` for fusion, `B×10×32×32`
    /// (time t only) for the baseline.
    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        match self {
            Network::Fusion(_) => vec![batch, SEQ_LEN, N_BANDS, CHIP_SIZE, CHIP_SIZE],
            Network::Baseline(_) => vec![batch, N_BANDS, CHIP_SIZE, CHIP_SIZE],
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, input: Var, training: bool) -> Result<Var> {
        match self {
            Network::Fusion(m) => m.forward(tape, input, training),
            Network::Baseline(m) => m.forward(tape, input, training),
        }
    }

    /// Inference-mode forward without gradient bookkeeping.
    pub fn predict(&mut self, input: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let y = self.forward(&mut tape, x, false)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests;
