//! Fractional inundation regression from satellite time series.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autograd`]: a small dense tensor type and a tape-based
//!   reverse-mode differentiation engine with exactly the operations the
//!   model needs (reflect-padded 3x3 convolution, transposed convolution,
//!   batch normalisation, activations, linear maps, RMSE).
//! * [`nn`]: parameter containers, initialisation and the LSTM cell.
//! * [`model`]: the CNN-LSTM fusion network, the CNN-only baseline and the
//!   checkpoint format.
//! * [`datapipe`]: target upscaling, feature normalisation, sequence
//!   assembly, dihedral augmentation, chip files, manifests and
//!   leave-one-year-out splits.
//! * [`synth`]: a seeded synthetic scene generator that writes the same chip
//!   format as real data.
//! * [`train`]: RMSE loss, Ranger/Adam optimisers, the phased training loop
//!   and cross-validation.
//! * [`metrics`]: R², slope, Spearman, RMSE, error maps, series aggregation
//!   and monsoon maxima.
//! * [`infer`]: model ensembles.
//! * [`config`] and [`pipeline`]: the declarative run configuration and the
//!   file-level workflows driven by the command-line tool.

pub mod autograd;
pub mod config;
pub mod datapipe;
pub mod gradcheck;
mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use datapipe::{Chip, ChipManifest, CvSplit, Dataset};
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use model::{ArchSpec, ModelKind, Network};
pub use tensor::Tensor;
pub use train::TrainConfig;

/// Spatial edge length of a chip, in coarse cells.
pub const CHIP_SIZE: usize = 32;
/// Number of composites in one input sequence (9 history steps plus time t).
pub const SEQ_LEN: usize = 10;
/// Feature bands per timestep: 7 optical bands, elevation, slope, HAND.
pub const N_BANDS: usize = 10;
/// Optical (dynamic) bands per timestep.
pub const N_OPTICAL: usize = 7;
