//! Parameter containers, layer parameter sets and the LSTM cell.

mod layers;
mod params;

pub use layers::{
    he_uniform, lstm_cell, BatchNormParams, BatchNormStats, ConvParams, LinearParams, LstmParams, TransposedConvParams,
};
pub use params::{ParamId, ParamStore};
