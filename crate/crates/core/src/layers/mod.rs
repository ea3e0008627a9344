//! Forward and backward passes for the layer types the estimators are
//! assembled from.

mod conv;
mod dense;
mod lstm;

pub use conv::{
    conv1d, conv1d_out_len, maxpool1d, maxpool1d_backward, Conv1dGradAccumulator, Conv1dLayer, Conv1dParams,
};
pub use dense::{dense, dense_backward_batch, dense_forward_batch, Activation, DenseCache, DenseParams};
pub use lstm::{
    bilstm_backward_batch, bilstm_forward, bilstm_forward_batch, lstm_backward_batch, lstm_cell, lstm_forward,
    lstm_forward_batch, reverse_time, BiLstmCache, LstmCache, LstmParams, LstmState, LSTM_PARAM_NAMES,
};
