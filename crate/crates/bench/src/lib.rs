//! Fixed-seed inputs shared by the kernel benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trackpulse::layers::{Conv1dParams, LstmParams};
use trackpulse::ParamTensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> ParamTensor {
    ParamTensor::uniform(&[rows, cols], 1.0, &mut rng(seed))
}

/// A time-major `[T, B, d]` batch with an LSTM sized for it.
pub fn lstm_fixture(steps: usize, batch: usize, input: usize, units: usize) -> (ParamTensor, LstmParams) {
    let mut r = rng(1);
    let x = ParamTensor::uniform(&[steps, batch, input], 1.0, &mut r);
    (x, LstmParams::init(input, units, &mut r))
}

/// One frame `L × C` and a filter bank of `filters` kernels of `taps`.
pub fn conv_fixture(len: usize, channels: usize, filters: usize, taps: usize) -> (ParamTensor, Conv1dParams) {
    let mut r = rng(2);
    let x = ParamTensor::uniform(&[len, channels], 1.0, &mut r);
    (x, Conv1dParams::init(channels, filters, taps, &mut r))
}
