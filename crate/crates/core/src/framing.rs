//! Cuts a segment signal into one bearing-span frame per sleeper.

use crate::error::{Error, Result};
use crate::simkit::AbaRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    /// `S × frame_len`, row-major.
    pub frames: Vec<f64>,
    pub sleepers: Vec<usize>,
    pub frame_len: usize,
}

impl FrameSequence {
    pub fn n_frames(&self) -> usize {
        self.sleepers.len()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i * self.frame_len..(i + 1) * self.frame_len]
    }

    /// Sample index of the middle of frame `i` in the original signal.
    pub fn center(&self, i: usize) -> usize {
        i * self.frame_len + self.frame_len / 2
    }

    pub fn concat(&self) -> Vec<f64> {
        self.frames.clone()
    }
}

/// Splits `signal` into `n_frames` equal, contiguous frames.
pub fn frame_signal(signal: &[f64], n_frames: usize) -> Result<FrameSequence> {
    if n_frames == 0 || signal.is_empty() || signal.len() % n_frames != 0 {
        return Err(Error::Alignment {
            len: signal.len(),
            frames: n_frames,
        });
    }
    Ok(FrameSequence {
        frames: signal.to_vec(),
        sleepers: (0..n_frames).collect(),
        frame_len: signal.len() / n_frames,
    })
}

/// One frame per core sleeper; the recording already starts and ends half a
/// span outside the outer sleepers, so each frame is centred on its sleeper.
pub fn frame(record: &AbaRecord) -> Result<FrameSequence> {
    let seq = frame_signal(&record.signal, record.sleeper_centers.len())?;
    for (i, &c) in record.sleeper_centers.iter().enumerate() {
        if c != seq.center(i) {
            return Err(Error::Alignment {
                len: record.signal.len(),
                frames: record.sleeper_centers.len(),
            });
        }
    }
    Ok(seq)
}
