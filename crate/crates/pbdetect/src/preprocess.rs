//! Streaming signal conditioning: a regularized moving average with a
//! deadband, then a windowed first-order difference producing the sparse
//! rate term the isolator consumes.
//!
//! The moving average is taken over the *smoothed* history, so once the
//! signal settles inside the deadband the output freezes exactly and the
//! rate term is exactly zero. With the default one-count deadband this
//! swallows single-LSB sensor jitter without any floating-point residue.

use crate::config::PipelineConfig;
use crate::memstore::CircularBuffer;

/// One conditioned sample: the smoothed amplitude and the gated rate term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreSample {
    pub x_avg: f64,
    pub r: f64,
}

/// Constant-memory conditioner; owns one ring of `window_n` smoothed samples.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    history: CircularBuffer<f64>,
    r_thresh: f64,
    clearance: f64,
    fod_abs: bool,
    invert: bool,
}

impl Preprocessor {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Preprocessor {
            history: CircularBuffer::new(cfg.window_n),
            r_thresh: cfg.r_thresh,
            clearance: cfg.fod_clearance_threshold,
            fod_abs: cfg.formulas().fod_abs,
            invert: cfg.invert_signal,
        }
    }

    /// Condition one raw sample.
    ///
    /// Smoothing: the sample passes through unchanged when it departs from
    /// the mean of the smoothed history by more than the deadband, and is
    /// replaced by that mean otherwise. The first sample always passes.
    ///
    /// Rate: the difference between the current smoothed value and the one
    /// `window_n` steps back (the element the history ring evicts), gated to
    /// exact zero inside the clearance band.
    pub fn step(&mut self, raw: f64) -> PreSample {
        let x = if self.invert { -raw } else { raw };
        let x_avg = if self.history.is_empty() {
            x
        } else {
            let mean = self.history.iter().sum::<f64>() / self.history.len() as f64;
            if (x - mean).abs() > self.r_thresh {
                x
            } else {
                mean
            }
        };
        let evicted = self.history.push(x_avg);
        let lag = evicted.unwrap_or_else(|| self.history.get(0).unwrap());
        let d = x_avg - lag;
        let beyond = if self.fod_abs { d.abs() > self.clearance } else { d > self.clearance };
        PreSample { x_avg, r: if beyond { d } else { 0.0 } }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }
}
