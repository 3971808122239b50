//! Five-stage wavelet isolator.
//!
//! A blink in the rate signal is a negative half-cycle, an optional run of
//! zeros while the eye stays closed, a positive half-cycle, and then a quiet
//! hold. The isolator walks that grammar sample by sample, captures the
//! wavelet into leaf-backed storage as it goes, and either emits the sealed
//! capture as a candidate or rejects it with a named reason. Anything
//! rejected frees its capture immediately; the machine is back at idle on
//! the next sample.

use crate::config::PipelineConfig;
use crate::memstore::{BudgetAccountant, HatStore, WaveHandle};
use std::collections::BTreeMap;
use std::fmt;

/// Isolator stages, idle through trailing hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Idle,
    NegativeHalf,
    InterCycleGap,
    PositiveHalf,
    Tail,
}

/// Why a capture was thrown away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    /// Rate went positive from idle; blinks always lead negative.
    PositiveFirst,
    /// Eye-closed gap between half-cycles outlasted the timeout.
    IhcTimeout,
    /// Half-cycle order broke (a second negative lobe mid-wavelet).
    SequenceViolation,
    /// Rate moved again during the trailing hold.
    TailDisturbed,
    /// Capture outgrew the wavelet length cap or its memory reservation.
    TooLong,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::PositiveFirst => "POSITIVE_FIRST",
            RejectReason::IhcTimeout => "IHC_TIMEOUT",
            RejectReason::SequenceViolation => "SEQUENCE_VIOLATION",
            RejectReason::TailDisturbed => "TAIL_DISTURBED",
            RejectReason::TooLong => "TOO_LONG",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A sealed wavelet: the captured rate samples and where they sat in the
/// stream. `emitted_idx` is the sample on which the trailing hold completed,
/// which is when downstream stages get to see the candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateWave {
    pub samples: Vec<f64>,
    pub start_idx: u64,
    pub end_idx: u64,
    pub emitted_idx: u64,
}

/// Outcome of feeding one rate sample.
#[derive(Debug, Clone, PartialEq)]
pub enum IsolatorStep {
    /// Idle and nothing started.
    Quiet,
    /// Mid-capture, nothing decided yet.
    Capturing,
    Candidate(CandidateWave),
    Rejected(RejectReason),
}

/// The isolator state machine. Capture storage is charged to the shared
/// accountant under the `capture` owner, so an over-budget wavelet fails
/// the same way it would on the target.
#[derive(Debug)]
pub struct WaveletIsolator {
    stage: Stage,
    hold_samples: usize,
    ihc_max: usize,
    max_len: usize,
    store: HatStore,
    active: Option<WaveHandle>,
    start_idx: u64,
    len: usize,
    ihc_len: usize,
    dwell: usize,
    cursor: u64,
    tally: BTreeMap<&'static str, usize>,
}

impl WaveletIsolator {
    pub fn new(cfg: &PipelineConfig, accountant: BudgetAccountant) -> Self {
        WaveletIsolator {
            stage: Stage::Idle,
            hold_samples: cfg.hold_samples(),
            ihc_max: cfg.ihc_max_samples(),
            max_len: cfg.max_wavelet_samples(),
            store: HatStore::new(cfg.hat_leaf_len, cfg.accounted_sample_bytes, accountant, "capture"),
            active: None,
            start_idx: 0,
            len: 0,
            ihc_len: 0,
            dwell: 0,
            cursor: 0,
            tally: BTreeMap::new(),
        }
    }

    /// Feed one rate sample; the isolator keeps its own stream cursor.
    pub fn step(&mut self, r: f64) -> IsolatorStep {
        let idx = self.cursor;
        self.cursor += 1;
        match self.stage {
            Stage::Idle => {
                if r < 0.0 {
                    let h = match self.store.begin_wave() {
                        Ok(h) => h,
                        Err(_) => return self.reject(RejectReason::TooLong),
                    };
                    self.active = Some(h);
                    self.start_idx = idx;
                    self.len = 0;
                    self.ihc_len = 0;
                    self.dwell = 0;
                    self.stage = Stage::NegativeHalf;
                    self.capture(r)
                } else if r > 0.0 {
                    self.reject(RejectReason::PositiveFirst)
                } else {
                    IsolatorStep::Quiet
                }
            }
            Stage::NegativeHalf => {
                if r < 0.0 {
                    self.capture(r)
                } else if r == 0.0 {
                    self.stage = Stage::InterCycleGap;
                    self.ihc_len = 1;
                    self.capture(r)
                } else {
                    self.stage = Stage::PositiveHalf;
                    self.capture(r)
                }
            }
            Stage::InterCycleGap => {
                if r == 0.0 {
                    self.ihc_len += 1;
                    if self.ihc_len > self.ihc_max {
                        self.reject(RejectReason::IhcTimeout)
                    } else {
                        self.capture(r)
                    }
                } else if r > 0.0 {
                    self.stage = Stage::PositiveHalf;
                    self.capture(r)
                } else {
                    self.reject(RejectReason::SequenceViolation)
                }
            }
            Stage::PositiveHalf => {
                if r > 0.0 {
                    self.capture(r)
                } else if r == 0.0 {
                    self.stage = Stage::Tail;
                    self.dwell = 1;
                    self.maybe_emit(idx)
                } else {
                    self.reject(RejectReason::SequenceViolation)
                }
            }
            Stage::Tail => {
                if r == 0.0 {
                    self.dwell += 1;
                    self.maybe_emit(idx)
                } else {
                    self.reject(RejectReason::TailDisturbed)
                }
            }
        }
    }

    /// Push one sample into the open capture, honoring the length cap and
    /// the memory reservation.
    fn capture(&mut self, r: f64) -> IsolatorStep {
        if self.len >= self.max_len {
            return self.reject(RejectReason::TooLong);
        }
        let h = self.active.expect("capture without an open wave");
        if self.store.push(h, r).is_err() {
            return self.reject(RejectReason::TooLong);
        }
        self.len += 1;
        IsolatorStep::Capturing
    }

    fn maybe_emit(&mut self, idx: u64) -> IsolatorStep {
        if self.dwell < self.hold_samples {
            return IsolatorStep::Capturing;
        }
        let h = self.active.take().expect("emit without an open wave");
        self.store.seal(h);
        let samples = self.store.read(h).expect("sealed wave readable");
        self.store.release(h);
        let wave = CandidateWave {
            start_idx: self.start_idx,
            end_idx: self.start_idx + samples.len() as u64 - 1,
            emitted_idx: idx,
            samples,
        };
        self.stage = Stage::Idle;
        IsolatorStep::Candidate(wave)
    }

    fn reject(&mut self, reason: RejectReason) -> IsolatorStep {
        if let Some(h) = self.active.take() {
            self.store.release(h);
        }
        self.stage = Stage::Idle;
        *self.tally.entry(reason.as_str()).or_insert(0) += 1;
        IsolatorStep::Rejected(reason)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Count of rejections by reason since construction or reset.
    pub fn reject_tally(&self) -> &BTreeMap<&'static str, usize> {
        &self.tally
    }

    pub fn reset(&mut self) {
        if let Some(h) = self.active.take() {
            self.store.release(h);
        }
        self.stage = Stage::Idle;
        self.cursor = 0;
        self.tally.clear();
    }
}
