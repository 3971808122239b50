//! Subject-adaptive prolonged-blink detection for streaming EOG.
//!
//! The pipeline runs in constant memory: a regularized moving average and
//! first-order-difference stage flatten the raw signal into a sparse rate
//! term, a five-stage isolator captures candidate blink wavelets, six shape
//! features feed per-subject fuzzy thresholds learned online, and an episode
//! monitor raises an alert when enough prolonged blinks land inside a time
//! window. A byte-budget accountant and fixed-leaf wave store emulate the
//! target's static allocation discipline on the host.

pub mod classifier;
pub mod config;
pub mod error;
pub mod features;
pub mod harness;
pub mod isolator;
pub mod memstore;
pub mod preprocess;
pub mod signal;
pub mod simulator;
pub mod strictmode;
pub mod trainer;

pub use config::{PipelineConfig, SimilarityBackend};
pub use harness::{EvalOptions, ProfileOutcome, Score};
pub use error::{Error, Result};
pub use signal::{EogSample, EogTrace, TraceFormat, TraceLabel};
pub use simulator::MovementKind;
pub use strictmode::{FormulaMode, FormulaOverrides, Formulas};
