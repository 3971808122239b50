//! Formula-mode switch between the corrected math and the reference
//! algorithm's literal printed forms.
//!
//! Three formulas differ between the two modes:
//!
//! - spread estimate: `sqrt(acc / N)` (corrected) vs `acc / N` (strict),
//! - membership exponent: `exp(-z^2 / 2)` (corrected) vs `exp(-z / 2)` (strict),
//! - difference guard: `|d| > clearance` (corrected) vs `d > clearance`
//!   (strict; zeroes every negative half cycle, kept for comparison runs).
//!
//! The active mode is stamped into trained models and evaluation reports so
//! results produced under different formula sets are never mixed silently.

use serde::{Deserialize, Serialize};

/// Which set of formulas the pipeline runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FormulaMode {
    /// Conventional forms: true standard deviation, Gaussian bell, magnitude guard.
    #[default]
    Corrected,
    /// The reference algorithm's formulas exactly as printed.
    Strict,
}

impl FormulaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FormulaMode::Corrected => "corrected",
            FormulaMode::Strict => "strict",
        }
    }
}

impl std::str::FromStr for FormulaMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "corrected" => Ok(FormulaMode::Corrected),
            "strict" => Ok(FormulaMode::Strict),
            other => Err(crate::Error::Config(format!(
                "unknown formula mode {other:?} (expected \"corrected\" or \"strict\")"
            ))),
        }
    }
}

impl std::fmt::Display for FormulaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-formula overrides on top of a base mode; `None` keeps the mode's choice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaOverrides {
    pub sd_sqrt: Option<bool>,
    pub gaussian_square: Option<bool>,
    pub fod_abs: Option<bool>,
}

/// Fully resolved formula switches consumed by the pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formulas {
    /// Take the square root of the variance-accumulator ratio.
    pub sd_sqrt: bool,
    /// Square the normalized deviation in the membership exponent.
    pub gaussian_square: bool,
    /// Guard the windowed difference by magnitude rather than one-sidedly.
    pub fod_abs: bool,
}

/// Resolve a mode plus optional per-formula overrides into concrete switches.
pub fn apply_mode(mode: FormulaMode, overrides: FormulaOverrides) -> Formulas {
    let base = matches!(mode, FormulaMode::Corrected);
    Formulas {
        sd_sqrt: overrides.sd_sqrt.unwrap_or(base),
        gaussian_square: overrides.gaussian_square.unwrap_or(base),
        fod_abs: overrides.fod_abs.unwrap_or(base),
    }
}
