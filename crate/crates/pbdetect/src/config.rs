//! Pipeline configuration.
//!
//! One flat struct drives every stage. Config files are TOML key-value text
//! mirroring the field names exactly; every key is optional and falls back to
//! the defaults below. Amplitudes are modeled in ADC counts: the default full
//! scale is a 12-bit bipolar range with an LSB of exactly one count, which is
//! what makes a deadband of `r_thresh = 1` swallow one-LSB quantization noise.

use crate::error::{Error, Result};
use crate::strictmode::{apply_mode, FormulaMode, FormulaOverrides, Formulas};
use serde::{Deserialize, Serialize};

/// Similarity measure used for the medoid and the similarity feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityBackend {
    /// Maximum of the normalized cross-correlation over all integer lags.
    #[default]
    NccMax,
    /// Derivative dynamic time warping under a Sakoe-Chiba band, mapped to
    /// a similarity via `exp(-distance)`.
    DdtwSakoeChiba,
}

impl SimilarityBackend {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityBackend::NccMax => "ncc_max",
            SimilarityBackend::DdtwSakoeChiba => "ddtw_sakoe_chiba",
        }
    }
}

impl std::str::FromStr for SimilarityBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncc_max" => Ok(SimilarityBackend::NccMax),
            "ddtw_sakoe_chiba" => Ok(SimilarityBackend::DdtwSakoeChiba),
            other => Err(Error::Config(format!(
                "unknown similarity backend {other:?} (expected \"ncc_max\" or \"ddtw_sakoe_chiba\")"
            ))),
        }
    }
}

impl std::fmt::Display for SimilarityBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Samples per second of the input stream.
    pub sampling_rate_hz: f64,
    /// ADC resolution in bits; `quantize` snaps to `2^adc_bits` levels.
    pub adc_bits: u32,
    /// Lower edge of the ADC full-scale range, in amplitude units (counts).
    pub full_scale_min: f64,
    /// Upper edge of the ADC full-scale range.
    pub full_scale_max: f64,
    /// Deadband half-width of the regularized moving average.
    pub r_thresh: f64,
    /// Minimum magnitude a windowed difference must clear to pass as nonzero.
    /// Keep this above `r_thresh`: the deadband tracks baseline in steps of up
    /// to about two counts, and a clearance below that step size lets phantom
    /// sub-count rates disturb confirmation holds.
    pub fod_clearance_threshold: f64,
    /// Moving-average window and difference lag, in samples.
    pub window_n: usize,
    /// Continuous zero dwell required to confirm a candidate wavelet.
    pub state4_hold_ms: f64,
    /// Longest zero gap tolerated between the negative and positive half cycles.
    pub ihc_timeout_ms: f64,
    /// Hard bound on a single captured wavelet, in seconds.
    pub max_wavelet_s: f64,
    /// Flip raw input polarity (electrode reversal).
    pub invert_signal: bool,
    /// Target-movement repetitions consumed by learning phase 1.
    pub pb_training_reps: usize,
    /// Anti-movement repetitions consumed by learning phase 2.
    pub up_training_reps: usize,
    /// Number of features entering the decision ratio (1..=6, `FeatureVector::NAMES` order).
    pub total_features: usize,
    /// Fraction of `total_features` the membership sum must reach (inclusive).
    pub pass_ratio: f64,
    pub similarity_backend: SimilarityBackend,
    /// Sakoe-Chiba band half-width in derivative samples.
    pub sakoe_chiba_band: usize,
    /// Use the fixed-point integer cross-correlation path.
    pub integer_ncc: bool,
    /// Wavelet buffer capacity in waves.
    pub wavelet_capacity: usize,
    /// Eviction never drops the buffer below this many waves.
    pub min_retained_waves: usize,
    /// Prolonged blinks within one window needed to raise an alert.
    pub episode_min_pbs: usize,
    /// Episode window length in seconds.
    pub episode_window_s: f64,
    /// Emulated SRAM ceiling for all tracked owners.
    pub memory_budget_bytes: usize,
    /// Elements per wave-store leaf.
    pub hat_leaf_len: usize,
    /// Bytes the accountant charges per stored sample (target stores shorts).
    pub accounted_sample_bytes: usize,
    pub formula_mode: FormulaMode,
    #[serde(flatten)]
    pub formula_overrides: FormulaOverrides,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sampling_rate_hz: 250.0,
            adc_bits: 12,
            full_scale_min: -2048.0,
            full_scale_max: 2047.0,
            r_thresh: 1.0,
            fod_clearance_threshold: 2.5,
            window_n: 25,
            state4_hold_ms: 200.0,
            ihc_timeout_ms: 500.0,
            max_wavelet_s: 4.0,
            invert_signal: false,
            pb_training_reps: 10,
            up_training_reps: 10,
            total_features: 6,
            pass_ratio: 0.6,
            similarity_backend: SimilarityBackend::NccMax,
            sakoe_chiba_band: 50,
            integer_ncc: false,
            wavelet_capacity: 16,
            min_retained_waves: 3,
            episode_min_pbs: 2,
            episode_window_s: 10.0,
            memory_budget_bytes: 32_768,
            hat_leaf_len: 100,
            accounted_sample_bytes: 2,
            formula_mode: FormulaMode::Corrected,
            formula_overrides: FormulaOverrides::default(),
        }
    }
}

impl PipelineConfig {
    /// Resolved formula switches for the active mode plus overrides.
    pub fn formulas(&self) -> Formulas {
        apply_mode(self.formula_mode, self.formula_overrides)
    }

    /// Same config with a different formula mode (overrides cleared).
    pub fn with_mode(&self, mode: FormulaMode) -> Self {
        PipelineConfig { formula_mode: mode, formula_overrides: FormulaOverrides::default(), ..self.clone() }
    }

    /// Zero-dwell length confirming a candidate, in samples (ceiling).
    pub fn hold_samples(&self) -> usize {
        ms_to_samples(self.state4_hold_ms, self.sampling_rate_hz)
    }

    /// Inter-half-cycle timeout, in samples (ceiling).
    pub fn ihc_max_samples(&self) -> usize {
        ms_to_samples(self.ihc_timeout_ms, self.sampling_rate_hz)
    }

    /// Hard capture bound, in samples.
    pub fn max_wavelet_samples(&self) -> usize {
        (self.max_wavelet_s * self.sampling_rate_hz).ceil() as usize
    }

    pub fn full_scale(&self) -> (f64, f64) {
        (self.full_scale_min, self.full_scale_max)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        }
        positive("sampling_rate_hz", self.sampling_rate_hz)?;
        if self.adc_bits == 0 || self.adc_bits > 32 {
            return Err(Error::Config(format!("adc_bits must be in 1..=32, got {}", self.adc_bits)));
        }
        if !(self.full_scale_min < self.full_scale_max) {
            return Err(Error::Config(format!(
                "full scale range is inverted or empty: [{}, {}]",
                self.full_scale_min, self.full_scale_max
            )));
        }
        if !self.r_thresh.is_finite() || self.r_thresh < 0.0 {
            return Err(Error::Config(format!("r_thresh must be >= 0, got {}", self.r_thresh)));
        }
        if !self.fod_clearance_threshold.is_finite() || self.fod_clearance_threshold < 0.0 {
            return Err(Error::Config(format!(
                "fod_clearance_threshold must be >= 0, got {}",
                self.fod_clearance_threshold
            )));
        }
        if self.window_n == 0 {
            return Err(Error::Config("window_n must be at least 1".into()));
        }
        positive("state4_hold_ms", self.state4_hold_ms)?;
        positive("ihc_timeout_ms", self.ihc_timeout_ms)?;
        positive("max_wavelet_s", self.max_wavelet_s)?;
        if self.pb_training_reps < 2 || self.up_training_reps < 2 {
            return Err(Error::Config("training reps must be at least 2 per phase".into()));
        }
        if self.total_features == 0 || self.total_features > 6 {
            return Err(Error::Config(format!(
                "total_features must be in 1..=6, got {}",
                self.total_features
            )));
        }
        if !(0.0..=1.0).contains(&self.pass_ratio) {
            return Err(Error::Config(format!("pass_ratio must be in [0, 1], got {}", self.pass_ratio)));
        }
        if self.sakoe_chiba_band == 0 {
            return Err(Error::Config("sakoe_chiba_band must be at least 1".into()));
        }
        if self.min_retained_waves == 0 || self.wavelet_capacity < self.min_retained_waves {
            return Err(Error::Config(format!(
                "wavelet_capacity ({}) must be >= min_retained_waves ({}) >= 1",
                self.wavelet_capacity, self.min_retained_waves
            )));
        }
        if self.episode_min_pbs == 0 {
            return Err(Error::Config("episode_min_pbs must be at least 1".into()));
        }
        positive("episode_window_s", self.episode_window_s)?;
        if self.memory_budget_bytes == 0 {
            return Err(Error::Config("memory_budget_bytes must be positive".into()));
        }
        if self.hat_leaf_len == 0 {
            return Err(Error::Config("hat_leaf_len must be at least 1".into()));
        }
        if self.accounted_sample_bytes == 0 {
            return Err(Error::Config("accounted_sample_bytes must be at least 1".into()));
        }
        Ok(())
    }

    /// Parse from TOML key-value text; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Stable short hash of the full serialized config, for report provenance.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_toml_string().as_bytes()))
    }
}

/// Ceiling conversion of a millisecond duration to whole samples.
fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).ceil() as usize
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
