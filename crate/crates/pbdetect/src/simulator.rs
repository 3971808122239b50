//! Synthetic EOG generation: movement templates, subject profiles, and
//! session assembly with jitter, baseline wander, and sensor noise.
//!
//! Blinks and upward gazes share one shape family, a raised-cosine fall to a
//! negative plateau and a raised-cosine recovery, because the cornea sweeps
//! upward under the closing lid either way; what separates the classes is
//! amplitude and timing, which is exactly what the detector must learn.
//! Horizontal saccades are the adversaries: a left saccade steps positive
//! first, and a right saccade barely registers on a vertical channel.

use std::fmt;
use std::str::FromStr;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::signal::{quantize, EogTrace, TraceLabel};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Eye-movement classes the generator can emit and the labeler records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MovementKind {
    ProlongedBlink,
    UpwardGaze,
    NormalBlink,
    SaccadeLeft,
    SaccadeRight,
    NoneIdle,
}

impl MovementKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MovementKind::ProlongedBlink => "PROLONGED_BLINK",
            MovementKind::UpwardGaze => "UPWARD_GAZE",
            MovementKind::NormalBlink => "NORMAL_BLINK",
            MovementKind::SaccadeLeft => "SACCADE_LEFT",
            MovementKind::SaccadeRight => "SACCADE_RIGHT",
            MovementKind::NoneIdle => "NONE_IDLE",
        }
    }
}

impl fmt::Display for MovementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MovementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PROLONGED_BLINK" => Ok(MovementKind::ProlongedBlink),
            "UPWARD_GAZE" => Ok(MovementKind::UpwardGaze),
            "NORMAL_BLINK" => Ok(MovementKind::NormalBlink),
            "SACCADE_LEFT" => Ok(MovementKind::SaccadeLeft),
            "SACCADE_RIGHT" => Ok(MovementKind::SaccadeRight),
            "NONE_IDLE" => Ok(MovementKind::NoneIdle),
            other => Err(Error::Parse { line: 0, msg: format!("unknown movement kind {other:?}") }),
        }
    }
}

// ---------------------------------------------------------------------------
// Subject profiles

/// Per-subject signal character: how their blinks look, how much their
/// timing and amplitude wander between repetitions, and how dirty their
/// electrode contact is. Amplitudes are in ADC counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectProfile {
    pub id: String,
    pub seed: u64,
    pub pb_amp: f64,
    pub pb_fall_s: f64,
    pub pb_plateau_s: f64,
    pub pb_rise_s: f64,
    /// Upward-gaze durations relative to the blink's.
    pub up_scale: f64,
    /// Upward-gaze amplitude relative to the blink's.
    pub up_amp_scale: f64,
    pub nb_amp: f64,
    pub amp_jitter: f64,
    pub dur_jitter: f64,
    pub noise_rms: f64,
    pub wander_amp: f64,
    pub wander_freq_hz: f64,
}

impl SubjectProfile {
    /// The built-in cohort. A and J blink sloppily and gaze upward slowly,
    /// which drags their gaze timing into blink territory; the rest are
    /// progressively cleaner.
    pub fn defaults() -> Vec<SubjectProfile> {
        let mk = |id: &str,
                  seed: u64,
                  pb_amp: f64,
                  fall: f64,
                  plateau: f64,
                  rise: f64,
                  up_scale: f64,
                  up_amp: f64,
                  nb_amp: f64,
                  aj: f64,
                  dj: f64,
                  noise: f64,
                  wamp: f64,
                  wfreq: f64| SubjectProfile {
            id: id.to_string(),
            seed,
            pb_amp,
            pb_fall_s: fall,
            pb_plateau_s: plateau,
            pb_rise_s: rise,
            up_scale,
            up_amp_scale: up_amp,
            nb_amp,
            amp_jitter: aj,
            dur_jitter: dj,
            noise_rms: noise,
            wander_amp: wamp,
            wander_freq_hz: wfreq,
        };
        vec![
            mk("A", 101, 420.0, 0.50, 0.36, 0.60, 0.86, 0.95, 380.0, 0.15, 0.15, 0.16, 9.0, 0.008),
            mk("B", 102, 520.0, 0.45, 0.33, 0.58, 0.60, 0.85, 400.0, 0.08, 0.07, 0.10, 5.0, 0.005),
            mk("C", 103, 300.0, 0.38, 0.30, 0.50, 0.55, 0.80, 280.0, 0.10, 0.08, 0.15, 7.0, 0.009),
            mk("D", 104, 610.0, 0.55, 0.40, 0.66, 0.65, 0.88, 420.0, 0.07, 0.06, 0.08, 4.0, 0.004),
            mk("E", 105, 450.0, 0.40, 0.29, 0.52, 0.58, 0.82, 360.0, 0.09, 0.09, 0.20, 8.0, 0.007),
            mk("F", 106, 380.0, 0.48, 0.35, 0.62, 0.62, 0.90, 330.0, 0.11, 0.10, 0.12, 6.0, 0.006),
            mk("G", 107, 560.0, 0.52, 0.38, 0.64, 0.57, 0.78, 410.0, 0.06, 0.05, 0.06, 3.0, 0.010),
            mk("H", 108, 330.0, 0.36, 0.28, 0.48, 0.66, 0.86, 300.0, 0.12, 0.11, 0.18, 10.0, 0.005),
            mk("I", 109, 480.0, 0.46, 0.32, 0.56, 0.52, 0.75, 370.0, 0.08, 0.08, 0.10, 5.5, 0.008),
            mk("J", 110, 360.0, 0.42, 0.34, 0.55, 0.84, 0.97, 340.0, 0.16, 0.14, 0.17, 11.0, 0.006),
            mk("K", 111, 400.0, 0.44, 0.31, 0.54, 0.68, 0.92, 350.0, 0.10, 0.09, 0.18, 7.5, 0.007),
            mk("L", 112, 540.0, 0.50, 0.37, 0.60, 0.54, 0.76, 390.0, 0.07, 0.06, 0.09, 4.5, 0.009),
            mk("M", 113, 350.0, 0.39, 0.30, 0.51, 0.64, 0.84, 310.0, 0.13, 0.12, 0.18, 9.5, 0.006),
            mk("N", 114, 590.0, 0.53, 0.39, 0.63, 0.56, 0.80, 430.0, 0.06, 0.07, 0.07, 3.5, 0.005),
            mk("O", 115, 430.0, 0.47, 0.34, 0.57, 0.60, 0.83, 360.0, 0.09, 0.08, 0.14, 6.5, 0.008),
        ]
    }

    pub fn named(id: &str) -> Option<SubjectProfile> {
        Self::defaults().into_iter().find(|p| p.id == id)
    }

    /// The subjects whose gaze timing sits close enough to their blinks to
    /// make confusion expected rather than a defect.
    pub fn is_hard(&self) -> bool {
        self.up_scale >= 0.8
    }

    /// Same subject with clean electrodes and a still baseline; movement
    /// jitter stays. The shape suite uses this to test yield in isolation.
    pub fn quiet(&self) -> SubjectProfile {
        let mut p = self.clone();
        p.noise_rms = 0.0;
        p.wander_amp = 0.0;
        p
    }

    /// Parse from the same key-value text format the pipeline config uses.
    pub fn from_toml_str(text: &str) -> Result<SubjectProfile> {
        let p: SubjectProfile =
            toml::from_str(text).map_err(|e| Error::Config(format!("profile parse: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<SubjectProfile> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Config("profile id must not be empty".into()));
        }
        for (name, v) in [
            ("pb_amp", self.pb_amp),
            ("pb_fall_s", self.pb_fall_s),
            ("pb_plateau_s", self.pb_plateau_s),
            ("pb_rise_s", self.pb_rise_s),
            ("up_scale", self.up_scale),
            ("up_amp_scale", self.up_amp_scale),
            ("nb_amp", self.nb_amp),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("amp_jitter", self.amp_jitter), ("dur_jitter", self.dur_jitter)] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 0.5], got {v}")));
            }
        }
        for (name, v) in [
            ("noise_rms", self.noise_rms),
            ("wander_amp", self.wander_amp),
            ("wander_freq_hz", self.wander_freq_hz),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Waveform synthesis

fn seg_len(fs: f64, dur_s: f64) -> usize {
    (dur_s * fs).round().max(1.0) as usize
}

/// Smallest per-sample step an edge keeps clear of its endpoints, in counts.
/// A pure raised cosine takes off and lands with vanishing slope; quantized,
/// that crawl turns into a unit staircase slow enough for the deadband to
/// freeze and re-jump mid-edge, which fragments the rate run downstream. Real
/// lids settle with visible terminal velocity anyway, so every edge gets just
/// enough linear blend to keep moving.
const MIN_EDGE_SLOPE: f64 = 0.5;

/// Half-cosine ramp from `from` to `to` over `n` samples, linearly blended
/// so each step moves at least `MIN_EDGE_SLOPE` where the span allows it.
fn eased_ramp(n: usize, from: f64, to: f64, out: &mut Vec<f64>) {
    let span = to - from;
    let lam =
        if span == 0.0 { 0.0 } else { (MIN_EDGE_SLOPE * n as f64 / span.abs()).min(1.0) };
    for i in 0..n {
        let t = (i + 1) as f64 / n as f64;
        let eased = (1.0 - (std::f64::consts::PI * t).cos()) / 2.0;
        out.push(from + span * ((1.0 - lam) * eased + lam * t));
    }
}

/// Eased fall to `-amp`, plateau, eased recovery to zero.
fn blink_waveform(fs: f64, amp: f64, fall_s: f64, plateau_s: f64, rise_s: f64) -> Vec<f64> {
    let (nf, np, nr) = (seg_len(fs, fall_s), seg_len(fs, plateau_s), seg_len(fs, rise_s));
    let mut w = Vec::with_capacity(nf + np + nr);
    eased_ramp(nf, 0.0, -amp, &mut w);
    w.extend(std::iter::repeat(-amp).take(np));
    eased_ramp(nr, -amp, 0.0, &mut w);
    w
}

/// Eased step up to `+amp`, hold, and step back down.
fn step_waveform(fs: f64, amp: f64, rise_s: f64, hold_s: f64, fall_s: f64) -> Vec<f64> {
    let (nr, nh, nf) = (seg_len(fs, rise_s), seg_len(fs, hold_s), seg_len(fs, fall_s));
    let mut w = Vec::with_capacity(nr + nh + nf);
    eased_ramp(nr, 0.0, amp, &mut w);
    w.extend(std::iter::repeat(amp).take(nh));
    eased_ramp(nf, amp, 0.0, &mut w);
    w
}

/// The noise-free, jitter-free shape of one movement for this subject.
pub fn movement_template(kind: MovementKind, p: &SubjectProfile, fs: f64) -> Vec<f64> {
    match kind {
        MovementKind::ProlongedBlink => {
            blink_waveform(fs, p.pb_amp, p.pb_fall_s, p.pb_plateau_s, p.pb_rise_s)
        }
        MovementKind::UpwardGaze => blink_waveform(
            fs,
            p.pb_amp * p.up_amp_scale,
            p.pb_fall_s * p.up_scale,
            p.pb_plateau_s * p.up_scale,
            p.pb_rise_s * p.up_scale,
        ),
        MovementKind::NormalBlink => blink_waveform(fs, p.nb_amp, 0.10, 0.05, 0.12),
        MovementKind::SaccadeLeft => step_waveform(fs, 0.8 * p.pb_amp, 0.10, 0.85, 0.10),
        MovementKind::SaccadeRight => step_waveform(fs, 0.15, 0.10, 0.85, 0.10),
        MovementKind::NoneIdle => Vec::new(),
    }
}

/// Pearson correlation with the shorter sequence zero-padded to match.
fn padded_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 1.0;
    }
    let at = |s: &[f64], i: usize| if i < s.len() { s[i] } else { 0.0 };
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x = at(a, i) - ma;
        let y = at(b, i) - mb;
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn jittered(base: f64, jitter: f64, rng: &mut impl Rng) -> f64 {
    base * (1.0 + rng.gen_range(-1.0..=1.0) * jitter)
}

/// One movement with subject jitter on amplitude and per-segment timing.
///
/// The draw is rejected and retried if it correlates below 0.9 with the
/// template, so every emitted repetition stays recognizably this subject's
/// gesture; running out of retries means the profile's jitter is
/// unreasonable and that is an error.
pub fn generate_movement(
    kind: MovementKind,
    p: &SubjectProfile,
    fs: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if kind == MovementKind::NoneIdle {
        return Ok(Vec::new());
    }
    let template = movement_template(kind, p, fs);
    for _ in 0..16 {
        let a = 1.0 + rng.gen_range(-1.0..=1.0) * p.amp_jitter;
        let w = match kind {
            MovementKind::ProlongedBlink => blink_waveform(
                fs,
                p.pb_amp * a,
                jittered(p.pb_fall_s, p.dur_jitter, rng),
                jittered(p.pb_plateau_s, p.dur_jitter, rng),
                jittered(p.pb_rise_s, p.dur_jitter, rng),
            ),
            MovementKind::UpwardGaze => blink_waveform(
                fs,
                p.pb_amp * p.up_amp_scale * a,
                jittered(p.pb_fall_s * p.up_scale, p.dur_jitter, rng),
                jittered(p.pb_plateau_s * p.up_scale, p.dur_jitter, rng),
                jittered(p.pb_rise_s * p.up_scale, p.dur_jitter, rng),
            ),
            MovementKind::NormalBlink => blink_waveform(
                fs,
                p.nb_amp * a,
                jittered(0.10, p.dur_jitter, rng),
                jittered(0.05, p.dur_jitter, rng),
                jittered(0.12, p.dur_jitter, rng),
            ),
            MovementKind::SaccadeLeft => step_waveform(
                fs,
                0.8 * p.pb_amp * a,
                jittered(0.10, p.dur_jitter, rng),
                jittered(0.85, p.dur_jitter, rng),
                jittered(0.10, p.dur_jitter, rng),
            ),
            MovementKind::SaccadeRight => step_waveform(
                fs,
                0.15 * a,
                jittered(0.10, p.dur_jitter, rng),
                jittered(0.85, p.dur_jitter, rng),
                jittered(0.10, p.dur_jitter, rng),
            ),
            MovementKind::NoneIdle => unreachable!(),
        };
        if padded_correlation(&w, &template) >= 0.9 {
            return Ok(w);
        }
    }
    Err(Error::Simulation(format!(
        "profile {}: {kind} never correlated 0.9 with its template in 16 draws",
        p.id
    )))
}

// ---------------------------------------------------------------------------
// Sessions

/// Layout of one recording: quiet lead-in, movements separated by quiet
/// gaps drawn from the inclusive range.
#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub lead_in_s: f64,
    pub gap_s: (f64, f64),
    pub movements: Vec<MovementKind>,
}

/// Assemble a labeled, quantized recording for one subject.
///
/// Movements are placed on a zero baseline with quiet gaps, then the whole
/// trace gets the subject's baseline wander and sensor noise before ADC
/// quantization. Labels cover exactly the movement spans.
pub fn generate_session(
    p: &SubjectProfile,
    cfg: &PipelineConfig,
    spec: &SessionSpec,
    rng: &mut impl Rng,
) -> Result<EogTrace> {
    let fs = cfg.sampling_rate_hz;
    let mut amps: Vec<f64> = vec![0.0; (spec.lead_in_s * fs).round() as usize];
    let mut labels = Vec::new();
    for &kind in &spec.movements {
        let w = generate_movement(kind, p, fs, rng)?;
        if !w.is_empty() {
            labels.push(TraceLabel { kind, start: amps.len(), end: amps.len() + w.len() - 1 });
            amps.extend_from_slice(&w);
        }
        let gap = rng.gen_range(spec.gap_s.0..=spec.gap_s.1);
        amps.extend(std::iter::repeat(0.0).take((gap * fs).round() as usize));
    }
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, p.noise_rms)
        .map_err(|e| Error::Simulation(format!("noise distribution: {e}")))?;
    let omega = std::f64::consts::TAU * p.wander_freq_hz;
    let full_scale = cfg.full_scale();
    for (i, v) in amps.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let dirty = *v + p.wander_amp * (omega * t + phase).sin() + noise.sample(rng);
        *v = quantize(dirty, cfg.adc_bits, full_scale)?;
    }
    let mut trace = EogTrace::new(fs, amps);
    trace.labels = labels;
    trace.validate_labels()?;
    Ok(trace)
}

/// The learning protocol's movement order: blinks first, then gazes.
pub fn training_movements(pb: usize, up: usize) -> Vec<MovementKind> {
    let mut m = vec![MovementKind::ProlongedBlink; pb];
    m.extend(std::iter::repeat(MovementKind::UpwardGaze).take(up));
    m
}

/// A session's worth of mixed movements: a quarter prolonged blinks, a
/// heavy share of the confusable gaze, the rest ordinary blinks and
/// saccades.
pub fn operational_movements(n: usize, rng: &mut impl Rng) -> Vec<MovementKind> {
    (0..n)
        .map(|_| {
            let roll: f64 = rng.gen_range(0.0..1.0);
            if roll < 0.25 {
                MovementKind::ProlongedBlink
            } else if roll < 0.60 {
                MovementKind::UpwardGaze
            } else if roll < 0.85 {
                MovementKind::NormalBlink
            } else if roll < 0.925 {
                MovementKind::SaccadeLeft
            } else {
                MovementKind::SaccadeRight
            }
        })
        .collect()
}
