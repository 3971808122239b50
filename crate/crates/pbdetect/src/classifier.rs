//! Operational-mode classification: fuzzy membership against the learned
//! bands, the averaged pass decision, the episode monitor, and the streaming
//! detection loop that ties the whole pipeline together.

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureVector};
use crate::isolator::{IsolatorStep, WaveletIsolator};
use crate::memstore::BudgetAccountant;
use crate::preprocess::Preprocessor;
use crate::signal::EogTrace;
use crate::strictmode::Formulas;
use crate::trainer::{Band, TrainedModel};
use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc;
use std::time::Instant;

/// Gaussian-style membership of a value in a band.
///
/// The band center maps to 1 and the edges to `exp(-1/2)`. The corrected
/// curve squares the normalized distance so both sides fall off
/// symmetrically; the gated variant leaves the distance unsquared, which
/// decays on the high side only and rewards undershoot. Results are floored
/// to the smallest positive double so a membership is never literally zero.
pub fn fuzzy_membership(v: f64, band: &Band, formulas: &Formulas) -> f64 {
    let c = (band.ut + band.lt) / 2.0;
    let h = (band.ut - band.lt) / 2.0;
    let z = (v - c) / h;
    let m = if formulas.gaussian_square { (-z * z / 2.0).exp() } else { (-z / 2.0).exp() };
    m.max(f64::MIN_POSITIVE)
}

/// Average the memberships and compare against the pass ratio, inclusively.
pub fn defuzzify(pass_sum: f64, total_features: usize, pass_ratio: f64) -> bool {
    pass_sum / total_features as f64 >= pass_ratio
}

/// Outcome of scoring one candidate against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub is_pb: bool,
    pub pass_sum: f64,
    pub memberships: Vec<f64>,
}

/// Score the leading `total_features` features against the learned bands.
pub fn classify(f: &FeatureVector, model: &TrainedModel) -> Classification {
    let formulas = model.config.formulas();
    let n = model.config.total_features;
    let values = f.as_array();
    let memberships: Vec<f64> =
        (0..n).map(|i| fuzzy_membership(values[i], &model.bands[i], &formulas)).collect();
    let pass_sum = memberships.iter().sum();
    Classification {
        is_pb: defuzzify(pass_sum, n, model.config.pass_ratio),
        pass_sum,
        memberships,
    }
}

// ---------------------------------------------------------------------------
// Episode monitor

/// Raised when enough prolonged blinks landed inside the rolling window.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeAlert {
    pub t_s: f64,
    pub count: usize,
    pub window_s: f64,
}

/// Rolling count of prolonged-blink times. Raising an alert clears the
/// queue, so a fresh episode needs a fresh burst.
#[derive(Debug)]
pub struct EpisodeMonitor {
    window_s: f64,
    min_pbs: usize,
    times: VecDeque<f64>,
    last_t: Option<f64>,
}

impl EpisodeMonitor {
    pub fn new(cfg: &PipelineConfig) -> Self {
        EpisodeMonitor {
            window_s: cfg.episode_window_s,
            min_pbs: cfg.episode_min_pbs,
            times: VecDeque::new(),
            last_t: None,
        }
    }

    /// Record one prolonged blink at `t_s` seconds; times must not go
    /// backwards. Blinks exactly `window_s` old still count.
    pub fn record_pb(&mut self, t_s: f64) -> Result<Option<EpisodeAlert>> {
        if let Some(prev) = self.last_t {
            if t_s < prev {
                return Err(Error::NonMonotoneTime { prev, got: t_s });
            }
        }
        self.last_t = Some(t_s);
        self.times.push_back(t_s);
        while let Some(&front) = self.times.front() {
            if front < t_s - self.window_s {
                self.times.pop_front();
            } else {
                break;
            }
        }
        if self.times.len() >= self.min_pbs {
            let alert = EpisodeAlert { t_s, count: self.times.len(), window_s: self.window_s };
            self.times.clear();
            Ok(Some(alert))
        } else {
            Ok(None)
        }
    }

    pub fn pending(&self) -> usize {
        self.times.len()
    }
}

// ---------------------------------------------------------------------------
// Streaming detection loop

/// One classified candidate with its stream location and decision cost.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedEvent {
    pub t_s: f64,
    pub start_idx: u64,
    pub end_idx: u64,
    pub is_pb: bool,
    pub pass_sum: f64,
    pub features: FeatureVector,
    pub decision_latency_ms: f64,
}

/// Everything a detection run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub events: Vec<DetectedEvent>,
    pub alerts: Vec<EpisodeAlert>,
    pub reject_tally: BTreeMap<String, usize>,
    pub feature_errors: usize,
    pub samples: usize,
    pub mean_detect_ms: f64,
    pub p99_detect_ms: f64,
    pub high_water_bytes: usize,
    pub elapsed_s: f64,
    pub realtime_factor: f64,
}

fn check_compat(trace: &EogTrace, model: &TrainedModel, cfg: &PipelineConfig) -> Result<()> {
    let m = &model.config;
    if trace.sampling_rate_hz != m.sampling_rate_hz {
        return Err(Error::Mismatch(format!(
            "trace sampled at {} Hz but the model was trained at {} Hz",
            trace.sampling_rate_hz, m.sampling_rate_hz
        )));
    }
    if cfg.sampling_rate_hz != m.sampling_rate_hz {
        return Err(Error::Mismatch(format!(
            "run configured for {} Hz but the model was trained at {} Hz",
            cfg.sampling_rate_hz, m.sampling_rate_hz
        )));
    }
    if cfg.window_n != m.window_n {
        return Err(Error::Mismatch(format!(
            "run uses window_n {} but the model was trained with {}",
            cfg.window_n, m.window_n
        )));
    }
    if cfg.formulas() != m.formulas() {
        return Err(Error::Mismatch(
            "run and model disagree on formula mode; retrain or rerun to match".into(),
        ));
    }
    Ok(())
}

/// Replay a trace through the full pipeline against a trained model.
///
/// The model's own configuration drives the pipeline; the runtime
/// configuration is only checked for agreement on the parameters that change
/// what the samples mean.
pub fn run_operational(
    trace: &EogTrace,
    model: &TrainedModel,
    cfg: &PipelineConfig,
) -> Result<RunSummary> {
    check_compat(trace, model, cfg)?;
    let pcfg = &model.config;
    let accountant = BudgetAccountant::new(pcfg.memory_budget_bytes);
    let mut pre = Preprocessor::new(pcfg);
    let mut iso = WaveletIsolator::new(pcfg, accountant.clone());
    let mut monitor = EpisodeMonitor::new(pcfg);
    let medoid = model.medoid_wave();
    let mut events = Vec::new();
    let mut alerts = Vec::new();
    let mut latencies = Vec::new();
    let mut feature_errors = 0usize;
    let run_start = Instant::now();
    for &x in &trace.amplitudes {
        let p = pre.step(x);
        if let IsolatorStep::Candidate(w) = iso.step(p.r) {
            let t0 = Instant::now();
            match extract_features(&w.samples, Some(medoid), pcfg) {
                Ok(f) => {
                    let c = classify(&f, model);
                    let latency_ms = t0.elapsed().as_secs_f64() * 1e3;
                    let t_s = w.emitted_idx as f64 / pcfg.sampling_rate_hz;
                    if c.is_pb {
                        if let Some(alert) = monitor.record_pb(t_s)? {
                            alerts.push(alert);
                        }
                    }
                    latencies.push(latency_ms);
                    events.push(DetectedEvent {
                        t_s,
                        start_idx: w.start_idx,
                        end_idx: w.end_idx,
                        is_pb: c.is_pb,
                        pass_sum: c.pass_sum,
                        features: f,
                        decision_latency_ms: latency_ms,
                    });
                }
                Err(_) => feature_errors += 1,
            }
        }
    }
    let elapsed_s = run_start.elapsed().as_secs_f64();
    let tally =
        iso.reject_tally().iter().map(|(&k, &v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>();
    Ok(finish_summary(
        events,
        alerts,
        tally,
        feature_errors,
        trace.amplitudes.len(),
        latencies,
        accountant.high_water_bytes(),
        elapsed_s,
        pcfg.sampling_rate_hz,
    ))
}

/// Same pipeline split across two threads: conditioning and isolation feed a
/// bounded channel, classification and episode tracking drain it. Produces
/// the same events and alerts as [`run_operational`]; only the wall-clock
/// numbers differ.
pub fn run_operational_threaded(
    trace: &EogTrace,
    model: &TrainedModel,
    cfg: &PipelineConfig,
) -> Result<RunSummary> {
    check_compat(trace, model, cfg)?;
    let pcfg = &model.config;
    let accountant = BudgetAccountant::new(pcfg.memory_budget_bytes);
    let medoid = model.medoid_wave();
    let run_start = Instant::now();
    let (result, tally) = std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<crate::isolator::CandidateWave>(8);
        let producer = s.spawn({
            let accountant = accountant.clone();
            move || {
                let mut pre = Preprocessor::new(pcfg);
                let mut iso = WaveletIsolator::new(pcfg, accountant);
                for &x in &trace.amplitudes {
                    let p = pre.step(x);
                    if let IsolatorStep::Candidate(w) = iso.step(p.r) {
                        if tx.send(w).is_err() {
                            break;
                        }
                    }
                }
                drop(tx);
                iso.reject_tally()
                    .iter()
                    .map(|(&k, &v)| (k.to_string(), v))
                    .collect::<BTreeMap<_, _>>()
            }
        });
        let mut monitor = EpisodeMonitor::new(pcfg);
        let mut events = Vec::new();
        let mut alerts = Vec::new();
        let mut latencies = Vec::new();
        let mut feature_errors = 0usize;
        let mut failure = None;
        for w in rx {
            let t0 = Instant::now();
            match extract_features(&w.samples, Some(medoid), pcfg) {
                Ok(f) => {
                    let c = classify(&f, model);
                    let latency_ms = t0.elapsed().as_secs_f64() * 1e3;
                    let t_s = w.emitted_idx as f64 / pcfg.sampling_rate_hz;
                    if c.is_pb {
                        match monitor.record_pb(t_s) {
                            Ok(Some(alert)) => alerts.push(alert),
                            Ok(None) => {}
                            Err(e) => {
                                failure = Some(e);
                                break;
                            }
                        }
                    }
                    latencies.push(latency_ms);
                    events.push(DetectedEvent {
                        t_s,
                        start_idx: w.start_idx,
                        end_idx: w.end_idx,
                        is_pb: c.is_pb,
                        pass_sum: c.pass_sum,
                        features: f,
                        decision_latency_ms: latency_ms,
                    });
                }
                Err(_) => feature_errors += 1,
            }
        }
        let tally = producer.join().expect("producer thread never panics");
        match failure {
            Some(e) => (Err(e), tally),
            None => (Ok((events, alerts, latencies, feature_errors)), tally),
        }
    });
    let (events, alerts, latencies, feature_errors) = result?;
    let elapsed_s = run_start.elapsed().as_secs_f64();
    Ok(finish_summary(
        events,
        alerts,
        tally,
        feature_errors,
        trace.amplitudes.len(),
        latencies,
        accountant.high_water_bytes(),
        elapsed_s,
        pcfg.sampling_rate_hz,
    ))
}

#[allow(clippy::too_many_arguments)]
fn finish_summary(
    events: Vec<DetectedEvent>,
    alerts: Vec<EpisodeAlert>,
    reject_tally: BTreeMap<String, usize>,
    feature_errors: usize,
    samples: usize,
    mut latencies: Vec<f64>,
    high_water_bytes: usize,
    elapsed_s: f64,
    fs: f64,
) -> RunSummary {
    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_detect_ms = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };
    let p99_detect_ms = if latencies.is_empty() {
        0.0
    } else {
        latencies[((latencies.len() as f64 * 0.99).ceil() as usize).max(1) - 1]
    };
    RunSummary {
        events,
        alerts,
        reject_tally,
        feature_errors,
        samples,
        mean_detect_ms,
        p99_detect_ms,
        high_water_bytes,
        elapsed_s,
        realtime_factor: if elapsed_s > 0.0 { samples as f64 / fs / elapsed_s } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{RunningStats, StoredWave};

    fn formulas() -> Formulas {
        PipelineConfig::default().formulas()
    }

    #[test]
    fn membership_peaks_at_center_and_hits_the_edges_right() {
        let band = Band { lt: 7.5, ut: 13.0 };
        assert_eq!(fuzzy_membership(10.25, &band, &formulas()), 1.0);
        let at_edge = fuzzy_membership(13.0, &band, &formulas());
        assert!((at_edge - (-0.5f64).exp()).abs() < 1e-12);
        let low_edge = fuzzy_membership(7.5, &band, &formulas());
        assert!((low_edge - at_edge).abs() < 1e-12, "corrected curve is symmetric");
    }

    #[test]
    fn membership_frozen_value() {
        let band = Band { lt: 7.5, ut: 13.0 };
        let m = fuzzy_membership(9.0, &band, &formulas());
        assert!((m - 0.90185).abs() < 1e-5, "got {m}");
    }

    #[test]
    fn unsquared_membership_is_one_sided() {
        let strict = Formulas { sd_sqrt: false, gaussian_square: false, fod_abs: false };
        let band = Band { lt: 7.5, ut: 13.0 };
        let below = fuzzy_membership(9.0, &band, &strict);
        assert!(below > 1.0, "undershoot is rewarded unsquared, got {below}");
        let at_edge = fuzzy_membership(13.0, &band, &strict);
        assert!((at_edge - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn membership_never_reaches_zero() {
        let band = Band { lt: -1.0, ut: 1.0 };
        let m = fuzzy_membership(1e9, &band, &formulas());
        assert_eq!(m, f64::MIN_POSITIVE);
        assert!(m > 0.0);
    }

    #[test]
    fn defuzzify_boundary_is_inclusive() {
        assert_eq!(3.6 / 6.0, 0.6, "the boundary case divides exactly");
        assert!(defuzzify(3.6, 6, 0.6));
        assert!(!defuzzify(3.5999, 6, 0.6));
        assert!(defuzzify(5.9, 6, 0.6));
    }

    fn dip_trace(dips: &[usize], fs: f64) -> EogTrace {
        // Instant fall to -300 counts, 100-sample hold, instant rise.
        let len = dips.iter().max().copied().unwrap_or(0) + 600;
        let mut amps = vec![0.0; len];
        for &at in dips {
            for v in amps[at..at + 100].iter_mut() {
                *v = -300.0;
            }
        }
        EogTrace::new(fs, amps)
    }

    fn handmade_model() -> TrainedModel {
        let cfg = PipelineConfig::default();
        // One square-dip wavelet as the reference: 25 negative rate samples,
        // 75 gap zeros, 25 positive.
        let mut samples = vec![-300.0; 25];
        samples.extend(std::iter::repeat(0.0).take(75));
        samples.extend(std::iter::repeat(300.0).take(25));
        let bands = [
            Band { lt: 0.5, ut: 1.5 },
            Band { lt: 200.0, ut: 400.0 },
            Band { lt: -400.0, ut: -200.0 },
            Band { lt: 0.05, ut: 0.2 },
            Band { lt: 0.05, ut: 0.2 },
            Band { lt: 0.3, ut: 0.7 },
        ];
        TrainedModel {
            config: cfg,
            pb_stats: [RunningStats::from_parts(10, 0.0, 1.0); 6],
            anti_stats: [RunningStats::from_parts(10, 0.0, 1.0); 6],
            bands,
            wavelets: vec![StoredWave { start_idx: 0, end_idx: 124, samples }],
            medoid_index: 0,
        }
    }

    #[test]
    fn episode_monitor_frozen_cases() {
        let cfg = PipelineConfig::default();
        let mut m = EpisodeMonitor::new(&cfg);
        assert_eq!(m.record_pb(1.0).unwrap(), None);
        let alert = m.record_pb(8.0).unwrap().expect("two blinks 7 s apart alert");
        assert_eq!(alert.count, 2);
        assert_eq!(alert.t_s, 8.0);
        assert_eq!(m.pending(), 0, "alert clears the queue");

        let mut m = EpisodeMonitor::new(&cfg);
        assert_eq!(m.record_pb(0.0).unwrap(), None);
        assert_eq!(m.record_pb(11.0).unwrap(), None, "11 s apart misses the 10 s window");

        let mut m = EpisodeMonitor::new(&cfg);
        m.record_pb(0.0).unwrap();
        assert!(m.record_pb(10.0).unwrap().is_some(), "exactly window_s apart still counts");
    }

    #[test]
    fn episode_monitor_rejects_time_reversal() {
        let cfg = PipelineConfig::default();
        let mut m = EpisodeMonitor::new(&cfg);
        m.record_pb(5.0).unwrap();
        assert!(matches!(
            m.record_pb(4.0),
            Err(Error::NonMonotoneTime { prev, got }) if prev == 5.0 && got == 4.0
        ));
    }

    #[test]
    fn operational_run_detects_and_alerts_on_square_dips() {
        let model = handmade_model();
        let cfg = model.config.clone();
        // Two dips about 2.4 s apart, well inside the episode window.
        let trace = dip_trace(&[500, 1100], 250.0);
        let summary = run_operational(&trace, &model, &cfg).unwrap();
        assert_eq!(summary.events.len(), 2, "tally {:?}", summary.reject_tally);
        for e in &summary.events {
            assert!(e.is_pb, "features {:?} pass_sum {}", e.features, e.pass_sum);
            assert_eq!(e.features.t_durn, 0.5);
            assert_eq!(e.features.max, 300.0);
            assert_eq!(e.features.min, -300.0);
        }
        assert_eq!(summary.events[0].start_idx, 500);
        assert_eq!(summary.events[0].end_idx, 624);
        assert_eq!(summary.alerts.len(), 1);
        assert_eq!(summary.samples, trace.amplitudes.len());
        assert!(summary.high_water_bytes > 0);
        assert_eq!(summary.feature_errors, 0);
    }

    #[test]
    fn operational_run_refuses_mismatched_setups() {
        let model = handmade_model();
        let trace = dip_trace(&[500], 250.0);
        let mut cfg = model.config.clone();
        cfg.window_n = 30;
        assert!(matches!(run_operational(&trace, &model, &cfg), Err(Error::Mismatch(_))));
        let mut cfg = model.config.clone();
        cfg.formula_mode = crate::strictmode::FormulaMode::Strict;
        assert!(matches!(run_operational(&trace, &model, &cfg), Err(Error::Mismatch(_))));
        let cfg = model.config.clone();
        let trace_wrong_fs = EogTrace::new(500.0, vec![0.0; 1000]);
        assert!(matches!(run_operational(&trace_wrong_fs, &model, &cfg), Err(Error::Mismatch(_))));
    }

    #[test]
    fn threaded_run_agrees_with_single_threaded() {
        let model = handmade_model();
        let cfg = model.config.clone();
        let trace = dip_trace(&[500, 1100, 2000, 3100], 250.0);
        let a = run_operational(&trace, &model, &cfg).unwrap();
        let b = run_operational_threaded(&trace, &model, &cfg).unwrap();
        let strip = |s: &RunSummary| {
            let mut events = s.events.clone();
            for e in &mut events {
                e.decision_latency_ms = 0.0;
            }
            (events, s.alerts.clone(), s.reject_tally.clone(), s.feature_errors, s.samples)
        };
        assert_eq!(strip(&a), strip(&b));
    }
}
