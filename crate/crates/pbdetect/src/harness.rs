//! Evaluation harness: label-anchored scoring, per-subject train-then-operate
//! sweeps, the summary table, and fixed-budget memory probes.
//!
//! Scoring is anchored on the labels rather than the detections: every
//! labeled movement must be answered for, and a detection that overlaps no
//! label at all is a hard error rather than a statistic, because the
//! generator leaves nothing unlabeled that the isolator could legitimately
//! capture.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::classifier::{run_operational, DetectedEvent, RunSummary};
use crate::config::{fnv1a64, PipelineConfig};
use crate::error::{Error, Result};
use crate::features::WaveletBuffer;
use crate::isolator::{IsolatorStep, WaveletIsolator};
use crate::memstore::BudgetAccountant;
use crate::preprocess::Preprocessor;
use crate::signal::{EogTrace, TraceLabel};
use crate::simulator::{
    generate_session, operational_movements, training_movements, MovementKind, SessionSpec,
    SubjectProfile,
};
use crate::trainer::{run_learning, LearningPhase, TrainedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Scoring

/// Labels of one kind: how many appeared and how many were called blinks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KindTally {
    pub seen: usize,
    pub called_pb: usize,
}

/// Outcome counts for one operational run, in summary-table terms: a blink
/// answered as a blink is correct, a blink answered as something else is a
/// true negative, a blink never answered is unclassified, and a non-blink
/// answered as a blink is a false positive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Score {
    pub total: usize,
    pub correct: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub unclassified: usize,
    pub per_kind: BTreeMap<&'static str, KindTally>,
}

impl Score {
    /// Everything that was not answered correctly.
    pub fn wrong(&self) -> usize {
        self.false_positives + self.true_negatives + self.unclassified
    }

    pub fn accuracy_pct(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }

    /// Share of this kind's labels whose capture was called a blink.
    pub fn called_pb_pct(&self, kind: MovementKind) -> f64 {
        match self.per_kind.get(kind.as_str()) {
            Some(t) if t.seen > 0 => 100.0 * t.called_pb as f64 / t.seen as f64,
            _ => 0.0,
        }
    }
}

fn overlap(a0: usize, a1: usize, b0: usize, b1: usize) -> usize {
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    hi.checked_sub(lo).map_or(0, |d| d + 1)
}

/// Index of the label sharing the most samples with `[start, end]`, if any;
/// the earlier label wins a tie so attribution is order-stable.
fn attribute(labels: &[TraceLabel], start: usize, end: usize) -> Option<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| (overlap(start, end, l.start, l.end), i))
        .filter(|&(o, _)| o > 0)
        .max_by_key(|&(o, i)| (o, std::cmp::Reverse(i)))
        .map(|(_, i)| i)
}

/// Score detections against the labels that produced them.
pub fn score_events(labels: &[TraceLabel], events: &[DetectedEvent]) -> Result<Score> {
    let mut answered = vec![false; labels.len()];
    let mut called_pb = vec![false; labels.len()];
    for e in events {
        let i = attribute(labels, e.start_idx as usize, e.end_idx as usize)
            .ok_or(Error::UnlabeledEvent { start: e.start_idx, end: e.end_idx })?;
        answered[i] = true;
        called_pb[i] |= e.is_pb;
    }
    let mut score = Score { total: labels.len(), ..Score::default() };
    for (i, l) in labels.iter().enumerate() {
        let tally = score.per_kind.entry(l.kind.as_str()).or_default();
        tally.seen += 1;
        if called_pb[i] {
            tally.called_pb += 1;
        }
        if l.kind == MovementKind::ProlongedBlink {
            if called_pb[i] {
                score.correct += 1;
            } else if answered[i] {
                score.true_negatives += 1;
            } else {
                score.unclassified += 1;
            }
        } else if called_pb[i] {
            score.false_positives += 1;
        } else {
            score.correct += 1;
        }
    }
    Ok(score)
}

// ---------------------------------------------------------------------------
// Training from a labeled trace

/// Isolate candidates from a labeled trace and learn a model from them; the
/// overlapped label decides which learning phase each capture feeds.
pub fn train_from_trace(trace: &EogTrace, cfg: &PipelineConfig) -> Result<TrainedModel> {
    let accountant = BudgetAccountant::new(cfg.memory_budget_bytes);
    let mut pre = Preprocessor::new(cfg);
    let mut iso = WaveletIsolator::new(cfg, accountant.clone());
    let mut events = Vec::new();
    for &x in &trace.amplitudes {
        let r = pre.step(x).r;
        if let IsolatorStep::Candidate(w) = iso.step(r) {
            let i = attribute(&trace.labels, w.start_idx as usize, w.end_idx as usize)
                .ok_or(Error::UnlabeledEvent { start: w.start_idx, end: w.end_idx })?;
            let phase = match trace.labels[i].kind {
                MovementKind::ProlongedBlink => LearningPhase::Pb,
                MovementKind::UpwardGaze => LearningPhase::Anti,
                other => {
                    return Err(Error::Mismatch(format!(
                        "training trace is labeled {other}; only blinks and gazes train"
                    )))
                }
            };
            events.push((phase, w));
        }
    }
    run_learning(events, cfg, accountant)
}

// ---------------------------------------------------------------------------
// Per-subject evaluation

/// Knobs for an evaluation sweep.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Replaces every profile's own seed when set. Runs under an override are
    /// audit runs: rendered tables zero their wall-clock columns so reruns
    /// compare byte for byte.
    pub seed_override: Option<u64>,
    /// Worker threads; 0 and 1 both mean serial.
    pub jobs: usize,
    /// Fixed operational movement count; drawn from 302..=398 when absent.
    pub readings: Option<usize>,
}

impl EvalOptions {
    pub fn audit(&self) -> bool {
        self.seed_override.is_some()
    }
}

/// Mix a run-level override into a per-profile stream seed; without one,
/// each subject keeps their own fixed seed.
pub fn effective_seed(seed_override: Option<u64>, profile: &SubjectProfile) -> u64 {
    match seed_override {
        Some(s) => s.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a64(profile.id.as_bytes()),
        None => profile.seed,
    }
}

/// One subject's end-to-end result. Failures are carried, not thrown, so a
/// bad subject cannot erase the rest of the sweep.
#[derive(Debug, Clone)]
pub struct ProfileOutcome {
    pub profile_id: String,
    pub hard: bool,
    pub score: Score,
    pub events: usize,
    pub alerts: usize,
    pub feature_errors: usize,
    pub reject_tally: BTreeMap<String, usize>,
    pub mean_detect_ms: f64,
    pub p99_detect_ms: f64,
    pub high_water_bytes: usize,
    pub realtime_factor: f64,
    pub error: Option<String>,
}

impl ProfileOutcome {
    fn failed(p: &SubjectProfile, e: &Error) -> Self {
        ProfileOutcome {
            profile_id: p.id.clone(),
            hard: p.is_hard(),
            score: Score::default(),
            events: 0,
            alerts: 0,
            feature_errors: 0,
            reject_tally: BTreeMap::new(),
            mean_detect_ms: 0.0,
            p99_detect_ms: 0.0,
            high_water_bytes: 0,
            realtime_factor: 0.0,
            error: Some(e.to_string()),
        }
    }
}

/// A calibration session: the configured repetitions plus four spares per
/// phase, so a few disturbed captures cannot abort the whole subject.
/// Learning still consumes exactly the configured count; spares beyond it
/// are ignored.
pub fn training_session(
    p: &SubjectProfile,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EogTrace> {
    let spec = SessionSpec {
        lead_in_s: 2.0,
        gap_s: (1.6, 2.4),
        movements: training_movements(cfg.pb_training_reps + 4, cfg.up_training_reps + 4),
    };
    generate_session(p, cfg, &spec, rng)
}

/// A scored session of `readings` mixed movements.
pub fn operational_session(
    p: &SubjectProfile,
    cfg: &PipelineConfig,
    readings: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EogTrace> {
    let spec = SessionSpec {
        lead_in_s: 2.0,
        gap_s: (1.2, 2.2),
        movements: operational_movements(readings, rng),
    };
    generate_session(p, cfg, &spec, rng)
}

/// Draw or accept the operational reading count.
pub fn draw_readings(readings: Option<usize>, rng: &mut ChaCha8Rng) -> usize {
    readings.unwrap_or_else(|| rng.gen_range(302..=398))
}

/// Train on a fresh session and score a fresh operational session for one
/// subject. Both sessions flow from a single seeded stream, so a given
/// subject and seed always replay identically regardless of scheduling.
pub fn evaluate_profile(
    p: &SubjectProfile,
    cfg: &PipelineConfig,
    opts: &EvalOptions,
) -> Result<ProfileOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(effective_seed(opts.seed_override, p));
    let training = training_session(p, cfg, &mut rng)?;
    let model = train_from_trace(&training, cfg)?;
    let readings = draw_readings(opts.readings, &mut rng);
    let operational = operational_session(p, cfg, readings, &mut rng)?;
    let summary = run_operational(&operational, &model, cfg)?;
    let score = score_events(&operational.labels, &summary.events)?;
    Ok(ProfileOutcome {
        profile_id: p.id.clone(),
        hard: p.is_hard(),
        score,
        events: summary.events.len(),
        alerts: summary.alerts.len(),
        feature_errors: summary.feature_errors,
        reject_tally: summary.reject_tally,
        mean_detect_ms: summary.mean_detect_ms,
        p99_detect_ms: summary.p99_detect_ms,
        high_water_bytes: summary.high_water_bytes,
        realtime_factor: summary.realtime_factor,
        error: None,
    })
}

/// Evaluate every profile across `jobs` workers; results come back in input
/// order and a failed subject becomes a marked row instead of an error.
pub fn run_eval(
    profiles: &[SubjectProfile],
    cfg: &PipelineConfig,
    opts: &EvalOptions,
) -> Vec<ProfileOutcome> {
    let jobs = opts.jobs.max(1).min(profiles.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<ProfileOutcome>>> =
        profiles.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= profiles.len() {
                    break;
                }
                let p = &profiles[i];
                let outcome = evaluate_profile(p, cfg, opts)
                    .unwrap_or_else(|e| ProfileOutcome::failed(p, &e));
                *slots[i].lock().unwrap() = Some(outcome);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
}

// ---------------------------------------------------------------------------
// Rendering

pub const REPORT_HEADER: &str = "Subject Profile,Total Readings,Correct Detections,Wrong Detections,False Positives,True Negatives,Avg. Time per Detection (ms),% Accuracy,Mode,Backend";

/// Render the per-subject table with AGGREGATE and POOLED footers. The
/// AGGREGATE row averages subject accuracies; POOLED reweighs by readings.
/// `audit` zeroes wall-clock columns so seeded reruns are byte-identical.
pub fn render_report_csv(
    outcomes: &[ProfileOutcome],
    cfg: &PipelineConfig,
    audit: bool,
) -> String {
    let mode = cfg.formula_mode.as_str();
    let backend = cfg.similarity_backend.as_str();
    let t = |ms: f64| if audit { 0.0 } else { ms };
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for o in outcomes {
        let s = &o.score;
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.3},{:.2},{},{}\n",
            o.profile_id,
            s.total,
            s.correct,
            s.wrong(),
            s.false_positives,
            s.true_negatives,
            t(o.mean_detect_ms),
            s.accuracy_pct(),
            mode,
            backend,
        ));
    }
    let ok: Vec<&ProfileOutcome> = outcomes.iter().filter(|o| o.error.is_none()).collect();
    let total: usize = ok.iter().map(|o| o.score.total).sum();
    let correct: usize = ok.iter().map(|o| o.score.correct).sum();
    let wrong: usize = ok.iter().map(|o| o.score.wrong()).sum();
    let fp: usize = ok.iter().map(|o| o.score.false_positives).sum();
    let tn: usize = ok.iter().map(|o| o.score.true_negatives).sum();
    let events: usize = ok.iter().map(|o| o.events).sum();
    let mean_of = |f: &dyn Fn(&ProfileOutcome) -> f64| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|o| f(o)).sum::<f64>() / ok.len() as f64
        }
    };
    let agg_time = mean_of(&|o| o.mean_detect_ms);
    let agg_acc = mean_of(&|o| o.score.accuracy_pct());
    let pooled_time = if events == 0 {
        0.0
    } else {
        ok.iter().map(|o| o.mean_detect_ms * o.events as f64).sum::<f64>() / events as f64
    };
    let pooled_acc = if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 };
    for (name, time, acc) in [("AGGREGATE", agg_time, agg_acc), ("POOLED", pooled_time, pooled_acc)]
    {
        out.push_str(&format!(
            "{name},{total},{correct},{wrong},{fp},{tn},{:.3},{:.2},{mode},{backend}\n",
            t(time),
            acc,
        ));
    }
    out
}

/// Per-kind confusion counts, one row per profile and movement kind.
pub fn render_kinds_csv(outcomes: &[ProfileOutcome]) -> String {
    let mut out = String::from("profile,kind,seen,called_pb\n");
    for o in outcomes {
        for (kind, t) in &o.score.per_kind {
            out.push_str(&format!("{},{},{},{}\n", o.profile_id, kind, t.seen, t.called_pb));
        }
    }
    out
}

/// Quality bars a sweep must clear to be shippable: mean accuracy 80%, every
/// subject 65%, and gaze-as-blink confusion at most 15% in aggregate and per
/// clean subject (the deliberately confusable subjects only count toward the
/// aggregate). Returns one line per violation; empty means the run passes.
pub fn gate_violations(outcomes: &[ProfileOutcome]) -> Vec<String> {
    let ok: Vec<&ProfileOutcome> = outcomes.iter().filter(|o| o.error.is_none()).collect();
    let mut v = Vec::new();
    if ok.is_empty() {
        v.push("no profile completed".to_string());
        return v;
    }
    let mean = ok.iter().map(|o| o.score.accuracy_pct()).sum::<f64>() / ok.len() as f64;
    if mean < 80.0 {
        v.push(format!("mean accuracy {mean:.2}% below 80%"));
    }
    let gaze = MovementKind::UpwardGaze;
    let (mut seen, mut called) = (0usize, 0usize);
    for o in &ok {
        let acc = o.score.accuracy_pct();
        if acc < 65.0 {
            v.push(format!("{}: accuracy {acc:.2}% below 65%", o.profile_id));
        }
        if let Some(t) = o.score.per_kind.get(gaze.as_str()) {
            seen += t.seen;
            called += t.called_pb;
            let pct = o.score.called_pb_pct(gaze);
            if !o.hard && pct > 15.0 {
                v.push(format!(
                    "{}: gaze false-positive rate {pct:.2}% above 15%",
                    o.profile_id
                ));
            }
        }
    }
    if seen > 0 {
        let pct = 100.0 * called as f64 / seen as f64;
        if pct > 15.0 {
            v.push(format!("aggregate gaze false-positive rate {pct:.2}% above 15%"));
        }
    }
    v
}

/// Flat metric,value pairs for machine diffing.
pub fn render_bench_csv(summary: &RunSummary, audit: bool) -> String {
    let t = |v: f64| if audit { 0.0 } else { v };
    format!(
        "metric,value\nmean_detect_ms,{:.4}\np99_detect_ms,{:.4}\nhigh_water_bytes,{}\nrealtime_factor,{:.2}\n",
        t(summary.mean_detect_ms),
        t(summary.p99_detect_ms),
        summary.high_water_bytes,
        t(summary.realtime_factor),
    )
}

// ---------------------------------------------------------------------------
// Memory probes

/// One reading of the shared accountant during a replay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemorySnapshot {
    pub t_s: f64,
    pub live_bytes: usize,
    pub high_water_bytes: usize,
    pub waves_stored: usize,
}

/// Replay a trace through conditioning, isolation, and the retention buffer,
/// reading the accountant every `every_s` seconds of signal time.
pub fn memory_timeline(
    trace: &EogTrace,
    cfg: &PipelineConfig,
    every_s: f64,
) -> Result<Vec<MemorySnapshot>> {
    if !(every_s > 0.0) {
        return Err(Error::Config(format!("snapshot interval must be positive, got {every_s}")));
    }
    let accountant = BudgetAccountant::new(cfg.memory_budget_bytes);
    let mut pre = Preprocessor::new(cfg);
    let mut iso = WaveletIsolator::new(cfg, accountant.clone());
    let mut buffer = WaveletBuffer::new(cfg, accountant.clone());
    let stride = ((every_s * cfg.sampling_rate_hz) as usize).max(1);
    let mut snaps = Vec::new();
    for (n, &x) in trace.amplitudes.iter().enumerate() {
        let r = pre.step(x).r;
        if let IsolatorStep::Candidate(w) = iso.step(r) {
            buffer.push(&w.samples)?;
        }
        if n % stride == 0 {
            snaps.push(MemorySnapshot {
                t_s: n as f64 / cfg.sampling_rate_hz,
                live_bytes: accountant.live_bytes(),
                high_water_bytes: accountant.high_water_bytes(),
                waves_stored: buffer.len(),
            });
        }
    }
    Ok(snaps)
}

pub fn render_memory_csv(snaps: &[MemorySnapshot]) -> String {
    let mut out = String::from("t_s,live_bytes,high_water_bytes,waves_stored\n");
    for s in snaps {
        out.push_str(&format!(
            "{:.3},{},{},{}\n",
            s.t_s, s.live_bytes, s.high_water_bytes, s.waves_stored
        ));
    }
    out
}

/// SRAM the target firmware spends before the detector stores a byte.
pub const FIRMWARE_RESERVE_BYTES: usize = 20_480;

/// What the fixed-budget probe observed when retention finally failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureProbe {
    pub budget_bytes: usize,
    pub reserved_bytes: usize,
    pub appends_completed: usize,
    pub wave_len_at_failure: usize,
    pub live_bytes_at_failure: usize,
}

/// Fill the wave store against the firmware-sized budget with eviction off
/// until the accountant refuses, mirroring how the target runs out of SRAM
/// when nothing is allowed to age out.
pub fn run_failure_probe(cfg: &PipelineConfig) -> Result<FailureProbe> {
    let accountant = BudgetAccountant::new(cfg.memory_budget_bytes);
    accountant.try_track("firmware", FIRMWARE_RESERVE_BYTES)?;
    let mut buffer = WaveletBuffer::new(cfg, accountant.clone());
    buffer.set_eviction(false);
    // Each append costs at least ~900 bytes, so a refusal must arrive within
    // this many pushes or the budget is not being enforced.
    let cap = cfg.memory_budget_bytes / 900 + 2;
    let mut appends = 0usize;
    loop {
        let len = 450 + (appends * 37) % 101;
        let wave: Vec<f64> = (0..len).map(|k| -((k % 97) as f64)).collect();
        match buffer.push(&wave) {
            Ok(()) => appends += 1,
            Err(Error::BudgetExceeded { .. }) => {
                return Ok(FailureProbe {
                    budget_bytes: accountant.budget_bytes(),
                    reserved_bytes: FIRMWARE_RESERVE_BYTES,
                    appends_completed: appends,
                    wave_len_at_failure: len,
                    live_bytes_at_failure: accountant.live_bytes(),
                });
            }
            Err(e) => return Err(e),
        }
        if appends > cap {
            return Err(Error::Capacity(format!(
                "budget never refused after {appends} appends; enforcement is miswired"
            )));
        }
    }
}
