//! Command-line front end: simulate cohort sessions, train a model from a
//! labeled trace, run detection over a trace, sweep the cohort into a report
//! table, and benchmark one subject's latency and memory.
//!
//! Exit codes: 0 on success, 1 on usage or pipeline errors, 2 when a sweep
//! had a subject fail training, 3 when a sweep finished but missed the
//! quality gates. `PBDETECT_SEED` overrides every seed (winning over
//! `--seed`) and switches reports to audit rendering, which zeroes
//! wall-clock columns so reruns compare byte for byte.

use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use pbdetect::classifier::{run_operational, RunSummary};
use pbdetect::features::FeatureVector;
use pbdetect::harness::{
    draw_readings, effective_seed, gate_violations, memory_timeline, operational_session,
    render_bench_csv, render_kinds_csv, render_memory_csv, render_report_csv, run_eval,
    train_from_trace, training_session, EvalOptions,
};
use pbdetect::isolator::{IsolatorStep, WaveletIsolator};
use pbdetect::memstore::BudgetAccountant;
use pbdetect::preprocess::Preprocessor;
use pbdetect::signal::{load_labels, load_trace, save_labels, save_trace};
use pbdetect::simulator::SubjectProfile;
use pbdetect::strictmode::FormulaMode;
use pbdetect::trainer::TrainedModel;
use pbdetect::{EogTrace, Error, PipelineConfig, Result, SimilarityBackend, TraceFormat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "pbdetect", version, about = "Streaming EOG prolonged-blink detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled session for one subject profile.
    Simulate(SimulateArgs),
    /// Learn per-subject thresholds from a labeled training trace.
    Train(TrainArgs),
    /// Run detection over a trace with a trained model.
    Detect(DetectArgs),
    /// Train and score profiles end to end; write the report table.
    Eval(EvalArgs),
    /// Measure one subject's decision latency and memory footprint.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Cohort profile id (A through O) or a path to a profile file.
    #[arg(long)]
    profile: String,
    /// Pipeline config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for this run.
    #[arg(long)]
    seed: Option<u64>,
    /// Generate a calibration session (training reps plus spares per phase).
    #[arg(long, conflicts_with = "readings")]
    training: bool,
    /// Generate an operational session with this many movements.
    #[arg(long)]
    readings: Option<usize>,
    /// Trace output path.
    #[arg(long)]
    out: PathBuf,
    /// Trace encoding: csv or raw_f32.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Where to write the ground-truth labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Echo the resolved profile to this path.
    #[arg(long)]
    profile_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training trace path.
    #[arg(long)]
    trace: PathBuf,
    /// Trace encoding: csv or raw_f32.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Ground-truth labels for the trace.
    #[arg(long)]
    labels: PathBuf,
    /// Pipeline config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Formula variant: corrected or strict.
    #[arg(long)]
    formula_mode: Option<String>,
    /// Model output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Input trace path.
    #[arg(long)]
    trace: PathBuf,
    /// Trace encoding: csv or raw_f32.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Trained model path.
    #[arg(long)]
    model: PathBuf,
    /// Config override; the model's own config applies when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Event CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one feature row per event to this path.
    #[arg(long)]
    features_out: Option<PathBuf>,
    /// Dump the conditioned rate stream to this path as a trace CSV.
    #[arg(long)]
    dump_r: Option<PathBuf>,
    /// Print one `index,event,reason` line per isolator outcome.
    #[arg(long)]
    trace_events: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Pipeline config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Formula variant: corrected or strict.
    #[arg(long)]
    formula_mode: Option<String>,
    /// Similarity backend: ncc_max or ddtw_sakoe_chiba.
    #[arg(long)]
    backend: Option<String>,
    /// Comma-separated cohort ids; the full cohort when omitted.
    #[arg(long)]
    profiles: Option<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Seed override for this run.
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed reading count per profile; drawn per protocol when omitted.
    #[arg(long)]
    readings: Option<usize>,
    /// Directory for report.csv and kinds.csv; report to stdout when omitted.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Cohort profile id (A through O) or a path to a profile file.
    #[arg(long)]
    profile: String,
    /// Pipeline config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for this run.
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed reading count; drawn per protocol when omitted.
    #[arg(long)]
    readings: Option<usize>,
    /// Directory for bench.csv and memory.csv; bench to stdout when omitted.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    run.unwrap_or_else(|e| {
        eprintln!("pbdetect: {e}");
        ExitCode::from(1)
    })
}

// ---------------------------------------------------------------------------
// Shared plumbing

/// The environment seed wins over the flag so audit reruns of an arbitrary
/// command line need no argv surgery.
fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    match std::env::var("PBDETECT_SEED") {
        Ok(v) => v.trim().parse::<u64>().map(Some).map_err(|_| {
            Error::Config(format!("PBDETECT_SEED must be an unsigned integer, got {v:?}"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(Error::Config(format!("PBDETECT_SEED is unreadable: {e}"))),
    }
}

fn load_config(
    path: Option<&PathBuf>,
    mode: Option<&str>,
    backend: Option<&str>,
) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = mode {
        cfg = cfg.with_mode(FormulaMode::from_str(m)?);
    }
    if let Some(b) = backend {
        cfg.similarity_backend = SimilarityBackend::from_str(b)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_profile(spec: &str) -> Result<SubjectProfile> {
    if let Some(p) = SubjectProfile::named(spec) {
        return Ok(p);
    }
    if Path::new(spec).exists() {
        return SubjectProfile::load(Path::new(spec));
    }
    Err(Error::Config(format!("no cohort profile named {spec:?} and no file at that path")))
}

fn load_trace_file(path: &Path, format: &str, sampling_rate_hz: f64) -> Result<EogTrace> {
    let format = TraceFormat::from_str(format)?;
    load_trace(BufReader::new(File::open(path)?), format, sampling_rate_hz)
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_simulate(a: SimulateArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_ref(), None, None)?;
    let profile = resolve_profile(&a.profile)?;
    let seed = seed_override(a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(effective_seed(seed, &profile));
    let trace = if a.training {
        training_session(&profile, &cfg, &mut rng)?
    } else {
        let readings = a
            .readings
            .ok_or_else(|| Error::Config("choose --training or --readings N".into()))?;
        operational_session(&profile, &cfg, readings, &mut rng)?
    };
    save_trace(&trace, BufWriter::new(File::create(&a.out)?), TraceFormat::from_str(&a.format)?)?;
    if let Some(p) = &a.labels {
        save_labels(&trace.labels, BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &a.profile_out {
        fs::write(p, profile.to_toml_string())?;
    }
    eprintln!(
        "wrote {} samples ({:.1} s), {} labeled movements, to {}",
        trace.len(),
        trace.duration_s(),
        trace.labels.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_ref(), a.formula_mode.as_deref(), None)?;
    let mut trace = load_trace_file(&a.trace, &a.format, cfg.sampling_rate_hz)?;
    trace.labels = load_labels(BufReader::new(File::open(&a.labels)?))?;
    trace.validate_labels()?;
    let model = train_from_trace(&trace, &cfg)?;
    model.save_path(&a.out)?;
    println!("model written to {}", a.out.display());
    for (name, band) in FeatureVector::NAMES.iter().zip(model.bands.iter()) {
        println!("  {name}: [{:.4}, {:.4}]", band.lt, band.ut);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_detect(a: DetectArgs) -> Result<ExitCode> {
    let model = TrainedModel::load_path(&a.model)?;
    let cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => model.config.clone(),
    };
    let trace = load_trace_file(&a.trace, &a.format, cfg.sampling_rate_hz)?;
    let summary = run_operational(&trace, &model, &cfg)?;
    let rendered = render_events_csv(&summary);
    match &a.out {
        Some(p) => fs::write(p, rendered)?,
        None => print!("{rendered}"),
    }
    if let Some(p) = &a.features_out {
        fs::write(p, render_features_csv(&summary))?;
    }
    if a.dump_r.is_some() || a.trace_events {
        replay_diagnostics(&trace, &cfg, a.dump_r.as_deref(), a.trace_events)?;
    }
    eprintln!(
        "{} events, {} alerts, {} rejects, mean decision {:.3} ms, {:.0}x realtime",
        summary.events.len(),
        summary.alerts.len(),
        summary.reject_tally.values().sum::<usize>(),
        summary.mean_detect_ms,
        summary.realtime_factor
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_ref(), a.formula_mode.as_deref(), a.backend.as_deref())?;
    let all = SubjectProfile::defaults();
    let profiles: Vec<SubjectProfile> = match &a.profiles {
        None => all,
        Some(spec) => spec
            .split(',')
            .map(|id| {
                let id = id.trim();
                all.iter()
                    .find(|p| p.id == id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no cohort profile named {id:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let opts = EvalOptions {
        seed_override: seed_override(a.seed)?,
        jobs: a.jobs,
        readings: a.readings,
    };
    let outcomes = run_eval(&profiles, &cfg, &opts);
    let report = render_report_csv(&outcomes, &cfg, opts.audit());
    match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.csv"), &report)?;
            fs::write(dir.join("kinds.csv"), render_kinds_csv(&outcomes))?;
        }
        None => print!("{report}"),
    }
    let ok: Vec<_> = outcomes.iter().filter(|o| o.error.is_none()).collect();
    if !ok.is_empty() {
        let mean = ok.iter().map(|o| o.score.accuracy_pct()).sum::<f64>() / ok.len() as f64;
        eprintln!("{} of {} profiles completed, mean accuracy {mean:.2}%", ok.len(), outcomes.len());
    }
    let mut failed = false;
    for o in &outcomes {
        if let Some(e) = &o.error {
            eprintln!("{}: failed: {e}", o.profile_id);
            failed = true;
        }
    }
    if failed {
        return Ok(ExitCode::from(2));
    }
    let violations = gate_violations(&outcomes);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("gate: {v}");
        }
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_ref(), None, None)?;
    let profile = resolve_profile(&a.profile)?;
    let seed = seed_override(a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(effective_seed(seed, &profile));
    let training = training_session(&profile, &cfg, &mut rng)?;
    let model = train_from_trace(&training, &cfg)?;
    let readings = draw_readings(a.readings, &mut rng);
    let operational = operational_session(&profile, &cfg, readings, &mut rng)?;
    let summary = run_operational(&operational, &model, &cfg)?;
    let bench = render_bench_csv(&summary, seed.is_some());
    let snaps = memory_timeline(&operational, &cfg, 0.5)?;
    match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("bench.csv"), &bench)?;
            fs::write(dir.join("memory.csv"), render_memory_csv(&snaps))?;
        }
        None => print!("{bench}"),
    }
    eprintln!(
        "profile {}: {readings} readings, mean decision {:.3} ms, p99 {:.3} ms, \
         high water {} bytes, {:.0}x realtime",
        profile.id,
        summary.mean_detect_ms,
        summary.p99_detect_ms,
        summary.high_water_bytes,
        summary.realtime_factor
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// Rendering

/// Events in time order with alerts interleaved after the event that raised
/// them.
fn render_events_csv(s: &RunSummary) -> String {
    let mut out = String::from("t_s,start_idx,end_idx,pass_sum,is_pb\n");
    let mut alerts = s.alerts.iter().peekable();
    for e in &s.events {
        out.push_str(&format!(
            "{:.3},{},{},{:.6},{}\n",
            e.t_s, e.start_idx, e.end_idx, e.pass_sum, e.is_pb
        ));
        while alerts.peek().map_or(false, |al| al.t_s <= e.t_s) {
            let al = alerts.next().unwrap();
            out.push_str(&format!("ALERT,{:.3},{}\n", al.t_s, al.count));
        }
    }
    for al in alerts {
        out.push_str(&format!("ALERT,{:.3},{}\n", al.t_s, al.count));
    }
    out
}

fn render_features_csv(s: &RunSummary) -> String {
    let mut out = FeatureVector::NAMES.join(",");
    out.push('\n');
    for e in &s.events {
        let v = e.features.as_array();
        let row: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Re-run conditioning and isolation to surface per-sample internals; the
/// detection pass above stays the sole source of events.
fn replay_diagnostics(
    trace: &EogTrace,
    cfg: &PipelineConfig,
    dump_r: Option<&Path>,
    trace_events: bool,
) -> Result<()> {
    let mut pre = Preprocessor::new(cfg);
    let mut iso = WaveletIsolator::new(cfg, BudgetAccountant::new(cfg.memory_budget_bytes));
    let mut rs = Vec::with_capacity(trace.len());
    for (n, &x) in trace.amplitudes.iter().enumerate() {
        let r = pre.step(x).r;
        rs.push(r);
        match iso.step(r) {
            IsolatorStep::Candidate(w) if trace_events => {
                println!("{},CANDIDATE,-", w.emitted_idx);
            }
            IsolatorStep::Rejected(reason) if trace_events => {
                println!("{n},REJECT,{reason}");
            }
            _ => {}
        }
    }
    if let Some(p) = dump_r {
        let r_trace = EogTrace::new(cfg.sampling_rate_hz, rs);
        save_trace(&r_trace, BufWriter::new(File::create(p)?), TraceFormat::Csv)?;
    }
    Ok(())
}
