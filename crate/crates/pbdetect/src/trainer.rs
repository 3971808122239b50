//! Two-phase learning: single-pass feature statistics, per-feature fuzzy
//! bands, and the trained model with its persistence format.
//!
//! Phase one watches deliberate prolonged blinks; each accepted wavelet is
//! scored against the buffer so far, then added to it. Phase two watches the
//! confusable anti-gesture (upward gaze) against the now-frozen buffer and
//! only collects statistics. Each feature then gets a band of mean plus or
//! minus one and a half standard deviations, pulled inward where the two
//! classes overlap.

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::{extract_features, medoid_of, FeatureVector, WaveletBuffer};
use crate::isolator::CandidateWave;
use crate::memstore::BudgetAccountant;
use crate::strictmode::Formulas;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};

/// Which half of the learning protocol a candidate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearningPhase {
    /// Deliberate prolonged blinks; these populate the wavelet buffer.
    Pb,
    /// The anti-gesture; statistics only, the buffer stays frozen.
    Anti,
}

// ---------------------------------------------------------------------------
// Running statistics

/// Constant-memory mean and squared-deviation accumulator.
///
/// The mean recurrence reproduces the arithmetic mean exactly. The
/// accumulator adds each sample's squared distance from the mean *as of that
/// sample*, so it is a one-pass spread measure, not the two-pass sum of
/// squares; it runs a little low but needs no history, and the thresholds
/// are calibrated against exactly this quantity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: usize,
    mean: f64,
    acc: f64,
}

impl RunningStats {
    pub fn from_parts(n: usize, mean: f64, acc: f64) -> Self {
        RunningStats { n, mean, acc }
    }

    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let mean = (self.mean * (self.n - 1) as f64 + v) / self.n as f64;
        self.acc += (v - mean) * (v - mean);
        self.mean = mean;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn acc(&self) -> f64 {
        self.acc
    }

    /// Population spread: root of the mean squared deviation, or the raw
    /// mean squared deviation when the root is formula-gated off.
    pub fn sd(&self, formulas: &Formulas) -> f64 {
        let msd = self.acc / self.n as f64;
        if formulas.sd_sqrt {
            msd.sqrt()
        } else {
            msd
        }
    }
}

// ---------------------------------------------------------------------------
// Threshold bands

/// Acceptance band for one feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub lt: f64,
    pub ut: f64,
}

/// Derive one feature's band from blink and anti-gesture statistics.
///
/// The raw band is blink mean plus or minus 1.5 spreads. When the
/// anti-gesture band overlaps from below, the lower edge moves up to the
/// midpoint of the contested stretch; when it overlaps from above, the upper
/// edge moves down likewise. The two overlap patterns are mutually
/// exclusive, so at most one edge moves.
pub fn derive_band(
    pb: &RunningStats,
    anti: &RunningStats,
    formulas: &Formulas,
    feature: &'static str,
) -> Result<Band> {
    if pb.count() < 2 {
        return Err(Error::InsufficientStats(format!(
            "{feature}: blink phase has {} samples, need at least 2",
            pb.count()
        )));
    }
    if anti.count() < 2 {
        return Err(Error::InsufficientStats(format!(
            "{feature}: anti phase has {} samples, need at least 2",
            anti.count()
        )));
    }
    let mut lt = pb.mean() - 1.5 * pb.sd(formulas);
    let mut ut = pb.mean() + 1.5 * pb.sd(formulas);
    let lat = anti.mean() - 1.5 * anti.sd(formulas);
    let uat = anti.mean() + 1.5 * anti.sd(formulas);
    for v in [lt, ut, lat, uat] {
        if !v.is_finite() {
            return Err(Error::NonFinite { feature, value: v });
        }
    }
    if ut > uat && uat > lt && lt > lat {
        lt = (lt + uat) / 2.0;
    } else if uat > ut && ut > lat && lat > lt {
        ut = (ut + lat) / 2.0;
    }
    if !(lt < ut) {
        return Err(Error::DegenerateThresholds { feature, lt, ut });
    }
    Ok(Band { lt, ut })
}

// ---------------------------------------------------------------------------
// Trained model

/// One reference wavelet with its stream location.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredWave {
    pub start_idx: u64,
    pub end_idx: u64,
    pub samples: Vec<f64>,
}

/// Everything operational mode needs: the pipeline configuration the model
/// was trained under, per-phase feature statistics, the six bands, and the
/// frozen reference wavelets with a precomputed medoid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: PipelineConfig,
    pub pb_stats: [RunningStats; 6],
    pub anti_stats: [RunningStats; 6],
    pub bands: [Band; 6],
    pub wavelets: Vec<StoredWave>,
    pub medoid_index: usize,
}

impl TrainedModel {
    pub fn medoid_wave(&self) -> &[f64] {
        &self.wavelets[self.medoid_index].samples
    }
}

// ---------------------------------------------------------------------------
// Learning protocol

/// Consume a tagged candidate stream and produce a model.
///
/// The first `pb_training_reps` blink-phase candidates and the first
/// `up_training_reps` anti-phase candidates count; later ones are ignored.
/// Blink candidates arriving after the anti phase has begun are also
/// ignored, since the buffer is frozen by then. Falling short in either
/// phase fails.
pub fn run_learning<I>(
    events: I,
    cfg: &PipelineConfig,
    accountant: BudgetAccountant,
) -> Result<TrainedModel>
where
    I: IntoIterator<Item = (LearningPhase, CandidateWave)>,
{
    let formulas = cfg.formulas();
    let mut buffer = WaveletBuffer::new(cfg, accountant);
    let mut spans: Vec<(u64, u64)> = Vec::new();
    let mut pb_stats = [RunningStats::default(); 6];
    let mut anti_stats = [RunningStats::default(); 6];
    let mut frozen_medoid: Option<Vec<f64>> = None;
    let (mut pb_got, mut anti_got) = (0usize, 0usize);
    for (phase, wave) in events {
        match phase {
            LearningPhase::Pb => {
                if pb_got >= cfg.pb_training_reps || frozen_medoid.is_some() {
                    continue;
                }
                let reference =
                    if buffer.is_empty() { None } else { Some(buffer.medoid_wave(cfg)?) };
                let f = extract_features(&wave.samples, reference.as_deref(), cfg)?;
                push_all(&mut pb_stats, &f);
                buffer.push(&wave.samples)?;
                spans.push((wave.start_idx, wave.end_idx));
                pb_got += 1;
            }
            LearningPhase::Anti => {
                if anti_got >= cfg.up_training_reps {
                    continue;
                }
                if buffer.is_empty() {
                    return Err(Error::IncompleteTraining {
                        phase: "blink",
                        got: 0,
                        need: cfg.pb_training_reps,
                    });
                }
                let reference = match &frozen_medoid {
                    Some(r) => r.clone(),
                    None => {
                        let r = buffer.medoid_wave(cfg)?;
                        frozen_medoid = Some(r.clone());
                        r
                    }
                };
                let f = extract_features(&wave.samples, Some(&reference), cfg)?;
                push_all(&mut anti_stats, &f);
                anti_got += 1;
            }
        }
    }
    if pb_got < cfg.pb_training_reps {
        return Err(Error::IncompleteTraining {
            phase: "blink",
            got: pb_got,
            need: cfg.pb_training_reps,
        });
    }
    if anti_got < cfg.up_training_reps {
        return Err(Error::IncompleteTraining {
            phase: "anti",
            got: anti_got,
            need: cfg.up_training_reps,
        });
    }
    let mut bands = [Band { lt: 0.0, ut: 0.0 }; 6];
    for (i, name) in FeatureVector::NAMES.iter().enumerate() {
        bands[i] = derive_band(&pb_stats[i], &anti_stats[i], &formulas, name)?;
    }
    let waves = buffer.waves();
    let medoid_index = medoid_of(&waves, cfg)?;
    let wavelets = waves
        .into_iter()
        .zip(spans)
        .map(|(samples, (start_idx, end_idx))| StoredWave { start_idx, end_idx, samples })
        .collect();
    Ok(TrainedModel {
        config: cfg.clone(),
        pb_stats,
        anti_stats,
        bands,
        wavelets,
        medoid_index,
    })
}

fn push_all(stats: &mut [RunningStats; 6], f: &FeatureVector) {
    for (s, v) in stats.iter_mut().zip(f.as_array()) {
        s.push(v);
    }
}

// ---------------------------------------------------------------------------
// Persistence

const MODEL_MAGIC: &str = "pbdetect-model v1";

impl TrainedModel {
    /// Write the line-oriented model file with a trailing content checksum.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut body = String::new();
        body.push_str(MODEL_MAGIC);
        body.push('\n');
        body.push_str("[config]\n");
        body.push_str(&self.config.to_toml_string());
        body.push_str("[stats]\n");
        body.push_str(&format!("pb_n = {}\n", self.pb_stats[0].count()));
        body.push_str(&format!("anti_n = {}\n", self.anti_stats[0].count()));
        body.push_str(&format!("pb_mean = {}\n", float_row(self.pb_stats.iter().map(|s| s.mean()))));
        body.push_str(&format!("pb_acc = {}\n", float_row(self.pb_stats.iter().map(|s| s.acc()))));
        body.push_str(&format!("anti_mean = {}\n", float_row(self.anti_stats.iter().map(|s| s.mean()))));
        body.push_str(&format!("anti_acc = {}\n", float_row(self.anti_stats.iter().map(|s| s.acc()))));
        body.push_str("[thresholds]\n");
        body.push_str(&format!("lt = {}\n", float_row(self.bands.iter().map(|b| b.lt))));
        body.push_str(&format!("ut = {}\n", float_row(self.bands.iter().map(|b| b.ut))));
        body.push_str("[wavelets]\n");
        body.push_str(&format!("medoid_index = {}\n", self.medoid_index));
        for wave in &self.wavelets {
            let mut bytes = Vec::with_capacity(wave.samples.len() * 8);
            for &v in &wave.samples {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            body.push_str(&format!(
                "wave = {},{},{}\n",
                wave.start_idx,
                wave.end_idx,
                BASE64.encode(&bytes)
            ));
        }
        let digest = Sha256::digest(body.as_bytes());
        w.write_all(body.as_bytes())?;
        w.write_all(b"[checksum]\n")?;
        w.write_all(format!("sha256 = {digest:x}\n").as_bytes())?;
        Ok(())
    }

    pub fn save_path(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.save(&mut f)
    }

    /// Parse and verify a model file; any structural damage is an error.
    pub fn load<R: Read>(r: &mut R) -> Result<TrainedModel> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let body_end = text
            .find("[checksum]\n")
            .ok_or_else(|| Error::ModelFormat("missing checksum section".into()))?;
        let (body, tail) = text.split_at(body_end);
        let stated = tail
            .lines()
            .nth(1)
            .and_then(|l| l.strip_prefix("sha256 = "))
            .ok_or_else(|| Error::ModelFormat("malformed checksum section".into()))?;
        let digest = format!("{:x}", Sha256::digest(body.as_bytes()));
        if digest != stated.trim() {
            return Err(Error::ChecksumMismatch);
        }
        let mut lines = body.lines();
        let magic = lines.next().unwrap_or("");
        if magic != MODEL_MAGIC {
            return Err(Error::ModelVersion {
                found: magic.to_string(),
                expected: MODEL_MAGIC.to_string(),
            });
        }
        let mut section = String::new();
        let mut config_text = String::new();
        let mut kv: std::collections::BTreeMap<String, String> = Default::default();
        let mut waves: Vec<StoredWave> = Vec::new();
        for line in lines {
            if line.starts_with('[') {
                section = line.to_string();
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            match section.as_str() {
                "[config]" => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
                "[stats]" | "[thresholds]" => {
                    let (k, v) = line
                        .split_once(" = ")
                        .ok_or_else(|| Error::ModelFormat(format!("bad line {line:?}")))?;
                    kv.insert(format!("{section}{k}"), v.to_string());
                }
                "[wavelets]" => {
                    if let Some(v) = line.strip_prefix("medoid_index = ") {
                        kv.insert("medoid_index".into(), v.to_string());
                    } else if let Some(v) = line.strip_prefix("wave = ") {
                        waves.push(parse_wave(v)?);
                    } else {
                        return Err(Error::ModelFormat(format!("bad wavelet line {line:?}")));
                    }
                }
                _ => return Err(Error::ModelFormat(format!("line outside any section: {line:?}"))),
            }
        }
        let config = PipelineConfig::from_toml_str(&config_text)?;
        let pb_n = parse_count(&kv, "[stats]pb_n")?;
        let anti_n = parse_count(&kv, "[stats]anti_n")?;
        let pb_mean = parse_row(&kv, "[stats]pb_mean")?;
        let pb_acc = parse_row(&kv, "[stats]pb_acc")?;
        let anti_mean = parse_row(&kv, "[stats]anti_mean")?;
        let anti_acc = parse_row(&kv, "[stats]anti_acc")?;
        let lt = parse_row(&kv, "[thresholds]lt")?;
        let ut = parse_row(&kv, "[thresholds]ut")?;
        let mut pb_stats = [RunningStats::default(); 6];
        let mut anti_stats = [RunningStats::default(); 6];
        let mut bands = [Band { lt: 0.0, ut: 0.0 }; 6];
        for i in 0..6 {
            pb_stats[i] = RunningStats::from_parts(pb_n, pb_mean[i], pb_acc[i]);
            anti_stats[i] = RunningStats::from_parts(anti_n, anti_mean[i], anti_acc[i]);
            if !(lt[i] < ut[i]) {
                return Err(Error::DegenerateThresholds {
                    feature: FeatureVector::NAMES[i],
                    lt: lt[i],
                    ut: ut[i],
                });
            }
            bands[i] = Band { lt: lt[i], ut: ut[i] };
        }
        if waves.is_empty() {
            return Err(Error::ModelFormat("model holds no wavelets".into()));
        }
        let medoid_index: usize = kv
            .get("medoid_index")
            .ok_or_else(|| Error::ModelFormat("missing medoid_index".into()))?
            .parse()
            .map_err(|_| Error::ModelFormat("bad medoid_index".into()))?;
        if medoid_index >= waves.len() {
            return Err(Error::ModelFormat(format!(
                "medoid_index {medoid_index} out of range for {} wavelets",
                waves.len()
            )));
        }
        Ok(TrainedModel { config, pb_stats, anti_stats, bands, wavelets: waves, medoid_index })
    }

    pub fn load_path(path: &std::path::Path) -> Result<TrainedModel> {
        let mut f = std::fs::File::open(path)?;
        Self::load(&mut f)
    }
}

fn float_row(vals: impl Iterator<Item = f64>) -> String {
    vals.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn parse_count(kv: &std::collections::BTreeMap<String, String>, key: &str) -> Result<usize> {
    kv.get(key)
        .ok_or_else(|| Error::ModelFormat(format!("missing {key}")))?
        .parse()
        .map_err(|_| Error::ModelFormat(format!("bad {key}")))
}

fn parse_row(kv: &std::collections::BTreeMap<String, String>, key: &str) -> Result<[f64; 6]> {
    let raw = kv.get(key).ok_or_else(|| Error::ModelFormat(format!("missing {key}")))?;
    let vals: Vec<f64> = raw
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::ModelFormat(format!("bad float in {key}")))?;
    vals.try_into().map_err(|_| Error::ModelFormat(format!("{key} needs exactly 6 values")))
}

fn parse_wave(v: &str) -> Result<StoredWave> {
    let mut parts = v.splitn(3, ',');
    let (s, e, b64) = match (parts.next(), parts.next(), parts.next()) {
        (Some(s), Some(e), Some(b)) => (s, e, b),
        _ => return Err(Error::ModelFormat(format!("bad wave line {v:?}"))),
    };
    let start_idx: u64 = s.parse().map_err(|_| Error::ModelFormat("bad wave start".into()))?;
    let end_idx: u64 = e.parse().map_err(|_| Error::ModelFormat("bad wave end".into()))?;
    let bytes = BASE64.decode(b64).map_err(|_| Error::ModelFormat("bad wave encoding".into()))?;
    if bytes.len() % 8 != 0 || bytes.is_empty() {
        return Err(Error::ModelFormat("wave byte length not a multiple of 8".into()));
    }
    let samples = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(StoredWave { start_idx, end_idx, samples })
}
