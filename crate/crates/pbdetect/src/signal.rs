//! Sample/trace types, ADC quantization, and trace/label file formats.
//!
//! Two trace encodings are supported:
//!
//! - `csv`: header `index,amplitude`, LF line endings, indices consecutive
//!   from 0; amplitudes print in shortest round-trip form so a save/load
//!   cycle reproduces the exact values.
//! - `raw_f32`: headerless little-endian `f32` samples.

use crate::error::{Error, Result};
use crate::simulator::MovementKind;
use std::io::{BufRead, BufReader, Read, Write};

/// One timestamped input sample. Indices count uniformly at the sampling rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EogSample {
    pub index: u64,
    pub amplitude: f64,
}

/// Ground-truth span for one scheduled movement; `start`/`end` are inclusive
/// sample indices into the owning trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceLabel {
    pub kind: MovementKind,
    pub start: usize,
    pub end: usize,
}

/// A recorded or synthesized signal plus optional ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EogTrace {
    pub sampling_rate_hz: f64,
    pub amplitudes: Vec<f64>,
    pub labels: Vec<TraceLabel>,
}

impl EogTrace {
    pub fn new(sampling_rate_hz: f64, amplitudes: Vec<f64>) -> Self {
        EogTrace { sampling_rate_hz, amplitudes, labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.amplitudes.len() as f64 / self.sampling_rate_hz
    }

    pub fn samples(&self) -> impl Iterator<Item = EogSample> + '_ {
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(i, &amplitude)| EogSample { index: i as u64, amplitude })
    }

    /// Labels must be sorted, disjoint, and inside the trace.
    pub fn validate_labels(&self) -> Result<()> {
        let mut prev_end: Option<usize> = None;
        for l in &self.labels {
            if l.start > l.end || l.end >= self.amplitudes.len() {
                return Err(Error::Config(format!(
                    "label span [{}, {}] outside trace of {} samples",
                    l.start,
                    l.end,
                    self.amplitudes.len()
                )));
            }
            if let Some(pe) = prev_end {
                if l.start <= pe {
                    return Err(Error::Config(format!(
                        "label spans overlap or are unsorted near index {}",
                        l.start
                    )));
                }
            }
            prev_end = Some(l.end);
        }
        Ok(())
    }
}

/// Snap an amplitude onto the nearest of `2^adc_bits` uniformly spaced levels
/// spanning `full_scale` (inclusive endpoints); out-of-range input saturates.
pub fn quantize(amplitude: f64, adc_bits: u32, full_scale: (f64, f64)) -> Result<f64> {
    let (lo, hi) = full_scale;
    if adc_bits == 0 || adc_bits > 32 {
        return Err(Error::Config(format!("adc_bits must be in 1..=32, got {adc_bits}")));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config(format!("full scale range is inverted or empty: [{lo}, {hi}]")));
    }
    let levels = (1u64 << adc_bits) as f64;
    let lsb = (hi - lo) / (levels - 1.0);
    let clamped = amplitude.clamp(lo, hi);
    let k = ((clamped - lo) / lsb).round();
    Ok(lo + k * lsb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    RawF32,
}

impl std::str::FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "raw_f32" | "raw-f32" => Ok(TraceFormat::RawF32),
            other => Err(Error::Config(format!(
                "unknown trace format {other:?} (expected \"csv\" or \"raw_f32\")"
            ))),
        }
    }
}

pub fn save_trace<W: Write>(trace: &EogTrace, mut w: W, format: TraceFormat) -> Result<()> {
    match format {
        TraceFormat::Csv => {
            w.write_all(b"index,amplitude\n")?;
            for (i, &a) in trace.amplitudes.iter().enumerate() {
                // {:?} prints the shortest string that parses back to the same f64.
                writeln!(w, "{i},{a:?}")?;
            }
        }
        TraceFormat::RawF32 => {
            for &a in &trace.amplitudes {
                w.write_all(&(a as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read a trace; `sampling_rate_hz` comes from the active config since neither
/// encoding carries it.
pub fn load_trace<R: Read>(r: R, format: TraceFormat, sampling_rate_hz: f64) -> Result<EogTrace> {
    let amplitudes = match format {
        TraceFormat::Csv => read_csv_trace(r)?,
        TraceFormat::RawF32 => read_raw_f32(r)?,
    };
    if amplitudes.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(EogTrace::new(sampling_rate_hz, amplitudes))
}

fn read_csv_trace<R: Read>(r: R) -> Result<Vec<f64>> {
    let reader = BufReader::new(r);
    let mut amplitudes = Vec::new();
    let mut lines = reader.lines();
    match lines.next() {
        Some(line) => {
            let line = line?;
            if line.trim_end() != "index,amplitude" {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header \"index,amplitude\", got {:?}", line),
                });
            }
        }
        None => return Err(Error::EmptyTrace),
    }
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let line = line?;
        let row = line.trim_end();
        if row.is_empty() {
            return Err(Error::Parse { line: line_no, msg: "blank row".into() });
        }
        let (idx_s, amp_s) = row
            .split_once(',')
            .ok_or_else(|| Error::Parse { line: line_no, msg: format!("expected two fields, got {row:?}") })?;
        let idx: u64 = idx_s
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("bad index {idx_s:?}") })?;
        if idx != amplitudes.len() as u64 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("index gap: expected {}, got {idx}", amplitudes.len()),
            });
        }
        let amp: f64 = amp_s
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("bad amplitude {amp_s:?}") })?;
        if !amp.is_finite() {
            return Err(Error::Parse { line: line_no, msg: format!("non-finite amplitude {amp}") });
        }
        amplitudes.push(amp);
    }
    Ok(amplitudes)
}

fn read_raw_f32<R: Read>(mut r: R) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse {
            line: bytes.len() / 4 + 1,
            msg: format!("trailing {} bytes do not form an f32", bytes.len() % 4),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn save_labels<W: Write>(labels: &[TraceLabel], mut w: W) -> Result<()> {
    w.write_all(b"kind,start_idx,end_idx\n")?;
    for l in labels {
        writeln!(w, "{},{},{}", l.kind, l.start, l.end)?;
    }
    Ok(())
}

pub fn load_labels<R: Read>(r: R) -> Result<Vec<TraceLabel>> {
    let reader = BufReader::new(r);
    let mut labels = Vec::new();
    let mut lines = reader.lines();
    match lines.next() {
        Some(line) => {
            let line = line?;
            if line.trim_end() != "kind,start_idx,end_idx" {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header \"kind,start_idx,end_idx\", got {:?}", line),
                });
            }
        }
        None => return Ok(labels),
    }
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let line = line?;
        let row = line.trim_end();
        if row.is_empty() {
            continue;
        }
        let mut fields = row.split(',');
        let (kind, start, end) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(k), Some(s), Some(e), None) => (k, s, e),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected three fields, got {row:?}"),
                })
            }
        };
        let kind: MovementKind = kind
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("unknown kind {kind:?}") })?;
        let start: usize = start
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("bad start {start:?}") })?;
        let end: usize = end
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("bad end {end:?}") })?;
        if end < start {
            return Err(Error::Parse { line: line_no, msg: format!("span ends before it starts: {row:?}") });
        }
        labels.push(TraceLabel { kind, start, end });
    }
    Ok(labels)
}
