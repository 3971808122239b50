//! Wavelet shape features and the similarity backends behind them.
//!
//! Six features describe a candidate: similarity to the buffer medoid, the
//! positive and negative rate peaks, and three durations (positive half,
//! negative half, whole wavelet). Similarity comes from either lag-scanned
//! normalized cross-correlation or a derivative DTW distance squashed
//! through `exp(-d)`; both are insensitive to where the wavelet sits in its
//! capture window, and the DTW variant also tolerates local time warping.

use crate::config::{PipelineConfig, SimilarityBackend};
use crate::error::{Error, Result};
use crate::memstore::{BudgetAccountant, HatStore, WaveHandle};
use std::collections::VecDeque;

/// One candidate's shape description, in classification order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub similarity: f64,
    pub max: f64,
    pub min: f64,
    pub p_durn: f64,
    pub n_durn: f64,
    pub t_durn: f64,
}

impl FeatureVector {
    pub const NAMES: [&'static str; 6] = ["similarity", "max", "min", "p_durn", "n_durn", "t_durn"];

    /// Features in the fixed order classification walks them.
    pub fn as_array(&self) -> [f64; 6] {
        [self.similarity, self.max, self.min, self.p_durn, self.n_durn, self.t_durn]
    }
}

// ---------------------------------------------------------------------------
// Normalized cross-correlation

/// Maximum normalized cross-correlation over integer lags.
///
/// Each lag correlates the overlapping windows after removing their means,
/// so a shifted copy scores 1 regardless of offset. Lags are only scanned
/// while the overlap covers at least half the shorter sequence: a two-point
/// overlap correlates to exactly one in magnitude by construction, which
/// would pin the maximum at 1 for any pair of inputs and say nothing about
/// their shapes. Flat-in-the-overlap lags contribute no candidate value,
/// and a sequence that is flat everywhere errors.
pub fn ncc_max(a: &[f64], b: &[f64]) -> Result<f64> {
    check_correlatable(a)?;
    check_correlatable(b)?;
    let (n, m) = (a.len(), b.len());
    let floor = min_overlap(n, m);
    let mut best = f64::NEG_INFINITY;
    for s in -(m as i64 - 1)..=(n as i64 - 1) {
        let lo = 0i64.max(s) as usize;
        let hi = (n as i64).min(m as i64 + s) as usize;
        if hi - lo < floor {
            continue;
        }
        let len = (hi - lo) as f64;
        let (mut sa, mut sb) = (0.0, 0.0);
        for i in lo..hi {
            sa += a[i];
            sb += b[(i as i64 - s) as usize];
        }
        let (ma, mb) = (sa / len, sb / len);
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in lo..hi {
            let x = a[i] - ma;
            let y = b[(i as i64 - s) as usize] - mb;
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        best = best.max(dot / (na.sqrt() * nb.sqrt()));
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::ZeroVariance);
    }
    Ok(best)
}

/// Integer-arithmetic variant of [`ncc_max`], as the target would do it.
///
/// Samples are scaled to the 16-bit range once per sequence, the per-lag
/// sums run in 64-bit integers, and only the final ratio touches floating
/// point. Agrees with the float path to about a part in a thousand.
pub fn ncc_max_integer(a: &[f64], b: &[f64]) -> Result<f64> {
    check_correlatable(a)?;
    check_correlatable(b)?;
    let qa = quantize_i16(a);
    let qb = quantize_i16(b);
    let (n, m) = (qa.len(), qb.len());
    let floor = min_overlap(n, m);
    let mut best = f64::NEG_INFINITY;
    for s in -(m as i64 - 1)..=(n as i64 - 1) {
        let lo = 0i64.max(s) as usize;
        let hi = (n as i64).min(m as i64 + s) as usize;
        if hi - lo < floor {
            continue;
        }
        let len = (hi - lo) as i64;
        let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0i64, 0i64, 0i64, 0i64, 0i64);
        for i in lo..hi {
            let x = qa[i];
            let y = qb[(i as i64 - s) as usize];
            sa += x;
            sb += y;
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        let num = len * sab - sa * sb;
        let da = len * saa - sa * sa;
        let db = len * sbb - sb * sb;
        if da == 0 || db == 0 {
            continue;
        }
        best = best.max(num as f64 / ((da as i128 * db as i128) as f64).sqrt());
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::ZeroVariance);
    }
    Ok(best)
}

/// Smallest overlap a lag must cover to produce a meaningful correlation.
fn min_overlap(n: usize, m: usize) -> usize {
    (n.min(m) / 2).max(2)
}

fn check_correlatable(a: &[f64]) -> Result<()> {
    if a.len() < 2 {
        return Err(Error::TooShort { len: a.len(), min: 2 });
    }
    if a.iter().all(|&v| v == a[0]) {
        return Err(Error::ZeroVariance);
    }
    Ok(())
}

fn quantize_i16(a: &[f64]) -> Vec<i64> {
    let max_abs = a.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let scale = 32767.0 / max_abs;
    a.iter().map(|&v| (v * scale).round() as i64).collect()
}

// ---------------------------------------------------------------------------
// Derivative DTW

/// Three-point derivative estimate; drops one sample at each end.
fn derivative(a: &[f64]) -> Result<Vec<f64>> {
    if a.len() < 3 {
        return Err(Error::TooShort { len: a.len(), min: 3 });
    }
    Ok((1..a.len() - 1)
        .map(|i| ((a[i] - a[i - 1]) + (a[i + 1] - a[i - 1]) / 2.0) / 2.0)
        .collect())
}

/// Band-limited DTW on derivative estimates, squared sample cost, with the
/// band widened to the length difference so the corner stays reachable.
/// Returns the raw path cost and the warping path length.
pub(crate) fn ddtw_cost_len(a: &[f64], b: &[f64], band: usize) -> Result<(f64, usize)> {
    if band == 0 {
        return Err(Error::Config("sakoe_chiba_band must be at least 1".into()));
    }
    let da = derivative(a)?;
    let db = derivative(b)?;
    let (n, m) = (da.len(), db.len());
    let w = band.max(n.abs_diff(m));
    let mut dp = vec![f64::INFINITY; n * m];
    for i in 0..n {
        let jlo = i.saturating_sub(w);
        let jhi = (i + w).min(m - 1);
        for j in jlo..=jhi {
            let cost = (da[i] - db[j]) * (da[i] - db[j]);
            let prior = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { dp[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { dp[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { dp[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            dp[i * m + j] = cost + prior;
        }
    }
    let total = dp[n * m - 1];
    debug_assert!(total.is_finite(), "band covers the corner by construction");
    let (mut i, mut j) = (n - 1, m - 1);
    let mut len = 1usize;
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { dp[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { dp[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { dp[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        len += 1;
    }
    Ok((total, len))
}

/// Path-length-normalized derivative DTW distance.
pub fn ddtw_distance(a: &[f64], b: &[f64], band: usize) -> Result<f64> {
    let (cost, len) = ddtw_cost_len(a, b, band)?;
    Ok(cost / len as f64)
}

// ---------------------------------------------------------------------------
// Similarity and medoid

/// Similarity in the configured backend: correlation directly, or a DTW
/// distance mapped through `exp(-d)` so larger is always more alike.
pub fn similarity_of(a: &[f64], b: &[f64], cfg: &PipelineConfig) -> Result<f64> {
    match cfg.similarity_backend {
        SimilarityBackend::NccMax => {
            if cfg.integer_ncc {
                ncc_max_integer(a, b)
            } else {
                ncc_max(a, b)
            }
        }
        SimilarityBackend::DdtwSakoeChiba => {
            Ok((-ddtw_distance(a, b, cfg.sakoe_chiba_band)?).exp())
        }
    }
}

fn pair_distance(a: &[f64], b: &[f64], cfg: &PipelineConfig) -> Result<f64> {
    match cfg.similarity_backend {
        SimilarityBackend::NccMax => {
            let r = if cfg.integer_ncc { ncc_max_integer(a, b)? } else { ncc_max(a, b)? };
            Ok(1.0 - r)
        }
        SimilarityBackend::DdtwSakoeChiba => ddtw_distance(a, b, cfg.sakoe_chiba_band),
    }
}

/// Index of the wave minimizing summed distance to the rest; ties go to the
/// earliest inserted.
pub fn medoid_of(waves: &[Vec<f64>], cfg: &PipelineConfig) -> Result<usize> {
    if waves.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let k = waves.len();
    if k == 1 {
        return Ok(0);
    }
    let mut dist = vec![0.0f64; k * k];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = pair_distance(&waves[i], &waves[j], cfg)?;
            dist[i * k + j] = d;
            dist[j * k + i] = d;
        }
    }
    let mut best = 0;
    let mut best_sum = f64::INFINITY;
    for i in 0..k {
        let sum: f64 = dist[i * k..(i + 1) * k].iter().sum();
        if sum < best_sum {
            best_sum = sum;
            best = i;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Wavelet buffer

/// Leaf-backed store of reference wavelets with a count cap and the shared
/// byte budget. When room runs out the oldest waves go first, never below
/// the retained minimum; with eviction off, over-budget pushes fail loudly
/// instead (the failure-mode harness depends on that).
#[derive(Debug)]
pub struct WaveletBuffer {
    store: HatStore,
    order: VecDeque<WaveHandle>,
    capacity: usize,
    min_retained: usize,
    eviction: bool,
}

impl WaveletBuffer {
    pub fn new(cfg: &PipelineConfig, accountant: BudgetAccountant) -> Self {
        WaveletBuffer {
            store: HatStore::new(
                cfg.hat_leaf_len,
                cfg.accounted_sample_bytes,
                accountant,
                "wavelets",
            ),
            order: VecDeque::new(),
            capacity: cfg.wavelet_capacity,
            min_retained: cfg.min_retained_waves,
            eviction: true,
        }
    }

    pub fn set_eviction(&mut self, on: bool) {
        self.eviction = on;
    }

    /// Store a wavelet, evicting oldest-first on either cap as needed.
    pub fn push(&mut self, samples: &[f64]) -> Result<()> {
        if self.order.len() >= self.capacity {
            if !self.eviction {
                return Err(Error::Capacity(format!("wavelet buffer full at {}", self.capacity)));
            }
            self.evict_oldest();
        }
        loop {
            match self.store.append_wave(samples) {
                Ok(h) => {
                    self.order.push_back(h);
                    return Ok(());
                }
                Err(e @ Error::BudgetExceeded { .. }) => {
                    if !self.eviction || self.order.len() <= self.min_retained {
                        return Err(e);
                    }
                    self.evict_oldest();
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn evict_oldest(&mut self) {
        if let Some(h) = self.order.pop_front() {
            self.store.release(h);
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Wave `i` in insertion order.
    pub fn wave(&self, i: usize) -> Option<Vec<f64>> {
        self.order.get(i).and_then(|&h| self.store.read(h))
    }

    pub fn waves(&self) -> Vec<Vec<f64>> {
        self.order.iter().map(|&h| self.store.read(h).expect("buffered wave readable")).collect()
    }

    pub fn medoid_index(&self, cfg: &PipelineConfig) -> Result<usize> {
        medoid_of(&self.waves(), cfg)
    }

    pub fn medoid_wave(&self, cfg: &PipelineConfig) -> Result<Vec<f64>> {
        let i = self.medoid_index(cfg)?;
        Ok(self.wave(i).expect("medoid index in range"))
    }

    /// Backing store, for slack and leaf diagnostics.
    pub fn store(&self) -> &HatStore {
        &self.store
    }
}

// ---------------------------------------------------------------------------
// Extraction

/// Shape features of one captured wavelet, with similarity taken against
/// `reference` (1.0 when there is nothing to compare against yet).
pub fn extract_features(
    samples: &[f64],
    reference: Option<&[f64]>,
    cfg: &PipelineConfig,
) -> Result<FeatureVector> {
    if samples.is_empty() {
        return Err(Error::MalformedWavelet("empty capture".into()));
    }
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for &v in samples {
        if !v.is_finite() {
            return Err(Error::NonFinite { feature: "amplitude", value: v });
        }
        max = max.max(v);
        min = min.min(v);
    }
    if samples[0] >= 0.0 {
        return Err(Error::MalformedWavelet("wavelet must lead with its negative half".into()));
    }
    let neg_run = samples.iter().take_while(|&&v| v < 0.0).count();
    let first_pos = samples
        .iter()
        .position(|&v| v > 0.0)
        .ok_or_else(|| Error::MalformedWavelet("no positive half-cycle".into()))?;
    let last_nonzero = samples.iter().rposition(|&v| v != 0.0).expect("positive sample exists");
    let similarity = match reference {
        Some(r) => similarity_of(samples, r, cfg)?,
        None => 1.0,
    };
    let fs = cfg.sampling_rate_hz;
    Ok(FeatureVector {
        similarity,
        max,
        min,
        p_durn: (last_nonzero - first_pos + 1) as f64 / fs,
        n_durn: neg_run as f64 / fs,
        t_durn: samples.len() as f64 / fs,
    })
}
