use serde::{Deserialize, Serialize};

use super::packed::PackedRows;
use crate::codes::{prevalence, CodeMatrix};
use crate::error::{Error, Result};

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let (mu, mv) = (u.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        suv += (a - mu) * (b - mv);
        suu += (a - mu) * (a - mu);
        svv += (b - mv) * (b - mv);
    }
    (suv / (suu * svv).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(Error::TooFewSamples("spearman needs at least 2 values".into()));
    }
    let constant = |x: &[f64]| x.iter().all(|&a| a == x[0]);
    if constant(u) || constant(v) {
        return Err(Error::DegenerateInput("constant vector has no ranking".into()));
    }
    Ok(pearson(&average_ranks(u), &average_ranks(v)))
}

/// Population (`1/n`) covariance matrix of the codes, row-major `N x N`.
pub fn covariance(m: &CodeMatrix) -> Result<Vec<f64>> {
    let p = prevalence(m)?;
    let n = m.n_codes();
    let mut co = vec![0u64; n * n];
    let mut present = Vec::with_capacity(n);
    for row in m.rows() {
        present.clear();
        present.extend(row.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i));
        for &i in &present {
            for &j in &present {
                co[i * n + j] += 1;
            }
        }
    }
    let r = m.n_records() as f64;
    Ok((0..n * n).map(|idx| co[idx] as f64 / r - p[idx / n] * p[idx % n]).collect())
}

fn correlation_from(cov: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = cov[i * n + i] * cov[j * n + j];
            // codes with zero variance correlate with nothing, themselves included
            out[i * n + j] = if d > 0.0 { cov[i * n + j] / d.sqrt() } else { 0.0 };
        }
    }
    out
}

/// Frobenius distance between two flattened square matrices.
pub fn covariance_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} entries", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmdMode {
    #[default]
    Covariance,
    Correlation,
}

/// `‖Cov(a) − Cov(b)‖_F`.
pub fn cmd(a: &CodeMatrix, b: &CodeMatrix) -> Result<f64> {
    cmd_with(a, b, CmdMode::Covariance)
}

pub fn cmd_with(a: &CodeMatrix, b: &CodeMatrix, mode: CmdMode) -> Result<f64> {
    if a.n_codes() != b.n_codes() {
        return Err(Error::ShapeMismatch(format!("{} vs {} codes", a.n_codes(), b.n_codes())));
    }
    let (ca, cb) = (covariance(a)?, covariance(b)?);
    match mode {
        CmdMode::Covariance => covariance_distance(&ca, &cb),
        CmdMode::Correlation => {
            let n = a.n_codes();
            covariance_distance(&correlation_from(&ca, n), &correlation_from(&cb, n))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdConfig {
    /// Number of bandwidths `m`.
    pub kernels: usize,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self { kernels: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdValue {
    pub value: f64,
    /// Set when every pooled sample is identical; `value` is then 0.
    pub zero_bandwidth: bool,
}

/// Histograms of squared distances between binary rows; squared L2 distance
/// equals Hamming distance, so values are integers in `0..=N`.
struct DistanceHistograms {
    /// Ordered pairs of distinct records within `a`.
    aa: Vec<u64>,
    bb: Vec<u64>,
    ab: Vec<u64>,
    na: f64,
    nb: f64,
}

impl DistanceHistograms {
    fn new(a: &CodeMatrix, b: &CodeMatrix) -> Result<Self> {
        if a.n_codes() != b.n_codes() {
            return Err(Error::ShapeMismatch(format!("{} vs {} codes", a.n_codes(), b.n_codes())));
        }
        if a.n_records() < 2 || b.n_records() < 2 {
            return Err(Error::TooFewSamples("mmd needs at least 2 records per set".into()));
        }
        let (pa, pb) = (PackedRows::new(a), PackedRows::new(b));
        let n = a.n_codes();
        let within = |p: &PackedRows| {
            let mut h = vec![0u64; n + 1];
            for i in 0..p.len() {
                for j in i + 1..p.len() {
                    h[PackedRows::hamming(p.row(i), p.row(j)) as usize] += 2;
                }
            }
            h
        };
        let mut ab = vec![0u64; n + 1];
        for i in 0..pa.len() {
            for j in 0..pb.len() {
                ab[PackedRows::hamming(pa.row(i), pb.row(j)) as usize] += 1;
            }
        }
        Ok(Self {
            aa: within(&pa),
            bb: within(&pb),
            ab,
            na: a.n_records() as f64,
            nb: b.n_records() as f64,
        })
    }

    /// Mean L2 distance over distinct unordered pairs of the pooled samples.
    fn pooled_mean_distance(&self) -> f64 {
        let (mut sum, mut pairs) = (0.0, 0u64);
        for d in 0..self.ab.len() {
            let c = self.aa[d] / 2 + self.bb[d] / 2 + self.ab[d];
            sum += c as f64 * (d as f64).sqrt();
            pairs += c;
        }
        sum / pairs as f64
    }

    fn estimate(&self, h: f64) -> f64 {
        let k = |d: usize| (-(d as f64) / (2.0 * h * h)).exp();
        let sum = |hist: &[u64]| hist.iter().enumerate().map(|(d, &c)| c as f64 * k(d)).sum::<f64>();
        sum(&self.aa) / (self.na * (self.na - 1.0)) + sum(&self.bb) / (self.nb * (self.nb - 1.0))
            - sum(&self.ab) / (self.na * self.nb)
    }
}

/// Single-kernel estimator
/// `S_aa/(n_a(n_a−1)) + S_bb/(n_b(n_b−1)) − S_ab/(n_a n_b)` with the Gaussian
/// kernel `exp(−‖x−y‖²/(2h²))`, where `S_aa` and `S_bb` sum over ordered
/// pairs of distinct records. May be negative.
pub fn mmd_at_bandwidth(a: &CodeMatrix, b: &CodeMatrix, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")));
    }
    Ok(DistanceHistograms::new(a, b)?.estimate(h))
}

/// Mean of [`mmd_at_bandwidth`] over `h_γ = Avg · 2^(γ − m/2)`, `γ = 1..m`,
/// with `Avg` the mean L2 distance over distinct pairs of the pooled samples.
pub fn mmd(a: &CodeMatrix, b: &CodeMatrix, cfg: &MmdConfig) -> Result<MmdValue> {
    if cfg.kernels == 0 {
        return Err(Error::InvalidConfig("mmd needs at least one kernel".into()));
    }
    let hist = DistanceHistograms::new(a, b)?;
    let avg = hist.pooled_mean_distance();
    if avg == 0.0 {
        log::warn!("mmd: all pooled samples identical, returning 0");
        return Ok(MmdValue {
            value: 0.0,
            zero_bandwidth: true,
        });
    }
    let m = cfg.kernels as f64;
    let total: f64 = (1..=cfg.kernels)
        .map(|gamma| hist.estimate(avg * 2f64.powf(gamma as f64 - m / 2.0)))
        .sum();
    Ok(MmdValue {
        value: total / m,
        zero_bandwidth: false,
    })
}

/// Total variation between histograms of per-record positive-code counts
/// over `bins` equal-width bins on `[lo, hi)`; counts outside the range go to
/// the boundary bins.
pub fn mcad(a: &CodeMatrix, b: &CodeMatrix, bins: usize, range: (f64, f64)) -> Result<f64> {
    if a.n_codes() != b.n_codes() {
        return Err(Error::ShapeMismatch(format!("{} vs {} codes", a.n_codes(), b.n_codes())));
    }
    let (lo, hi) = range;
    if bins == 0 || !(hi > lo) {
        return Err(Error::InvalidConfig(format!("mcad needs bins >= 1 and hi > lo, got {bins} on ({lo}, {hi})")));
    }
    if a.n_records() == 0 || b.n_records() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let hist = |m: &CodeMatrix| {
        let mut h = vec![0.0; bins];
        for c in m.positive_counts() {
            let pos = ((c as f64 - lo) / (hi - lo) * bins as f64).floor();
            h[pos.clamp(0.0, (bins - 1) as f64) as usize] += 1.0;
        }
        let total = m.n_records() as f64;
        h.iter_mut().for_each(|v| *v /= total);
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>())
}
