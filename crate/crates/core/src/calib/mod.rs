//! Calibration metrics: binned reliability statistics with expected and
//! maximum calibration error, and a robust rank correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, OrderStatistics, RankTieBreaker};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DEFAULT_BINS: usize = 20;

/// Bootstrapped squared Mahalanobis distances at or above this mark a point as an outlier.
pub const OUTLIER_CUTOFF: f64 = 6.0;

/// Sufficient statistics of one confidence bin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub confidence_sum: f64,
    pub positives: f64,
}

impl BinStats {
    pub fn mean_confidence(&self) -> Option<f64> {
        (self.count > 0).then(|| self.confidence_sum / self.count as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.positives / self.count as f64)
    }

    pub fn gap(&self) -> Option<f64> {
        Some((self.accuracy()? - self.mean_confidence()?).abs())
    }
}

/// What a report was computed on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub head: Option<String>,
    pub eps_v: Option<f64>,
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<BinStats>,
    pub n: u64,
    pub ece: f64,
    pub mce: f64,
    pub meta: ReportMeta,
}

/// Streaming binning of `(confidence, outcome)` pairs; merging two
/// accumulators equals binning the concatenated pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityAccumulator {
    bins: Vec<BinStats>,
}

impl ReliabilityAccumulator {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("need at least one bin".into()));
        }
        let bins = (0..m)
            .map(|i| BinStats { lower: i as f64 / m as f64, upper: (i + 1) as f64 / m as f64, ..BinStats::default() })
            .collect();
        Ok(ReliabilityAccumulator { bins })
    }

    pub fn m(&self) -> usize {
        self.bins.len()
    }

    /// Bins are `[lower, upper)` except the last, which also holds 1.
    pub fn bin_index(&self, q: f64) -> usize {
        self.bins[1..].partition_point(|b| b.lower <= q)
    }

    pub fn add(&mut self, q: f64, y: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidArgument(format!("confidence {q} outside [0, 1]")));
        }
        if y != 0.0 && y != 1.0 {
            return Err(Error::InvalidArgument(format!("outcome {y} is not binary")));
        }
        let i = self.bin_index(q);
        let b = &mut self.bins[i];
        b.count += 1;
        b.confidence_sum += q;
        b.positives += y;
        Ok(())
    }

    /// Adds `count` pairs sharing confidence `q`, `positives` of them with outcome 1.
    pub fn add_group(&mut self, q: f64, count: u64, positives: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidArgument(format!("confidence {q} outside [0, 1]")));
        }
        if positives > count {
            return Err(Error::InvalidArgument(format!("{positives} positives among {count} pairs")));
        }
        let i = self.bin_index(q);
        let b = &mut self.bins[i];
        b.count += count;
        b.confidence_sum += q * count as f64;
        b.positives += positives as f64;
        Ok(())
    }

    pub fn extend(&mut self, q: &[f32], y: &[f32]) -> Result<()> {
        if q.len() != y.len() {
            return Err(Error::InvalidArgument(format!("{} confidences for {} outcomes", q.len(), y.len())));
        }
        q.iter().zip(y).try_for_each(|(&a, &b)| self.add(a as f64, b as f64))
    }

    pub fn merge(&mut self, other: &ReliabilityAccumulator) -> Result<()> {
        if other.m() != self.m() {
            return Err(Error::InvalidArgument(format!("cannot merge {} bins into {}", other.m(), self.m())));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.count += b.count;
            a.confidence_sum += b.confidence_sum;
            a.positives += b.positives;
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn report(&self, meta: ReportMeta) -> Result<ReliabilityReport> {
        ReliabilityReport::from_bins(self.bins.clone(), meta)
    }
}

impl ReliabilityReport {
    fn from_bins(bins: Vec<BinStats>, meta: ReportMeta) -> Result<Self> {
        let n: u64 = bins.iter().map(|b| b.count).sum();
        if n == 0 {
            return Err(Error::InvalidArgument("no confidence/outcome pairs".into()));
        }
        let ece = bins.iter().filter_map(|b| Some(b.count as f64 / n as f64 * b.gap()?)).sum();
        let mce = bins.iter().filter_map(BinStats::gap).fold(0.0, f64::max);
        Ok(ReliabilityReport { bins, n, ece, mce, meta })
    }

    pub fn m(&self) -> usize {
        self.bins.len()
    }

    pub fn accumulator(&self) -> ReliabilityAccumulator {
        ReliabilityAccumulator { bins: self.bins.clone() }
    }

    /// Mean confidence over every pair.
    pub fn mean_confidence(&self) -> f64 {
        self.bins.iter().map(|b| b.confidence_sum).sum::<f64>() / self.n as f64
    }

    /// Fraction of positive outcomes over every pair.
    pub fn accuracy(&self) -> f64 {
        self.bins.iter().map(|b| b.positives).sum::<f64>() / self.n as f64
    }
}

/// Reliability statistics of `(confidence, outcome)` pairs over `m` equal-width bins.
pub fn reliability(q: &[f32], y: &[f32], m: usize, meta: ReportMeta) -> Result<ReliabilityReport> {
    let mut acc = ReliabilityAccumulator::new(m)?;
    acc.extend(q, y)?;
    acc.report(meta)
}

/// Pools the pairs behind several reports and re-bins them.
pub fn aggregate_reports(reports: &[ReliabilityReport], meta: ReportMeta) -> Result<ReliabilityReport> {
    let first = reports.first().ok_or_else(|| Error::InvalidArgument("no reports to aggregate".into()))?;
    let mut acc = first.accumulator();
    for r in &reports[1..] {
        acc.merge(&r.accumulator())?;
    }
    acc.report(meta)
}

/// Unweighted mean of per-report ECE and MCE.
pub fn mean_errors(reports: &[ReliabilityReport]) -> Result<(f64, f64)> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to average".into()));
    }
    let k = reports.len() as f64;
    Ok((reports.iter().map(|r| r.ece).sum::<f64>() / k, reports.iter().map(|r| r.mce).sum::<f64>() / k))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub coefficient: f64,
    /// Two-sided p-value of the rank correlation, doubled and capped at 1.
    pub p_value: f64,
    pub retained: usize,
    pub outliers: usize,
}

/// Spearman rank correlation with average ranks for ties, and its
/// two-sided p-value from the t approximation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!("{} xs for {} ys", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("rank correlation needs at least 3 points, got {n}")));
    }
    let rx = Data::new(xs.to_vec()).ranks(RankTieBreaker::Average);
    let ry = Data::new(ys.to_vec()).ranks(RankTieBreaker::Average);
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("rank correlation of a constant variable".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if 1.0 - r * r <= 0.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok((r, p.clamp(0.0, 1.0)))
}

/// Mean and covariance `(mx, my, sxx, sxy, syy)` of the indexed points.
fn moments(xs: &[f64], ys: &[f64], idx: impl Iterator<Item = usize> + Clone) -> (f64, f64, f64, f64, f64) {
    let n = idx.clone().count() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for i in idx.clone() {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for i in idx {
        let (dx, dy) = (xs[i] - mx, ys[i] - my);
        a += dx * dx;
        b += dx * dy;
        c += dy * dy;
    }
    let d = (n - 1.0).max(1.0);
    (mx, my, a / d, b / d, c / d)
}

/// Squared Mahalanobis distance of `(dx, dy)` under covariance
/// `[[a, b], [b, c]]`. A rank-one covariance uses its pseudo-inverse, so
/// points off its support line are infinitely far.
fn mahalanobis2(dx: f64, dy: f64, a: f64, b: f64, c: f64) -> f64 {
    let det = a * c - b * b;
    let scale = a + c;
    if scale <= 0.0 {
        return if dx == 0.0 && dy == 0.0 { 0.0 } else { f64::INFINITY };
    }
    if det > 1e-12 * a * c && det > 0.0 {
        return (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
    }
    let (ux, uy) = if a >= c { (a, b) } else { (b, c) };
    let norm = (ux * ux + uy * uy).sqrt();
    let (ux, uy) = (ux / norm, uy / norm);
    let along = dx * ux + dy * uy;
    let (ox, oy) = (dx - along * ux, dy - along * uy);
    if ox * ox + oy * oy > 1e-12 * (dx * dx + dy * dy + scale) {
        f64::INFINITY
    } else {
        along * along / scale
    }
}

/// Shepherd's pi: drops points whose median squared Mahalanobis distance
/// over `bootstrap` resampled mean/covariance estimates is at least
/// [`OUTLIER_CUTOFF`], then takes the Spearman correlation of the rest.
pub fn shepherds_pi(xs: &[f64], ys: &[f64], bootstrap: usize, rng: &mut Rng) -> Result<CorrelationResult> {
    let n = xs.len();
    if ys.len() != n {
        return Err(Error::InvalidArgument(format!("{n} xs for {} ys", ys.len())));
    }
    if n < 10 {
        return Err(Error::InvalidArgument(format!("Shepherd's pi needs at least 10 points, got {n}")));
    }
    if bootstrap == 0 {
        return Err(Error::InvalidArgument("need at least one bootstrap resample".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let (_, _, a, _, c) = moments(xs, ys, 0..n);
    if a + c == 0.0 {
        return Err(Error::InvalidArgument("degenerate covariance: all points coincide".into()));
    }
    let mut dist = vec![0.0f64; n * bootstrap];
    let mut sample = vec![0usize; n];
    for b in 0..bootstrap {
        sample.iter_mut().for_each(|s| *s = rng.below(n));
        let (mx, my, sa, sb, sc) = moments(xs, ys, sample.iter().copied());
        for i in 0..n {
            dist[i * bootstrap + b] = mahalanobis2(xs[i] - mx, ys[i] - my, sa, sb, sc);
        }
    }
    let mut keep = Vec::with_capacity(n);
    for (i, row) in dist.chunks_exact_mut(bootstrap).enumerate() {
        if median(row) < OUTLIER_CUTOFF {
            keep.push(i);
        }
    }
    let kx: Vec<f64> = keep.iter().map(|&i| xs[i]).collect();
    let ky: Vec<f64> = keep.iter().map(|&i| ys[i]).collect();
    let (coefficient, p) = spearman(&kx, &ky)?;
    Ok(CorrelationResult { coefficient, p_value: (2.0 * p).min(1.0), retained: keep.len(), outliers: n - keep.len() })
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    let (_, &mut hi, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0
    }
}

#[cfg(test)]
mod tests;
