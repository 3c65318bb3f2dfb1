use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::world::NoiseSchedule;

/// Below this the latent-to-velocity threshold conversion is treated as singular.
pub const SINGULAR_TOLERANCE: f64 = 1e-8;

/// Elementwise `|a - b|`.
pub fn distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| (x - y).abs())
}

/// 1 where `d <= eps`, else 0.
pub fn accuracy_mask(d: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("accuracy threshold must be positive, got {eps}")));
    }
    Ok(d.map(|v| if v as f64 <= eps { 1.0 } else { 0.0 }))
}

/// Magnitude of the factor mapping a velocity deviation at step `t` to the
/// deviation it causes in `x_{t-1}` after one deterministic update.
pub fn one_step_gain(alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    ((alpha_bar_t * (1.0 - alpha_bar_prev)).sqrt() - (alpha_bar_prev * (1.0 - alpha_bar_t)).sqrt()).abs()
}

/// Converts a latent-space threshold into the velocity-space threshold
/// that selects the same elements after one update from `t` to `t - 1`.
pub fn eps_to_eps_v(eps: f64, alpha_bar_t: f64, alpha_bar_prev: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("accuracy threshold must be positive, got {eps}")));
    }
    let gain = one_step_gain(alpha_bar_t, alpha_bar_prev);
    if !(gain > SINGULAR_TOLERANCE) {
        return Err(Error::Singular(gain));
    }
    Ok(eps / gain)
}

/// [`eps_to_eps_v`] with both retention values read from `sched`.
pub fn eps_to_eps_v_at(eps: f64, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", sched.steps())));
    }
    eps_to_eps_v(eps, sched.alpha_bar(t), sched.alpha_bar(t - 1))
}

/// Strictly increasing velocity-space thresholds in `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSet {
    values: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| {
        let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        lo * (1.0 - f) + hi * f
    })
}

impl ThresholdSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("threshold set is empty".into()));
        }
        if values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::Config("thresholds must lie in (0, 1]".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("thresholds must be strictly increasing".into()));
        }
        Ok(ThresholdSet { values })
    }

    /// 15 points on `[0.1, 0.3]` followed by 14 on `[0.3, 1.0]`, sharing
    /// 0.3: dense where errors concentrate, 28 values in total.
    pub fn adaptive() -> Self {
        let values = linspace(0.1, 0.3, 15).chain(linspace(0.3, 1.0, 14).skip(1)).collect();
        ThresholdSet { values }
    }

    /// `n` evenly spaced values on `[lo, hi]`.
    pub fn linear(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(linspace(lo, hi, n).collect())
    }

    /// Ten evenly spaced values on `[0.1, 1.0]`.
    pub fn evaluation() -> Self {
        Self::linear(0.1, 1.0, 10).unwrap()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl TryFrom<Vec<f64>> for ThresholdSet {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ThresholdSet> for Vec<f64> {
    fn from(set: ThresholdSet) -> Self {
        set.values
    }
}

/// Error bins `[0, e_1], (e_1, e_2], ..., (e_K, inf)` built from a
/// threshold set; bin `i` lies entirely below edge `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinStructure {
    edges: Vec<f64>,
}

impl BinStructure {
    pub fn new(thresholds: &ThresholdSet) -> Self {
        let mut edges = Vec::with_capacity(thresholds.len() + 2);
        edges.push(0.0);
        edges.extend_from_slice(thresholds.values());
        edges.push(f64::INFINITY);
        BinStructure { edges }
    }

    /// `{0, e_1, ..., e_K, inf}`.
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Index of the bin holding distance `d >= 0`; edges close bins from above.
    pub fn bin_of(&self, d: f64) -> usize {
        let inner = &self.edges[1..self.edges.len() - 1];
        inner.partition_point(|&e| e < d)
    }

    /// Position of `edge` among [`Self::edges`], matched to 1e-12.
    pub fn edge_index(&self, edge: f64) -> Result<usize> {
        self.edges
            .iter()
            .position(|&e| e == edge || (e - edge).abs() <= 1e-12)
            .ok_or_else(|| Error::InvalidArgument(format!("{edge} is not a bin edge")))
    }

    /// Edge closest to `value`, ignoring the two sentinels.
    pub fn nearest_edge(&self, value: f64) -> f64 {
        let inner = &self.edges[1..self.edges.len() - 1];
        inner.iter().copied().min_by(|a, b| (a - value).abs().total_cmp(&(b - value).abs())).unwrap()
    }
}
