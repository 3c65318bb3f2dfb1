//! Dense confidence estimation for the world model.
//!
//! A probe head reads the denoiser's features and predicts, for every
//! latent element, the probability that the predicted velocity lies within
//! a threshold of the true one. Three variants exist: a fixed-threshold
//! binary head, a multi-class head over error bins, and a binary head
//! conditioned on the threshold. All are trained with strictly proper
//! scoring rules so their outputs are calibrated probabilities.

mod head;
mod thresholds;
mod train;

use serde::{Deserialize, Serialize};

pub use head::{probe_forward, ProbeHead, CHECKPOINT_KIND};
pub use thresholds::{
    accuracy_mask, distance, eps_to_eps_v, eps_to_eps_v_at, one_step_gain, BinStructure, ThresholdSet,
    SINGULAR_TOLERANCE,
};
pub use train::{
    probe_targets, train_joint, world_gradient_from_probe, JointStep, LogRow, TrainingLog, LOG_HEADER,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Binary accuracy at one fixed threshold.
    Fsc,
    /// Distribution over error bins.
    Mcc,
    /// Binary accuracy at a threshold given as input.
    #[default]
    CsBc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    Brier,
    Bce,
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub kind: HeadKind,
    pub score: ScoreKind,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Threshold of the fixed-scale head.
    pub fixed_eps_v: f64,
    /// Thresholds drawn per step for the continuous-scale head.
    pub thresholds_per_step: usize,
    /// Block probe-loss gradients from reaching the world model.
    pub stop_gradient: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            kind: HeadKind::CsBc,
            score: ScoreKind::Brier,
            width: 64,
            heads: 4,
            blocks: 2,
            fixed_eps_v: 0.5,
            thresholds_per_step: 4,
            stop_gradient: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.score) {
            (HeadKind::Mcc, ScoreKind::Ce) | (HeadKind::Fsc | HeadKind::CsBc, ScoreKind::Brier | ScoreKind::Bce) => {}
            (kind, score) => {
                return Err(Error::Config(format!(
                    "score {score:?} does not fit head {kind:?}: ce requires the multi-class head and vice versa"
                )))
            }
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("probe width {} must be divisible by {} heads", self.width, self.heads)));
        }
        if !(self.fixed_eps_v > 0.0) {
            return Err(Error::Config("fixed threshold must be positive".into()));
        }
        if self.kind == HeadKind::CsBc && !(1..=ThresholdSet::adaptive().len()).contains(&self.thresholds_per_step) {
            return Err(Error::Config(format!(
                "thresholds_per_step must lie in 1..={}",
                ThresholdSet::adaptive().len()
            )));
        }
        Ok(())
    }
}

/// Dense confidence for one video.
#[derive(Clone, Debug, PartialEq)]
pub enum ConfidenceMap {
    /// `(T, H, W, C)` probability that each element is accurate.
    Binary(Tensor),
    /// `(T, H, W, C, K + 1)` distribution over error bins.
    Simplex(Tensor),
}

impl ConfidenceMap {
    pub fn tensor(&self) -> &Tensor {
        match self {
            ConfidenceMap::Binary(t) | ConfidenceMap::Simplex(t) => t,
        }
    }
}

/// Probability mass of the bins lying entirely below `edge`, per element.
pub fn mcc_cumulative_confidence(simplex: &Tensor, bins: &BinStructure, edge: f64) -> Result<Tensor> {
    let j = bins.edge_index(edge)?;
    let shape = simplex.shape();
    if shape.last() != Some(&bins.bins()) {
        return Err(Error::InvalidArgument(format!(
            "simplex has {:?} classes, bin structure has {}",
            shape.last(),
            bins.bins()
        )));
    }
    let data = simplex
        .data()
        .chunks_exact(bins.bins())
        .map(|row| row[..j].iter().map(|&p| p as f64).sum::<f64>() as f32)
        .collect();
    Tensor::new(&shape[..shape.len() - 1], data)
}

/// Mean score of predictions against outcomes; lower is better.
///
/// Brier and bce take elementwise probabilities and binary `y` of the same
/// shape. Ce takes rows of class probabilities (last axis) and one-hot `y`.
pub fn proper_score(kind: ScoreKind, q: &Tensor, y: &Tensor) -> Result<f64> {
    q.check_same_shape(y)?;
    if q.numel() == 0 {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let pairs = q.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64, b as f64));
    match kind {
        ScoreKind::Brier | ScoreKind::Bce => {
            if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument("binary scores need outcomes in {0, 1}".into()));
            }
            let n = q.numel() as f64;
            Ok(match kind {
                ScoreKind::Brier => pairs.map(|(q, y)| (q - y).powi(2)).sum::<f64>() / n,
                _ => {
                    pairs
                        .map(|(q, y)| {
                            let q = q.clamp(1e-7, 1.0 - 1e-7);
                            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
                        })
                        .sum::<f64>()
                        / n
                }
            })
        }
        ScoreKind::Ce => {
            let k = *q.shape().last().unwrap();
            let one_hot = k > 0
                && y.data().chunks_exact(k).all(|r| {
                    r.iter().all(|&v| v == 0.0 || v == 1.0) && r.iter().filter(|&&v| v == 1.0).count() == 1
                });
            if !one_hot {
                return Err(Error::InvalidArgument("cross-entropy needs one-hot outcomes".into()));
            }
            let rows = (q.numel() / k) as f64;
            Ok(pairs.filter(|&(_, y)| y == 1.0).map(|(q, _)| -q.max(1e-30).ln()).sum::<f64>() / rows)
        }
    }
}

#[cfg(test)]
mod tests;
