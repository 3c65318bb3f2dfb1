use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, RolloutReadout};
use crate::calib::{
    aggregate_reports, mean_errors, shepherds_pi, CorrelationResult, ReliabilityAccumulator, ReliabilityReport, ReportMeta,
};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::probe::{
    accuracy_mask, distance, mcc_cumulative_confidence, ConfidenceMap, HeadKind, ProbeHead, ScoreKind,
};
use crate::viz::write_reliability_svg;
use crate::world::{sample_traced, Denoiser, LatentEpisode, TimestepMode, TrainBatch};

/// Thresholds a head is evaluated at: the fixed one for FSC, the whole
/// evaluation set for CS-BC, and the nearest bin edge of each for MCC.
pub fn head_thresholds(head: &ProbeHead, requested: &[f64]) -> Vec<f64> {
    match (head.cfg.kind, head.bins()) {
        (HeadKind::Fsc, _) => vec![head.cfg.fixed_eps_v],
        (HeadKind::Mcc, Some(bins)) => requested.iter().map(|&e| bins.nearest_edge(e)).collect(),
        _ => requested.to_vec(),
    }
}

/// Confidence that each element's velocity error is within each threshold
/// of `eps` (already passed through [`head_thresholds`]).
pub fn confidence_at(head: &ProbeHead, z: &Tensor, c: &Tensor, eps: &[f64]) -> Result<Vec<Tensor>> {
    match head.cfg.kind {
        HeadKind::CsBc => {
            let t: Vec<Option<f64>> = eps.iter().map(|&e| Some(e)).collect();
            Ok(head.confidence(z, c, &t)?.into_iter().map(|m| m.tensor().clone()).collect())
        }
        HeadKind::Fsc => {
            if let Some(&e) = eps.iter().find(|&&e| e != head.cfg.fixed_eps_v) {
                return Err(Error::InvalidArgument(format!(
                    "fixed-scale head answers only at {}, asked for {e}",
                    head.cfg.fixed_eps_v
                )));
            }
            let q = head.confidence(z, c, &[None])?.remove(0);
            Ok(vec![q.tensor().clone(); eps.len()])
        }
        HeadKind::Mcc => {
            let bins = head.bins().expect("multi-class head has bins");
            let ConfidenceMap::Simplex(simplex) = head.confidence(z, c, &[None])?.remove(0) else {
                unreachable!("multi-class head returns a simplex")
            };
            eps.iter().map(|&e| mcc_cumulative_confidence(&simplex, bins, e)).collect()
        }
    }
}

/// A deterministic rollout with the probe's confidence at every pass.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Final latent sample, `(T, H_l, W_l, C_l)`.
    pub sample: Tensor,
    /// Confidence at one threshold after each denoiser pass, first to last.
    pub passes: Vec<Tensor>,
}

impl Rollout {
    pub fn readout(&self, which: RolloutReadout) -> Tensor {
        match which {
            RolloutReadout::First => self.passes[0].clone(),
            RolloutReadout::Last => self.passes[self.passes.len() - 1].clone(),
            RolloutReadout::Mean => {
                let k = self.passes.len() as f32;
                let mut acc = Tensor::zeros(self.passes[0].shape());
                for p in &self.passes {
                    acc = acc.zip_map(p, |a, b| a + b).expect("passes share a shape");
                }
                acc.map(|v| v / k)
            }
        }
    }
}

pub fn rollout_confidence(model: &Denoiser, head: &ProbeHead, ep: &LatentEpisode, eps_v: f64, seed: u64) -> Result<Rollout> {
    let mut passes = Vec::new();
    let mut failure = None;
    let sample = sample_traced(model, &ep.first_frame(), &ep.actions, model.cfg.sample_steps, seed, |step| {
        if failure.is_some() {
            return;
        }
        match confidence_at(head, &step.prediction.z, &step.prediction.c, &[eps_v]) {
            Ok(mut q) => passes.push(q.remove(0)),
            Err(e) => failure = Some(e),
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(Rollout { sample, passes }),
    }
}

/// How the numbers in a [`CalibrationEval`] were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    /// Calibration pairs come from one-step velocity predictions at
    /// timesteps drawn as in training; rollouts feed only the correlation.
    pub calibration_path: String,
    pub draws_per_episode: usize,
    pub timestep_mode: TimestepMode,
    pub sample_steps: usize,
    pub correlation_readout: RolloutReadout,
    pub correlation_eps_v: f64,
    pub correlation_samples: usize,
    pub bootstrap: usize,
    /// The first frame is the clean conditioning frame and is excluded.
    pub frames_scored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEval {
    pub dataset: String,
    pub head: HeadKind,
    pub score: ScoreKind,
    pub episodes: usize,
    /// Velocity-space thresholds actually scored.
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<ReliabilityReport>,
    /// All pairs of every threshold pooled into one diagram.
    pub pooled: ReliabilityReport,
    /// Unweighted means of the per-threshold errors.
    pub mean_ece: f64,
    pub mean_mce: f64,
    pub correlation: Option<CorrelationResult>,
    /// Why the correlation is missing, when it is.
    pub correlation_note: Option<String>,
    /// Plug-in control whose confidence is the accuracy rate of its
    /// (threshold, timestep, channel) stratum, counted on the other half of
    /// the episodes.
    pub oracle: ReliabilityReport,
    /// Control that always answers 0.5.
    pub constant: ReliabilityReport,
    pub protocol: Protocol,
}

impl CalibrationEval {
    /// Mean confidence over every scored pair.
    pub fn mean_confidence(&self) -> f64 {
        self.pooled.mean_confidence()
    }
}

/// Per-episode sufficient statistics; merged in episode order.
struct Tally {
    per_threshold: Vec<ReliabilityAccumulator>,
    /// `(count, positives)` per `(threshold, timestep, channel)`.
    strata: Vec<[u64; 2]>,
    confidence: Vec<f32>,
    error: Vec<f32>,
}

struct Context<'a> {
    model: &'a Denoiser,
    head: &'a ProbeHead,
    cfg: &'a EvalConfig,
    mode: TimestepMode,
    thresholds: Vec<f64>,
    correlation_eps: f64,
    seed: u64,
}

impl Context<'_> {
    fn stratum(&self, k: usize, t: usize, ch: usize) -> usize {
        let c = self.model.cfg.latent_channels;
        (k * (self.model.cfg.diffusion_steps + 1) + t) * c + ch
    }

    fn strata_len(&self) -> usize {
        self.stratum(self.thresholds.len(), 0, 0)
    }

    fn episode(&self, ep: &LatentEpisode) -> Result<Tally> {
        let w = &self.model.cfg;
        let sched = w.schedule()?;
        let shape = w.latent_shape();
        let per_frame = w.sites() * w.latent_channels;
        let mut tally = Tally {
            per_threshold: (0..self.thresholds.len()).map(|_| ReliabilityAccumulator::new(self.cfg.bins)).collect::<Result<_>>()?,
            strata: vec![[0, 0]; self.strata_len()],
            confidence: Vec::new(),
            error: Vec::new(),
        };
        let root = Rng::new(self.seed).derive(ep.seed);
        let mut rng = root.derive(0);
        for _ in 0..self.cfg.draws_per_episode {
            let batch = TrainBatch::new(w, &sched, &[ep], self.mode, &mut rng)?;
            let x_t = batch.x_t.reshape(&shape)?;
            let pred = self.model.predict_velocity(&x_t, &ep.actions, &batch.timesteps)?;
            let d = distance(&pred.v_hat, &batch.v_star.reshape(&shape)?)?;
            let qs = confidence_at(self.head, &pred.z, &pred.c, &self.thresholds)?;
            for (k, (&eps, q)) in self.thresholds.iter().zip(&qs).enumerate() {
                let y = accuracy_mask(&d, eps)?;
                tally.per_threshold[k].extend(&q.data()[per_frame..], &y.data()[per_frame..])?;
                for (i, &yi) in y.data().iter().enumerate().skip(per_frame) {
                    let s = self.stratum(k, batch.timesteps[i / per_frame], i % w.latent_channels);
                    tally.strata[s][0] += 1;
                    tally.strata[s][1] += yi as u64;
                }
            }
        }
        let rollout = rollout_confidence(self.model, self.head, ep, self.correlation_eps, root.derive(1).seed())?;
        let q = rollout.readout(self.cfg.correlation_readout);
        let err = distance(&rollout.sample, &ep.latents)?;
        tally.confidence = q.data()[per_frame..].to_vec();
        tally.error = err.data()[per_frame..].to_vec();
        Ok(tally)
    }
}

fn head_name(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Fsc => "fsc",
        HeadKind::Mcc => "mcc",
        HeadKind::CsBc => "cs_bc",
    }
}

/// Runs the calibration and correlation protocol over `episodes`. Results
/// depend only on the episodes' own seeds, not on their position, except
/// for the two-fold split of the oracle control and the correlation
/// subsample.
pub fn evaluate(
    model: &Denoiser,
    head: &ProbeHead,
    episodes: &[LatentEpisode],
    cfg: &EvalConfig,
    mode: TimestepMode,
    seed: u64,
    dataset: &str,
) -> Result<CalibrationEval> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument(format!("no episodes to evaluate in {dataset}")));
    }
    let thresholds = head_thresholds(head, cfg.thresholds.values());
    let correlation_eps = head_thresholds(head, &[cfg.correlation_eps_v])[0];
    let ctx = Context { model, head, cfg, mode, thresholds, correlation_eps, seed };
    let tallies: Vec<Tally> = episodes.par_iter().map(|ep| ctx.episode(ep)).collect::<Result<_>>()?;

    let name = head_name(head.cfg.kind);
    let meta = |eps_v: Option<f64>, head: &str| ReportMeta { head: Some(head.into()), eps_v, dataset: dataset.into() };
    let mut per_threshold = Vec::with_capacity(ctx.thresholds.len());
    for (k, &eps) in ctx.thresholds.iter().enumerate() {
        let mut acc = ReliabilityAccumulator::new(cfg.bins)?;
        for t in &tallies {
            acc.merge(&t.per_threshold[k])?;
        }
        per_threshold.push(acc.report(meta(Some(eps), name))?);
    }
    let pooled = aggregate_reports(&per_threshold, meta(None, name))?;
    let (mean_ece, mean_mce) = mean_errors(&per_threshold)?;

    let (oracle, constant) = controls(&ctx, &tallies, meta(None, "oracle"), meta(None, "constant"))?;

    let mut conf = Vec::new();
    let mut err = Vec::new();
    for t in &tallies {
        conf.extend(t.confidence.iter().map(|&v| v as f64));
        err.extend(t.error.iter().map(|&v| v as f64));
    }
    let mut rng = Rng::new(seed).derive(u64::MAX);
    if cfg.correlation_samples > 0 && conf.len() > cfg.correlation_samples {
        let mut idx: Vec<usize> = (0..conf.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(cfg.correlation_samples);
        idx.sort_unstable();
        conf = idx.iter().map(|&i| conf[i]).collect();
        err = idx.iter().map(|&i| err[i]).collect();
    }
    let (correlation, correlation_note) = match shepherds_pi(&conf, &err, cfg.bootstrap, &mut rng) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };

    Ok(CalibrationEval {
        dataset: dataset.into(),
        head: head.cfg.kind,
        score: head.cfg.score,
        episodes: episodes.len(),
        thresholds: ctx.thresholds.clone(),
        per_threshold,
        pooled,
        mean_ece,
        mean_mce,
        correlation,
        correlation_note,
        oracle,
        constant,
        protocol: Protocol {
            calibration_path: "one-step velocity prediction at training-distribution timesteps".into(),
            draws_per_episode: cfg.draws_per_episode,
            timestep_mode: mode,
            sample_steps: model.cfg.sample_steps,
            correlation_readout: cfg.correlation_readout,
            correlation_eps_v: correlation_eps,
            correlation_samples: cfg.correlation_samples,
            bootstrap: cfg.bootstrap,
            frames_scored: model.cfg.frames - 1,
        },
    })
}

/// Cross-fitted stratified oracle and the constant one-half control.
fn controls(
    ctx: &Context<'_>,
    tallies: &[Tally],
    oracle_meta: ReportMeta,
    constant_meta: ReportMeta,
) -> Result<(ReliabilityReport, ReliabilityReport)> {
    let n = ctx.strata_len();
    let mut folds = [vec![[0u64; 2]; n], vec![[0u64; 2]; n]];
    for (i, t) in tallies.iter().enumerate() {
        for (dst, src) in folds[i % 2].iter_mut().zip(&t.strata) {
            dst[0] += src[0];
            dst[1] += src[1];
        }
    }
    let per_k = n / ctx.thresholds.len();
    let mut oracle = ReliabilityAccumulator::new(ctx.cfg.bins)?;
    for f in 0..2 {
        let (own, other) = (&folds[f], &folds[1 - f]);
        for k in 0..ctx.thresholds.len() {
            let range = k * per_k..(k + 1) * per_k;
            let (cnt, pos) = other[range.clone()].iter().fold((0, 0), |a, s| (a.0 + s[0], a.1 + s[1]));
            let fallback = if cnt > 0 { pos as f64 / cnt as f64 } else { 0.5 };
            for s in range {
                if own[s][0] == 0 {
                    continue;
                }
                let rate = if other[s][0] > 0 { other[s][1] as f64 / other[s][0] as f64 } else { fallback };
                oracle.add_group(rate, own[s][0], own[s][1])?;
            }
        }
    }
    let (cnt, pos) = folds.iter().flatten().fold((0, 0), |a, s| (a.0 + s[0], a.1 + s[1]));
    let mut constant = ReliabilityAccumulator::new(ctx.cfg.bins)?;
    constant.add_group(0.5, cnt, pos)?;
    Ok((oracle.report(oracle_meta)?, constant.report(constant_meta)?))
}

/// One CSV row per (model, threshold, dataset).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub eps_v: String,
    pub dataset: String,
    pub ece: f64,
    pub mce: f64,
    pub n: u64,
    pub coefficient: Option<f64>,
    pub p_value: Option<f64>,
}

pub fn summary_rows(eval: &CalibrationEval, model: &str) -> Vec<SummaryRow> {
    let row = |eps_v: String, r: &ReliabilityReport, model: &str| SummaryRow {
        model: model.into(),
        eps_v,
        dataset: eval.dataset.clone(),
        ece: r.ece,
        mce: r.mce,
        n: r.n,
        coefficient: None,
        p_value: None,
    };
    let mut rows: Vec<SummaryRow> = eval
        .thresholds
        .iter()
        .zip(&eval.per_threshold)
        .map(|(&e, r)| {
            let mut row = row(format!("{e:.4}"), r, model);
            if e == eval.protocol.correlation_eps_v {
                row.coefficient = eval.correlation.map(|c| c.coefficient);
                row.p_value = eval.correlation.map(|c| c.p_value);
            }
            row
        })
        .collect();
    rows.push(row("pooled".into(), &eval.pooled, model));
    rows.push(SummaryRow {
        eps_v: "mean".into(),
        ece: eval.mean_ece,
        mce: eval.mean_mce,
        n: eval.per_threshold.iter().map(|r| r.n).sum(),
        ..row(String::new(), &eval.pooled, model)
    });
    rows.push(row("pooled".into(), &eval.oracle, "oracle"));
    rows.push(row("pooled".into(), &eval.constant, "constant"));
    rows
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes `reports.json`, `summary.csv` and the reliability diagrams.
pub fn write_eval(dir: &Path, eval: &CalibrationEval, model: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("reports.json"), serde_json::to_string_pretty(eval)?)?;
    write_csv(&dir.join("summary.csv"), &summary_rows(eval, model))?;
    write_reliability_svg(&eval.pooled, &dir.join("reliability_pooled.svg"))?;
    write_reliability_svg(&eval.oracle, &dir.join("reliability_oracle.svg"))?;
    for (k, r) in eval.per_threshold.iter().enumerate() {
        write_reliability_svg(r, &dir.join(format!("reliability_eps{k:02}.svg")))?;
    }
    Ok(())
}
