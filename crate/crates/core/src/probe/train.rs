use std::fmt::Write as _;

use super::{accuracy_mask, distance, HeadKind, ProbeHead, ThresholdSet};
use crate::error::{Error, Result};
use crate::numerics::{clip_global_norm, Bound, Rng, Sgd, Tape, Tensor, Var};
use crate::world::{Denoiser, EpisodeSampler, LatentEpisode, OptimConfig, TimestepMode, TrainBatch};

pub const LOG_HEADER: &str = "step,L_theta,L_phi,lr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_theta: f64,
    pub loss_phi: f64,
    pub lr: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.loss_theta, r.loss_phi, r.lr);
        }
        s
    }

    /// Mean of both losses over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> (f64, f64) {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        let k = tail.len().max(1) as f64;
        (tail.iter().map(|r| r.loss_theta).sum::<f64>() / k, tail.iter().map(|r| r.loss_phi).sum::<f64>() / k)
    }
}

/// Training targets for `head` from per-element velocity distances:
/// accuracy labels at `eps_v`, or bin indices for the multi-class head.
pub fn probe_targets(head: &ProbeHead, d: &Tensor, eps_v: Option<f64>) -> Result<Vec<f32>> {
    match (head.bins(), eps_v) {
        (Some(bins), None) => Ok(d.data().iter().map(|&v| bins.bin_of(v as f64) as f32).collect()),
        (None, Some(e)) => Ok(accuracy_mask(d, e)?.into_data()),
        _ => Err(Error::InvalidArgument("threshold does not match the head kind".into())),
    }
}

/// One noised batch plus the thresholds its probe loss is taken at.
#[derive(Clone, Debug)]
pub struct JointStep {
    pub batch: TrainBatch,
    /// The fixed threshold, fresh draws from the adaptive set, or a single
    /// `None` for the multi-class head.
    pub thresholds: Vec<Option<f64>>,
}

impl JointStep {
    pub fn sample(
        model: &Denoiser,
        head: &ProbeHead,
        episodes: &[&LatentEpisode],
        mode: TimestepMode,
        rng: &mut Rng,
    ) -> Result<JointStep> {
        let sched = model.cfg.schedule()?;
        let batch = TrainBatch::new(&model.cfg, &sched, episodes, mode, rng)?;
        let thresholds = match head.cfg.kind {
            HeadKind::Fsc => vec![Some(head.cfg.fixed_eps_v)],
            HeadKind::Mcc => vec![None],
            HeadKind::CsBc => {
                let set = ThresholdSet::adaptive();
                let mut idx: Vec<usize> = (0..set.len()).collect();
                rng.shuffle(&mut idx);
                idx[..head.cfg.thresholds_per_step].iter().map(|&i| Some(set.values()[i])).collect()
            }
        };
        Ok(JointStep { batch, thresholds })
    }

    /// Records both losses on `tape`. The probe sees `z` and `c` through a
    /// stop-gradient when `stop_gradient` is set; its labels are constants
    /// computed from the current velocity error.
    pub fn losses(
        &self,
        model: &Denoiser,
        head: &ProbeHead,
        tape: &mut Tape,
        pw: &Bound,
        ph: &Bound,
        stop_gradient: bool,
    ) -> Result<(Var, Var)> {
        let b = &self.batch;
        let x = tape.constant(b.x_t.clone());
        let pass = model.forward(tape, pw, x, &b.action_feats, &b.timesteps, b.batch);
        let loss_theta = tape.mse(pass.v_hat, &b.v_star, Some(&b.weights));
        let d = distance(tape.value(pass.v_hat), &b.v_star)?;
        let (z, c) = if stop_gradient {
            (tape.stop_gradient(pass.z), tape.stop_gradient(pass.c))
        } else {
            (pass.z, pass.c)
        };
        let h = head.trunk(tape, ph, z, c, &pass.layout);
        let mut total: Option<Var> = None;
        for &eps in &self.thresholds {
            let logits = head.readout(tape, ph, h, c, eps.filter(|_| head.cfg.kind == HeadKind::CsBc), &pass.layout);
            let targets = probe_targets(head, &d, eps)?;
            let l = head.score_loss(tape, logits, &targets, &b.weights);
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l),
            });
        }
        let loss_phi = tape.scale(total.unwrap(), 1.0 / self.thresholds.len() as f32);
        Ok((loss_theta, loss_phi))
    }
}

fn check_pair(model: &Denoiser, head: &ProbeHead) -> Result<()> {
    let (a, b) = (&model.cfg, &head.world);
    if a.latent_shape() != b.latent_shape() || a.width != b.width {
        return Err(Error::Config("probe head was built for a different denoiser geometry".into()));
    }
    Ok(())
}

/// Largest absolute gradient that the probe loss alone puts on any
/// world-model weight.
pub fn world_gradient_from_probe(model: &Denoiser, head: &ProbeHead, step: &JointStep, stop_gradient: bool) -> Result<f64> {
    check_pair(model, head)?;
    let mut tape = Tape::new();
    let pw = model.store.bind(&mut tape, true);
    let ph = head.store.bind(&mut tape, true);
    let (_, loss_phi) = step.losses(model, head, &mut tape, &pw, &ph, stop_gradient)?;
    let mut grads = tape.backward(loss_phi)?;
    let g = pw.collect(&mut grads, &model.store);
    Ok(g.iter().flat_map(|t| t.data().iter()).fold(0.0f64, |m, &v| m.max(v.abs() as f64)))
}

/// Optimizes `L_theta + L_phi` jointly with momentum SGD on a cosine
/// schedule and a shared global gradient clip. `on_step` sees every row
/// as it is logged.
pub fn train_joint(
    model: &mut Denoiser,
    head: &mut ProbeHead,
    episodes: &[LatentEpisode],
    opt: &OptimConfig,
    seed: u64,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainingLog> {
    opt.validate()?;
    check_pair(model, head)?;
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no training episodes".into()));
    }
    let root = Rng::new(seed);
    let mut sampler = EpisodeSampler::new(episodes.len(), root.derive(0));
    let mut rng = root.derive(1);
    let schedule = opt.schedule();
    let (mut sgd_w, mut sgd_h) = (Sgd::new(opt.momentum), Sgd::new(opt.momentum));
    let stop_gradient = head.cfg.stop_gradient;
    let mut log = TrainingLog::default();
    for step in 0..opt.steps {
        let picks: Vec<&LatentEpisode> = sampler.next_batch(opt.batch_size).into_iter().map(|i| &episodes[i]).collect();
        let js = JointStep::sample(model, head, &picks, opt.timestep_mode, &mut rng)?;
        let mut tape = Tape::new();
        let pw = model.store.bind(&mut tape, true);
        let ph = head.store.bind(&mut tape, true);
        let (lt, lp) = js.losses(model, head, &mut tape, &pw, &ph, stop_gradient)?;
        let (vt, vp) = (tape.value(lt).data()[0] as f64, tape.value(lp).data()[0] as f64);
        if !(vt.is_finite() && vp.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("losses {vt} and {vp}") });
        }
        let total = tape.add(lt, lp);
        let mut grads = tape.backward(total)?;
        let mut g = pw.collect(&mut grads, &model.store);
        let nw = g.len();
        g.extend(ph.collect(&mut grads, &head.store));
        if opt.clip_norm > 0.0 {
            clip_global_norm(&mut g, opt.clip_norm);
        }
        let gh = g.split_off(nw);
        let lr = schedule.lr(step);
        sgd_w.step(model.store.values_mut(), &g, lr)?;
        sgd_h.step(head.store.values_mut(), &gh, lr)?;
        let row = LogRow { step, loss_theta: vt, loss_phi: vp, lr };
        on_step(&row);
        log.rows.push(row);
    }
    Ok(log)
}
