//! Action-conditioned latent video diffusion.
//!
//! The denoiser predicts the velocity `v = sqrt(ab) eps - sqrt(1 - ab) x0`
//! for every latent element given the noisy video, the action trajectory and
//! per-frame timesteps. Frame 0 is the clean conditioning frame: it enters
//! every pass at timestep 0, is excluded from the loss, and is clamped to
//! its clean latent while sampling.

mod denoiser;
mod diffusion;
mod schedule;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use denoiser::{action_features, Denoiser, DenoiserConfig, DenoiserPass, Prediction, ACTION_FEATURES};
pub use diffusion::{
    ddim_step, ddim_step_to, diffusion_loss, forward_noise, predicted_x0, sample_timesteps, velocity_target,
    TimestepMode,
};
pub use schedule::NoiseSchedule;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, clip_global_norm, CosineSchedule, Rng, Sgd, Tape, Tensor};
use crate::synth::{Dataset, OodAxis, Split};

pub const CHECKPOINT_KIND: &str = "denoiser";

/// One episode in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEpisode {
    /// `(T, H_l, W_l, C_l)`.
    pub latents: Tensor,
    /// `(T, 2)`.
    pub actions: Tensor,
    pub seed: u64,
    pub ood_axis: OodAxis,
}

impl LatentEpisode {
    /// Clean latent of frame 0, `(H_l, W_l, C_l)`.
    pub fn first_frame(&self) -> Tensor {
        let s = &self.latents.shape()[1..];
        let n: usize = s.iter().product();
        Tensor::new(s, self.latents.data()[..n].to_vec()).unwrap()
    }
}

/// Encodes every episode of `ds` belonging to `split` (all when `None`).
pub fn encode_episodes(codec: &Codec, ds: &Dataset, split: Option<Split>) -> Result<Vec<LatentEpisode>> {
    ds.episodes
        .iter()
        .zip(&ds.manifest.entries)
        .filter(|(_, e)| split.is_none_or(|s| e.split == s))
        .map(|(ep, _)| {
            Ok(LatentEpisode {
                latents: codec.encode(&ep.frames)?,
                actions: ep.actions.clone(),
                seed: ep.seed,
                ood_axis: ep.ood_axis,
            })
        })
        .collect()
}

/// A noised training batch, rows ordered `(video, frame, site)`.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub batch: usize,
    /// `[B * T * S, C_l]`.
    pub x_t: Tensor,
    pub v_star: Tensor,
    /// `B * T`; frame 0 of every video is at timestep 0.
    pub timesteps: Vec<usize>,
    pub action_feats: Vec<f32>,
    /// One weight per latent element: 0 on the conditioning frame, else 1.
    pub weights: Vec<f32>,
}

impl TrainBatch {
    pub fn new(
        cfg: &DenoiserConfig,
        sched: &NoiseSchedule,
        episodes: &[&LatentEpisode],
        mode: TimestepMode,
        rng: &mut Rng,
    ) -> Result<TrainBatch> {
        let shape = cfg.latent_shape();
        let per_frame = cfg.sites() * cfg.latent_channels;
        let mut x_t = Vec::with_capacity(episodes.len() * cfg.frames * per_frame);
        let mut v_star = Vec::with_capacity(x_t.capacity());
        let mut timesteps = Vec::with_capacity(episodes.len() * cfg.frames);
        let mut action_feats = Vec::new();
        let mut weights = Vec::with_capacity(x_t.capacity());
        for ep in episodes {
            if ep.latents.shape() != shape {
                return Err(Error::shape(&shape, ep.latents.shape()));
            }
            let mut t = sample_timesteps(mode, cfg.frames, sched, rng);
            t[0] = 0;
            let noise = Tensor::randn(&shape, 1.0, rng);
            x_t.extend_from_slice(forward_noise(&ep.latents, &t, &noise, sched)?.data());
            v_star.extend_from_slice(velocity_target(&ep.latents, &noise, &t, sched)?.data());
            action_feats.extend(action_features(&ep.actions, cfg.frames)?);
            weights.extend((0..cfg.frames).flat_map(|f| std::iter::repeat_n(if f == 0 { 0.0 } else { 1.0 }, per_frame)));
            timesteps.extend(t);
        }
        let rows = episodes.len() * cfg.tokens();
        Ok(TrainBatch {
            batch: episodes.len(),
            x_t: Tensor::new(&[rows, cfg.latent_channels], x_t)?,
            v_star: Tensor::new(&[rows, cfg.latent_channels], v_star)?,
            timesteps,
            action_feats,
            weights,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Base learning rate of the cosine schedule.
    pub lr: f32,
    pub momentum: f32,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    pub timestep_mode: TimestepMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: 3000,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            timestep_mode: TimestepMode::DiffusionForcing,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { base_lr: self.lr, total_steps: self.steps }
    }
}

/// Draws `batch` episode indices without replacement within an epoch.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl EpisodeSampler {
    pub fn new(n: usize, rng: Rng) -> Self {
        EpisodeSampler { order: (0..n).collect(), pos: n, rng }
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains the denoiser alone on the diffusion loss; returns per-step losses.
pub fn train_denoiser(model: &mut Denoiser, episodes: &[LatentEpisode], opt: &OptimConfig, seed: u64) -> Result<Vec<f64>> {
    opt.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no training episodes".into()));
    }
    let sched = model.cfg.schedule()?;
    let root = Rng::new(seed);
    let mut sampler = EpisodeSampler::new(episodes.len(), root.derive(0));
    let mut noise_rng = root.derive(1);
    let lr = opt.schedule();
    let mut sgd = Sgd::new(opt.momentum);
    let mut losses = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let picks: Vec<&LatentEpisode> = sampler.next_batch(opt.batch_size).into_iter().map(|i| &episodes[i]).collect();
        let b = TrainBatch::new(&model.cfg, &sched, &picks, opt.timestep_mode, &mut noise_rng)?;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, true);
        let x = tape.constant(b.x_t.clone());
        let pass = model.forward(&mut tape, &p, x, &b.action_feats, &b.timesteps, b.batch);
        let loss = tape.mse(pass.v_hat, &b.v_star, Some(&b.weights));
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, detail: format!("diffusion loss {value}") });
        }
        let mut grads = tape.backward(loss)?;
        let mut g = p.collect(&mut grads, &model.store);
        if opt.clip_norm > 0.0 {
            clip_global_norm(&mut g, opt.clip_norm);
        }
        sgd.step(model.store.values_mut(), &g, lr.lr(step))?;
        losses.push(value);
    }
    Ok(losses)
}

/// What a sampler exposes at each reverse step.
#[derive(Debug)]
pub struct RolloutStep<'a> {
    pub index: usize,
    /// Timesteps of this pass (frame 0 at 0).
    pub timesteps: &'a [usize],
    pub x_t: &'a Tensor,
    pub prediction: &'a Prediction,
}

/// Deterministic DDIM rollout from seeded noise with frame 0 held at
/// `first_frame` (`(H_l, W_l, C_l)`); `visit` sees every denoiser pass.
pub fn sample_traced(
    model: &Denoiser,
    first_frame: &Tensor,
    actions: &Tensor,
    steps: usize,
    seed: u64,
    mut visit: impl FnMut(RolloutStep<'_>),
) -> Result<Tensor> {
    let cfg = &model.cfg;
    let shape = cfg.latent_shape();
    if first_frame.shape() != &shape[1..] {
        return Err(Error::shape(&shape[1..], first_frame.shape()));
    }
    let sched = cfg.schedule()?;
    let taus = sched.reverse_timesteps(steps)?;
    let mut x = Tensor::randn(&shape, 1.0, &mut Rng::new(seed));
    let n0 = first_frame.numel();
    x.data_mut()[..n0].copy_from_slice(first_frame.data());
    for (k, pair) in taus.windows(2).enumerate() {
        let mut t = vec![pair[0]; cfg.frames];
        let mut t_prev = vec![pair[1]; cfg.frames];
        t[0] = 0;
        t_prev[0] = 0;
        let pred = model.predict_velocity(&x, actions, &t)?;
        visit(RolloutStep { index: k, timesteps: &t, x_t: &x, prediction: &pred });
        x = ddim_step_to(&x, &pred.v_hat, &t, &t_prev, &sched)?;
        x.data_mut()[..n0].copy_from_slice(first_frame.data());
        if !x.is_finite() {
            return Err(Error::Divergence { step: k, detail: "non-finite latent during sampling".into() });
        }
    }
    Ok(x)
}

/// [`sample_traced`] without a visitor.
pub fn sample(model: &Denoiser, first_frame: &Tensor, actions: &Tensor, steps: usize, seed: u64) -> Result<Tensor> {
    sample_traced(model, first_frame, actions, steps, seed, |_| {})
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    cfg: DenoiserConfig,
    seed: u64,
    steps_trained: usize,
}

impl Denoiser {
    pub fn save(&self, dir: &Path, name: &str, seed: u64, steps_trained: usize) -> Result<()> {
        let header = Header { cfg: self.cfg.clone(), seed, steps_trained };
        checkpoint::save(dir, name, CHECKPOINT_KIND, &header, &self.store)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Denoiser> {
        let header: Header = checkpoint::load_header(dir, name, CHECKPOINT_KIND)?;
        let mut model = Denoiser::new(&header.cfg, &mut Rng::new(header.seed))?;
        checkpoint::load_weights(dir, name, &mut model.store)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
