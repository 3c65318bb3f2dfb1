use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::layers::{sinusoidal_embedding, LayerNorm, Linear, SpaceTimeBlock, VideoLayout};
use crate::numerics::{Bound, ParamStore, Rng, Tape, Tensor, Var};

/// Features fed to the action perceptron for each frame: the action that
/// led into the frame and the cumulative displacement since frame 0.
pub const ACTION_FEATURES: usize = 4;
const DISPLACEMENT_SCALE: f32 = 0.125;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    pub action_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse steps used when sampling.
    pub sample_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            frames: 8,
            latent_height: 8,
            latent_width: 8,
            latent_channels: 4,
            action_dim: 2,
            width: 128,
            heads: 4,
            blocks: 4,
            diffusion_steps: 50,
            beta_start: 0.002,
            beta_end: 0.4,
            sample_steps: 10,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.latent_height == 0 || self.latent_width == 0 || self.latent_channels == 0 {
            return Err(Error::Config("denoiser geometry must be nonempty with at least 2 frames".into()));
        }
        if self.action_dim != 2 {
            return Err(Error::Config(format!("action dimension must be 2, got {}", self.action_dim)));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!("width {} must be even and divisible by {} heads", self.width, self.heads)));
        }
        if self.sample_steps == 0 || self.sample_steps > self.diffusion_steps {
            return Err(Error::Config(format!(
                "sample_steps must lie in 1..={}, got {}",
                self.diffusion_steps, self.sample_steps
            )));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn sites(&self) -> usize {
        self.latent_height * self.latent_width
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.sites()
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.latent_height, self.latent_width, self.latent_channels]
    }
}

/// Tape handles produced by one denoiser pass over a batch.
#[derive(Clone, Debug)]
pub struct DenoiserPass {
    /// `[B * T * S, C_l]`.
    pub v_hat: Var,
    /// Penultimate features, `[B * T * S, width]`.
    pub z: Var,
    /// Conditioning, `[B * T, width]`.
    pub c: Var,
    pub layout: VideoLayout,
}

/// Concrete outputs for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `(T, H_l, W_l, C_l)`.
    pub v_hat: Tensor,
    /// `(T * H_l * W_l, width)`.
    pub z: Tensor,
    /// `(T, width)`.
    pub c: Tensor,
}

/// Transformer over latent site tokens, conditioned per frame on the sum
/// of an action embedding and a timestep embedding.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    token_in: Linear,
    pos_space: crate::numerics::ParamId,
    pos_time: crate::numerics::ParamId,
    act1: Linear,
    act2: Linear,
    time1: Linear,
    time2: Linear,
    cond: Vec<Linear>,
    blocks: Vec<SpaceTimeBlock>,
    ln_out: LayerNorm,
    out: Linear,
}

/// Per-frame action features, `[T, ACTION_FEATURES]`.
pub fn action_features(actions: &Tensor, frames: usize) -> Result<Vec<f32>> {
    if actions.shape() != [frames, 2] {
        return Err(Error::shape(&[frames, 2], actions.shape()));
    }
    let a = actions.data();
    let mut out = Vec::with_capacity(frames * ACTION_FEATURES);
    let (mut cx, mut cy) = (0.0f32, 0.0f32);
    for t in 0..frames {
        let (ix, iy) = if t == 0 { (0.0, 0.0) } else { (a[2 * (t - 1)], a[2 * (t - 1) + 1]) };
        cx += ix;
        cy += iy;
        out.extend_from_slice(&[ix, iy, cx * DISPLACEMENT_SCALE, cy * DISPLACEMENT_SCALE]);
    }
    Ok(out)
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, rng: &mut Rng) -> Result<Denoiser> {
        cfg.validate()?;
        let w = cfg.width;
        let mut store = ParamStore::new();
        let token_in = Linear::new(&mut store, "token_in", cfg.latent_channels, w, 1.0, rng);
        let pos_space = store.add("pos_space", Tensor::randn(&[cfg.sites(), w], 0.1, rng));
        let pos_time = store.add("pos_time", Tensor::randn(&[cfg.frames, w], 0.1, rng));
        let act1 = Linear::new(&mut store, "act1", ACTION_FEATURES, w, 1.0, rng);
        let act2 = Linear::new(&mut store, "act2", w, w, 1.0, rng);
        let time1 = Linear::new(&mut store, "time1", w, w, 1.0, rng);
        let time2 = Linear::new(&mut store, "time2", w, w, 1.0, rng);
        let mut cond = Vec::new();
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            cond.push(Linear::new(&mut store, &format!("cond{b}"), w, w, 0.5, rng));
            blocks.push(SpaceTimeBlock::new(&mut store, &format!("block{b}"), w, cfg.heads, rng));
        }
        let ln_out = LayerNorm::new(&mut store, "ln_out", w);
        let out = Linear::new(&mut store, "out", w, cfg.latent_channels, 0.1, rng);
        Ok(Denoiser {
            cfg: cfg.clone(),
            store,
            token_in,
            pos_space,
            pos_time,
            act1,
            act2,
            time1,
            time2,
            cond,
            blocks,
            ln_out,
            out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Runs the network on a batch of `batch` videos.
    ///
    /// * `x_t`: `[B * T * S, C_l]` noisy latents, frame-major per video
    /// * `action_feats`: `B * T * ACTION_FEATURES` values from [`action_features`]
    /// * `timesteps`: `B * T` per-frame timesteps
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_t: Var,
        action_feats: &[f32],
        timesteps: &[usize],
        batch: usize,
    ) -> DenoiserPass {
        let cfg = &self.cfg;
        let w = cfg.width;
        let layout = VideoLayout::new(batch, cfg.frames, cfg.sites());
        assert_eq!(timesteps.len(), batch * cfg.frames, "denoiser: timestep count");
        assert_eq!(action_feats.len(), batch * cfg.frames * ACTION_FEATURES, "denoiser: action feature count");

        let feats = tape.constant(Tensor::new(&[batch * cfg.frames, ACTION_FEATURES], action_feats.to_vec()).unwrap());
        let a = self.act1.forward(tape, p, feats);
        let a = tape.gelu(a);
        let a = self.act2.forward(tape, p, a);
        let temb: Vec<f32> = timesteps.iter().flat_map(|&t| sinusoidal_embedding(t as f32, w, 1000.0)).collect();
        let temb = tape.constant(Tensor::new(&[batch * cfg.frames, w], temb).unwrap());
        let e = self.time1.forward(tape, p, temb);
        let e = tape.gelu(e);
        let e = self.time2.forward(tape, p, e);
        let c = tape.add(a, e);

        let frame_rows = layout.frame_index();
        let site_rows: Vec<usize> = (0..layout.rows()).map(|r| r % cfg.sites()).collect();
        let time_rows: Vec<usize> = frame_rows.iter().map(|&r| r % cfg.frames).collect();
        let h = self.token_in.forward(tape, p, x_t);
        let ps = tape.gather_rows(p.var(self.pos_space), &site_rows);
        let pt = tape.gather_rows(p.var(self.pos_time), &time_rows);
        let h = tape.add(h, ps);
        let mut h = tape.add(h, pt);
        for (block, cond) in self.blocks.iter().zip(&self.cond) {
            let cb = cond.forward(tape, p, c);
            let cb = tape.gather_rows(cb, &frame_rows);
            h = tape.add(h, cb);
            h = block.forward(tape, p, h, &layout);
        }
        let z = self.ln_out.forward(tape, p, h);
        let v_hat = self.out.forward(tape, p, z);
        DenoiserPass { v_hat, z, c, layout }
    }

    fn check_video(&self, x: &Tensor) -> Result<()> {
        let expected = self.cfg.latent_shape();
        if x.shape() != expected {
            return Err(Error::shape(&expected, x.shape()));
        }
        Ok(())
    }

    /// Velocity, penultimate features and conditioning for one video.
    pub fn predict_velocity(&self, x_t: &Tensor, actions: &Tensor, t: &[usize]) -> Result<Prediction> {
        self.check_video(x_t)?;
        let cfg = &self.cfg;
        if t.len() != cfg.frames {
            return Err(Error::InvalidArgument(format!("{} timesteps for {} frames", t.len(), cfg.frames)));
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti > cfg.diffusion_steps) {
            return Err(Error::InvalidArgument(format!("timestep {bad} outside 0..={}", cfg.diffusion_steps)));
        }
        let feats = action_features(actions, cfg.frames)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(x_t.clone().reshape(&[cfg.tokens(), cfg.latent_channels])?);
        let pass = self.forward(&mut tape, &p, x, &feats, t, 1);
        Ok(Prediction {
            v_hat: tape.value(pass.v_hat).clone().reshape(&cfg.latent_shape())?,
            z: tape.value(pass.z).clone(),
            c: tape.value(pass.c).clone(),
        })
    }
}
