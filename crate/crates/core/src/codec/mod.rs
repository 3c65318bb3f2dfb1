//! Patch autoencoder between pixel videos and the latent space.
//!
//! Each non-overlapping `patch x patch` RGB block is encoded independently
//! (a stride-`patch` convolution written as a per-patch perceptron) into
//! `latent_channels` values, and decoded the same way. There is no temporal
//! compression: a `(T, H, W, 3)` video maps to `(T, H/p, W/p, C)`.
//!
//! Latents are standardized per channel with statistics measured on the
//! training frames, so that diffusion noise of unit variance is on the same
//! scale as the signal.

mod colormap;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use colormap::{Basis, LatentColorMap, KNOTS};

use crate::error::{Error, Result};
use crate::numerics::layers::Linear;
use crate::numerics::{checkpoint, Adam, CosineSchedule, ParamStore, Rng, Tape, Tensor};
use crate::synth::{Dataset, Split};

pub const CHECKPOINT_KIND: &str = "codec";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub frames_per_batch: usize,
    pub lr: f32,
    /// Share of each batch replaced by random solid-colour frames, so that
    /// saturated colours outside the scene palette still reconstruct.
    pub solid_color_frac: f32,
    /// Held-out PSNR a codec must reach before it may drive a colour map.
    pub psnr_floor: f64,
    /// Relative increase of an epoch-average loss tolerated before training
    /// aborts as non-monotone.
    pub monotone_tolerance: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            height: 32,
            width: 32,
            patch: 4,
            latent_channels: 4,
            hidden: 128,
            epochs: 6,
            frames_per_batch: 32,
            lr: 3e-3,
            solid_color_frac: 0.125,
            psnr_floor: 22.0,
            monotone_tolerance: 0.02,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.latent_channels == 0 || self.hidden == 0 || self.frames_per_batch == 0 {
            return Err(Error::Config("codec widths and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.solid_color_frac) {
            return Err(Error::Config("solid_color_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn latent_height(&self) -> usize {
        self.height / self.patch
    }

    pub fn latent_width(&self) -> usize {
        self.width / self.patch
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Latent shape `(T, H_l, W_l, C_l)` for `frames` frames.
    pub fn latent_shape(&self, frames: usize) -> [usize; 4] {
        [frames, self.latent_height(), self.latent_width(), self.latent_channels]
    }
}

/// Training record stored with the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    /// Held-out reconstruction PSNR in dB.
    pub psnr: f64,
    /// Largest per-pixel absolute reconstruction error over all training and
    /// held-out frames.
    pub max_abs_error: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    cfg: CodecConfig,
    report: CodecReport,
    latent_mean: Vec<f32>,
    latent_std: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub report: CodecReport,
    store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    latent_mean: Vec<f32>,
    latent_std: Vec<f32>,
}

/// `(T, H, W, 3)` pixels to `(T * H/p * W/p, p * p * 3)` rows, each row a
/// patch in `(row, column, channel)` order.
pub fn patchify(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::Shape { expected: vec![0, patch, patch, 3], got: s.to_vec() });
    }
    let (t, h, w) = (s[0], s[1], s[2]);
    let (hl, wl) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let src = frames.data();
    let mut out = vec![0.0; frames.numel()];
    for f in 0..t {
        for py in 0..hl {
            for px in 0..wl {
                let row = (f * hl + py) * wl + px;
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let from = ((f * h + y) * w + px * patch) * 3;
                    let to = row * dim + dy * patch * 3;
                    out[to..to + patch * 3].copy_from_slice(&src[from..from + patch * 3]);
                }
            }
        }
    }
    Tensor::new(&[t * hl * wl, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(rows: &Tensor, frames: usize, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    let (hl, wl) = (height / patch, width / patch);
    let dim = patch * patch * 3;
    let expected = [frames * hl * wl, dim];
    if rows.shape() != expected {
        return Err(Error::shape(&expected, rows.shape()));
    }
    let src = rows.data();
    let mut out = vec![0.0; rows.numel()];
    for f in 0..frames {
        for py in 0..hl {
            for px in 0..wl {
                let row = (f * hl + py) * wl + px;
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let to = ((f * height + y) * width + px * patch) * 3;
                    let from = row * dim + dy * patch * 3;
                    out[to..to + patch * 3].copy_from_slice(&src[from..from + patch * 3]);
                }
            }
        }
    }
    Tensor::new(&[frames, height, width, 3], out)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    10.0 * (1.0 / mse.max(1e-10)).log10()
}

fn solid_frame(cfg: &CodecConfig, color: [f32; 3]) -> Vec<f32> {
    color.iter().copied().cycle().take(cfg.height * cfg.width * 3).collect()
}

/// Random solid colour; half of the draws sit on a corner of the RGB cube.
fn random_solid_color(rng: &mut Rng) -> [f32; 3] {
    if rng.bernoulli(0.5) {
        [0, 1, 2].map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
    } else {
        [rng.uniform(), rng.uniform(), rng.uniform()]
    }
}

impl Codec {
    /// Freshly initialized codec. The decoder output layer starts at zero
    /// with its bias at `pixel_mean`, so the initial reconstruction is the
    /// mean patch.
    pub fn new(cfg: &CodecConfig, pixel_mean: [f32; 3], rng: &mut Rng) -> Result<Codec> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.patch_dim();
        let enc1 = Linear::new(&mut store, "enc1", d, cfg.hidden, 1.0, rng);
        let enc2 = Linear::new(&mut store, "enc2", cfg.hidden, cfg.latent_channels, 1.0, rng);
        let dec1 = Linear::new(&mut store, "dec1", cfg.latent_channels, cfg.hidden, 1.0, rng);
        let dec2 = Linear::zeros(&mut store, "dec2", cfg.hidden, d);
        let bias: Vec<f32> = pixel_mean.iter().copied().cycle().take(d).collect();
        *store.get_mut(dec2.b) = Tensor::new(&[d], bias)?;
        Ok(Codec {
            cfg: cfg.clone(),
            report: CodecReport::default(),
            store,
            enc1,
            enc2,
            dec1,
            dec2,
            latent_mean: vec![0.0; cfg.latent_channels],
            latent_std: vec![1.0; cfg.latent_channels],
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn check_frames(&self, frames: &Tensor) -> Result<usize> {
        let s = frames.shape();
        let expected = [s.first().copied().unwrap_or(0), self.cfg.height, self.cfg.width, 3];
        if s != expected || s[0] == 0 {
            return Err(Error::shape(&expected, s));
        }
        Ok(s[0])
    }

    fn check_latent(&self, latent: &Tensor) -> Result<usize> {
        let s = latent.shape();
        let expected = self.cfg.latent_shape(s.first().copied().unwrap_or(0));
        if s != expected || s[0] == 0 {
            return Err(Error::shape(&expected, s));
        }
        Ok(s[0])
    }

    fn encode_rows(&self, rows: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(rows.clone());
        let h = self.enc1.forward(&mut tape, &p, x);
        let h = tape.gelu(h);
        let z = self.enc2.forward(&mut tape, &p, h);
        tape.value(z).clone()
    }

    fn decode_rows(&self, raw: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let z = tape.constant(raw.clone());
        let h = self.dec1.forward(&mut tape, &p, z);
        let h = tape.gelu(h);
        let y = self.dec2.forward(&mut tape, &p, h);
        tape.value(y).clone()
    }

    /// `(T, H, W, 3)` pixels to standardized `(T, H_l, W_l, C_l)` latents.
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let t = self.check_frames(frames)?;
        let raw = self.encode_rows(&patchify(frames, self.cfg.patch)?);
        let c = self.cfg.latent_channels;
        let mut data = raw.into_data();
        for row in data.chunks_exact_mut(c) {
            for k in 0..c {
                row[k] = (row[k] - self.latent_mean[k]) / self.latent_std[k];
            }
        }
        Tensor::new(&self.cfg.latent_shape(t), data)
    }

    /// Standardized latents back to pixels, clipped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let t = self.check_latent(latent)?;
        let c = self.cfg.latent_channels;
        let mut raw = latent.data().to_vec();
        for row in raw.chunks_exact_mut(c) {
            for k in 0..c {
                row[k] = row[k] * self.latent_std[k] + self.latent_mean[k];
            }
        }
        let raw = Tensor::new(&[raw.len() / c, c], raw)?;
        let rows = self.decode_rows(&raw).map(|v| v.clamp(0.0, 1.0));
        unpatchify(&rows, t, self.cfg.height, self.cfg.width, self.cfg.patch)
    }

    /// Encodes `frames` constant-colour frames of `color`.
    pub fn encode_solid(&self, color: [f32; 3], frames: usize) -> Result<Tensor> {
        let data: Vec<f32> = (0..frames).flat_map(|_| solid_frame(&self.cfg, color)).collect();
        self.encode(&Tensor::new(&[frames, self.cfg.height, self.cfg.width, 3], data)?)
    }

    /// Mean squared reconstruction error and largest absolute error.
    pub fn reconstruction_error(&self, frames: &Tensor) -> Result<(f64, f64)> {
        let rec = self.decode(&self.encode(frames)?)?;
        let (mut se, mut max) = (0.0f64, 0.0f64);
        for (&a, &b) in rec.data().iter().zip(frames.data()) {
            let d = (a - b) as f64;
            se += d * d;
            max = max.max(d.abs());
        }
        Ok((se / frames.numel() as f64, max))
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        let header = Header {
            cfg: self.cfg.clone(),
            report: self.report.clone(),
            latent_mean: self.latent_mean.clone(),
            latent_std: self.latent_std.clone(),
        };
        checkpoint::save(dir, name, CHECKPOINT_KIND, &header, &self.store)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Codec> {
        let header: Header = checkpoint::load_header(dir, name, CHECKPOINT_KIND)?;
        let mut codec = Codec::new(&header.cfg, [0.0; 3], &mut Rng::new(0))?;
        checkpoint::load_weights(dir, name, &mut codec.store)?;
        if header.latent_mean.len() != header.cfg.latent_channels || header.latent_std.len() != header.cfg.latent_channels {
            return Err(Error::Format("latent statistics do not match channel count".into()));
        }
        codec.report = header.report;
        codec.latent_mean = header.latent_mean;
        codec.latent_std = header.latent_std;
        Ok(codec)
    }
}

/// Frames of one split, as `(episode, frame)` pairs.
fn frame_index(ds: &Dataset, split: Split) -> Vec<(usize, usize)> {
    ds.manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == split)
        .flat_map(|(i, _)| (0..ds.episodes[i].len()).map(move |t| (i, t)))
        .collect()
}

fn gather_frames(cfg: &CodecConfig, ds: &Dataset, index: &[(usize, usize)]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(index.len() * cfg.height * cfg.width * 3);
    for &(e, t) in index {
        data.extend_from_slice(ds.episodes[e].frame(t));
    }
    Tensor::new(&[index.len(), cfg.height, cfg.width, 3], data)
}

/// Trains a codec on the training split of `ds` and evaluates it on the
/// held-out split (the training split when there is none).
pub fn train_codec(ds: &Dataset, cfg: &CodecConfig, seed: u64) -> Result<Codec> {
    cfg.validate()?;
    let wc = &ds.manifest.cfg;
    if (wc.height, wc.width) != (cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "dataset frames are {}x{}, codec expects {}x{}",
            wc.height, wc.width, cfg.height, cfg.width
        )));
    }
    let train = frame_index(ds, Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidArgument("codec training needs a nonempty training split".into()));
    }
    let mut held_out = frame_index(ds, Split::Test);
    if held_out.is_empty() {
        held_out = train.clone();
    }

    let root = Rng::new(seed);
    let mut pixel_mean = [0.0f64; 3];
    for &(e, t) in &train {
        for p in ds.episodes[e].frame(t).chunks_exact(3) {
            for k in 0..3 {
                pixel_mean[k] += p[k] as f64;
            }
        }
    }
    let count = (train.len() * cfg.height * cfg.width) as f64;
    let pixel_mean = pixel_mean.map(|s| (s / count) as f32);
    let mut codec = Codec::new(cfg, pixel_mean, &mut root.derive(0))?;

    let mut order_rng = root.derive(1);
    let mut solid_rng = root.derive(2);
    let n_solid = ((cfg.frames_per_batch as f32 * cfg.solid_color_frac).round() as usize).min(cfg.frames_per_batch - 1);
    let n_real = cfg.frames_per_batch - n_solid;
    let steps_per_epoch = train.len().div_ceil(n_real);
    let schedule = CosineSchedule { base_lr: cfg.lr, total_steps: cfg.epochs * steps_per_epoch };
    let mut opt = Adam::new();
    let mut order = train.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(n_real) {
            let mut frames = gather_frames(cfg, ds, chunk)?.into_data();
            for _ in 0..n_solid {
                frames.extend(solid_frame(cfg, random_solid_color(&mut solid_rng)));
            }
            let nf = chunk.len() + n_solid;
            let frames = Tensor::new(&[nf, cfg.height, cfg.width, 3], frames)?;
            let target = patchify(&frames, cfg.patch)?;

            let mut tape = Tape::new();
            let p = codec.store.bind(&mut tape, true);
            let x = tape.constant(target.clone());
            let h = codec.enc1.forward(&mut tape, &p, x);
            let h = tape.gelu(h);
            let z = codec.enc2.forward(&mut tape, &p, h);
            let h = codec.dec1.forward(&mut tape, &p, z);
            let h = tape.gelu(h);
            let y = codec.dec2.forward(&mut tape, &p, h);
            let loss = tape.mse(y, &target, None);
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step, detail: format!("codec loss {loss_value} in epoch {epoch}") });
            }
            let mut grads = tape.backward(loss)?;
            let grads = p.collect(&mut grads, &codec.store);
            opt.step(codec.store.values_mut(), &grads, schedule.lr(step))?;
            loss_sum += loss_value;
            step += 1;
        }
        let avg = loss_sum / steps_per_epoch as f64;
        if let Some(&prev) = codec.report.epoch_losses.last() {
            if avg > prev * (1.0 + cfg.monotone_tolerance) {
                codec.report.epoch_losses.push(avg);
                return Err(Error::Divergence {
                    step,
                    detail: format!("codec epoch losses stopped decreasing: {:?}", codec.report.epoch_losses),
                });
            }
        }
        codec.report.epoch_losses.push(avg);
    }

    // Per-channel latent statistics over up to 1024 training frames.
    let mut stat_rng = root.derive(3);
    let mut sample = train.clone();
    stat_rng.shuffle(&mut sample);
    sample.truncate(1024);
    let raw = codec.encode_rows(&patchify(&gather_frames(cfg, ds, &sample)?, cfg.patch)?);
    let c = cfg.latent_channels;
    let rows = raw.numel() / c;
    for k in 0..c {
        let vals = raw.data().iter().skip(k).step_by(c).map(|&v| v as f64);
        let mean = vals.clone().sum::<f64>() / rows as f64;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        codec.latent_mean[k] = mean as f32;
        codec.latent_std[k] = (var.sqrt() as f32).max(1e-3);
    }

    let held = gather_frames(cfg, ds, &held_out)?;
    let (mse, mut max_abs) = codec.reconstruction_error(&held)?;
    for chunk in train.chunks(1024) {
        let (_, m) = codec.reconstruction_error(&gather_frames(cfg, ds, chunk)?)?;
        max_abs = max_abs.max(m);
    }
    codec.report.seed = seed;
    codec.report.psnr = psnr_from_mse(mse);
    codec.report.max_abs_error = max_abs;
    Ok(codec)
}
