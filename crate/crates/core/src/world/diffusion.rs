//! Closed-form pieces of the velocity-parameterized diffusion process. All
//! functions act frame-wise: the leading axis of every tensor is time, and
//! `t[f]` is the diffusion timestep of frame `f`.

use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepMode {
    /// One timestep shared by every frame.
    Shared,
    /// Independent timestep per frame.
    #[default]
    DiffusionForcing,
}

fn per_frame(x: &Tensor, t: &[usize], sched: &NoiseSchedule) -> Result<usize> {
    let frames = x.shape().first().copied().unwrap_or(0);
    if frames == 0 || t.len() != frames {
        return Err(Error::InvalidArgument(format!("{} timesteps for {frames} frames", t.len())));
    }
    for &ti in t {
        sched.check(ti)?;
    }
    Ok(x.numel() / frames)
}

/// Applies `f(frame, a, b) -> out` over two same-shaped tensors frame by frame.
fn framewise(
    a: &Tensor,
    b: &Tensor,
    t: &[usize],
    sched: &NoiseSchedule,
    f: impl Fn(usize, f32, f32) -> f32,
) -> Result<Tensor> {
    a.check_same_shape(b)?;
    let per = per_frame(a, t, sched)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| f(t[i / per], x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`. `t = 0` returns `x0`.
pub fn forward_noise(x0: &Tensor, t: &[usize], noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    framewise(x0, noise, t, sched, |ti, x, e| {
        let ab = sched.alpha_bar(ti);
        (ab.sqrt() * x as f64 + (1.0 - ab).sqrt() * e as f64) as f32
    })
}

/// `v* = sqrt(ab_t) noise - sqrt(1 - ab_t) x0`.
pub fn velocity_target(x0: &Tensor, noise: &Tensor, t: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    framewise(x0, noise, t, sched, |ti, x, e| {
        let ab = sched.alpha_bar(ti);
        (ab.sqrt() * e as f64 - (1.0 - ab).sqrt() * x as f64) as f32
    })
}

/// Clean-signal estimate `sqrt(ab_t) x_t - sqrt(1 - ab_t) v`.
pub fn predicted_x0(x_t: &Tensor, v: &Tensor, t: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    framewise(x_t, v, t, sched, |ti, x, v| {
        let ab = sched.alpha_bar(ti);
        (ab.sqrt() * x as f64 - (1.0 - ab).sqrt() * v as f64) as f32
    })
}

/// Deterministic DDIM update from `t` to `t_prev` per frame. Frames with
/// `t == t_prev` are left unchanged.
pub fn ddim_step_to(x_t: &Tensor, v: &Tensor, t: &[usize], t_prev: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    x_t.check_same_shape(v)?;
    let per = per_frame(x_t, t, sched)?;
    per_frame(x_t, t_prev, sched)?;
    for (&a, &b) in t.iter().zip(t_prev) {
        if a == b {
            continue;
        }
        if a == 0 || b > a {
            return Err(Error::InvalidArgument(format!("cannot step from t={a} to t={b}")));
        }
        if sched.alpha_bar(a) >= 1.0 {
            return Err(Error::Singular(1.0 - sched.alpha_bar(a)));
        }
    }
    let data = x_t
        .data()
        .iter()
        .zip(v.data())
        .enumerate()
        .map(|(i, (&x, &v))| {
            let (a, b) = (t[i / per], t_prev[i / per]);
            if a == b {
                return x;
            }
            let (ab, ab_prev) = (sched.alpha_bar(a), sched.alpha_bar(b));
            let (x, v) = (x as f64, v as f64);
            let x0 = ab.sqrt() * x - (1.0 - ab).sqrt() * v;
            let eps = (x - ab.sqrt() * x0) / (1.0 - ab).sqrt();
            (ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps) as f32
        })
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// One DDIM step from `t` to `t - 1` per frame; `t = 0` is an error.
pub fn ddim_step(x_t: &Tensor, v: &Tensor, t: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    if t.contains(&0) {
        return Err(Error::InvalidArgument("DDIM step needs t >= 1".into()));
    }
    let prev: Vec<usize> = t.iter().map(|&ti| ti - 1).collect();
    ddim_step_to(x_t, v, t, &prev, sched)
}

/// Per-frame training timesteps in `1..=T_d`.
pub fn sample_timesteps(mode: TimestepMode, frames: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Vec<usize> {
    let td = sched.steps();
    match mode {
        TimestepMode::Shared => vec![1 + rng.below(td); frames],
        TimestepMode::DiffusionForcing => (0..frames).map(|_| 1 + rng.below(td)).collect(),
    }
}

/// Mean squared deviation over all elements, accumulated in `f64`.
pub fn diffusion_loss(v_hat: &Tensor, v_star: &Tensor) -> Result<f64> {
    v_hat.check_same_shape(v_star)?;
    let n = v_hat.numel().max(1) as f64;
    Ok(v_hat.data().iter().zip(v_star.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / n)
}
