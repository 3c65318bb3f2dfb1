use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::synth::{Scene, WorldConfig};

fn sched() -> NoiseSchedule {
    DenoiserConfig::default().schedule().unwrap()
}

fn tiny_cfg() -> DenoiserConfig {
    DenoiserConfig { width: 16, heads: 2, blocks: 1, ..DenoiserConfig::default() }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

#[test]
fn schedule_invariants() {
    let s = sched();
    assert_eq!(s.steps(), 50);
    assert_eq!(s.alpha_bar(0), 1.0);
    for t in 1..=s.steps() {
        assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
        assert!((s.alpha_bar(t) / s.alpha_bar(t - 1) - s.alpha(t)).abs() < 1e-12);
    }
    assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
    assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
}

#[test]
fn reverse_timesteps_are_even_and_decreasing() {
    let s = sched();
    assert_eq!(s.reverse_timesteps(10).unwrap(), vec![50, 45, 40, 35, 30, 25, 20, 15, 10, 5, 0]);
    assert_eq!(s.reverse_timesteps(50).unwrap().len(), 51);
    assert!(s.reverse_timesteps(0).is_err());
    assert!(s.reverse_timesteps(51).is_err());
}

#[test]
fn forward_noise_of_zero_signal_is_scaled_noise() {
    let s = sched();
    let e = randn(&[2, 3], 1);
    let x = forward_noise(&Tensor::zeros(&[2, 3]), &[7, 30], &e, &s).unwrap();
    for (i, (&xv, &ev)) in x.data().iter().zip(e.data()).enumerate() {
        let t = if i < 3 { 7 } else { 30 };
        assert!((xv as f64 - (1.0 - s.alpha_bar(t)).sqrt() * ev as f64).abs() < 1e-6);
    }
}

#[test]
fn forward_noise_at_zero_is_identity() {
    let s = sched();
    let x0 = randn(&[2, 4], 2);
    assert_eq!(forward_noise(&x0, &[0, 0], &randn(&[2, 4], 3), &s).unwrap(), x0);
    assert!(forward_noise(&x0, &[0, 51], &randn(&[2, 4], 3), &s).is_err());
    assert!(forward_noise(&x0, &[1], &randn(&[2, 4], 3), &s).is_err());
}

#[test]
fn forward_noise_variance_matches_schedule() {
    let s = sched();
    let t = 12;
    let x0 = Tensor::full(&[1, 1], 0.7);
    let mut rng = Rng::new(4);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| {
            let e = Tensor::randn(&[1, 1], 1.0, &mut rng);
            forward_noise(&x0, &[t], &e, &s).unwrap().data()[0] as f64
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    let expected = 1.0 - s.alpha_bar(t);
    assert!((var - expected).abs() / expected < 0.05, "var {var} vs {expected}");
}

#[test]
fn velocity_target_special_cases() {
    let s = sched();
    let e = randn(&[1, 5], 5);
    let x0 = randn(&[1, 5], 6);
    let v = velocity_target(&Tensor::zeros(&[1, 5]), &e, &[20], &s).unwrap();
    for (&a, &b) in v.data().iter().zip(e.data()) {
        assert!((a as f64 - s.alpha_bar(20).sqrt() * b as f64).abs() < 1e-6);
    }
    let v = velocity_target(&x0, &Tensor::zeros(&[1, 5]), &[20], &s).unwrap();
    for (&a, &b) in v.data().iter().zip(x0.data()) {
        assert!((a as f64 + (1.0 - s.alpha_bar(20)).sqrt() * b as f64).abs() < 1e-6);
    }
}

#[test]
fn velocity_target_recovers_clean_signal() {
    let s = sched();
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let x0 = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let e = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let t: Vec<usize> = (0..3).map(|_| 1 + rng.below(50)).collect();
        let xt = forward_noise(&x0, &t, &e, &s).unwrap();
        let v = velocity_target(&x0, &e, &t, &s).unwrap();
        let rec = predicted_x0(&xt, &v, &t, &s).unwrap();
        assert!(rec.max_abs_diff(&x0).unwrap() < 1e-5);
    }
}

#[test]
fn ddim_step_to_clean_end_returns_x0_estimate() {
    let s = sched();
    let xt = randn(&[1, 4], 7);
    let v = randn(&[1, 4], 8);
    let stepped = ddim_step(&xt, &v, &[1], &s).unwrap();
    let x0 = predicted_x0(&xt, &v, &[1], &s).unwrap();
    assert!(stepped.max_abs_diff(&x0).unwrap() < 1e-6);
}

#[test]
fn ddim_step_with_oracle_velocity_matches_forward_marginal() {
    let s = sched();
    for seed in 0..20 {
        let mut rng = Rng::new(100 + seed);
        let x0 = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let e = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let t = vec![2 + rng.below(49), 2 + rng.below(49)];
        let xt = forward_noise(&x0, &t, &e, &s).unwrap();
        let v = velocity_target(&x0, &e, &t, &s).unwrap();
        let prev: Vec<usize> = t.iter().map(|&x| x - 1).collect();
        let expected = forward_noise(&x0, &prev, &e, &s).unwrap();
        assert!(ddim_step(&xt, &v, &t, &s).unwrap().max_abs_diff(&expected).unwrap() < 1e-5);
    }
}

#[test]
fn oracle_reverse_chain_recovers_x0() {
    let s = sched();
    let x0 = randn(&[2, 8], 9);
    let e = randn(&[2, 8], 10);
    let mut x = forward_noise(&x0, &[50, 50], &e, &s).unwrap();
    for t in (1..=50).rev() {
        let v = velocity_target(&x0, &e, &[t, t], &s).unwrap();
        x = ddim_step(&x, &v, &[t, t], &s).unwrap();
    }
    assert!(x.max_abs_diff(&x0).unwrap() < 1e-4);
}

#[test]
fn ddim_step_errors() {
    let s = sched();
    let x = randn(&[1, 2], 1);
    assert!(ddim_step(&x, &x, &[0], &s).is_err());
    let flat = NoiseSchedule::from_betas(vec![1e-300, 0.1]).unwrap();
    assert!(matches!(ddim_step(&x, &x, &[1], &flat), Err(Error::Singular(_))));
}

#[test]
fn shared_timesteps_are_equal_and_reproducible() {
    let s = sched();
    let a = sample_timesteps(TimestepMode::Shared, 8, &s, &mut Rng::new(3));
    assert!(a.iter().all(|&t| t == a[0] && (1..=50).contains(&t)));
    assert_eq!(a, sample_timesteps(TimestepMode::Shared, 8, &s, &mut Rng::new(3)));
    let b = sample_timesteps(TimestepMode::DiffusionForcing, 8, &s, &mut Rng::new(3));
    assert_eq!(b, sample_timesteps(TimestepMode::DiffusionForcing, 8, &s, &mut Rng::new(3)));
}

#[test]
fn diffusion_forcing_marginal_is_uniform() {
    let s = sched();
    let mut rng = Rng::new(11);
    let frames = 4;
    let mut counts = vec![vec![0usize; 50]; frames];
    for _ in 0..1000 {
        for (f, t) in sample_timesteps(TimestepMode::DiffusionForcing, frames, &s, &mut rng).into_iter().enumerate() {
            counts[f][t - 1] += 1;
        }
    }
    let expected = 1000.0 / 50.0;
    let chi = ChiSquared::new(49.0).unwrap();
    for c in counts {
        let stat: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - chi.cdf(stat);
        assert!(p > 0.01, "chi-square p {p}");
    }
}

#[test]
fn diffusion_loss_examples() {
    let a = randn(&[3, 4], 1);
    assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
    let shifted = a.map(|v| v + 1.0);
    assert!((diffusion_loss(&shifted, &a).unwrap() - 1.0).abs() < 1e-6);
    let b = randn(&[3, 4], 2);
    let mut brute = 0.0f64;
    for i in 0..12 {
        brute += ((a.data()[i] - b.data()[i]) as f64).powi(2);
    }
    assert!((diffusion_loss(&a, &b).unwrap() - brute / 12.0).abs() < 1e-12);
}

fn actions(seed: u64) -> Tensor {
    Tensor::uniform(&[8, 2], -2.0, 2.0, &mut Rng::new(seed))
}

#[test]
fn fresh_denoiser_is_finite_and_reproducible() {
    let model = Denoiser::new(&tiny_cfg(), &mut Rng::new(1)).unwrap();
    let x = randn(&[8, 8, 8, 4], 2);
    let t = [0, 10, 20, 30, 40, 50, 1, 2];
    let a = model.predict_velocity(&x, &actions(3), &t).unwrap();
    let b = model.predict_velocity(&x, &actions(3), &t).unwrap();
    assert_eq!(a, b);
    assert!(a.v_hat.is_finite() && a.z.is_finite());
    assert_eq!(a.v_hat.shape(), &[8, 8, 8, 4]);
    assert_eq!(a.z.shape(), &[512, 16]);
    assert_eq!(a.c.shape(), &[8, 16]);
}

#[test]
fn permuting_actions_changes_prediction() {
    let model = Denoiser::new(&tiny_cfg(), &mut Rng::new(1)).unwrap();
    let x = randn(&[8, 8, 8, 4], 2);
    let t = [0, 25, 25, 25, 25, 25, 25, 25];
    let acts = actions(3);
    let mut rows: Vec<f32> = acts.data().to_vec();
    rows.rotate_left(2);
    let permuted = Tensor::new(&[8, 2], rows).unwrap();
    let a = model.predict_velocity(&x, &acts, &t).unwrap();
    let b = model.predict_velocity(&x, &permuted, &t).unwrap();
    assert!(a.v_hat.max_abs_diff(&b.v_hat).unwrap() > 1e-6);
}

#[test]
fn denoiser_rejects_bad_geometry() {
    let model = Denoiser::new(&tiny_cfg(), &mut Rng::new(1)).unwrap();
    let t = [0; 8];
    assert!(model.predict_velocity(&randn(&[8, 8, 8, 3], 1), &actions(1), &t).is_err());
    assert!(model.predict_velocity(&randn(&[8, 8, 8, 4], 1), &actions(1), &t[..7]).is_err());
    assert!(model.predict_velocity(&randn(&[8, 8, 8, 4], 1), &actions(1), &[51; 8]).is_err());
    let bad = DenoiserConfig { sample_steps: 60, ..tiny_cfg() };
    assert!(Denoiser::new(&bad, &mut Rng::new(1)).is_err());
}

#[test]
fn sampling_is_deterministic_and_keeps_first_frame() {
    let model = Denoiser::new(&tiny_cfg(), &mut Rng::new(1)).unwrap();
    let first = randn(&[8, 8, 4], 4);
    let a = sample(&model, &first, &actions(5), 10, 7).unwrap();
    let b = sample(&model, &first, &actions(5), 10, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a.data()[..256], first.data());
    let mut passes = 0;
    sample_traced(&model, &first, &actions(5), 5, 7, |step| {
        assert_eq!(step.timesteps[0], 0);
        passes += 1;
    })
    .unwrap();
    assert_eq!(passes, 5);
    assert!(sample(&model, &first, &actions(5), 0, 7).is_err());
    assert!(sample(&model, &first, &actions(5), 51, 7).is_err());
}

/// Latent episodes whose frames never change.
fn static_episodes(n: usize) -> Vec<LatentEpisode> {
    let cfg = WorldConfig::default();
    (0..n)
        .map(|i| {
            let mut scene = Scene::sample(&cfg, i as u64);
            scene.actions = vec![[0.0, 0.0]; cfg.frames];
            let ep = scene.simulate(&cfg);
            // Stand-in latent: a fixed random projection of each 4x4 patch.
            let rows = crate::codec::patchify(&ep.frames, 4).unwrap();
            let proj = Tensor::randn(&[48, 4], 0.5, &mut Rng::new(1));
            let mut tape = Tape::new();
            let r = tape.constant(rows);
            let w = tape.constant(proj);
            let l = tape.matmul(r, w);
            let latents = tape.value(l).clone().reshape(&[8, 8, 8, 4]).unwrap();
            LatentEpisode { latents, actions: ep.actions, seed: ep.seed, ood_axis: ep.ood_axis }
        })
        .collect()
}

fn rollout_error(model: &Denoiser, eps: &[LatentEpisode]) -> f64 {
    let mut total = 0.0;
    for (i, ep) in eps.iter().enumerate() {
        let x = sample(model, &ep.first_frame(), &ep.actions, 10, i as u64).unwrap();
        total += x.data().iter().zip(ep.latents.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / x.numel() as f64;
    }
    total / eps.len() as f64
}

#[test]
fn training_on_static_world_halves_rollout_error() {
    let cfg = DenoiserConfig { width: 32, heads: 2, blocks: 1, ..DenoiserConfig::default() };
    let train = static_episodes(40);
    let test = static_episodes(48)[40..].to_vec();
    let untrained = Denoiser::new(&cfg, &mut Rng::new(3)).unwrap();
    let before = rollout_error(&untrained, &test);
    let mut model = untrained.clone();
    let opt = OptimConfig { steps: 300, batch_size: 4, ..OptimConfig::default() };
    let losses = train_denoiser(&mut model, &train, &opt, 5).unwrap();
    let after = rollout_error(&model, &test);
    assert!(after <= 0.5 * before, "rollout error {before} -> {after}; losses {:?}", &losses[losses.len() - 5..]);
}

#[test]
fn train_batch_masks_conditioning_frame() {
    let cfg = tiny_cfg();
    let eps = static_episodes(2);
    let picks: Vec<&LatentEpisode> = eps.iter().collect();
    let b = TrainBatch::new(&cfg, &sched(), &picks, TimestepMode::DiffusionForcing, &mut Rng::new(1)).unwrap();
    assert_eq!(b.x_t.shape(), &[1024, 4]);
    assert_eq!(b.timesteps[0], 0);
    assert_eq!(b.timesteps[8], 0);
    assert!(b.timesteps.iter().enumerate().all(|(i, &t)| (i % 8 == 0) == (t == 0)));
    assert_eq!(b.weights.iter().filter(|&&w| w == 0.0).count(), 2 * 256);
    // frame 0 enters clean
    assert_eq!(&b.x_t.data()[..256], &eps[0].latents.data()[..256]);
}

#[test]
fn checkpoint_round_trip() {
    let model = Denoiser::new(&tiny_cfg(), &mut Rng::new(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), "wm", 8, 0).unwrap();
    let loaded = Denoiser::load(dir.path(), "wm").unwrap();
    assert_eq!(loaded.params(), model.params());
    assert_eq!(loaded.cfg, model.cfg);
}

#[test]
fn shapes_survive_the_pipeline() {
    use crate::codec::{Codec, CodecConfig};
    let codec = Codec::new(&CodecConfig::default(), [0.5; 3], &mut Rng::new(0)).unwrap();
    let model = Denoiser::new(&tiny_cfg(), &mut Rng::new(1)).unwrap();
    let ep = crate::synth::generate_episode(&WorldConfig::default(), 3).unwrap();
    let x0 = codec.encode(&ep.frames).unwrap();
    let t = vec![10; 8];
    let xt = forward_noise(&x0, &t, &randn(&[8, 8, 8, 4], 1), &sched()).unwrap();
    let pred = model.predict_velocity(&xt, &ep.actions, &t).unwrap();
    let prev = ddim_step(&xt, &pred.v_hat, &t, &sched()).unwrap();
    assert_eq!(prev.shape(), x0.shape());
    assert_eq!(codec.decode(&prev).unwrap().shape(), ep.frames.shape());
}
