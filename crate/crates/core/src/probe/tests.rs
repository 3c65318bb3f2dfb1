use proptest::prelude::*;

use super::*;
use crate::numerics::layers::VideoLayout;
use crate::numerics::{Adam, CosineSchedule, Rng, Tape};
use crate::world::{Denoiser, DenoiserConfig, LatentEpisode, NoiseSchedule, OptimConfig, TimestepMode};
use crate::synth::OodAxis;

fn tiny_world() -> DenoiserConfig {
    DenoiserConfig {
        frames: 3,
        latent_height: 2,
        latent_width: 2,
        latent_channels: 2,
        width: 8,
        heads: 2,
        blocks: 1,
        ..DenoiserConfig::default()
    }
}

fn tiny_probe(kind: HeadKind, score: ScoreKind) -> ProbeConfig {
    ProbeConfig { kind, score, width: 8, heads: 2, blocks: 1, ..ProbeConfig::default() }
}

fn episodes(cfg: &DenoiserConfig, n: usize, seed: u64) -> Vec<LatentEpisode> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| LatentEpisode {
            latents: Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng),
            actions: Tensor::randn(&[cfg.frames, 2], 1.0, &mut rng),
            seed: i as u64,
            ood_axis: OodAxis::None,
        })
        .collect()
}

#[test]
fn distance_examples() {
    let a = Tensor::new(&[3], vec![0.1, 0.2, -0.3]).unwrap();
    assert_eq!(distance(&a, &a).unwrap().data(), &[0.0; 3]);
    let b = Tensor::new(&[3], vec![0.1, 0.6, -0.3]).unwrap();
    let d = distance(&a, &b).unwrap();
    assert!((d.data()[1] - 0.4).abs() < 1e-7);
    assert!(distance(&a, &Tensor::zeros(&[2])).is_err());
}

#[test]
fn accuracy_mask_is_inclusive() {
    let d = Tensor::new(&[3], vec![0.3, 0.5, 0.7]).unwrap();
    assert_eq!(accuracy_mask(&d, 0.5).unwrap().data(), &[1.0, 1.0, 0.0]);
    assert!(accuracy_mask(&d, 0.0).is_err());
    assert!(accuracy_mask(&d, -1.0).is_err());
}

proptest! {
    #[test]
    fn distance_and_mask_match_loops(vals in proptest::collection::vec((-3.0f32..3.0, -3.0f32..3.0), 1..64), eps in 0.01f64..2.0) {
        let a = Tensor::from_vec(vals.iter().map(|v| v.0).collect());
        let b = Tensor::from_vec(vals.iter().map(|v| v.1).collect());
        let d = distance(&a, &b).unwrap();
        let m = accuracy_mask(&d, eps).unwrap();
        for (i, (x, y)) in vals.iter().enumerate() {
            let di = (x - y).abs();
            prop_assert_eq!(d.data()[i], di);
            prop_assert_eq!(m.data()[i], if di as f64 <= eps { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn eps_conversion_examples() {
    assert_eq!(eps_to_eps_v(0.5, 0.25, 0.75).unwrap(), 1.0);
    let e = eps_to_eps_v(1.0, 0.25, 1.0).unwrap();
    assert!((e - 1.0 / 0.75f64.sqrt()).abs() < 1e-12);
    assert!((e - 1.1547).abs() < 1e-4);
    assert!(matches!(eps_to_eps_v(0.5, 0.4, 0.4), Err(crate::Error::Singular(_))));
    assert!(eps_to_eps_v(0.0, 0.25, 0.75).is_err());
    let s = DenoiserConfig::default().schedule().unwrap();
    assert!(eps_to_eps_v_at(0.5, 0, &s).is_err());
    assert!(eps_to_eps_v_at(0.5, 51, &s).is_err());
    assert!(eps_to_eps_v_at(0.5, 1, &s).unwrap() > 0.5);
}

/// `x_{t-1}` after one deterministic update with velocity `v`, in `f64`.
fn one_step(x: f64, v: f64, t: usize, s: &NoiseSchedule) -> f64 {
    let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(t - 1));
    let x0 = ab.sqrt() * x - (1.0 - ab).sqrt() * v;
    let eps = (1.0 - ab).sqrt() * x + ab.sqrt() * v;
    abp.sqrt() * x0 + (1.0 - abp).sqrt() * eps
}

#[test]
fn velocity_and_latent_masks_agree() {
    let s = DenoiserConfig::default().schedule().unwrap();
    let mut rng = Rng::new(11);
    for case in 0..1000 {
        let t = 1 + rng.below(s.steps());
        let eps = rng.range(0.01, 1.0) as f64;
        let x0 = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let noise = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let v_hat = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let x_t = crate::world::forward_noise(&x0, &[t], &noise, &s).unwrap();
        let v_star = crate::world::velocity_target(&x0, &noise, &[t], &s).unwrap();
        let eps_v = eps_to_eps_v_at(eps, t, &s).unwrap();
        let mask_v = accuracy_mask(&distance(&v_hat, &v_star).unwrap(), eps_v).unwrap();
        for i in 0..16 {
            let x = x_t.data()[i] as f64;
            let dx = (one_step(x, v_hat.data()[i] as f64, t, &s) - one_step(x, v_star.data()[i] as f64, t, &s)).abs();
            let in_x = dx <= eps;
            assert_eq!(mask_v.data()[i] == 1.0, in_x, "case {case} element {i}: t {t} eps {eps} dx {dx}");
        }
    }
}

#[test]
fn adaptive_threshold_set() {
    let set = ThresholdSet::adaptive();
    let v = set.values();
    assert_eq!(v.len(), 28);
    assert!((v[0] - 0.1).abs() < 1e-12 && (v[27] - 1.0).abs() < 1e-12);
    assert!(v.windows(2).all(|w| w[0] < w[1]));
    let below = v.iter().filter(|&&x| x < 0.3).count();
    assert_eq!(below, 14);
    // No window of width 0.2 inside [0.3, 1.0] holds as many values.
    let mut lo = 0.3;
    while lo + 0.2 <= 1.0 + 1e-12 {
        let inside = v.iter().filter(|&&x| x >= lo && x < lo + 0.2).count();
        assert!(below > inside, "window at {lo}: {inside}");
        lo += 0.01;
    }
}

#[test]
fn threshold_set_validation_and_serde() {
    let e = ThresholdSet::evaluation();
    assert_eq!(e.len(), 10);
    assert!((e.values()[1] - 0.2).abs() < 1e-12);
    assert!(ThresholdSet::new(vec![]).is_err());
    assert!(ThresholdSet::new(vec![0.2, 0.2]).is_err());
    assert!(ThresholdSet::new(vec![0.0, 0.2]).is_err());
    assert!(ThresholdSet::new(vec![0.5, 1.5]).is_err());
    let json = serde_json::to_string(&e).unwrap();
    assert_eq!(serde_json::from_str::<ThresholdSet>(&json).unwrap(), e);
    assert!(serde_json::from_str::<ThresholdSet>("[0.5, 0.4]").is_err());
}

#[test]
fn bins_partition_the_half_line() {
    let bins = BinStructure::new(&ThresholdSet::adaptive());
    assert_eq!(bins.bins(), 29);
    let e = bins.edges().to_vec();
    assert_eq!(e[0], 0.0);
    assert_eq!(e[29], f64::INFINITY);
    assert_eq!(bins.bin_of(0.0), 0);
    assert_eq!(bins.bin_of(0.1), 0);
    assert_eq!(bins.bin_of(0.1 + 1e-9), 1);
    assert_eq!(bins.bin_of(1.0), 27);
    assert_eq!(bins.bin_of(1.0 + 1e-9), 28);
    assert_eq!(bins.bin_of(1e9), 28);
    let mut rng = Rng::new(3);
    for _ in 0..1000 {
        let d = rng.range(0.0, 2.0) as f64;
        let b = bins.bin_of(d);
        let lower_ok = if b == 0 { d >= 0.0 } else { d > e[b] };
        assert!(lower_ok && d <= e[b + 1], "d {d} bin {b}");
        // Cumulative mass below an edge counts exactly the accurate elements.
        let j = 1 + rng.below(28);
        assert_eq!(b < j, d <= e[j]);
    }
    assert_eq!(bins.edge_index(f64::INFINITY).unwrap(), 29);
    assert!(bins.edge_index(0.15).is_err());
    assert_eq!(bins.nearest_edge(0.52), bins.edges()[bins.edge_index(bins.nearest_edge(0.52)).unwrap()]);
}

fn fresh_pair(kind: HeadKind, score: ScoreKind, seed: u64) -> (Denoiser, ProbeHead) {
    let w = tiny_world();
    let model = Denoiser::new(&w, &mut Rng::new(seed)).unwrap();
    let head = ProbeHead::new(&tiny_probe(kind, score), &w, &mut Rng::new(seed + 1)).unwrap();
    (model, head)
}

fn features(model: &Denoiser, seed: u64) -> crate::world::Prediction {
    let mut rng = Rng::new(seed);
    let x = Tensor::randn(&model.cfg.latent_shape(), 1.0, &mut rng);
    let a = Tensor::randn(&[model.cfg.frames, 2], 1.0, &mut rng);
    let t: Vec<usize> = (0..model.cfg.frames).map(|f| if f == 0 { 0 } else { 1 + rng.below(50) }).collect();
    model.predict_velocity(&x, &a, &t).unwrap()
}

#[test]
fn fresh_heads_are_uninformative() {
    let (model, fsc) = fresh_pair(HeadKind::Fsc, ScoreKind::Brier, 1);
    let f = features(&model, 2);
    let q = probe_forward(&fsc, &f.z, &f.c, None).unwrap();
    assert_eq!(q.tensor().shape(), &model.cfg.latent_shape());
    assert!(q.tensor().data().iter().all(|&v| v == 0.5));

    let (_, mcc) = fresh_pair(HeadKind::Mcc, ScoreKind::Ce, 1);
    let ConfidenceMap::Simplex(s) = probe_forward(&mcc, &f.z, &f.c, None).unwrap() else { panic!() };
    assert_eq!(s.shape(), &[3, 2, 2, 2, 29]);
    assert!(s.data().iter().all(|&v| (v - 1.0 / 29.0).abs() < 1e-6));

    let (_, cs) = fresh_pair(HeadKind::CsBc, ScoreKind::Brier, 1);
    let q = probe_forward(&cs, &f.z, &f.c, Some(0.3)).unwrap();
    assert!(q.tensor().data().iter().all(|&v| v == 0.5));
}

#[test]
fn threshold_argument_must_match_head() {
    let (model, fsc) = fresh_pair(HeadKind::Fsc, ScoreKind::Brier, 1);
    let (_, cs) = fresh_pair(HeadKind::CsBc, ScoreKind::Bce, 1);
    let f = features(&model, 2);
    assert!(probe_forward(&fsc, &f.z, &f.c, Some(0.5)).is_err());
    assert!(probe_forward(&cs, &f.z, &f.c, None).is_err());
    assert!(probe_forward(&cs, &f.z, &f.c, Some(-0.5)).is_err());
    assert!(probe_forward(&cs, &f.c, &f.c, Some(0.5)).is_err());
}

/// Perturbs every head parameter so the zero-initialized output layer
/// stops producing constant predictions.
fn randomize_output(head: &mut ProbeHead, seed: u64, std: f32) {
    let mut rng = Rng::new(seed);
    for t in head.store.values_mut() {
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        *t = t.zip_map(&noise, |a, b| a + b).unwrap();
    }
}

#[test]
fn confidences_stay_in_range_and_simplices_sum_to_one() {
    let (model, mut cs) = fresh_pair(HeadKind::CsBc, ScoreKind::Brier, 5);
    let (_, mut mcc) = fresh_pair(HeadKind::Mcc, ScoreKind::Ce, 5);
    randomize_output(&mut cs, 6, 1.5);
    randomize_output(&mut mcc, 7, 1.5);
    let mut rng = Rng::new(8);
    for i in 0..100 {
        let f = features(&model, 100 + i);
        let e = rng.range(0.05, 1.0) as f64;
        let q = probe_forward(&cs, &f.z, &f.c, Some(e)).unwrap();
        assert!(q.tensor().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let s = probe_forward(&mcc, &f.z, &f.c, None).unwrap();
        for row in s.tensor().data().chunks_exact(29) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn cumulative_confidence_prefix_sums() {
    let bins = BinStructure::new(&ThresholdSet::adaptive());
    let uniform = Tensor::full(&[2, 3, 29], 1.0 / 29.0);
    let all = mcc_cumulative_confidence(&uniform, &bins, f64::INFINITY).unwrap();
    assert_eq!(all.shape(), &[2, 3]);
    assert!(all.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    assert!(mcc_cumulative_confidence(&uniform, &bins, 0.0).unwrap().data().iter().all(|&v| v == 0.0));
    for j in 1..29 {
        let edge = bins.edges()[j];
        let q = mcc_cumulative_confidence(&uniform, &bins, edge).unwrap();
        assert!(q.data().iter().all(|&v| (v as f64 - j as f64 / 29.0).abs() < 1e-6));
    }
    assert!(mcc_cumulative_confidence(&uniform, &bins, 0.123).is_err());
    assert!(mcc_cumulative_confidence(&Tensor::full(&[2, 5], 0.2), &bins, 0.1).is_err());
}

#[test]
fn score_examples() {
    let y = Tensor::from_vec(vec![1.0, 0.0, 1.0]);
    assert_eq!(proper_score(ScoreKind::Brier, &y, &y).unwrap(), 0.0);
    let half = Tensor::full(&[3], 0.5);
    assert!((proper_score(ScoreKind::Bce, &half, &y).unwrap() - 2f64.ln()).abs() < 1e-7);
    assert!((proper_score(ScoreKind::Brier, &half, &y).unwrap() - 0.25).abs() < 1e-12);
    let q = Tensor::new(&[2, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
    let oh = Tensor::new(&[2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let expected = -(0.5f64.ln() + 0.1f64.ln()) / 2.0;
    assert!((proper_score(ScoreKind::Ce, &q, &oh).unwrap() - expected).abs() < 1e-6);
    assert!(proper_score(ScoreKind::Bce, &half, &Tensor::full(&[3], 0.5)).is_err());
    assert!(proper_score(ScoreKind::Ce, &q, &Tensor::full(&[2, 3], 1.0)).is_err());
    assert!(proper_score(ScoreKind::Brier, &half, &Tensor::zeros(&[2])).is_err());
    // Clamping keeps certain-but-wrong predictions finite.
    assert!(proper_score(ScoreKind::Bce, &Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![1.0])).unwrap().is_finite());
}

/// Expected score when the outcome is 1 with probability `p`.
fn expected_binary(kind: ScoreKind, q: f64, p: f64) -> f64 {
    let s = |y: f32| proper_score(kind, &Tensor::from_vec(vec![q as f32]), &Tensor::from_vec(vec![y])).unwrap();
    p * s(1.0) + (1.0 - p) * s(0.0)
}

#[test]
fn brier_expectation_is_minimized_at_the_true_rate() {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let best = grid
        .iter()
        .copied()
        .min_by(|&a, &b| expected_binary(ScoreKind::Brier, a, 0.3).total_cmp(&expected_binary(ScoreKind::Brier, b, 0.3)))
        .unwrap();
    assert!((best - 0.3).abs() < 1e-9);
}

#[test]
fn scores_are_strictly_proper_on_a_grid() {
    let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    for p10 in 1..10 {
        let p = p10 as f64 / 10.0;
        for kind in [ScoreKind::Brier, ScoreKind::Bce] {
            let at_p = expected_binary(kind, p, p);
            for &q in &grid {
                if (q - p).abs() > 1e-9 {
                    assert!(expected_binary(kind, q, p) > at_p, "{kind:?} p {p} q {q}");
                }
            }
        }
        // Three classes: (p, (1-p)/2, (1-p)/2) against perturbed predictions.
        let truth = [p, (1.0 - p) / 2.0, (1.0 - p) / 2.0];
        let expected_ce = |q: [f64; 3]| -> f64 {
            (0..3)
                .map(|k| {
                    let mut y = [0.0f32; 3];
                    y[k] = 1.0;
                    let qt = Tensor::new(&[1, 3], q.iter().map(|&v| v as f32).collect()).unwrap();
                    truth[k] * proper_score(ScoreKind::Ce, &qt, &Tensor::new(&[1, 3], y.to_vec()).unwrap()).unwrap()
                })
                .sum()
        };
        let at_p = expected_ce(truth);
        for &a in &grid {
            for &b in &grid {
                let c = 1.0 - a - b;
                if c <= 0.005 || ((a - truth[0]).abs() < 1e-9 && (b - truth[1]).abs() < 1e-9) {
                    continue;
                }
                assert!(expected_ce([a, b, c]) > at_p - 1e-6, "p {p} q ({a}, {b}, {c})");
            }
        }
    }
}

#[test]
fn probe_config_rejects_mismatched_scores() {
    assert!(tiny_probe(HeadKind::Fsc, ScoreKind::Ce).validate().is_err());
    assert!(tiny_probe(HeadKind::Mcc, ScoreKind::Brier).validate().is_err());
    assert!(tiny_probe(HeadKind::CsBc, ScoreKind::Bce).validate().is_ok());
    assert!(ProbeConfig { thresholds_per_step: 0, ..ProbeConfig::default() }.validate().is_err());
    assert!(ProbeConfig { width: 10, heads: 4, ..ProbeConfig::default() }.validate().is_err());
    let json = serde_json::to_string(&ProbeConfig::default()).unwrap();
    assert!(json.contains("\"cs_bc\""));
    assert_eq!(serde_json::from_str::<ProbeConfig>("{}").unwrap(), ProbeConfig::default());
}

fn joint_step(model: &Denoiser, head: &ProbeHead, seed: u64) -> JointStep {
    let eps = episodes(&model.cfg, 2, seed);
    let refs: Vec<&LatentEpisode> = eps.iter().collect();
    JointStep::sample(model, head, &refs, TimestepMode::DiffusionForcing, &mut Rng::new(seed + 1)).unwrap()
}

#[test]
fn stop_gradient_blocks_probe_gradients_exactly() {
    for (kind, score) in [(HeadKind::CsBc, ScoreKind::Brier), (HeadKind::Fsc, ScoreKind::Bce), (HeadKind::Mcc, ScoreKind::Ce)] {
        let (model, mut head) = fresh_pair(kind, score, 21);
        randomize_output(&mut head, 22, 0.3);
        let step = joint_step(&model, &head, 23);
        assert_eq!(world_gradient_from_probe(&model, &head, &step, true).unwrap(), 0.0);
        assert!(world_gradient_from_probe(&model, &head, &step, false).unwrap() > 0.0);
    }
}

#[test]
fn initial_probe_loss_is_the_uninformative_score() {
    for (kind, score) in [(HeadKind::CsBc, ScoreKind::Brier), (HeadKind::Fsc, ScoreKind::Bce), (HeadKind::Mcc, ScoreKind::Ce)] {
        let (model, head) = fresh_pair(kind, score, 31);
        let step = joint_step(&model, &head, 32);
        let mut tape = Tape::new();
        let pw = model.store.bind(&mut tape, true);
        let ph = head.store.bind(&mut tape, true);
        let (_, lp) = step.losses(&model, &head, &mut tape, &pw, &ph, true).unwrap();
        let got = tape.value(lp).data()[0] as f64;
        // Score of q = 0.5 (or the uniform simplex) against the measured labels.
        let mut t2 = Tape::new();
        let p2 = model.store.bind(&mut t2, false);
        let x2 = t2.constant(step.batch.x_t.clone());
        let pass = model.forward(&mut t2, &p2, x2, &step.batch.action_feats, &step.batch.timesteps, step.batch.batch);
        let d = distance(t2.value(pass.v_hat), &step.batch.v_star).unwrap();
        let keep: Vec<usize> = (0..d.numel()).filter(|&i| step.batch.weights[i] > 0.0).collect();
        let mut expected = 0.0;
        for eps in &step.thresholds {
            let targets = probe_targets(&head, &d, *eps).unwrap();
            expected += match score {
                ScoreKind::Ce => {
                    let k = 29;
                    let mut oh = vec![0.0f32; keep.len() * k];
                    for (r, &i) in keep.iter().enumerate() {
                        oh[r * k + targets[i] as usize] = 1.0;
                    }
                    let q = Tensor::full(&[keep.len(), k], 1.0 / k as f32);
                    proper_score(score, &q, &Tensor::new(&[keep.len(), k], oh).unwrap()).unwrap()
                }
                _ => {
                    let y = Tensor::from_vec(keep.iter().map(|&i| targets[i]).collect());
                    proper_score(score, &Tensor::full(&[keep.len()], 0.5), &y).unwrap()
                }
            };
        }
        expected /= step.thresholds.len() as f64;
        assert!((got - expected).abs() < 1e-5, "{kind:?}: {got} vs {expected}");
    }
}

/// Tape gradients of one of the two joint losses against central
/// differences at sampled parameter coordinates, norm-wise. The probe
/// labels are frozen at the base parameters so the differenced function
/// is smooth.
fn check_joint_gradients(kind: HeadKind, score: ScoreKind, which_loss: usize) {
    let (model, mut head) = fresh_pair(kind, score, 41);
    randomize_output(&mut head, 42, 0.3);
    let step = joint_step(&model, &head, 43);
    let b = &step.batch;
    let (gw, gh) = {
        let mut tape = Tape::new();
        let pw = model.store.bind(&mut tape, true);
        let ph = head.store.bind(&mut tape, true);
        let (lt, lp) = step.losses(&model, &head, &mut tape, &pw, &ph, false).unwrap();
        let l = if which_loss == 0 { lt } else { lp };
        let mut g = tape.backward(l).unwrap();
        (pw.collect(&mut g, &model.store), ph.collect(&mut g, &head.store))
    };
    let base_d = {
        let mut tape = Tape::new();
        let pw = model.store.bind(&mut tape, false);
        let x = tape.constant(b.x_t.clone());
        let pass = model.forward(&mut tape, &pw, x, &b.action_feats, &b.timesteps, b.batch);
        distance(tape.value(pass.v_hat), &b.v_star).unwrap()
    };
    let targets: Vec<Vec<f32>> = step.thresholds.iter().map(|&e| probe_targets(&head, &base_d, e).unwrap()).collect();
    let value = |m: &Denoiser, h: &ProbeHead| -> f64 {
        let mut tape = Tape::new();
        let pw = m.store.bind(&mut tape, false);
        let ph = h.store.bind(&mut tape, false);
        let x = tape.constant(b.x_t.clone());
        let pass = m.forward(&mut tape, &pw, x, &b.action_feats, &b.timesteps, b.batch);
        if which_loss == 0 {
            let l = tape.mse(pass.v_hat, &b.v_star, Some(&b.weights));
            return tape.value(l).data()[0] as f64;
        }
        let hv = h.trunk(&mut tape, &ph, pass.z, pass.c, &pass.layout);
        let mut total = 0.0;
        for (&e, y) in step.thresholds.iter().zip(&targets) {
            let e = e.filter(|_| kind == HeadKind::CsBc);
            let logits = h.readout(&mut tape, &ph, hv, pass.c, e, &pass.layout);
            let l = h.score_loss(&mut tape, logits, y, &b.weights);
            total += tape.value(l).data()[0] as f64;
        }
        total / step.thresholds.len() as f64
    };
    let mut rng = Rng::new(44);
    let (mut diff2, mut ref2) = (0.0f64, 0.0f64);
    const H: f32 = 1e-2;
    for _ in 0..60 {
        let in_head = rng.bernoulli(0.5);
        let n = if in_head { head.store.len() } else { model.store.len() };
        let pi = rng.below(n);
        let numel = if in_head { head.store.values()[pi].numel() } else { model.store.values()[pi].numel() };
        let j = rng.below(numel);
        let eval = |delta: f32| {
            let (mut m, mut h) = (model.clone(), head.clone());
            if in_head {
                h.store.values_mut()[pi].data_mut()[j] += delta;
            } else {
                m.store.values_mut()[pi].data_mut()[j] += delta;
            }
            value(&m, &h)
        };
        let numeric = (eval(H) - eval(-H)) / (2.0 * H as f64);
        let analytic = if in_head { gh[pi].data()[j] } else { gw[pi].data()[j] } as f64;
        diff2 += (analytic - numeric).powi(2);
        ref2 += numeric.powi(2).max(analytic * analytic);
    }
    let rel = diff2.sqrt() / ref2.sqrt().max(1e-6);
    assert!(rel <= 1e-3, "{kind:?} loss {which_loss}: relative error {rel:.2e}");
}

#[test]
fn diffusion_loss_gradient_matches_finite_differences() {
    check_joint_gradients(HeadKind::CsBc, ScoreKind::Brier, 0);
}

#[test]
fn probe_loss_gradients_match_finite_differences() {
    check_joint_gradients(HeadKind::CsBc, ScoreKind::Brier, 1);
    check_joint_gradients(HeadKind::Fsc, ScoreKind::Bce, 1);
    check_joint_gradients(HeadKind::Mcc, ScoreKind::Ce, 1);
}

#[test]
fn always_accurate_regime_drives_confidence_up() {
    let w = tiny_world();
    let mut model = Denoiser::new(&w, &mut Rng::new(51)).unwrap();
    let cfg = ProbeConfig { fixed_eps_v: 1e6, ..tiny_probe(HeadKind::Fsc, ScoreKind::Brier) };
    let mut head = ProbeHead::new(&cfg, &w, &mut Rng::new(52)).unwrap();
    let eps = episodes(&w, 16, 53);
    let opt = OptimConfig { steps: 500, batch_size: 4, ..OptimConfig::default() };
    let mut seen = 0;
    let log = train_joint(&mut model, &mut head, &eps, &opt, 54, |_| seen += 1).unwrap();
    assert_eq!(seen, 500);
    assert_eq!(log.rows.len(), 500);
    let f = features(&model, 55);
    let q = probe_forward(&head, &f.z, &f.c, None).unwrap();
    let mean = q.tensor().mean();
    assert!(mean >= 0.9, "mean confidence {mean}");
    let csv = log.to_csv();
    assert!(csv.starts_with("step,L_theta,L_phi,lr\n0,"));
    assert_eq!(csv.lines().count(), 501);
}

#[test]
fn joint_training_is_deterministic_and_monotone_in_threshold() {
    let w = tiny_world();
    let eps = episodes(&w, 16, 61);
    let opt = OptimConfig { steps: 300, batch_size: 4, ..OptimConfig::default() };
    let run = || {
        let mut model = Denoiser::new(&w, &mut Rng::new(62)).unwrap();
        let mut head = ProbeHead::new(&tiny_probe(HeadKind::CsBc, ScoreKind::Brier), &w, &mut Rng::new(63)).unwrap();
        let log = train_joint(&mut model, &mut head, &eps, &opt, 64, |_| {}).unwrap();
        (model, head, log)
    };
    let (model, head, log) = run();
    let (_, _, again) = run();
    assert_eq!(log, again);
    let (mut lo, mut hi) = (0.0, 0.0);
    for i in 0..20 {
        let f = features(&model, 200 + i);
        let q = head.confidence(&f.z, &f.c, &[Some(0.1), Some(1.0)]).unwrap();
        lo += q[0].tensor().mean();
        hi += q[1].tensor().mean();
    }
    assert!(hi >= lo, "confidence at the widest threshold {hi} below the narrowest {lo}");
}

#[test]
fn mismatched_head_geometry_is_rejected() {
    let w = tiny_world();
    let mut model = Denoiser::new(&w, &mut Rng::new(1)).unwrap();
    let other = DenoiserConfig { width: 16, ..w.clone() };
    let mut head = ProbeHead::new(&ProbeConfig::default(), &other, &mut Rng::new(2)).unwrap();
    let eps = episodes(&w, 2, 3);
    assert!(train_joint(&mut model, &mut head, &eps, &OptimConfig { steps: 1, ..OptimConfig::default() }, 4, |_| {}).is_err());
}

#[test]
fn probe_checkpoint_round_trip() {
    let (model, mut head) = fresh_pair(HeadKind::Mcc, ScoreKind::Ce, 71);
    randomize_output(&mut head, 72, 0.3);
    let dir = tempfile::tempdir().unwrap();
    head.save(dir.path(), "probe", 71).unwrap();
    let back = ProbeHead::load(dir.path(), "probe").unwrap();
    assert_eq!(back.cfg, head.cfg);
    assert_eq!(back.store, head.store);
    let f = features(&model, 73);
    assert_eq!(probe_forward(&back, &f.z, &f.c, None).unwrap(), probe_forward(&head, &f.z, &f.c, None).unwrap());
    assert!(crate::world::Denoiser::load(dir.path(), "probe").is_err());
}

/// Trains a head alone on features that identify a stratum, with outcomes
/// drawn from a per-stratum distribution; returns the mean prediction
/// per stratum and class.
fn fit_known_rates(kind: HeadKind, score: ScoreKind, dists: &[Vec<f64>], steps: usize) -> Vec<Vec<f64>> {
    let w = tiny_world();
    let cfg = ProbeConfig { width: 16, heads: 2, blocks: 2, ..tiny_probe(kind, score) };
    let mut head = ProbeHead::new(&cfg, &w, &mut Rng::new(81)).unwrap();
    let mut rng = Rng::new(82);
    let codes: Vec<Tensor> = dists.iter().map(|_| Tensor::randn(&[w.width], 1.0, &mut rng)).collect();
    let batch = 8;
    let layout = VideoLayout::new(batch, w.frames, w.sites());
    let tokens = layout.rows();
    let c = Tensor::zeros(&[batch * w.frames, w.width]);
    let sample_z = |rng: &mut Rng| {
        let strata: Vec<usize> = (0..tokens).map(|_| rng.below(dists.len())).collect();
        let data = strata.iter().flat_map(|&s| codes[s].data().to_vec()).collect();
        (strata, Tensor::new(&[tokens, w.width], data).unwrap())
    };
    let draw = |rng: &mut Rng, p: &[f64]| -> usize {
        let u = rng.uniform_f64();
        let mut acc = 0.0;
        for (k, &pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return k;
            }
        }
        p.len() - 1
    };
    let eps = (kind == HeadKind::CsBc).then_some(0.5);
    let sched = CosineSchedule { base_lr: 0.01, total_steps: steps };
    let mut adam = Adam::new();
    let ch = w.latent_channels;
    for step in 0..steps {
        let (strata, z) = sample_z(&mut rng);
        let targets: Vec<f32> = strata
            .iter()
            .flat_map(|&s| (0..ch).map(|_| draw(&mut rng, &dists[s]) as f32).collect::<Vec<_>>())
            .collect();
        let targets: Vec<f32> = match kind {
            HeadKind::Mcc => targets,
            // Binary strata store P(y = 0) first, so class 1 is "accurate".
            _ => targets.iter().map(|&k| if k == 1.0 { 1.0 } else { 0.0 }).collect(),
        };
        let mut tape = Tape::new();
        let p = head.store.bind(&mut tape, true);
        let zv = tape.constant(z);
        let cv = tape.constant(c.clone());
        let h = head.trunk(&mut tape, &p, zv, cv, &layout);
        let logits = head.readout(&mut tape, &p, h, cv, eps, &layout);
        let l = head.score_loss(&mut tape, logits, &targets, &vec![1.0; targets.len()]);
        let mut g = tape.backward(l).unwrap();
        let g = p.collect(&mut g, &head.store);
        adam.step(head.store.values_mut(), &g, sched.lr(step)).unwrap();
    }
    // Evaluate on single videos assembled from one stratum each.
    dists
        .iter()
        .enumerate()
        .map(|(s, d)| {
            let z = Tensor::new(&[w.tokens(), w.width], codes[s].data().repeat(w.tokens())).unwrap();
            let cz = Tensor::zeros(&[w.frames, w.width]);
            let q = probe_forward(&head, &z, &cz, eps).unwrap();
            match q {
                ConfidenceMap::Binary(t) => vec![t.mean()],
                ConfidenceMap::Simplex(t) => {
                    let k = d.len();
                    let rows = t.numel() / k;
                    (0..k).map(|j| t.data().chunks_exact(k).map(|r| r[j] as f64).sum::<f64>() / rows as f64).collect()
                }
            }
        })
        .collect()
}

#[test]
fn trained_probes_recover_known_rates() {
    let rates = [0.1, 0.3, 0.5, 0.7, 0.9];
    let binary: Vec<Vec<f64>> = rates.iter().map(|&p| vec![1.0 - p, p]).collect();
    for score in [ScoreKind::Brier, ScoreKind::Bce] {
        let q = fit_known_rates(HeadKind::CsBc, score, &binary, 1500);
        for (p, qs) in rates.iter().zip(&q) {
            assert!((qs[0] - p).abs() <= 0.05, "{score:?}: rate {p} predicted {}", qs[0]);
        }
    }
    let mut cat = Vec::new();
    for &p in &rates {
        let mut d = vec![0.0; 29];
        d[0] = p * 0.5;
        d[10] = p * 0.5;
        d[28] = 1.0 - p;
        cat.push(d);
    }
    let q = fit_known_rates(HeadKind::Mcc, ScoreKind::Ce, &cat, 1500);
    for (d, qs) in cat.iter().zip(&q) {
        for (k, (&pk, &qk)) in d.iter().zip(qs).enumerate() {
            assert!((pk - qk).abs() <= 0.05, "class {k}: true {pk} predicted {qk}");
        }
    }
}
