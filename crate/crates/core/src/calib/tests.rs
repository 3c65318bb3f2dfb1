use proptest::prelude::*;

use super::*;
use crate::numerics::Rng;

fn meta() -> ReportMeta {
    ReportMeta { head: Some("cs_bc".into()), eps_v: Some(0.5), dataset: "test".into() }
}

/// Second, loop-based implementation of ECE and MCE.
fn brute_force(q: &[f32], y: &[f32], m: usize) -> (f64, f64) {
    let n = q.len() as f64;
    let (mut ece, mut mce) = (0.0f64, 0.0f64);
    for bin in 0..m {
        let lo = bin as f64 / m as f64;
        let hi = (bin + 1) as f64 / m as f64;
        let members: Vec<usize> = (0..q.len())
            .filter(|&i| {
                let v = q[i] as f64;
                v >= lo && (v < hi || (bin == m - 1 && v <= 1.0))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let conf = members.iter().map(|&i| q[i] as f64).sum::<f64>() / k;
        let acc = members.iter().map(|&i| y[i] as f64).sum::<f64>() / k;
        ece += k / n * (acc - conf).abs();
        mce = mce.max((acc - conf).abs());
    }
    (ece, mce)
}

#[test]
fn perfect_predictions_have_zero_error() {
    let q = [0.0f32, 1.0, 1.0, 0.0, 1.0];
    let r = reliability(&q, &q, DEFAULT_BINS, meta()).unwrap();
    assert_eq!(r.ece, 0.0);
    assert_eq!(r.mce, 0.0);
    assert_eq!(r.n, 5);
    assert_eq!(r.bins[19].count, 3);
}

#[test]
fn hand_worked_example() {
    let q = [0.9f32, 0.9, 0.9, 0.1];
    let y = [1.0f32, 1.0, 1.0, 0.0];
    let r = reliability(&q, &y, 20, meta()).unwrap();
    assert!((r.ece - 0.1).abs() < 1e-7, "ece {}", r.ece);
    assert!((r.mce - 0.1).abs() < 1e-7, "mce {}", r.mce);
    assert_eq!(r.bins.iter().filter(|b| b.count > 0).count(), 2);
}

#[test]
fn bin_edges_are_half_open_with_a_closed_top() {
    let acc = ReliabilityAccumulator::new(20).unwrap();
    assert_eq!(acc.bin_index(0.0), 0);
    assert_eq!(acc.bin_index(0.049), 0);
    assert_eq!(acc.bin_index(0.05), 1);
    assert_eq!(acc.bin_index(0.95), 19);
    assert_eq!(acc.bin_index(1.0), 19);
}

#[test]
fn matches_brute_force_on_random_samples() {
    let mut rng = Rng::new(5);
    for case in 0..100 {
        let n = 1 + rng.below(300);
        let q: Vec<f32> = (0..n).map(|_| rng.uniform()).collect();
        let y: Vec<f32> = q.iter().map(|&p| if rng.bernoulli((p as f64 * 0.8).min(1.0)) { 1.0 } else { 0.0 }).collect();
        let r = reliability(&q, &y, 20, meta()).unwrap();
        let (ece, mce) = brute_force(&q, &y, 20);
        assert!((r.ece - ece).abs() < 1e-12, "case {case}: {} vs {ece}", r.ece);
        assert!((r.mce - mce).abs() < 1e-12, "case {case}: {} vs {mce}", r.mce);
    }
}

proptest! {
    #[test]
    fn ece_never_exceeds_mce(pairs in proptest::collection::vec((0.0f32..=1.0, any::<bool>()), 1..200), m in 1usize..40) {
        let q: Vec<f32> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f32> = pairs.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
        let r = reliability(&q, &y, m, ReportMeta::default()).unwrap();
        prop_assert!(r.ece <= r.mce + 1e-12);
        prop_assert!(r.mce <= 1.0);
        prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<u64>(), pairs.len() as u64);
        let (ece, mce) = brute_force(&q, &y, m);
        prop_assert!((r.ece - ece).abs() < 1e-9);
        prop_assert!((r.mce - mce).abs() < 1e-9);
    }
}

#[test]
fn calibrated_sampling_converges() {
    let mut rng = Rng::new(9);
    let n = 100_000;
    let q: Vec<f32> = (0..n).map(|_| rng.uniform()).collect();
    let y: Vec<f32> = q.iter().map(|&p| if rng.bernoulli(p as f64) { 1.0 } else { 0.0 }).collect();
    let r = reliability(&q, &y, 20, meta()).unwrap();
    assert!(r.ece <= 0.02, "ece {}", r.ece);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(reliability(&[], &[], 20, meta()).is_err());
    assert!(reliability(&[1.2], &[1.0], 20, meta()).is_err());
    assert!(reliability(&[-0.1], &[1.0], 20, meta()).is_err());
    assert!(reliability(&[0.5], &[0.5], 20, meta()).is_err());
    assert!(reliability(&[0.5, 0.2], &[1.0], 20, meta()).is_err());
    assert!(reliability(&[0.5], &[1.0], 0, meta()).is_err());
}

#[test]
fn constant_prediction_error_is_the_rate_gap() {
    let y: Vec<f32> = (0..1000).map(|i| if i % 10 < 7 { 1.0 } else { 0.0 }).collect();
    let r = reliability(&vec![0.5; 1000], &y, 20, meta()).unwrap();
    assert!((r.ece - 0.2).abs() < 1e-12);
    assert!((r.mce - 0.2).abs() < 1e-12);
    assert!((r.mean_confidence() - 0.5).abs() < 1e-12);
    assert!((r.accuracy() - 0.7).abs() < 1e-12);
}

#[test]
fn aggregation_pools_pairs() {
    let q = [0.12f32, 0.33, 0.9, 0.91];
    let y = [0.0f32, 1.0, 1.0, 0.0];
    let r = reliability(&q, &y, 20, meta()).unwrap();
    let twice = aggregate_reports(&[r.clone(), r.clone()], meta()).unwrap();
    assert_eq!(twice.n, 2 * r.n);
    for (a, b) in twice.bins.iter().zip(&r.bins) {
        assert_eq!(a.count, 2 * b.count);
        assert_eq!(a.mean_confidence(), b.mean_confidence());
        assert_eq!(a.accuracy(), b.accuracy());
    }
    assert!((twice.ece - r.ece).abs() < 1e-12);

    let one = reliability(&[0.41], &[1.0], 20, meta()).unwrap();
    let three = reliability(&[0.43, 0.43, 0.43], &[0.0, 1.0, 0.0], 20, meta()).unwrap();
    let pooled = aggregate_reports(&[one, three], meta()).unwrap();
    let bin = pooled.bins[8];
    assert_eq!(bin.count, 4);
    assert!((bin.mean_confidence().unwrap() - (0.41f32 as f64 + 3.0 * 0.43f32 as f64) / 4.0).abs() < 1e-12);
    assert!((bin.accuracy().unwrap() - 0.5).abs() < 1e-12);

    let perfect = reliability(&[0.0, 1.0], &[0.0, 1.0], 20, meta()).unwrap();
    assert_eq!(aggregate_reports(&[perfect.clone(), perfect], meta()).unwrap().ece, 0.0);

    let coarse = reliability(&[0.5], &[1.0], 10, meta()).unwrap();
    assert!(aggregate_reports(&[r.clone(), coarse], meta()).is_err());
    assert!(aggregate_reports(&[], meta()).is_err());
}

#[test]
fn aggregate_equals_binning_the_concatenation() {
    let mut rng = Rng::new(13);
    let parts: Vec<(Vec<f32>, Vec<f32>)> = (0..5)
        .map(|_| {
            let q: Vec<f32> = (0..50).map(|_| rng.uniform()).collect();
            let y = q.iter().map(|&p| if rng.bernoulli(p as f64) { 1.0 } else { 0.0 }).collect();
            (q, y)
        })
        .collect();
    let reports: Vec<_> = parts.iter().map(|(q, y)| reliability(q, y, 20, meta()).unwrap()).collect();
    let pooled = aggregate_reports(&reports, meta()).unwrap();
    let all_q: Vec<f32> = parts.iter().flat_map(|p| p.0.clone()).collect();
    let all_y: Vec<f32> = parts.iter().flat_map(|p| p.1.clone()).collect();
    let direct = reliability(&all_q, &all_y, 20, meta()).unwrap();
    assert_eq!(pooled.n, direct.n);
    assert!((pooled.ece - direct.ece).abs() < 1e-12);
    assert!((pooled.mce - direct.mce).abs() < 1e-12);
    let (mean_ece, _) = mean_errors(&reports).unwrap();
    assert!((mean_ece - reports.iter().map(|r| r.ece).sum::<f64>() / 5.0).abs() < 1e-15);
}

#[test]
fn report_json_round_trip() {
    let r = reliability(&[0.2, 0.7], &[0.0, 1.0], 20, meta()).unwrap();
    let back: ReliabilityReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn spearman_matches_reference_values() {
    // Reference values from an established statistics package.
    let (r, p) = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
    assert!((r - 0.8207826816681233).abs() < 1e-12);
    assert!((p - 0.08858700531354381).abs() < 1e-9);
    let xs = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0, 5.0];
    let ys = [2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0, 8.0, 2.0, 8.0, 4.0];
    let (r, p) = spearman(&xs, &ys).unwrap();
    assert!((r - 0.1384567651467695).abs() < 1e-12);
    assert!((p - 0.6847503048108998).abs() < 1e-9);
    assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn monotone_relations_give_unit_coefficients() {
    let xs: Vec<f64> = (0..30).map(|i| i as f64 * 0.37 + (i * i) as f64 * 0.01).collect();
    let mut rng = Rng::new(1);
    let up = shepherds_pi(&xs, &xs, 1000, &mut rng).unwrap();
    assert!((up.coefficient - 1.0).abs() < 1e-12);
    assert_eq!(up.retained + up.outliers, 30);
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    let down = shepherds_pi(&xs, &neg, 1000, &mut rng).unwrap();
    assert!((down.coefficient + 1.0).abs() < 1e-12);
    assert_eq!(down.p_value, 0.0);
}

#[test]
fn planted_outlier_is_removed() {
    let xs: Vec<f64> = (1..=50).map(|i| i as f64).collect();
    let mut ys = xs.clone();
    let max = 50.0;
    let mut xo = xs.clone();
    xo.push(max * 10.0);
    ys.push(-max * 10.0);
    let res = shepherds_pi(&xo, &ys, 1000, &mut Rng::new(3)).unwrap();
    assert_eq!(res.outliers, 1);
    assert_eq!(res.retained, 50);
    assert!(res.coefficient > 0.95);
    let (plain, _) = spearman(&xo, &ys).unwrap();
    assert!(plain < res.coefficient, "plain {plain} vs robust {}", res.coefficient);
}

#[test]
fn affine_rescaling_leaves_the_result_unchanged() {
    let mut rng = Rng::new(7);
    let xs: Vec<f64> = (0..200).map(|_| rng.normal() as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| -0.3 * x + rng.normal() as f64 + if rng.bernoulli(0.03) { 8.0 } else { 0.0 }).collect();
    let base = shepherds_pi(&xs, &ys, 300, &mut Rng::new(8)).unwrap();
    let xs2: Vec<f64> = xs.iter().map(|x| 4.0 * x - 2.0).collect();
    let ys2: Vec<f64> = ys.iter().map(|y| 0.5 * y + 10.0).collect();
    let moved = shepherds_pi(&xs2, &ys2, 300, &mut Rng::new(8)).unwrap();
    assert_eq!(base.outliers, moved.outliers);
    assert!((base.coefficient - moved.coefficient).abs() < 1e-12);
    assert!(base.outliers > 0);
    assert!(base.coefficient < 0.0 && base.p_value < 0.01);
    // Ranks ignore strictly monotone transforms.
    let (r1, _) = spearman(&xs, &ys).unwrap();
    let (r2, _) = spearman(&xs.iter().map(|x| x.exp()).collect::<Vec<_>>(), &ys).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn shepherds_pi_rejects_bad_input() {
    let mut rng = Rng::new(1);
    assert!(shepherds_pi(&[1.0; 9], &[1.0; 9], 10, &mut rng).is_err());
    assert!(shepherds_pi(&[1.0; 12], &[2.0; 12], 10, &mut rng).is_err());
    assert!(shepherds_pi(&[1.0; 12], &[2.0; 11], 10, &mut rng).is_err());
    let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
    assert!(shepherds_pi(&xs, &xs, 0, &mut rng).is_err());
    let mut bad = xs.clone();
    bad[3] = f64::NAN;
    assert!(shepherds_pi(&bad, &xs, 10, &mut rng).is_err());
}

#[test]
fn shepherds_pi_is_reproducible() {
    let mut rng = Rng::new(2);
    let xs: Vec<f64> = (0..100).map(|_| rng.normal() as f64).collect();
    let ys: Vec<f64> = (0..100).map(|_| rng.normal() as f64).collect();
    let a = shepherds_pi(&xs, &ys, 200, &mut Rng::new(4)).unwrap();
    let b = shepherds_pi(&xs, &ys, 200, &mut Rng::new(4)).unwrap();
    assert_eq!(a, b);
    assert!(a.coefficient.abs() <= 1.0 && (0.0..=1.0).contains(&a.p_value));
}

#[test]
fn grouped_pairs_equal_individual_pairs() {
    let mut one = ReliabilityAccumulator::new(20).unwrap();
    let mut grouped = ReliabilityAccumulator::new(20).unwrap();
    for k in 0..7 {
        one.add(0.625, if k < 3 { 1.0 } else { 0.0 }).unwrap();
    }
    grouped.add_group(0.625, 7, 3).unwrap();
    assert_eq!(one, grouped);
    assert!(grouped.add_group(0.5, 2, 3).is_err());
    assert!(grouped.add_group(1.5, 2, 1).is_err());
}
