use gforest::data::{apply_mcar, synth_domain, Mask};
use gforest::evaluator::{fold_assignment, perr, rmse, sinkhorn_ot, welch_t_test, FeatureStats, OtOptions};
use gforest::{Dataset, Feature, FeatureDomain, Schema};
use proptest::prelude::*;

fn schema() -> Schema {
    Schema::new(vec![
        Feature {
            name: "x".into(),
            domain: FeatureDomain::Real { lo: -5.0, hi: 5.0 },
        },
        Feature {
            name: "c".into(),
            domain: FeatureDomain::Categorical {
                modalities: vec!["a".into(), "b".into()],
            },
        },
    ])
    .unwrap()
}

fn sample() -> impl Strategy<Value = Dataset> {
    prop::collection::vec((-5.0..5.0f64, 0..2usize), 2..30).prop_map(|rows| {
        Dataset::new(schema(), rows.into_iter().map(|(x, c)| vec![Some(x), Some(c as f64)]).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ot_is_symmetric_and_nonnegative(a in sample(), b in sample()) {
        let stats = FeatureStats::from_dataset(&a);
        let opts = OtOptions::default();
        let ab = sinkhorn_ot(&a, &b, &stats, &opts).unwrap();
        let ba = sinkhorn_ot(&b, &a, &stats, &opts).unwrap();
        prop_assert_eq!(ab.cost.to_bits(), ba.cost.to_bits());
        prop_assert!(ab.cost >= 0.0);
    }

    #[test]
    fn rmse_matches_hand_sum(a in sample(), seed in 0..100u64) {
        let (masked, mask) = apply_mcar(&a, 0.3, seed).unwrap();
        let shifted: Vec<Vec<Option<f64>>> = a.rows().iter().map(|r| vec![r[0].map(|x| x * 0.5), r[1]]).collect();
        let imputed = Dataset::new_unchecked(a.schema().clone(), shifted).unwrap();
        let got = rmse(&imputed, &a, &mask).unwrap();
        let diffs: Vec<f64> = (0..a.m()).filter(|&i| mask.get(i, 0)).map(|i| 0.5 * a.row(i)[0].unwrap()).collect();
        match got {
            None => prop_assert!(diffs.is_empty()),
            Some(v) => {
                let want = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
                prop_assert!((v - want).abs() < 1e-12);
            }
        }
        prop_assert_eq!(masked.missing_count(), mask.count());
    }
}

#[test]
fn ot_grows_with_a_shift() {
    let ds = synth_domain("circGauss", 0).unwrap();
    let a = ds.subset(&(0..600).step_by(2).collect::<Vec<_>>());
    let b = ds.subset(&(1..600).step_by(2).collect::<Vec<_>>());
    let moved: Vec<Vec<Option<f64>>> = b.rows().iter().map(|r| vec![r[0].map(|x| x + 1.0), r[1]]).collect();
    let moved = Dataset::new_unchecked(b.schema().clone(), moved).unwrap();
    let stats = FeatureStats::from_dataset(&a);
    let opts = OtOptions::default();
    let near = sinkhorn_ot(&a, &b, &stats, &opts).unwrap();
    let far = sinkhorn_ot(&a, &moved, &stats, &opts).unwrap();
    assert!(near.converged && far.converged);
    assert!(far.cost > near.cost + 0.5, "{} vs {}", near.cost, far.cost);
}

#[test]
fn perr_counts_wrong_categories() {
    let rows = |cs: &[f64]| cs.iter().map(|&c| vec![Some(0.0), Some(c)]).collect::<Vec<_>>();
    let truth = Dataset::new(schema(), rows(&[0.0, 1.0, 1.0, 0.0])).unwrap();
    let imputed = Dataset::new(schema(), rows(&[0.0, 0.0, 1.0, 1.0])).unwrap();
    let mask = Mask::new(vec![
        vec![false, true],
        vec![false, true],
        vec![false, false],
        vec![false, true],
    ]);
    assert_eq!(perr(&imputed, &truth, &mask).unwrap(), Some(2.0 / 3.0));
    assert_eq!(rmse(&imputed, &truth, &mask).unwrap(), None);
}

#[test]
fn folds_cover_every_row_once_and_balance() {
    let ds = synth_domain("ringGauss", 2).unwrap();
    let folds = fold_assignment(&ds, 5, 7).unwrap();
    assert_eq!(folds.len(), ds.m());
    let mut sizes = [0usize; 5];
    for f in folds {
        sizes[f] += 1;
    }
    let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    assert!(hi - lo <= 1, "{sizes:?}");
}

#[test]
fn welch_matches_a_hand_computation() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [2.0, 4.0, 6.0, 8.0, 10.0];
    let (t, p) = welch_t_test(&a, &b).unwrap();
    // Sample variances 5/3 and 10; t = (2.5 - 6) / sqrt(5/12 + 2).
    let want = -3.5 / (5.0 / 12.0 + 2.0f64).sqrt();
    assert!((t - want).abs() < 1e-12, "{t}");
    assert!(p > 0.01 && p < 0.1, "{p}");
}
