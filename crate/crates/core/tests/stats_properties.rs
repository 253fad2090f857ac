mod common;

use common::{oracle_fisher, oracle_pearson, oracle_wilcoxon};
use labelbias_core::stats::{self, Correlation, WilcoxonOutcome};
use proptest::prelude::*;

fn eighths(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-120i32..=120).prop_map(|k| k as f64 / 8.0), len)
}

fn paired(len: std::ops::RangeInclusive<usize>, lo: i32, hi: i32) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(move |n| {
        (
            prop::collection::vec((lo..=hi).prop_map(f64::from), n),
            prop::collection::vec((lo..=hi).prop_map(f64::from), n),
        )
    })
}

fn t_of(a: &[f64], b: &[f64]) -> Option<f64> {
    match stats::wilcoxon_t(a, b).unwrap() {
        WilcoxonOutcome::Statistic(w) => Some(w.t),
        WilcoxonOutcome::Degenerate => None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn pearson_matches_exact_rational_oracle((x, y) in (3usize..=16).prop_flat_map(|n| (eighths(n..=n), eighths(n..=n)))) {
        match (stats::pearson_r(&x, &y).unwrap(), oracle_pearson(&x, &y)) {
            (Correlation::Value(r), Some(o)) => prop_assert!((r - o).abs() <= 1e-12, "{} vs {}", r, o),
            (Correlation::Degenerate, None) => {}
            (got, want) => prop_assert!(false, "{:?} vs {:?}", got, want),
        }
    }

    #[test]
    fn pearson_is_symmetric_and_bounded((x, y) in (3usize..=16).prop_flat_map(|n| (eighths(n..=n), eighths(n..=n)))) {
        let (xy, yx) = (stats::pearson_r(&x, &y).unwrap(), stats::pearson_r(&y, &x).unwrap());
        prop_assert_eq!(xy, yx);
        if let Correlation::Value(r) = xy {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn fisher_matches_formula_oracle(rs in prop::collection::vec(-0.99f64..0.99, 1..=12)) {
        let got = stats::fisher_aggregate(&rs).unwrap();
        let (z, r) = oracle_fisher(&rs);
        prop_assert!((got.mean_z - z).abs() <= 1e-12 * z.abs().max(1.0));
        prop_assert!((got.combined_r - r).abs() <= 1e-12);
        prop_assert!((got.r_squared - r * r).abs() <= 1e-12);
        prop_assert_eq!(got.clamped, 0);
    }

    #[test]
    fn fisher_of_identical_inputs_returns_the_input(r in -0.99f64..0.99, n in 1usize..=8) {
        let got = stats::fisher_aggregate(&vec![r; n]).unwrap();
        prop_assert!((got.combined_r - r).abs() <= 1e-12);
    }

    #[test]
    fn wilcoxon_matches_brute_force((a, b) in paired(1..=20, -5, 5)) {
        prop_assert_eq!(t_of(&a, &b), oracle_wilcoxon(&a, &b));
    }

    #[test]
    fn wilcoxon_rank_sums_partition_the_triangle((a, b) in paired(1..=20, -5, 5)) {
        if let WilcoxonOutcome::Statistic(w) = stats::wilcoxon_t(&a, &b).unwrap() {
            let n = w.n_effective as f64;
            prop_assert_eq!(w.w_plus + w.w_minus, n * (n + 1.0) / 2.0);
            prop_assert_eq!(t_of(&b, &a), Some(w.t));
        }
    }

    // Positive affine maps preserve signs and the order of |differences|;
    // integer data and integer coefficients keep the arithmetic exact.
    #[test]
    fn wilcoxon_invariant_under_positive_affine_maps((a, b) in paired(1..=20, -50, 50), scale in 1i32..=9, shift in -20i32..=20) {
        let f = |v: &Vec<f64>| v.iter().map(|x| f64::from(scale) * x + f64::from(shift)).collect::<Vec<_>>();
        prop_assert_eq!(t_of(&f(&a), &f(&b)), t_of(&a, &b));
    }

    #[test]
    fn entropy_is_within_bounds(counts in prop::collection::vec(0u64..50, 4)) {
        let total: u64 = counts.iter().sum();
        prop_assume!(total > 0);
        let freqs: Vec<f64> = counts.iter().map(|c| *c as f64 / total as f64).collect();
        let h = stats::entropy_bits(&freqs);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&h));
    }
}

#[test]
fn monotone_but_non_affine_maps_can_change_t() {
    // |d| order flips under squaring: 1 < 1.2 becomes 1 > 0.76 after the
    // map, so T is not invariant under every monotone transform.
    let a = [0.0, 10.0, 20.0];
    let b = [1.0, 11.5, 18.8];
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    assert_eq!(t_of(&a, &b), Some(2.0));
    assert_eq!(t_of(&sq(&a), &sq(&b)), Some(3.0));
}

#[test]
fn f32_kernels_track_f64() {
    let x = [0.25f64, 0.5, 0.125, 0.75, 0.375];
    let y = [0.3f64, 0.45, 0.2, 0.7, 0.31];
    let (Correlation::Value(r64), Correlation::Value(r32)) = (
        stats::pearson_r(&x, &y).unwrap(),
        stats::pearson_r(&x.map(|v| v as f32), &y.map(|v| v as f32)).unwrap(),
    ) else {
        panic!("degenerate");
    };
    assert!((r64 - f64::from(r32)).abs() < 1e-5);
    let agg32 = stats::fisher_aggregate(&[1.0f32, 0.5]).unwrap();
    assert_eq!(agg32.clamped, 1);
    assert!(agg32.combined_r.is_finite());
}
