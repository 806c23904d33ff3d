mod common;

use proptest::prelude::*;

use common::ties_oracle;
use merge_surgeon::merge::{task_arithmetic, ties_merge, weight_average};
use merge_surgeon::{ParamSet, Tensor};

fn set(rows: usize, cols: usize, values: &[f32]) -> ParamSet {
    let mut p = ParamSet::new();
    p.set("block1.weight", Tensor::new(vec![rows, cols], values[..rows * cols].to_vec()).unwrap());
    p.set("block1.bias", Tensor::new(vec![rows], values[rows * cols..].to_vec()).unwrap());
    p
}

fn flat(p: &ParamSet) -> Vec<f32> {
    p.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

/// Values on a quarter grid so that equal magnitudes and zero sums show up.
fn grid_values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec((-8i32..=8).prop_map(|v| v as f32 / 4.0), n)
}

fn instance() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<Vec<f32>>)> {
    (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(rows, cols, t)| {
        let n = rows * cols + rows;
        (Just(rows), Just(cols), grid_values(n), prop::collection::vec(grid_values(n), t))
    })
}

proptest! {
    #[test]
    fn ties_matches_brute_force((rows, cols, base, experts) in instance(), keep in 0.05f64..=1.0, lambda in 0.1f64..2.0) {
        let b = set(rows, cols, &base);
        let ex: Vec<ParamSet> = experts.iter().map(|e| set(rows, cols, e)).collect();
        let refs: Vec<&ParamSet> = ex.iter().collect();
        let got = flat(&ties_merge(&b, &refs, lambda, keep).unwrap());
        let ordered: Vec<Vec<f32>> = ex.iter().map(flat).collect();
        let want = ties_oracle(&flat(&b), &ordered, lambda, keep);
        prop_assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), want.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn ties_result_stays_between_base_and_elected_extremes((rows, cols, base, experts) in instance(), keep in 0.05f64..=1.0) {
        let b = set(rows, cols, &base);
        let ex: Vec<ParamSet> = experts.iter().map(|e| set(rows, cols, e)).collect();
        let refs: Vec<&ParamSet> = ex.iter().collect();
        let merged = flat(&ties_merge(&b, &refs, 1.0, keep).unwrap());
        let flats: Vec<Vec<f32>> = ex.iter().map(flat).collect();
        for (i, m) in merged.iter().enumerate() {
            let lo = flats.iter().map(|e| e[i]).fold(base[i], f32::min);
            let hi = flats.iter().map(|e| e[i]).fold(base[i], f32::max);
            prop_assert!(*m >= lo - 1e-6 && *m <= hi + 1e-6);
        }
    }

    #[test]
    fn task_arithmetic_at_one_over_t_is_the_average((rows, cols, base, experts) in instance()) {
        let b = set(rows, cols, &base);
        let ex: Vec<ParamSet> = experts.iter().map(|e| set(rows, cols, e)).collect();
        let refs: Vec<&ParamSet> = ex.iter().collect();
        let ta = flat(&task_arithmetic(&b, &refs, 1.0 / refs.len() as f64).unwrap());
        let avg = flat(&weight_average(&refs).unwrap());
        for (a, w) in ta.iter().zip(&avg) {
            prop_assert!((a - w).abs() <= 1e-6);
        }
    }

    #[test]
    fn weight_average_is_order_invariant((rows, cols, _base, experts) in instance()) {
        let ex: Vec<ParamSet> = experts.iter().map(|e| set(rows, cols, e)).collect();
        let fwd: Vec<&ParamSet> = ex.iter().collect();
        let rev: Vec<&ParamSet> = ex.iter().rev().collect();
        prop_assert_eq!(flat(&weight_average(&fwd).unwrap()), flat(&weight_average(&rev).unwrap()));
    }
}

#[test]
fn ties_rejects_out_of_range_keep() {
    let b = set(1, 1, &[0.0, 0.0]);
    let e = set(1, 1, &[1.0, 1.0]);
    assert!(ties_merge(&b, &[&e], 1.0, 0.0).is_err());
    assert!(ties_merge(&b, &[&e], 1.0, 1.5).is_err());
}
