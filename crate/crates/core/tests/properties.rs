use proptest::prelude::*;

use gap_core::linalg::{mode_n_fold, mode_n_unfold, orient_min_rows, svd};
use gap_core::par::Executor;
use gap_core::persist::{decode_tensors, encode_tensors};
use gap_core::preconditioners::{approx_gap_transform, gap_transform, sp, sp_inv, GapMeta};
use gap_core::Tensor;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

fn wide_matrix() -> impl Strategy<Value = Tensor> {
    matrix(8, 12).prop_map(|g| if g.rows() > g.cols() { g.transpose().unwrap() } else { g })
}

fn tensor3() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(a, b, c)| {
        prop::collection::vec(-1.0f64..1.0, a * b * c).prop_map(move |d| Tensor::new(vec![a, b, c], d).unwrap())
    })
}

fn gram_error(q: &Tensor, expected_rank: usize) -> f64 {
    let gram = q.transpose().unwrap().matmul(q).unwrap();
    let mut err: f64 = 0.0;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j && i < expected_rank { 1.0 } else { 0.0 };
            if i == j && i >= expected_rank {
                continue;
            }
            err = err.max((gram.at(i, j) - target).abs());
        }
    }
    err
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn svd_reconstructs_and_is_orthonormal(g in wide_matrix()) {
        let res = svd(&g).unwrap();
        let scale = g.max_abs().max(1.0);
        prop_assert!(res.reconstruct().max_abs_diff(&g) < 1e-10 * scale);
        let s = res.sigma.data();
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(gram_error(&res.u, g.rows()) < 1e-10);
        let rank = s.iter().filter(|&&v| v > 1e-9 * scale).count();
        prop_assert!(gram_error(&res.v, rank) < 1e-10);
    }

    #[test]
    fn unfold_then_fold_is_identity(t in tensor3(), mode in 1usize..=3) {
        let unfolded = mode_n_unfold(&t, mode).unwrap();
        prop_assert_eq!(unfolded.rows(), t.shape()[mode - 1]);
        prop_assert_eq!(unfolded.len(), t.len());
        prop_assert_eq!(mode_n_fold(&unfolded, mode, t.shape()).unwrap(), t);
    }

    #[test]
    fn unfolding_permutes_entries(t in tensor3(), mode in 1usize..=3) {
        let mut a: Vec<f64> = t.data().to_vec();
        let mut b: Vec<f64> = mode_n_unfold(&t, mode).unwrap().into_data();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softplus_inverse_round_trips(y in 1e-6f64..50.0) {
        let x = sp_inv(y).unwrap();
        prop_assert!((sp(x) - y).abs() <= 1e-10 * y.max(1.0));
    }

    #[test]
    fn softplus_is_positive_and_monotone(a in -30.0f64..30.0, d in 1e-3f64..5.0) {
        prop_assert!(sp(a) > 0.0);
        prop_assert!(sp(a + d) > sp(a));
    }

    #[test]
    fn preconditioned_step_is_a_descent_direction(
        g in wide_matrix(),
        raw in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        prop_assume!(g.frobenius_norm() > 1e-6);
        let unfolded = orient_min_rows(&g).unwrap();
        let meta = GapMeta::new(raw[..unfolded.rows()].to_vec());
        let p = gap_transform(&unfolded, &meta).unwrap();
        prop_assert_eq!(p.shape(), g.shape());
        prop_assert!(g.dot(&p) > 0.0);
        let approx = approx_gap_transform(&unfolded.matrix, &meta).unwrap();
        prop_assert!(unfolded.matrix.dot(&approx) > 0.0);
    }

    #[test]
    fn state_encoding_round_trips(ts in prop::collection::vec(matrix(4, 4), 0..5)) {
        let refs: Vec<&Tensor> = ts.iter().collect();
        let decoded = decode_tensors(&encode_tensors(&refs)).unwrap();
        prop_assert_eq!(decoded, ts);
    }
}

#[test]
fn executors_agree_bit_for_bit() {
    let f = |i: usize| (0..=i).map(|k| (k as f64).sqrt().sin()).sum::<f64>();
    let seq = Executor::new(1).map(200, f);
    let par = Executor::new(0).map(200, f);
    assert_eq!(seq, par);
}
