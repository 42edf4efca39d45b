mod common;

use common::oracle;
use lreid_core::lifelong::{distill_kl, distill_kl_rows};
use lreid_core::tga::{ce_loss, ce_loss_batch, orthogonal_loss, triplet_loss, triplet_loss_with, TripletDistance};
use lreid_core::{Error, Matrix};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn orthogonal_examples() {
    let eye = Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 5.0]]);
    assert_eq!(orthogonal_loss(&eye).unwrap(), 0.0);
    let same = Matrix::from_rows(&vec![vec![0.3, -1.0, 2.0]; 3]);
    assert!(close(orthogonal_loss(&same).unwrap(), 3.0, 1e-12));
    let with_zero = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 0.0]]);
    assert!(matches!(orthogonal_loss(&with_zero), Err(Error::Degenerate(_))));
}

#[test]
fn ce_examples() {
    assert!(close(ce_loss(&[0.0, 0.0], 0).unwrap(), 2f64.ln(), 1e-12));
    assert!(close(ce_loss(&[1.0, 0.0, 0.0], 0).unwrap(), oracle::ce(&[1.0, 0.0, 0.0], 0), 1e-12));
    assert!(close(ce_loss(&[1.0, 0.0, 0.0], 0).unwrap(), 0.5514, 1e-4));
    assert!(ce_loss(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-20);
    assert!(matches!(ce_loss(&[0.0, 1.0], 2), Err(Error::InvalidInput(_))));
    let batch = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
    let want = (2f64.ln() + oracle::ce(&[1.0, 0.0], 1)) / 2.0;
    assert!(close(ce_loss_batch(&batch, &[1, 1]).unwrap(), want, 1e-12));
}

#[test]
fn triplet_examples() {
    // anchor 0: positive at 0.2, negative at 0.9
    let reps = Matrix::from_rows(&[vec![0.0], vec![0.2], vec![0.9], vec![1.1]]);
    let labels = [0, 0, 1, 1];
    let sel_free = triplet_loss(&reps, &labels, 0.3).unwrap();
    assert!(close(sel_free, oracle::triplet(&reps.to_rows(), &labels, 0.3), 1e-12));
    let single = Matrix::from_rows(&[vec![0.0], vec![0.2], vec![0.9]]);
    let two = triplet_loss(&single.clone(), &[0, 0, 1], 0.3).unwrap();
    // anchor 0: 0.2 - 0.9 + 0.3 < 0; anchor 1: 0.2 - 0.7 + 0.3 < 0; anchor 2 has no positive: 0 - 0.7 + 0.3 < 0
    assert_eq!(two, 0.0);
    let tie = Matrix::from_rows(&[vec![0.0], vec![0.5], vec![-0.5]]);
    // anchor 0 has d_p = d_n = 0.5 and contributes the margin only
    let v = triplet_loss(&tie, &[0, 0, 1], 0.3).unwrap();
    assert!(close(v, oracle::triplet(&tie.to_rows(), &[0, 0, 1], 0.3), 1e-12));
    assert!(v >= 0.3 / 3.0 - 1e-12);
    assert!(matches!(triplet_loss(&single, &[4, 4, 4], 0.3), Err(Error::InvalidBatch(_))));
    assert!(matches!(triplet_loss(&single, &[0, 1, 2], 0.3), Err(Error::InvalidBatch(_))));
}

#[test]
fn cosine_triplet_uses_one_minus_cosine() {
    let reps = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![-1.0, 0.5]]);
    let labels = [0, 0, 1, 1];
    let d = |a: &[f64], b: &[f64]| 1.0 - oracle::cosine(a, b);
    let rows = reps.to_rows();
    let mut want = 0.0;
    for a in 0..4 {
        let dp = (0..4).filter(|&j| j != a && labels[j] == labels[a]).map(|j| d(&rows[a], &rows[j])).fold(0.0, f64::max);
        let dn = (0..4).filter(|&j| labels[j] != labels[a]).map(|j| d(&rows[a], &rows[j])).fold(f64::INFINITY, f64::min);
        want += (dp - dn + 0.3f64).max(0.0);
    }
    let got = triplet_loss_with(&reps, &labels, 0.3, TripletDistance::Cosine).unwrap();
    assert!(close(got, want / 4.0, 1e-12));
}

#[test]
fn distill_examples() {
    assert_eq!(distill_kl(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0], 2.0).unwrap(), 0.0);
    // softmax([1, 0]) = [s, 1 - s] against its reverse: KL = (2s - 1) * 1 = tanh(1/2)
    let v = distill_kl(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
    assert!(close(v, 0.5f64.tanh(), 1e-12));
    assert!(close(v, 0.46212, 1e-5));
    let at: Vec<f64> = [1.0, 2.0, 4.0, 8.0].iter().map(|&t| distill_kl(&[1.0, 0.0], &[0.0, 1.0], t).unwrap()).collect();
    assert!(at.windows(2).all(|w| w[1] < w[0]), "{at:?}");
    assert!(distill_kl(&[1.0], &[1.0, 2.0], 1.0).is_err());
    assert!(distill_kl(&[1.0, 2.0], &[1.0, 2.0], 0.0).is_err());
    let src = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
    let tgt = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
    assert!(close(distill_kl_rows(&src, &tgt, 1.0).unwrap(), 0.5f64.tanh() / 2.0, 1e-12));
    assert_eq!(distill_kl_rows(&Matrix::zeros(0, 3), &Matrix::zeros(0, 3), 1.0).unwrap(), 0.0);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn nonzero_rows(m: &Matrix) -> bool {
    (0..m.rows()).all(|r| m.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-6)
}

proptest! {
    #[test]
    fn orthogonal_is_scale_invariant_and_bounded(
        (m, scales) in (2usize..6, 2usize..10).prop_flat_map(|(n, d)| (matrix(n, d), prop::collection::vec(0.01f64..100.0, n)))
    ) {
        prop_assume!(nonzero_rows(&m));
        let n = m.rows() as f64;
        let base = orthogonal_loss(&m).unwrap();
        let rows: Vec<Vec<f64>> = m.to_rows().into_iter().zip(&scales).map(|(r, c)| r.into_iter().map(|v| v * c).collect()).collect();
        let scaled = orthogonal_loss(&Matrix::from_rows(&rows)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9);
        prop_assert!(base >= 0.0 && base <= n * (n - 1.0) / 2.0 + 1e-12);
    }

    #[test]
    fn triplet_is_translation_invariant(
        (m, shift) in (2usize..8).prop_flat_map(|d| (matrix(6, d), prop::collection::vec(-5.0f64..5.0, d))),
        margin in 0.0f64..1.0,
    ) {
        let labels = [0, 1, 0, 2, 1, 2];
        let moved: Vec<Vec<f64>> = m.to_rows().into_iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let a = triplet_loss(&m, &labels, margin).unwrap();
        let b = triplet_loss(&Matrix::from_rows(&moved), &labels, margin).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn distill_is_shift_invariant_per_argument(
        (p, q) in (2usize..10).prop_flat_map(|k| (prop::collection::vec(-4.0f64..4.0, k), prop::collection::vec(-4.0f64..4.0, k))),
        c1 in -10.0f64..10.0,
        c2 in -10.0f64..10.0,
        tau in 0.25f64..8.0,
    ) {
        let base = distill_kl(&p, &q, tau).unwrap();
        let ps: Vec<f64> = p.iter().map(|v| v + c1).collect();
        let qs: Vec<f64> = q.iter().map(|v| v + c2).collect();
        prop_assert!((distill_kl(&ps, &qs, tau).unwrap() - base).abs() <= 1e-9);
        prop_assert!(base >= 0.0);
        prop_assert!(distill_kl(&p, &p, tau).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn ce_is_non_negative_and_shift_invariant(
        logits in prop::collection::vec(-10.0f64..10.0, 2..12),
        shift in -20.0f64..20.0,
        pick in 0usize..100,
    ) {
        let label = pick % logits.len();
        let base = ce_loss(&logits, label).unwrap();
        let moved: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        prop_assert!(base >= 0.0);
        prop_assert!((ce_loss(&moved, label).unwrap() - base).abs() <= 1e-9);
    }
}
