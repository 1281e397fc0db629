use magec_autodiff::{ParamSet, Tape, Tensor, TensorError};
use proptest::prelude::*;

#[test]
fn masked_log_softmax_assigns_neg_infinity() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(&[1.0, 1.0]));
    let lp = t.masked_log_softmax(x, &[true, false]).unwrap();
    let v = t.value(lp).data();
    assert_eq!(v[0], 0.0);
    assert_eq!(v[1], f64::NEG_INFINITY);
    assert_eq!(v[1].exp(), 0.0);
}

#[test]
fn all_masked_row_is_an_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(&[1.0, 2.0]));
    assert_eq!(
        t.masked_log_softmax(x, &[false, false]),
        Err(TensorError::AllMasked { row: 0 })
    );
}

#[test]
fn l2_normalize_known_row_and_zero_row() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap());
    let n = t.l2_normalize_rows(x).unwrap();
    let v = t.value(n).data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    assert_eq!(&v[2..], &[0.0, 0.0]);
}

#[test]
fn mean_rows_of_identical_rows() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(3, 2, vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap());
    let m = t.mean_rows(x).unwrap();
    assert_eq!(t.value(m).data(), &[1.5, -2.0]);
}

#[test]
fn sum_of_matmul_gradient_matches_hand_derivation() {
    // loss = Σ (W·x) with W 2×2 and x a column: ∂loss/∂W[i][j] = x[j].
    let mut params = ParamSet::new();
    let w = params.insert("w", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mut t = Tape::new();
    let wv = t.param(&params, w);
    let x = t.constant(Tensor::from_vec(2, 1, vec![5.0, -7.0]).unwrap());
    let y = t.matmul(wv, x).unwrap();
    let loss = t.sum(y).unwrap();
    let mut grads = params.zero_grads();
    t.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(w).data(), &[5.0, -7.0, 5.0, -7.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut params = ParamSet::new();
    let w = params.insert("w", Tensor::row(&[2.0]));
    let mut t = Tape::new();
    let wv = t.param(&params, w);
    let sq = t.square(wv).unwrap();
    let loss = t.sum(sq).unwrap();
    let mut grads = params.zero_grads();
    t.backward(loss, &mut grads).unwrap();
    t.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(w).data(), &[8.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut params = ParamSet::new();
    let w = params.insert("w", Tensor::row(&[1.0]));
    let unused = params.insert("unused", Tensor::row(&[3.0]));
    let mut t = Tape::new();
    let c = t.constant(Tensor::row(&[4.0]));
    let wv = t.param(&params, w);
    let p = t.mul(c, wv).unwrap();
    let loss = t.sum(p).unwrap();
    let mut grads = params.zero_grads();
    t.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(w).data(), &[4.0]);
    assert_eq!(grads.get(unused).data(), &[0.0]);
}

#[test]
fn backward_rejects_foreign_and_non_scalar() {
    let mut params = ParamSet::new();
    let w = params.insert("w", Tensor::row(&[1.0, 2.0]));
    let mut a = Tape::new();
    let mut b = Tape::new();
    let wa = a.param(&params, w);
    let la = a.sum(wa).unwrap();
    let mut grads = params.zero_grads();
    assert_eq!(b.backward(la, &mut grads), Err(TensorError::ForeignVar));
    let wb = b.param(&params, w);
    assert!(matches!(
        b.backward(wb, &mut grads),
        Err(TensorError::NotScalar(_))
    ));
}

#[test]
fn segment_mean_leaves_empty_segments_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(3, 1, vec![1.0, 2.0, 6.0]).unwrap());
    let s = t.segment_mean(x, &[0, 2, 2], 3).unwrap();
    assert_eq!(t.value(s).data(), &[1.0, 0.0, 4.0]);
}

proptest! {
    #[test]
    fn masked_softmax_normalizes_over_unmasked(
        logits in proptest::collection::vec(-20.0f64..20.0, 1..12),
        mask_bits in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let n = logits.len();
        let mut mask: Vec<bool> = mask_bits[..n].to_vec();
        if !mask.iter().any(|&m| m) {
            mask[0] = true;
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&logits));
        let lp = t.masked_log_softmax(x, &mask).unwrap();
        let probs: Vec<f64> = t.value(lp).data().iter().map(|l| l.exp()).collect();
        let total: f64 = probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (p, m) in probs.iter().zip(&mask) {
            if !m {
                prop_assert_eq!(*p, 0.0);
            }
        }
    }
}
