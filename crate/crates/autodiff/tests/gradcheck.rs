//! Central finite-difference checks for every differentiable operation.

use magec_autodiff::{ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    // Keep values away from zero so relu/clamp kinks are not straddled by h.
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Compares tape gradients of `f` with central differences over every
/// scalar of every parameter.
fn check<F>(params: &ParamSet, f: F)
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params).unwrap();
    let mut grads = params.zero_grads();
    tape.backward(loss, &mut grads).unwrap();

    let eval = |p: &ParamSet| {
        let mut t = Tape::new();
        let l = f(&mut t, p).unwrap();
        t.value(l).item().unwrap()
    };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let mut plus = params.clone();
            plus.get_mut(id).data_mut()[k] += H;
            let mut minus = params.clone();
            minus.get_mut(id).data_mut()[k] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let analytic = grads.get(id).data()[k];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1.0);
            assert!(
                err < TOL,
                "{}[{k}]: analytic {analytic} numeric {numeric} (rel err {err})",
                params.name(id)
            );
        }
    }
}

fn set_of(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> (ParamSet, Vec<ParamId>) {
    let mut p = ParamSet::new();
    let ids = shapes
        .iter()
        .map(|(n, r, c)| p.insert(*n, random_tensor(rng, *r, *c)))
        .collect();
    (p, ids)
}

/// Weighted sum so every output element has a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let v = tape.value(x).clone();
    let w = Tensor::from_vec(
        v.rows(),
        v.cols(),
        (0..v.len()).map(|i| 0.3 + 0.17 * i as f64).collect(),
    )?;
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[test]
fn matmul_add_sub_mul_scale() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, ids) = set_of(&mut rng, &[("a", 3, 4), ("b", 4, 2), ("c", 3, 2), ("r", 1, 2)]);
        check(&params, |t, p| {
            let a = t.param(p, ids[0]);
            let b = t.param(p, ids[1]);
            let c = t.param(p, ids[2]);
            let r = t.param(p, ids[3]);
            let ab = t.matmul(a, b)?;
            let s = t.add(ab, c)?;
            let d = t.sub(s, c)?;
            let e = t.mul(d, c)?;
            let f = t.scale(e, -1.7)?;
            let g = t.add_row(f, r)?;
            let h = t.add_scalar(g, 0.25)?;
            weighted_sum(t, h)
        });
    }
}

#[test]
fn nonlinearities() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let (params, ids) = set_of(&mut rng, &[("x", 3, 3)]);
        check(&params, |t, p| {
            let x = t.param(p, ids[0]);
            let a = t.relu(x)?;
            let b = t.tanh(x)?;
            let c = t.exp(b)?;
            let d = t.square(x)?;
            let e = t.clamp(x, -0.8, 0.9)?;
            let f = t.minimum(c, d)?;
            let cat = t.concat_cols(&[a, c, e, f])?;
            weighted_sum(t, cat)
        });
    }
}

#[test]
fn reductions_and_concat_rows() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
        let (params, ids) = set_of(&mut rng, &[("x", 4, 3), ("y", 2, 3)]);
        check(&params, |t, p| {
            let x = t.param(p, ids[0]);
            let y = t.param(p, ids[1]);
            let m = t.mean_rows(x)?;
            let s = t.sum_rows(y)?;
            let stacked = t.concat_rows(&[m, s, y])?;
            let sq = t.square(stacked)?;
            let total = weighted_sum(t, sq)?;
            let mean = t.mean(x)?;
            let both = t.concat_cols(&[total, mean])?;
            t.sum(both)
        });
    }
}

#[test]
fn l2_normalize_gather_segment_mean() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
        let (params, ids) = set_of(&mut rng, &[("x", 4, 3)]);
        check(&params, |t, p| {
            let x = t.param(p, ids[0]);
            let n = t.l2_normalize_rows(x)?;
            let g = t.gather_rows(n, &[3, 0, 0, 2, 1, 3])?;
            let s = t.segment_mean(g, &[0, 2, 2, 0, 2, 1], 4)?;
            weighted_sum(t, s)
        });
    }
}

#[test]
fn masked_log_softmax_pick_entropy_scatter() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let (params, ids) = set_of(&mut rng, &[("logits", 3, 4), ("s", 5, 1)]);
        let mask = [
            true, true, false, true, //
            false, true, false, false, //
            true, true, true, true,
        ];
        check(&params, |t, p| {
            let l = t.param(p, ids[0]);
            let lp = t.masked_log_softmax(l, &mask)?;
            let picked = t.pick_cols(lp, &[3, 1, 2])?;
            let ent = t.entropy_rows(lp)?;
            let s = t.param(p, ids[1]);
            let placed = t.scatter(s, &[0, 5, 6, 9, 11], 3, 4)?;
            let lp2 = t.masked_log_softmax(placed, &mask)?;
            let ent2 = t.entropy_rows(lp2)?;
            let both = t.concat_cols(&[picked, ent, ent2])?;
            weighted_sum(t, both)
        });
    }
}

#[test]
fn masked_entries_receive_zero_gradient() {
    let mut params = ParamSet::new();
    let id = params.insert("l", Tensor::row(&[0.3, -1.2, 2.0, 0.1]));
    let mask = [true, false, true, false];
    let mut tape = Tape::new();
    let l = tape.param(&params, id);
    let lp = tape.masked_log_softmax(l, &mask).unwrap();
    let ent = tape.entropy_rows(lp).unwrap();
    let pick = tape.pick_cols(lp, &[2]).unwrap();
    let both = tape.add(ent, pick).unwrap();
    let loss = tape.sum(both).unwrap();
    let mut grads = params.zero_grads();
    tape.backward(loss, &mut grads).unwrap();
    let g = grads.get(id).data();
    assert_eq!(g[1], 0.0);
    assert_eq!(g[3], 0.0);
    assert!(g[0] != 0.0 && g[2] != 0.0);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (params, ids) = set_of(&mut rng, &[("w", 3, 2)]);
    let grad_of = |coef_f: f64, coef_g: f64| {
        let mut t = Tape::new();
        let w = t.param(&params, ids[0]);
        let th = t.tanh(w).unwrap();
        let f = t.sum(th).unwrap();
        let sq = t.square(w).unwrap();
        let g = t.mean(sq).unwrap();
        let a = t.scale(f, coef_f).unwrap();
        let b = t.scale(g, coef_g).unwrap();
        let loss = t.add(a, b).unwrap();
        let mut grads = params.zero_grads();
        t.backward(loss, &mut grads).unwrap();
        grads.get(ids[0]).clone()
    };
    let combined = grad_of(2.0, -3.0);
    let f_only = grad_of(1.0, 0.0);
    let g_only = grad_of(0.0, 1.0);
    for k in 0..combined.len() {
        let expect = 2.0 * f_only.data()[k] - 3.0 * g_only.data()[k];
        assert!((combined.data()[k] - expect).abs() < 1e-12);
    }
}
