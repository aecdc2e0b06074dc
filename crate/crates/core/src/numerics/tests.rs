use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn softmax_uniform_logits() {
    let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap()).unwrap();
    for &v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_two_logits_matches_direct_formula() {
    // 1 / (1 + e^4) evaluated directly.
    let e4 = 54.598_150_033_144_236_f64;
    let low = 1.0 / (1.0 + e4);
    let s = softmax_rows(&Tensor::from_rows(&[&[2.0, 6.0]]).unwrap()).unwrap();
    assert!((s.data()[0] - 0.01799).abs() < 1e-5);
    assert!((s.data()[1] - 0.98201).abs() < 1e-5);
    assert!((s.data()[0] - low).abs() < 1e-15);
}

#[test]
fn softmax_is_shift_invariant_for_large_logits() {
    let big = softmax_rows(&Tensor::from_rows(&[&[1000.0, 1001.0]]).unwrap()).unwrap();
    let small = softmax_rows(&Tensor::from_rows(&[&[0.0, 1.0]]).unwrap()).unwrap();
    assert!(big.is_finite());
    assert!(big.max_abs_diff(&small) < 1e-15);
}

#[test]
fn softmax_rejects_non_finite_and_names_row() {
    let x = Tensor::from_rows(&[&[0.0, 1.0], &[f64::NAN, 0.0]]).unwrap();
    let err = softmax_rows(&x).unwrap_err().to_string();
    assert!(err.contains("row 1"), "{err}");
}

#[test]
fn linear_map_gradient_replicates_input_per_row() {
    // loss = sum(x · W) with x fixed: dW[i][j] = sum of column i of x.
    let mut store = ParamStore::new();
    let w = store
        .add("w", Tensor::from_rows(&[&[0.3, -0.2, 0.1], &[0.5, 0.4, -0.7]]).unwrap(), true)
        .unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let wv = tape.param(w);
    let y = tape.matmul(x, wv).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
}

#[test]
fn disconnected_scaling_gives_zero_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::scalar(3.0), true).unwrap();
    let q = store.add("unused", Tensor::zeros(&[2, 2]), true).unwrap();
    let frozen = store.add("frozen", Tensor::scalar(5.0), false).unwrap();
    let mut tape = Tape::new(&store);
    let pv = tape.param(p);
    let fv = tape.param(frozen);
    let zero = tape.scale(pv, Factor::Const(0.0)).unwrap();
    let loss = tape.scale(zero, Factor::Scalar(fv)).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(p).unwrap().data(), &[0.0]);
    assert_eq!(g.get(q).unwrap().data(), &[0.0; 4]);
    assert!(g.get(frozen).is_none());
}

#[test]
fn backward_twice_is_rejected() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::scalar(3.0), true).unwrap();
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    let loss = tape.scale(v, Factor::Const(2.0)).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(crate::Error::TapeConsumed)));
}

#[test]
fn no_recorded_operation_yields_zero_gradients() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::zeros(&[3]), true).unwrap();
    let mut tape = Tape::new(&store);
    let c = tape.input(Tensor::scalar(1.0));
    let g = tape.backward(c).unwrap();
    assert_eq!(g.get(p).unwrap().data(), &[0.0; 3]);
}

#[test]
fn tape_record_is_topologically_ordered() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::eye(3), true).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::full(&[2, 3], 0.5));
    let wv = tape.param(w);
    let y = tape.matmul(x, wv).unwrap();
    let y = tape.softmax_rows(y).unwrap();
    let _ = tape.sum_all(y).unwrap();
    for (i, (_, inputs)) in tape.record().iter().enumerate() {
        assert!(inputs.iter().all(|&j| j < i));
    }
    assert_eq!(tape.record()[2].0, Primitive::MatMul);
}

#[test]
fn quadratic_gradcheck_is_tight() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::new(&[1, 1], vec![3.0]).unwrap(), true).unwrap();
    let report = finite_diff_check(&mut store, 1e-5, |tape| {
        let v = tape.param(p);
        tape.matmul(v, v)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-8, "{}", report.max_rel_error);
    assert_eq!(store.tensor(p).data(), &[3.0]);
}

#[test]
fn gradcheck_rejects_bad_eps_and_non_finite() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::scalar(1.0), true).unwrap();
    assert!(finite_diff_check(&mut store, 1e-2, |t| Ok(t.param(p))).is_err());
    let r = finite_diff_check(&mut store, 1e-5, |t| {
        let v = t.param(p);
        t.scale(v, Factor::Const(f64::INFINITY))
    });
    assert!(matches!(r, Err(crate::Error::NonFinite(_))));
}

#[test]
fn cross_entropy_on_four_logits_passes_gradcheck() {
    let mut store = ParamStore::new();
    let logits = store
        .add("logits", Tensor::from_rows(&[&[0.3, -1.2, 2.0, 0.7]]).unwrap(), true)
        .unwrap();
    let report = finite_diff_check(&mut store, 1e-5, |tape| {
        let l = tape.param(logits);
        tape.cross_entropy(l, vec![0.0, 0.0, 1.0, 0.0])
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{}", report.max_rel_error);
}

/// Builds a small expression exercising every primitive and checks it.
#[test]
fn every_primitive_matches_central_differences() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::randn(&[3, 4], 0.7, &mut r), true).unwrap();
    let b = store.add("b", Tensor::randn(&[4, 5], 0.7, &mut r), true).unwrap();
    let bias = store.add("bias", Tensor::randn(&[5], 0.3, &mut r), true).unwrap();
    let gamma = store.add("gamma", Tensor::randn(&[5], 0.5, &mut r).map(|v| v + 1.0), true).unwrap();
    let beta = store.add("beta", Tensor::randn(&[5], 0.2, &mut r), true).unwrap();
    let s = store.add("s", Tensor::scalar(0.8), true).unwrap();
    let mask: Vec<f64> = (0..15).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 }).collect();

    let report = finite_diff_check(&mut store, 1e-6, |t| {
        let av = t.param(a);
        let bv = t.param(b);
        let h = t.matmul(av, bv)?;
        let bias = t.param(bias);
        let h = t.add_row_bias(h, bias)?;
        let sv = t.param(s);
        let h = t.scale(h, Factor::Scalar(sv))?;
        let h = t.scale(h, Factor::Mask(mask.clone()))?;
        let (g, be) = (t.param(gamma), t.param(beta));
        let h = t.layer_norm(h, g, be)?;
        let left = t.slice(h, 1, 0, 2)?;
        let right = t.slice(h, 1, 2, 3)?;
        let top = t.slice(h, 0, 0, 1)?;
        let sm = t.softmax_rows(right)?;
        let relu = t.relu(left);
        let cat = t.concat(&[relu, sm], 1)?;
        let tr = t.transpose(cat)?;
        let back = t.transpose(tr)?;
        let stacked = t.concat(&[back, top], 0)?;
        t.cross_entropy(stacked, vec![
            1.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 2.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 1.0, //
            0.0, 1.0, 0.0, 0.0, 0.0,
        ])
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn backward_is_bit_deterministic() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&[6, 6], 0.4, &mut r), true).unwrap();
    let x = Tensor::randn(&[5, 6], 1.0, &mut r);
    let run = || {
        let mut tape = Tape::new(&store);
        let xv = tape.input(x.clone());
        let wv = tape.param(w);
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.softmax_rows(h).unwrap();
        let h = tape.matmul(h, wv).unwrap();
        let l = tape.sum_all(h).unwrap();
        tape.backward(l).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn broadcast_rejects_incompatible_shapes() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let v = tape.input(Tensor::zeros(&[3]));
    assert!(tape.broadcast(v, &[2, 4]).is_err());
    assert!(tape.broadcast(v, &[2, 3]).is_ok());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        spread in 0.1f64..200.0,
    ) {
        let x = Tensor::randn(&[rows, cols], spread, &mut rng(seed));
        let s = softmax_rows(&x).unwrap();
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn relu_derivative_at_zero_is_one_half() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_rows(&[&[0.0, 2.0, -1.0]]).unwrap(), true).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.param(w);
    let y = tape.relu(x);
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.5, 1.0, 0.0]);
}
