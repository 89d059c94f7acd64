use ecore::autodiff::{finite_difference_check, AutodiffError, Primitive, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap()
}

/// Sum of `out ⊙ w` for a fixed random `w`.
fn linear_functional(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

fn check_primitive(prim: Primitive, inputs: Vec<Tensor>, seed: u64) -> f64 {
    let params: Vec<(String, Tensor)> =
        inputs.into_iter().enumerate().map(|(i, t)| (format!("in{i}"), t)).collect();
    let report = finite_difference_check::<AutodiffError, _>(
        |tape, vars, seed| {
            let out = tape.apply(prim.clone(), vars)?;
            linear_functional(tape, out, seed)
        },
        &params,
        1e-6,
        seed,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 3]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn concat_vectors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn masked_softmax_ignores_masked_entry() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![5.0, f64::NEG_INFINITY, 5.0]));
    let y = tape.masked_softmax(x, 0, vec![true, false, true], false).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);
}

#[test]
fn fully_masked_softmax_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let err = tape.masked_softmax(x, 1, vec![true, true, false, false], false).unwrap_err();
    assert!(matches!(err, AutodiffError::EmptySoftmax { .. }));
    let y = tape.masked_softmax(x, 1, vec![true, true, false, false], true).unwrap();
    assert_eq!(&tape.value(y).data()[2..], &[0.0, 0.0]);
}

#[test]
fn nan_input_to_softmax_propagates() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![f64::NAN, f64::NAN, 1.0]));
    let y = tape.masked_softmax(x, 0, vec![true, true, false], false).unwrap();
    assert!(tape.value(y).data()[..2].iter().all(|v| v.is_nan()));
    assert_eq!(tape.value(y).data()[2], 0.0);
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = tape.constant(Tensor::zeros(&[4]));
    assert!(tape.add(a, c).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
    let s = tape.sum_all(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_dot() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::row(vec![1.0, 2.0]));
    let xt = tape.transpose(x).unwrap();
    let dot = tape.matmul(x, xt).unwrap();
    let g = tape.backward(dot).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_of_softmax_cross_entropy() {
    let mut tape = Tape::new();
    let logits = tape.param(Tensor::vector(vec![0.0, 0.0]));
    let lp = tape.log_softmax(logits, 0).unwrap();
    let picked = tape.gather(lp, &[0]).unwrap();
    let loss = tape.scale(picked, -1.0).unwrap();
    let g = tape.backward(loss).unwrap();
    let grad = g.get(logits).unwrap();
    assert!((grad[0] + 0.5).abs() < 1e-15 && (grad[1] - 0.5).abs() < 1e-15);
}

#[test]
fn unreached_tensors_get_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::vector(vec![3.0]));
    let s = tape.sum_all(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.tensor(unused).data(), &[0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn quadratic_gradient_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![("x".to_string(), random(&[3, 4], &mut rng))];
    let report = finite_difference_check::<AutodiffError, _>(
        |tape, vars, _| {
            let sq = tape.mul(vars[0], vars[0])?;
            tape.sum_all(sq)
        },
        &params,
        1e-5,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
    assert_eq!(report.coordinates, 12);
}

#[test]
fn epsilon_out_of_range_is_rejected() {
    let params = vec![("x".to_string(), Tensor::scalar(1.0))];
    let res = finite_difference_check::<AutodiffError, _>(|t, v, _| t.sum_all(v[0]), &params, 0.1, 0);
    assert!(res.is_err());
}

#[test]
fn non_finite_gradient_is_reported_with_location() {
    let params = vec![("x".to_string(), Tensor::vector(vec![1.0, 0.0]))];
    let err = finite_difference_check::<AutodiffError, _>(
        |t, v, _| {
            let l = t.ln(v[0])?;
            t.sum_all(l)
        },
        &params,
        1e-6,
        0,
    )
    .unwrap_err();
    match err {
        AutodiffError::NonFinite { param, index, .. } => assert_eq!((param.as_str(), index), ("x", 1)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: Vec<(Primitive, Vec<Tensor>)> = vec![
        (Primitive::MatMul, vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)]),
        (Primitive::Add, vec![random(&[3, 4], &mut rng), random(&[1, 4], &mut rng)]),
        (Primitive::Sub, vec![random(&[3, 4], &mut rng), random(&[3, 1], &mut rng)]),
        (Primitive::Mul, vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)]),
        (Primitive::Mul, vec![random(&[3, 4], &mut rng), random(&[1], &mut rng)]),
        (Primitive::Div, vec![random(&[2, 3], &mut rng), positive(&[1, 3], &mut rng)]),
        (Primitive::Scale(-2.5), vec![random(&[5], &mut rng)]),
        (Primitive::Concat { axis: 1 }, vec![random(&[2, 3], &mut rng), random(&[2, 1], &mut rng)]),
        (Primitive::Concat { axis: 0 }, vec![random(&[2, 3], &mut rng), random(&[1, 3], &mut rng)]),
        (Primitive::Softmax { axis: 1, mask: None, allow_empty: false }, vec![random(&[3, 4], &mut rng)]),
        (Primitive::Softmax { axis: 0, mask: None, allow_empty: false }, vec![random(&[3, 4], &mut rng)]),
        (
            Primitive::Softmax {
                axis: 1,
                mask: Some(vec![true, false, true, true, false, false]),
                allow_empty: true,
            },
            vec![random(&[2, 3], &mut rng)],
        ),
        (Primitive::LogSoftmax { axis: 1 }, vec![random(&[3, 5], &mut rng)]),
        (Primitive::Sigmoid, vec![random(&[2, 3], &mut rng)]),
        (Primitive::Relu, vec![random(&[2, 3], &mut rng)]),
        (Primitive::Log, vec![positive(&[2, 3], &mut rng)]),
        (Primitive::Exp, vec![random(&[2, 3], &mut rng)]),
        (Primitive::Sqrt, vec![positive(&[2, 3], &mut rng)]),
        (
            Primitive::LayerNorm { eps: 1e-9 },
            vec![random(&[3, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)],
        ),
        (Primitive::Sum { axis: 0 }, vec![random(&[3, 4], &mut rng)]),
        (Primitive::Mean { axis: 1 }, vec![random(&[3, 4], &mut rng)]),
        (Primitive::SumAll, vec![random(&[3, 4], &mut rng)]),
        (Primitive::Embedding { ids: vec![2, 0, 2, 1] }, vec![random(&[4, 3], &mut rng)]),
        (
            Primitive::MaskedFill { mask: vec![true, false, false, true], value: 1.0 },
            vec![random(&[2, 2], &mut rng)],
        ),
        (Primitive::Dropout { rate: 0.3, seed: 9 }, vec![random(&[4, 4], &mut rng)]),
        (Primitive::Transpose, vec![random(&[2, 5], &mut rng)]),
        (Primitive::Slice { axis: 1, start: 1, len: 2 }, vec![random(&[3, 4], &mut rng)]),
        (Primitive::Gather { indices: vec![0, 5, 5, 3] }, vec![random(&[2, 3], &mut rng)]),
    ];
    for (i, (prim, inputs)) in cases.into_iter().enumerate() {
        let name = prim.name();
        let err = check_primitive(prim, inputs, i as u64);
        assert!(err <= 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn replay_is_bitwise_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.param(random(&[4, 6], &mut rng));
        let w = tape.param(random(&[6, 6], &mut rng));
        let h = tape.matmul(x, w).unwrap();
        let d = tape.dropout(h, 0.2, 77).unwrap();
        let s = tape.softmax(d, 1).unwrap();
        let l = tape.sum_all(s).unwrap();
        (tape, l)
    };
    let (mut a, la) = build();
    let (b, lb) = build();
    assert_eq!(a.value(la).data()[0].to_bits(), b.value(lb).data()[0].to_bits());
    let before: Vec<u64> = a.values().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
    a.replay().unwrap();
    let after: Vec<u64> = a.values().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
    assert_eq!(before, after);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(vals in prop::collection::vec(-5.0f64..5.0, 16), spread in 0.5f64..3.0) {
        let vals: Vec<f64> = vals.iter().enumerate().map(|(i, v)| v + spread * (i % 4) as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 8], vals).unwrap());
        let g = tape.constant(Tensor::vector(vec![1.0; 8]));
        let b = tape.constant(Tensor::vector(vec![0.0; 8]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() <= 1e-7);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }
}
