use super::*;
use crate::gradcheck::{finite_difference_check, finite_difference_check_many};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(matches!(
        Tensor::new(vec![2, 3], vec![0.0; 5]),
        Err(Error::Dimension { .. })
    ));
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn relu_sign_cases() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    // Subgradient at exactly zero is zero.
    assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn cross_entropy_of_uniform_pair_is_ln2() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    assert!(matches!(
        tape.softmax_cross_entropy(z, &[2]),
        Err(Error::Data(_))
    ));
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = tape.square(x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_needs_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.square(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_is_descriptive() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    let c = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.add(a, c).is_err());
}

#[test]
fn unknown_op_name_is_config_error() {
    assert!(matches!(OpKind::lookup("frobnicate"), Err(Error::Config(_))));
    assert_eq!(OpKind::lookup("conv2d").unwrap(), "conv2d");
}

#[test]
fn broadcast_bias_over_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = tape.param(Tensor::vector(vec![10.0, 20.0, 30.0]));
    let y = tape.add(x, b).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(b).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn conv_same_padding_with_center_tap_is_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let k = tape.constant(t(&[1, 1, 3, 3], &k));
    let y = tape.conv2d(x, k, None, Padding::Same).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn max_pool_picks_window_maximum() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[1, 1, 2, 4], |i| [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0][i]));
    let y = tape.max_pool2x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn straight_through_threshold_and_identity_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.2, 0.9, 0.5]));
    let b = tape.straight_through(x).unwrap();
    assert_eq!(tape.value(b).data(), &[0.0, 1.0, 0.0]);
    let w = tape.constant(Tensor::vector(vec![3.0, -1.0, 7.0]));
    let p = tape.mul(b, w).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[3.0, -1.0, 7.0]);
}

#[test]
fn concat_and_narrow_are_inverse() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
    let b = tape.param(Tensor::from_fn(&[1, 3], |i| 10.0 + i as f64));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c).shape(), &[3, 3]);
    let back = tape.narrow_rows(c, 2, 1).unwrap();
    assert_eq!(tape.value(back).data(), tape.value(b).data());
    let cols = tape.concat(&[a, a], 1).unwrap();
    assert_eq!(tape.value(cols).data(), &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One scalar-valued graph per differentiable op kind, with input shapes.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    fn reduce(t: &mut Tape, v: Var) -> Result<Var> {
        // Weighted sum so that every output entry carries a distinct gradient.
        let n = t.value(v).len();
        let shape = t.value(v).shape().to_vec();
        let w = t.constant(Tensor::from_fn(&shape, |i| 0.3 + (i as f64 * 0.77).sin()));
        let _ = n;
        let p = t.mul(v, w)?;
        t.sum(p)
    }
    let labels: Arc<[usize]> = vec![0, 2, 1, 2].into();
    let l2 = labels.clone();
    vec![
        ("add", vec![vec![3, 4], vec![4]], Box::new(|t, v| { let y = t.add(v[0], v[1])?; reduce(t, y) })),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; reduce(t, y) })),
        ("mul", vec![vec![2, 3, 4], vec![3, 4]], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; reduce(t, y) })),
        ("scale", vec![vec![5]], Box::new(|t, v| { let y = t.scale(v[0], -1.7)?; reduce(t, y) })),
        ("add_scalar", vec![vec![5]], Box::new(|t, v| { let y = t.add_scalar(v[0], 0.4)?; let y = t.square(y)?; t.sum(y) })),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; reduce(t, y) })),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], Box::new(|t, v| { let y = t.matmul_nt(v[0], v[1])?; reduce(t, y) })),
        ("conv2d_same", vec![vec![2, 2, 5, 4], vec![3, 2, 3, 3], vec![3]], Box::new(|t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), Padding::Same)?; reduce(t, y) })),
        ("conv2d_valid", vec![vec![1, 2, 5, 5], vec![2, 2, 2, 3]], Box::new(|t, v| { let y = t.conv2d(v[0], v[1], None, Padding::Valid)?; reduce(t, y) })),
        ("relu", vec![vec![12]], Box::new(|t, v| { let y = t.relu(v[0])?; reduce(t, y) })),
        ("sigmoid", vec![vec![12]], Box::new(|t, v| { let y = t.sigmoid(v[0])?; reduce(t, y) })),
        ("square", vec![vec![12]], Box::new(|t, v| { let y = t.square(v[0])?; reduce(t, y) })),
        ("sqrt", vec![vec![12]], Box::new(|t, v| { let y = t.square(v[0])?; let y = t.add_scalar(y, 0.5)?; let y = t.sqrt(y)?; reduce(t, y) })),
        ("sum_axis", vec![vec![2, 3, 4]], Box::new(|t, v| { let y = t.sum_axis(v[0], 1)?; reduce(t, y) })),
        ("mean", vec![vec![2, 3]], Box::new(|t, v| { let y = t.square(v[0])?; t.mean(y) })),
        ("max_pool2x2", vec![vec![2, 2, 4, 5]], Box::new(|t, v| { let y = t.max_pool2x2(v[0])?; reduce(t, y) })),
        ("softmax_cross_entropy", vec![vec![4, 3]], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels))),
        ("dummy_scale_gradient", vec![vec![4, 3]], Box::new(move |t, v| { let d = t.dummy_scale_gradient(v[0], &l2)?; t.square(d) })),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| { let y = t.reshape(v[0], &[3, 4])?; reduce(t, y) })),
        ("concat", vec![vec![2, 3], vec![2, 2]], Box::new(|t, v| { let y = t.concat(&[v[0], v[1]], 1)?; reduce(t, y) })),
        ("narrow_rows", vec![vec![4, 3]], Box::new(|t, v| { let y = t.narrow_rows(v[0], 1, 2)?; reduce(t, y) })),
        ("segment_sum", vec![vec![6]], Box::new(|t, v| {
            let y = t.segment_sum(v[0], vec![1, 0, 1, 2, 0, 1].into(), 3)?;
            let y = t.square(y)?;
            t.sum(y)
        })),
    ]
}

#[test]
fn every_differentiable_op_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (name, shapes, build) in op_cases() {
        for _ in 0..10 {
            let xs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let err = finite_difference_check_many(&build, &xs, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: max relative error {err}");
        }
    }
}

#[test]
fn matmul_gradient_matches_finite_differences_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let err = finite_difference_check_many(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let w = t.constant(Tensor::from_fn(&[3, 2], |i| 1.0 + i as f64));
            let y = t.mul(y, w)?;
            t.sum(y)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn sigmoid_single_tensor_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[7]);
    let err = finite_difference_check(
        |t, x| {
            let s = t.sigmoid(x)?;
            t.sum(s)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);
}

fn small_graph(tape: &mut Tape, x: Var, w: Var) -> Result<(Var, Var)> {
    let h = tape.matmul(x, w)?;
    let r = tape.relu(h)?;
    let f = tape.sum(r)?;
    let s = tape.sigmoid(h)?;
    let sq = tape.square(s)?;
    let g = tape.mean(sq)?;
    Ok((f, g))
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let x0 = random(&mut rng, &[3, 4]);
        let w0 = random(&mut rng, &[4, 5]);
        let grads_of = |mix: Option<(f64, f64)>, pick_g: bool| {
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let w = tape.param(w0.clone());
            let (f, g) = small_graph(&mut tape, x, w).unwrap();
            let loss = match mix {
                Some((a, b)) => {
                    let fa = tape.scale(f, a).unwrap();
                    let gb = tape.scale(g, b).unwrap();
                    tape.add(fa, gb).unwrap()
                }
                None if pick_g => g,
                None => f,
            };
            let grads = tape.backward(loss).unwrap();
            (grads.wrt(x).unwrap().clone(), grads.wrt(w).unwrap().clone())
        };
        let (cx, cw) = grads_of(Some((a, b)), false);
        let (fx, fw) = grads_of(None, false);
        let (gx, gw) = grads_of(None, true);
        for (c, (f, g)) in cx.data().iter().zip(fx.data().iter().zip(gx.data())) {
            assert!((c - (a * f + b * g)).abs() < 1e-12);
        }
        for (c, (f, g)) in cw.data().iter().zip(fw.data().iter().zip(gw.data())) {
            assert!((c - (a * f + b * g)).abs() < 1e-12);
        }
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut tape = Tape::new();
    let x = tape.param(random(&mut rng, &[3, 4]));
    let w = tape.param(random(&mut rng, &[4, 5]));
    let (f, g) = small_graph(&mut tape, x, w).unwrap();
    let loss = tape.add(f, g).unwrap();
    let first = tape.backward(loss).unwrap();
    let second = tape.backward(loss).unwrap();
    assert_eq!(first, second);
}

#[test]
fn constants_are_not_recorded() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.square(a).unwrap();
    assert!(!tape.requires_grad(b));
    let s = tape.sum(b).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(a).is_none());
}
