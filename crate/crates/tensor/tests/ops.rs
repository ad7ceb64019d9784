use proptest::prelude::*;
use vton_tensor::reference::{conv2d_naive, matmul_naive};
use vton_tensor::{GaussianRng, Graph, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn eye(n: usize) -> Tensor {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        d[i * n + i] = 1.0;
    }
    t(&[n, n], &d)
}

#[test]
fn matmul_identity_and_hand_sum() {
    let mut rng = GaussianRng::new(3);
    let b = Tensor::randn(&[3, 4], &mut rng);
    let mut g = Graph::inference();
    let (i3, bv) = (g.constant(eye(3)), g.constant(b.clone()));
    let out = g.matmul(i3, bv).unwrap();
    assert_eq!(g.value(out), &b);

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let out = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_random_against_triple_loop() {
    let mut rng = GaussianRng::new(11);
    let a = Tensor::randn(&[4, 5], &mut rng);
    let b = Tensor::randn(&[5, 3], &mut rng);
    let mut g = Graph::inference();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(av, bv).unwrap();
    assert!(g.value(out).max_abs_diff(&matmul_naive(&a, &b)).unwrap() < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::inference();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    match g.matmul(a, b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn transposed_matmul_agrees_with_explicit_transpose() {
    let mut rng = GaussianRng::new(5);
    let a = Tensor::randn(&[2, 4, 3], &mut rng);
    let b = Tensor::randn(&[2, 5, 3], &mut rng);
    let mut g = Graph::inference();
    let (av, bv) = (g.constant(a), g.constant(b));
    let fused = g.matmul_t(av, bv, false, true).unwrap();
    let bt = g.transpose_last2(bv).unwrap();
    let explicit = g.matmul_t(av, bt, false, false).unwrap();
    assert!(g.value(fused).max_abs_diff(g.value(explicit)).unwrap() < 1e-14);
}

#[test]
fn softmax_closed_forms() {
    let mut g = Graph::inference();
    let c = g.constant(t(&[1, 3], &[2.5, 2.5, 2.5]));
    let s = g.softmax_lastdim(c).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let one = g.constant(t(&[1], &[-7.0]));
    let s = g.softmax_lastdim(one).unwrap();
    assert_eq!(g.value(s).data(), &[1.0]);
    let r = g.constant(t(&[2], &[0.0, 3f64.ln()]));
    let s = g.softmax_lastdim(r).unwrap();
    assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2], &[f64::NAN, 1.0]));
    assert_eq!(g.softmax_lastdim(x), Err(TensorError::NonFinite("softmax_lastdim")));
}

#[test]
fn conv_identity_and_counting() {
    let mut rng = GaussianRng::new(2);
    let x = Tensor::randn(&[2, 3, 4, 5], &mut rng);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let w = g.constant(eye(3).reshape(&[3, 3, 1, 1]).unwrap());
    let y = g.conv2d(xv, w, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(ones, k, 1, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
    assert_eq!(g.value(y).data()[4], 9.0);
    assert_eq!(g.value(y).data()[0], 4.0);
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 4, 3, 3]));
    assert!(matches!(g.conv2d(x, w, 1, 1), Err(TensorError::Shape { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_oracle(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..10_000) {
        let mut rng = GaussianRng::new(seed);
        let a = Tensor::randn(&[m, k], &mut rng);
        let b = Tensor::randn(&[k, n], &mut rng);
        let mut g = Graph::inference();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = g.matmul(av, bv).unwrap();
        prop_assert!(g.value(out).max_abs_diff(&matmul_naive(&a, &b)).unwrap() < 1e-12);
    }

    #[test]
    fn conv_matches_oracle(
        b in 1usize..=2, c in 1usize..=4, o in 1usize..=4, h in 3usize..=8, w in 3usize..=8,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..=2, pad in 0usize..=1, seed in 0u64..10_000
    ) {
        let mut rng = GaussianRng::new(seed);
        let x = Tensor::randn(&[b, c, h, w], &mut rng);
        let wt = Tensor::randn(&[o, c, k, k], &mut rng);
        let mut g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let oracle = conv2d_naive(&x, &wt, stride, pad);
        prop_assert_eq!(g.value(y).shape(), oracle.shape());
        prop_assert!(g.value(y).max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in 1usize..5, l in 1usize..9, shift in -50.0f64..50.0, seed in 0u64..10_000
    ) {
        let mut rng = GaussianRng::new(seed);
        let x = Tensor::randn_scaled(&[rows, l], 3.0, &mut rng);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let xs = g.add_scalar(xv, shift);
        let s1 = g.softmax_lastdim(xv).unwrap();
        let s2 = g.softmax_lastdim(xs).unwrap();
        for row in g.value(s1).data().chunks(l) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(g.value(s1).max_abs_diff(g.value(s2)).unwrap() < 1e-10);
    }
}
