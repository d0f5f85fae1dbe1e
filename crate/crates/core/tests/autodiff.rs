use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spoofnet::autodiff::{
    check_gradients, grad_check, Binder, Graph, Linear, OpKind, ParamStore, Tensor,
};

fn input_for(op: OpKind, rng: &mut ChaCha8Rng) -> Tensor {
    match op {
        OpKind::Linear | OpKind::L2Normalize => Tensor::randn(&[3, 4], 1.0, rng),
        OpKind::GruCell => Tensor::randn(&[2, 3], 1.0, rng),
        OpKind::WeightedCe | OpKind::AngularMargin => Tensor::randn(&[4, 2], 1.0, rng),
        OpKind::Conv1d => Tensor::randn(&[2, 2, 7], 1.0, rng),
        OpKind::Conv2d | OpKind::MaxPool2d | OpKind::AdaptiveAvgPool2d | OpKind::Simam => Tensor::randn(&[2, 2, 4, 5], 1.0, rng),
        OpKind::BatchNormTrain | OpKind::BatchNormEval => Tensor::randn(&[3, 2, 2, 3], 1.5, rng),
        _ => Tensor::randn(&[2, 3, 4], 1.0, rng),
    }
}

#[test]
fn every_operator_passes_finite_differences_at_100_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for op in OpKind::ALL {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = input_for(op, &mut rng);
            let report = grad_check(op, &x, 1e-5).unwrap();
            assert!(!report.kink, "{op:?} stuck on a kink");
            worst = worst.max(report.max_relative_error);
        }
        assert!(worst < 1e-4, "{op:?}: max relative error {worst}");
    }
}

#[test]
fn linear_op_is_nearly_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let r = grad_check(OpKind::Linear, &x, 1e-5).unwrap();
    assert!(r.max_relative_error < 1e-6, "{}", r.max_relative_error);
}

#[test]
fn sigmoid_derivative_at_zero_is_a_quarter() {
    let g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![0.0]), true);
    let y = g.sigmoid(x).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    let r = grad_check(OpKind::Sigmoid, &Tensor::from_vec(vec![0.0]), 1e-5).unwrap();
    assert!(r.max_relative_error < 1e-7);
}

#[test]
fn conv2d_kernel_2x3_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::randn(&[2, 3, 5, 6], 1.0, &mut rng);
    let r = grad_check(OpKind::Conv2d, &x, 1e-5).unwrap();
    assert!(r.max_relative_error < 1e-4);
}

#[test]
fn max_pool_tie_is_resampled() {
    let x = Tensor::full(&[1, 1, 2, 2], 1.0);
    let r = grad_check(OpKind::MaxPool2d, &x, 1e-5).unwrap();
    assert!(r.attempts > 1 && !r.kink);
    assert!(r.max_relative_error < 1e-4);
}

#[test]
fn max_pool_routes_ties_to_first_maximum() {
    let g = Graph::new();
    let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 3.0), true);
    let y = g.max_pool2d(x, (2, 2)).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn eps_outside_range_is_rejected() {
    let x = Tensor::from_vec(vec![1.0]);
    assert!(grad_check(OpKind::Exp, &x, 0.0).is_err());
    assert!(grad_check(OpKind::Exp, &x, 0.1).is_err());
}

#[test]
fn forward_identity_and_selu_zero() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let y = g.reshape(x, &[3]).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    let z = g.selu(g.constant(Tensor::from_vec(vec![0.0]))).unwrap();
    assert_eq!(g.value(z).data(), &[0.0]);
}

#[test]
fn two_layer_linear_matches_hand_multiplication() {
    let g = Graph::new();
    let w1 = [[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]];
    let w2 = [[0.5, -2.0]];
    let x = [0.0, 1.0, 0.0];
    let xv = g.constant(Tensor::new(vec![1, 3], x.to_vec()).unwrap());
    let w1v = g.constant(Tensor::new(vec![2, 3], w1.concat()).unwrap());
    let w2v = g.constant(Tensor::new(vec![1, 2], w2.concat()).unwrap());
    let h = g.linear(xv, w1v, None).unwrap();
    let y = g.linear(h, w2v, None).unwrap();
    let hidden: Vec<f64> = w1.iter().map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
    let want: f64 = w2[0].iter().zip(&hidden).map(|(a, b)| a * b).sum();
    assert_eq!(g.value(y).data(), &[want]);
}

#[test]
fn backward_of_sum_is_all_ones_and_square_is_2x() {
    let g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 3, 4]), true);
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![3.0]), true);
    let loss = g.sum(g.mul(x, x).unwrap()).unwrap();
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[6.0]);
}

#[test]
fn random_three_op_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let err = check_gradients(
        |g, v| {
            let a = g.tanh(v[0])?;
            let b = g.mul(a, v[0])?;
            let c = g.exp(b)?;
            g.sum(c)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn unreachable_leaf_gets_zero_gradient_and_errors_are_reported() {
    let g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let unused = g.leaf(Tensor::from_vec(vec![5.0]), true);
    let not_scalar = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(not_scalar), Err(spoofnet::Error::NotScalar(_))));
    let loss = g.sum(not_scalar).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0]);
    assert!(matches!(g.backward(loss), Err(spoofnet::Error::GraphFreed)));
}

#[test]
fn non_finite_forward_is_an_error() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0]));
    assert!(matches!(g.ln(x), Err(spoofnet::Error::NonFinite(_))));
}

#[test]
fn shape_mismatch_is_an_error() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(spoofnet::Error::Shape { .. })));
    assert!(g.linear(a, a, None).is_ok());
    assert!(g.linear(a, b, None).is_err());
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let layer = Linear::new(&mut store, "fc", 4, 3, true, &mut rng);
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng);

    let grad_of = |which: u8| {
        let g = Graph::new();
        let p = Binder::new(&store, &g, true);
        let xv = g.constant(x.clone());
        let y = layer.forward(&p, xv).unwrap();
        let l1 = g.sum(g.tanh(y).unwrap()).unwrap();
        let l2 = g.sum(g.square(y).unwrap()).unwrap();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        let grads = g.backward(loss).unwrap();
        grads.get(p.var(layer.weight)).unwrap().clone()
    };
    let (a, b, both) = (grad_of(1), grad_of(2), grad_of(3));
    for k in 0..both.numel() {
        assert!((a.data()[k] + b.data()[k] - both.data()[k]).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_is_bit_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 2, 4, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 2, 3], 1.0, &mut rng);
        let run = || {
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, (1, 1)).unwrap();
            let y = g.selu(y).unwrap();
            let y = g.max_pool2d(y, (1, 3)).unwrap();
            let out = g.value(y).clone();
            out
        };
        prop_assert_eq!(run(), run());
    }
}
