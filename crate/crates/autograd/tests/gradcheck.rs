use autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::param(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Compares autodiff against central differences for every input element.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) {
    let loss = f(&inputs);
    let grads = loss.backward();
    let h = 1e-5;
    for (k, inp) in inputs.iter().enumerate() {
        let g = grads.get(inp).expect("gradient for input");
        for i in 0..inp.numel() {
            let eval = |delta: f64| {
                let mut vals = inp.to_vec();
                vals[i] += delta;
                let mut moved = inputs.clone();
                moved[k] = Tensor::constant(inp.shape().to_vec(), vals);
                f(&moved).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - g[i]).abs() / (numeric.abs() + g[i].abs()).max(1e-6);
            assert!(
                err < 1e-5 || (numeric - g[i]).abs() < 1e-8,
                "input {k} element {i}: autodiff {} vs numeric {numeric}",
                g[i]
            );
        }
    }
}

/// Weighted sum so every output element gets a distinct sensitivity.
fn probe(t: &Tensor<f64>) -> Tensor<f64> {
    let w: Vec<f64> = (0..t.numel())
        .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
        .collect();
    t.mul(&Tensor::constant(t.shape().to_vec(), w)).sum_all()
}

#[test]
fn conv2d_strided_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_param(&mut rng, &[2, 3, 7, 6]);
    let w = rand_param(&mut rng, &[4, 3, 3, 3]);
    let b = rand_param(&mut rng, &[4]);
    check(vec![x, w, b], |t| {
        probe(&t[0].conv2d(&t[1], Some(&t[2]), 2, 1))
    });
}

#[test]
fn conv2d_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_param(&mut rng, &[2, 3, 4, 4]);
    let w = rand_param(&mut rng, &[5, 3, 1, 1]);
    check(vec![x, w], |t| probe(&t[0].conv2d(&t[1], None, 1, 0)));
}

#[test]
fn matmul_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = rand_param(&mut rng, if ta { &[4, 3] } else { &[3, 4] });
        let b = rand_param(&mut rng, if tb { &[5, 4] } else { &[4, 5] });
        check(vec![a, b], move |t| probe(&t[0].mm(&t[1], ta, tb)));
        let a = rand_param(&mut rng, if ta { &[2, 4, 3] } else { &[2, 3, 4] });
        let b = rand_param(&mut rng, if tb { &[2, 5, 4] } else { &[2, 4, 5] });
        check(vec![a, b], move |t| probe(&t[0].bmm(&t[1], ta, tb)));
    }
}

#[test]
fn linear_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_param(&mut rng, &[2, 3, 4]);
    let w = rand_param(&mut rng, &[6, 4]);
    let b = rand_param(&mut rng, &[6]);
    check(vec![x, w, b], |t| probe(&t[0].linear(&t[1], Some(&t[2]))));
}

#[test]
fn group_norm_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_param(&mut rng, &[2, 4, 3, 3]);
    let g = rand_param(&mut rng, &[4]);
    let b = rand_param(&mut rng, &[4]);
    check(vec![x, g, b], |t| {
        probe(&t[0].group_norm(2, &t[1], &t[2], 1e-5))
    });
}

#[test]
fn activations_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_param(&mut rng, &[3, 5]);
    check(vec![x.clone()], |t| probe(&t[0].silu()));
    check(vec![x.clone()], |t| probe(&t[0].sigmoid()));
    check(vec![x.clone()], |t| probe(&t[0].leaky_relu(0.2)));
    check(vec![x.clone()], |t| probe(&t[0].softmax_last()));
    check(vec![x.clone()], |t| {
        probe(&t[0].sqr().scale(0.3).add_scalar(1.0))
    });
}

#[test]
fn cross_entropy_and_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_param(&mut rng, &[4, 5]);
    check(vec![x.clone()], |t| t[0].cross_entropy(&[0, 3, 4, 3]));
    check(vec![x.clone()], |t| probe(&t[0].l2_normalize_last(1e-3)));
    check(vec![x], |t| probe(&t[0].l2_normalize_last(0.0)));
}

#[test]
fn cross_entropy_value() {
    let x = Tensor::<f64>::constant(vec![1, 3], vec![0.0, 0.0, 0.0]);
    assert!((x.cross_entropy(&[1]).item() - 3f64.ln()).abs() < 1e-12);
    let y = Tensor::<f64>::constant(vec![1, 2], vec![3.0, 4.0]).l2_normalize_last(0.0);
    assert!((y.data()[0] - 0.6).abs() < 1e-12 && (y.data()[1] - 0.8).abs() < 1e-12);
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_param(&mut rng, &[2, 3, 4, 2]);
    check(vec![x.clone()], |t| probe(&t[0].permute(&[0, 2, 3, 1])));
    check(vec![x.clone()], |t| probe(&t[0].narrow(1, 1, 2)));
    check(vec![x.clone()], |t| probe(&t[0].upsample2x()));
    check(vec![x.clone()], |t| probe(&t[0].avg_pool2x()));
    check(vec![x.clone()], |t| probe(&t[0].global_avg_pool()));
    let y = rand_param(&mut rng, &[2, 1, 4, 2]);
    check(vec![x, y], |t| {
        probe(&Tensor::cat(&[t[0].clone(), t[1].clone()], 1))
    });
}

#[test]
fn binary_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_param(&mut rng, &[2, 3, 2]);
    let b = rand_param(&mut rng, &[2, 3, 2]);
    let c = rand_param(&mut rng, &[3]);
    check(vec![a.clone(), b.clone()], |t| {
        probe(&t[0].mul(&t[1]).sub(&t[0]).add(&t[1]))
    });
    check(vec![a.clone(), b.clone()], |t| t[0].mse(&t[1]));
    check(vec![a, c], |t| {
        probe(&t[0].add_bias(&t[1], 1)).add(&t[0].mean_all())
    });
}

#[test]
fn shared_subexpression_accumulates() {
    let x = Tensor::<f64>::param(vec![3], vec![0.5, -1.0, 2.0]);
    let y = x.mul(&x).add(&x.scale(3.0)).sum_all();
    let g = y.backward();
    assert_eq!(g.get(&x).unwrap(), &[4.0, 1.0, 7.0]);
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::<f32>::param(vec![2], vec![1.0, 2.0]);
    let y = autograd::no_grad(|| x.scale(2.0));
    assert!(!y.requires_grad());
    assert!(y.backward().is_empty());
}

#[test]
fn frozen_operands_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_param(&mut rng, &[1, 2, 4, 4]);
    let w = rand_param(&mut rng, &[3, 2, 3, 3]).detach();
    let g = x.conv2d(&w, None, 1, 1).sum_all().backward();
    assert!(g.get(&x).is_some());
    assert!(g.get(&w).is_none());
    let _ = rng.random::<u8>();
}
