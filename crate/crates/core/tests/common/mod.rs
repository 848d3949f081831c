#![allow(dead_code)]

use autograd::{Float, Module, Tensor};
use portrait_refine::refiner::{RefinerConfig, RefinerModel, ViewLatentBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough for finite differences.
pub fn tiny_config(view_count: usize) -> RefinerConfig {
    RefinerConfig {
        latent_channels: 4,
        widths: [8, 16, 16],
        heads: 4,
        groups: 4,
        lora_rank: 2,
        view_count,
        ..RefinerConfig::default()
    }
}

/// Overwrites every all-zero tensor with small random values so no path is
/// silently dead. Trainable flags are kept.
pub fn wake_zeros<F: Float>(model: &mut impl Module<F>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_mut("", &mut |_, t| {
        if t.data().iter().all(|&v| v == F::c(0.0)) {
            let data = (0..t.numel())
                .map(|_| F::c(rng.random_range(-scale..scale)))
                .collect();
            let fresh = Tensor::constant(t.shape().to_vec(), data);
            *t = if t.requires_grad() {
                fresh.to_param()
            } else {
                fresh
            };
        }
    });
}

pub fn random_tensor<F: Float>(shape: &[usize], seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::constant(
        shape.to_vec(),
        (0..n).map(|_| F::c(rng.random_range(-1.0..1.0))).collect(),
    )
}

pub fn random_batch<F: Float>(
    b: usize,
    v: usize,
    c: usize,
    hw: usize,
    seed: u64,
) -> ViewLatentBatch<F> {
    ViewLatentBatch::new(random_tensor(&[b, v + 1, c, hw, hw], seed)).unwrap()
}

/// Reorders the novel slots of every group; slot 0 stays put.
pub fn permute_views<F: Float>(x: &Tensor<F>, order: &[usize]) -> Tensor<F> {
    let slots: Vec<Tensor<F>> = std::iter::once(0)
        .chain(order.iter().map(|&o| o + 1))
        .map(|s| x.narrow(1, s, 1))
        .collect();
    Tensor::cat(&slots, 1)
}

pub fn max_abs_diff<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let (a, b) = (a.cast::<f64>(), b.cast::<f64>());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn tiny_model<F: Float>(views: usize, seed: u64) -> RefinerModel<F> {
    let mut m = RefinerModel::new(seed, tiny_config(views)).unwrap();
    wake_zeros(&mut m, seed ^ 0xA5, 0.2);
    m
}
