//! Patch discriminator and the composite generator objective.

use autograd::nn::{join, Conv2d};
use autograd::{no_grad, Float, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::latent_codec::Codec;

/// Spatial contraction of the logit grid.
pub const PATCH_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon: f64,
    pub perceptual: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            perceptual: 0.1,
            gan: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_l2: f64,
    pub perceptual: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub total_g: f64,
}

/// Three stride-2 3x3 stages and a pointwise head; receptive field 15 px.
#[derive(Clone, Debug)]
pub struct Discriminator<F: Float = f32> {
    c1: Conv2d<F>,
    c2: Conv2d<F>,
    c3: Conv2d<F>,
    head: Conv2d<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchLogits {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl<F: Float> Discriminator<F> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Discriminator {
            c1: Conv2d::k3(&mut rng, 3, 32, 2),
            c2: Conv2d::k3(&mut rng, 32, 64, 2),
            c3: Conv2d::k3(&mut rng, 64, 128, 2),
            head: Conv2d::new(&mut rng, 128, 1, 1, 1, 0),
        }
    }

    /// `(N, 3, H, W)` in `[0, 1]` to `(N, 1, H/8, W/8)` logits.
    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let slope = F::c(0.2);
        let h = x.scale(F::c(2.0)).add_scalar(F::c(-1.0));
        let h = self.c1.forward(&h).leaky_relu(slope);
        let h = self.c2.forward(&h).leaky_relu(slope);
        let h = self.c3.forward(&h).leaky_relu(slope);
        self.head.forward(&h)
    }
}

impl<F: Float> Module<F> for Discriminator<F> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.c1.visit(&join(p, "c1"), f);
        self.c2.visit(&join(p, "c2"), f);
        self.c3.visit(&join(p, "c3"), f);
        self.head.visit(&join(p, "head"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.c1.visit_mut(&join(p, "c1"), f);
        self.c2.visit_mut(&join(p, "c2"), f);
        self.c3.visit_mut(&join(p, "c3"), f);
        self.head.visit_mut(&join(p, "head"), f);
    }
}

impl Discriminator<f32> {
    pub fn disc_forward(&self, image: &Image) -> Result<PatchLogits> {
        let (c, h, w) = image.dims();
        if c != 3 || h % PATCH_STRIDE != 0 || w % PATCH_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "discriminator needs 3 channels and sides divisible by {PATCH_STRIDE}, got {c}x{h}x{w}"
            )));
        }
        let out = no_grad(|| self.forward(&stack(&[image])));
        Ok(PatchLogits {
            height: out.dim(2),
            width: out.dim(3),
            data: out.to_vec(),
        })
    }
}

/// Hinge discriminator loss on real batch `real` and detached fakes.
pub fn discriminator_loss<F: Float>(
    fake: &Tensor<F>,
    real: &Tensor<F>,
    disc: &Discriminator<F>,
) -> Tensor<F> {
    let one = F::one();
    let real_term = disc.forward(real).neg().add_scalar(one).relu().mean_all();
    let fake_term = disc
        .forward(&fake.detach())
        .add_scalar(one)
        .relu()
        .mean_all();
    real_term.add(&fake_term)
}

/// Stage-averaged feature mismatch under the codec encoder.
pub fn perceptual_loss<F: Float>(a: &Tensor<F>, b: &Tensor<F>, codec: &Codec<F>) -> Tensor<F> {
    let fa = codec.features(a);
    let fb = codec.features(b);
    let n = F::c(1.0 / fa.len() as f64);
    fa.iter()
        .zip(&fb)
        .map(|(x, y)| x.mse(y))
        .reduce(|s, t| s.add(&t))
        .expect("two stages")
        .scale(n)
}

/// Differentiable generator objective over novel views plus its scalar report.
/// `gan_d` is left at zero; the caller fills it after the discriminator step.
pub fn generator_loss<F: Float>(
    refined: &Tensor<F>,
    ground_truth: &Tensor<F>,
    disc: &Discriminator<F>,
    codec: &Codec<F>,
    weights: &LossWeights,
) -> Result<(Tensor<F>, LossReport)> {
    if refined.shape() != ground_truth.shape() {
        return Err(Error::validation(format!(
            "refined {:?} and ground truth {:?} differ",
            refined.shape(),
            ground_truth.shape()
        )));
    }
    let recon = refined.mse(ground_truth);
    let perc = perceptual_loss(refined, ground_truth, codec);
    let gan = disc.forward(refined).mean_all().neg();
    let total = recon
        .scale(F::c(weights.recon))
        .add(&perc.scale(F::c(weights.perceptual)))
        .add(&gan.scale(F::c(weights.gan)));
    let f = |t: &Tensor<F>| t.item().to_f64().unwrap();
    let report = LossReport {
        recon_l2: f(&recon),
        perceptual: f(&perc),
        gan_g: f(&gan),
        gan_d: 0.0,
        total_g: f(&total),
    };
    Ok((total, report))
}

/// Image-list form of [`generator_loss`], evaluated without gradients.
pub fn generator_loss_images(
    refined: &[&Image],
    ground_truth: &[&Image],
    disc: &Discriminator,
    codec: &Codec,
    weights: &LossWeights,
) -> Result<LossReport> {
    if refined.len() != ground_truth.len() || refined.is_empty() {
        return Err(Error::validation(
            "refined and ground-truth lists must be equally long and non-empty",
        ));
    }
    no_grad(|| {
        generator_loss(&stack(refined), &stack(ground_truth), disc, codec, weights).map(|(_, r)| r)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_codec::CodecConfig;
    use crate::synthdata::{render_view, sample_identity, CameraPose};

    fn img(seed: u64, yaw: f32) -> Image {
        render_view(&sample_identity(seed), &CameraPose::yaw(yaw), 64).unwrap()
    }

    #[test]
    fn logit_grid_is_eighth_scale_and_deterministic() {
        let d = Discriminator::<f32>::new(0);
        let x = img(0, 0.0);
        let a = d.disc_forward(&x).unwrap();
        assert_eq!((a.height, a.width), (8, 8));
        assert!(a.data.iter().all(|v| v.is_finite()));
        assert_eq!(a, d.disc_forward(&x).unwrap());
        assert!(d.disc_forward(&Image::zeros(3, 60, 60)).is_err());
    }

    #[test]
    fn gradients_reach_the_input() {
        let d = Discriminator::<f32>::new(1);
        let x = stack::<f32>(&[&img(1, 10.0)]).to_param();
        let g = d.forward(&x).mean_all().backward();
        let norm: f32 = g.get(&x).unwrap().iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn hinge_limits() {
        let d = Discriminator::<f32>::new(2).zeroed();
        let x = stack::<f32>(&[&img(2, 0.0)]);
        assert_eq!(discriminator_loss(&x, &x, &d).item(), 2.0);
        // a head bias of +-B saturates both hinge terms for B >= 1
        let mut sat = Discriminator::<f32>::new(2).zeroed();
        sat.head.bias = Some(Tensor::param(vec![1], vec![5.0]));
        let real_term = sat
            .forward(&x)
            .neg()
            .add_scalar(1.0)
            .relu()
            .mean_all()
            .item();
        assert_eq!(real_term, 0.0);
        sat.head.bias = Some(Tensor::param(vec![1], vec![-5.0]));
        let fake_term = sat.forward(&x).add_scalar(1.0).relu().mean_all().item();
        assert_eq!(fake_term, 0.0);
    }

    #[test]
    fn fakes_are_detached() {
        let d = Discriminator::<f32>::new(3);
        let fake = stack::<f32>(&[&img(3, 0.0)]).to_param();
        let real = stack::<f32>(&[&img(4, 0.0)]);
        let g = discriminator_loss(&fake, &real, &d).backward();
        assert!(g.get(&fake).is_none());
        assert!(g.get(&d.c1.weight).is_some());
    }

    #[test]
    fn identical_inputs_zero_recon_and_perceptual() {
        let d = Discriminator::<f32>::new(4);
        let codec = Codec::<f32>::new(0, CodecConfig::default());
        let x = img(5, 30.0);
        let r = generator_loss_images(&[&x], &[&x], &d, &codec, &LossWeights::default()).unwrap();
        assert_eq!((r.recon_l2, r.perceptual), (0.0, 0.0));
    }

    #[test]
    fn total_is_weighted_sum_and_linear_in_weights() {
        let d = Discriminator::<f32>::new(5);
        let codec = Codec::<f32>::new(1, CodecConfig::default());
        let (a, b) = (img(6, 0.0), img(6, 40.0));
        let w = LossWeights::default();
        let r = generator_loss_images(&[&a], &[&b], &d, &codec, &w).unwrap();
        let expected = r.recon_l2 * w.recon + r.perceptual * w.perceptual + r.gan_g * w.gan;
        assert!((r.total_g - expected).abs() < 1e-6);
        let w2 = LossWeights { recon: 2.0, ..w };
        let r2 = generator_loss_images(&[&a], &[&b], &d, &codec, &w2).unwrap();
        assert!(((r2.total_g - r.total_g) - r.recon_l2).abs() < 1e-6);
        assert!(generator_loss_images(&[&a], &[], &d, &codec, &w).is_err());
    }

    #[test]
    fn patch_locality() {
        let d = Discriminator::<f32>::new(6);
        let x = img(7, 0.0);
        let base = d.disc_forward(&x).unwrap();
        let (py, px) = (20usize, 41usize);
        let mut moved = x.clone();
        moved.set(1, py, px, 1.0 - x.get(1, py, px));
        let after = d.disc_forward(&moved).unwrap();
        // logit i sees input rows 8i-7 ..= 8i+7
        let covers =
            |i: usize, p: usize| (8 * i as isize - 7..=8 * i as isize + 7).contains(&(p as isize));
        for i in 0..8 {
            for j in 0..8 {
                let k = i * 8 + j;
                if !(covers(i, py) && covers(j, px)) {
                    assert_eq!(base.data[k], after.data[k], "logit ({i},{j}) changed");
                }
            }
        }
        assert_ne!(base, after);
    }

    impl Discriminator<f32> {
        fn zeroed(mut self) -> Self {
            self.head = self.head.zero_init();
            self
        }
    }
}
