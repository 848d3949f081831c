//! One-pass multi-view latent refinement.
//!
//! A batch holds `V + 1` latent slots per subject: slot 0 is the clean
//! reference, slots `1..=V` are coarse novel views. Convolutions see every
//! slot as its own image; attention sees the tokens of all slots at once.

mod lora;
mod model;
mod unet;

pub use lora::{LoraAdapter, LoraLinear};
pub use model::{
    refine, RefinerCheckpoint, RefinerConfig, RefinerMeta, RefinerModel, INFERENCE_SEED,
};
pub use unet::{Attention, ResBlock, UNet};

use autograd::{Float, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FIXED_TIMESTEP: u32 = 400;
pub const INFERENCE_NOISE: f32 = 0.1;
pub const TRAIN_NOISE_LEVELS: [f32; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
pub const MAX_NOISE: f32 = 0.5;

/// Blend weight `r` in `(1 - r) z + r n`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f32", into = "f32")]
pub struct NoiseLevel(f32);

impl NoiseLevel {
    pub fn new(r: f32) -> Result<Self> {
        if (0.0..=MAX_NOISE).contains(&r) {
            Ok(NoiseLevel(r))
        } else {
            Err(Error::validation(format!(
                "noise level {r} outside [0, {MAX_NOISE}]"
            )))
        }
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

impl TryFrom<f32> for NoiseLevel {
    type Error = Error;
    fn try_from(r: f32) -> Result<Self> {
        NoiseLevel::new(r)
    }
}

impl From<NoiseLevel> for f32 {
    fn from(r: NoiseLevel) -> f32 {
        r.0
    }
}

/// Uniform draw from the six training levels.
pub fn sample_train_noise_level(rng: &mut impl Rng) -> NoiseLevel {
    NoiseLevel(TRAIN_NOISE_LEVELS[rng.random_range(0..TRAIN_NOISE_LEVELS.len())])
}

/// Uniform draw from a configured level set.
pub fn sample_noise_level(rng: &mut impl Rng, levels: &[NoiseLevel]) -> NoiseLevel {
    levels[rng.random_range(0..levels.len())]
}

/// `(B, V + 1, C, H, W)` latents; slot 0 is the reference.
#[derive(Clone, Debug)]
pub struct ViewLatentBatch<F: Float = f32> {
    data: Tensor<F>,
}

impl<F: Float> ViewLatentBatch<F> {
    pub fn new(data: Tensor<F>) -> Result<Self> {
        if data.rank() != 5 {
            return Err(Error::validation(format!(
                "view batch must be 5-D, got {:?}",
                data.shape()
            )));
        }
        if data.dim(1) < 2 {
            return Err(Error::validation(
                "view batch needs a reference slot and at least one novel view",
            ));
        }
        Ok(ViewLatentBatch { data })
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim(0)
    }

    pub fn views(&self) -> usize {
        self.data.dim(1) - 1
    }

    /// `(C, H, W)` of each slot.
    pub fn slot_shape(&self) -> [usize; 3] {
        [self.data.dim(2), self.data.dim(3), self.data.dim(4)]
    }

    fn slot_len(&self) -> usize {
        let [c, h, w] = self.slot_shape();
        c * h * w
    }

    pub fn slot(&self, b: usize, v: usize) -> &[F] {
        let n = self.slot_len();
        let start = (b * self.data.dim(1) + v) * n;
        &self.data.data()[start..start + n]
    }

    /// Novel-view slots only, as `(B * V, C, H, W)`.
    pub fn novel_views(&self) -> Tensor<F> {
        let [c, h, w] = self.slot_shape();
        let (b, v) = (self.batch_size(), self.views());
        self.data.narrow(1, 1, v).reshape(vec![b * v, c, h, w])
    }
}

/// `z_v <- (1 - r) z_v + r n_v` for every novel slot; the reference slot is
/// copied through untouched.
pub fn add_noise(batch: &ViewLatentBatch, r: NoiseLevel, rng_seed: u64) -> ViewLatentBatch {
    if r.0 == 0.0 {
        return batch.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n = batch.slot_len();
    let slots = batch.data.dim(1);
    let mut data = batch.data.to_vec();
    for (i, slot) in data.chunks_mut(n).enumerate() {
        if i % slots == 0 {
            continue;
        }
        for z in slot {
            let noise: f32 = StandardNormal.sample(&mut rng);
            *z = blend(*z, noise, r.0);
        }
    }
    ViewLatentBatch {
        data: Tensor::constant(batch.data.shape().to_vec(), data),
    }
}

#[inline]
pub fn blend(z: f32, n: f32, r: f32) -> f32 {
    (1.0 - r) * z + r * n
}

/// `(B, V + 1, C, H, W)` to `(B (V + 1), C, H, W)`; slot `(b, v)` becomes row `b (V + 1) + v`.
pub fn reshape_for_resblock<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let s = x.shape();
    x.reshape(vec![s[0] * s[1], s[2], s[3], s[4]])
}

pub fn unreshape_from_resblock<F: Float>(x: &Tensor<F>, batch: usize) -> Tensor<F> {
    let s = x.shape();
    x.reshape(vec![batch, s[0] / batch, s[1], s[2], s[3]])
}

/// `(B, V + 1, C, H, W)` to `(B, C, (V + 1) H W)`; token `v H W + h W + w`.
pub fn reshape_for_attention<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let s = x.shape().to_vec();
    x.permute(&[0, 2, 1, 3, 4])
        .reshape(vec![s[0], s[2], s[1] * s[3] * s[4]])
}

pub fn unreshape_from_attention<F: Float>(
    x: &Tensor<F>,
    slots: usize,
    h: usize,
    w: usize,
) -> Tensor<F> {
    let (b, c) = (x.dim(0), x.dim(1));
    x.reshape(vec![b, c, slots, h, w]).permute(&[0, 2, 1, 3, 4])
}
