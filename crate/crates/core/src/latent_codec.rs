//! Deterministic convolutional autoencoder: images to `(C_z, H/4, W/4)` latents.

use std::collections::BTreeMap;
use std::path::Path;

use autograd::nn::{join, Conv2d};
use autograd::optim::{Adam, AdamConfig};
use autograd::{no_grad, Float, Module, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{stack, unstack, Image};
use crate::metrics::psnr;

pub const WEIGHTS_FILE: &str = "codec.safetensors";
pub const META_FILE: &str = "meta.json";
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub widths: [usize; 2],
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_channels: 8,
            widths: [32, 64],
        }
    }
}

/// One `(C_z, H', W')` latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::validation("latent buffer does not match its shape"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("latent contains non-finite values"));
        }
        Ok(LatentGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug)]
pub struct Codec<F: Float = f32> {
    pub config: CodecConfig,
    /// Multiplier bringing latents to roughly unit variance.
    pub latent_scale: f64,
    enc_in: Conv2d<F>,
    enc_down1: Conv2d<F>,
    enc_down2: Conv2d<F>,
    enc_out: Conv2d<F>,
    dec_in: Conv2d<F>,
    dec_up1: Conv2d<F>,
    dec_up2: Conv2d<F>,
    dec_out: Conv2d<F>,
}

impl<F: Float> Codec<F> {
    pub fn new(seed: u64, config: CodecConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w1, w2] = config.widths;
        let cz = config.latent_channels;
        Codec {
            config,
            latent_scale: 1.0,
            enc_in: Conv2d::k3(&mut rng, 3, w1, 1),
            enc_down1: Conv2d::k3(&mut rng, w1, w1, 2),
            enc_down2: Conv2d::k3(&mut rng, w1, w2, 2),
            enc_out: Conv2d::k3(&mut rng, w2, cz, 1),
            dec_in: Conv2d::k3(&mut rng, cz, w2, 1),
            dec_up1: Conv2d::k3(&mut rng, w2, w1, 1),
            dec_up2: Conv2d::k3(&mut rng, w1, w1, 1),
            dec_out: Conv2d::k3(&mut rng, w1, 3, 1),
        }
    }

    /// Encoder activations after each stride-2 stage, then the latent.
    fn encoder_trace(&self, x: &Tensor<F>) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
        let h = self.enc_in.forward(x).silu();
        let s1 = self.enc_down1.forward(&h).silu();
        let s2 = self.enc_down2.forward(&s1).silu();
        let z = self.enc_out.forward(&s2).scale(F::c(self.latent_scale));
        (s1, s2, z)
    }

    /// `(N, 3, H, W)` to `(N, C_z, H/4, W/4)`.
    pub fn encode_tensor(&self, x: &Tensor<F>) -> Tensor<F> {
        self.encoder_trace(x).2
    }

    /// Feature maps at both stride-2 encoder stages.
    pub fn features(&self, x: &Tensor<F>) -> [Tensor<F>; 2] {
        let (s1, s2, _) = self.encoder_trace(x);
        [s1, s2]
    }

    /// `(N, C_z, H', W')` to `(N, 3, 4H', 4W')` in `(0, 1)`.
    pub fn decode_tensor(&self, z: &Tensor<F>) -> Tensor<F> {
        let z = z.scale(F::c(1.0 / self.latent_scale));
        let h = self.dec_in.forward(&z).silu().upsample2x();
        let h = self.dec_up1.forward(&h).silu().upsample2x();
        let h = self.dec_up2.forward(&h).silu();
        self.dec_out.forward(&h).sigmoid()
    }

    pub fn reconstruct(&self, x: &Tensor<F>) -> Tensor<F> {
        self.decode_tensor(&self.encode_tensor(x))
    }

    /// Names and shapes of every tensor, hashed.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"codec/1");
        self.visit("", &mut |name, t| {
            h.update(format!("{name}:{:?};", t.shape()))
        });
        hex::encode(h.finalize())
    }

    pub fn weights_hash(&self) -> String {
        tensors_hash(self)
    }
}

/// SHA-256 over tensor names and raw little-endian values.
pub fn tensors_hash<F: Float>(m: &dyn Module<F>) -> String {
    let mut h = Sha256::new();
    m.visit("", &mut |name, t| {
        h.update(name.as_bytes());
        h.update(F::to_le_bytes_vec(t.data()));
    });
    hex::encode(h.finalize())
}

impl<F: Float> Module<F> for Codec<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.enc_in.visit(&join(prefix, "enc_in"), f);
        self.enc_down1.visit(&join(prefix, "enc_down1"), f);
        self.enc_down2.visit(&join(prefix, "enc_down2"), f);
        self.enc_out.visit(&join(prefix, "enc_out"), f);
        self.dec_in.visit(&join(prefix, "dec_in"), f);
        self.dec_up1.visit(&join(prefix, "dec_up1"), f);
        self.dec_up2.visit(&join(prefix, "dec_up2"), f);
        self.dec_out.visit(&join(prefix, "dec_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.enc_in.visit_mut(&join(prefix, "enc_in"), f);
        self.enc_down1.visit_mut(&join(prefix, "enc_down1"), f);
        self.enc_down2.visit_mut(&join(prefix, "enc_down2"), f);
        self.enc_out.visit_mut(&join(prefix, "enc_out"), f);
        self.dec_in.visit_mut(&join(prefix, "dec_in"), f);
        self.dec_up1.visit_mut(&join(prefix, "dec_up1"), f);
        self.dec_up2.visit_mut(&join(prefix, "dec_up2"), f);
        self.dec_out.visit_mut(&join(prefix, "dec_out"), f);
    }
}

impl Codec<f32> {
    pub fn encode(&self, image: &Image) -> Result<LatentGrid> {
        let (c, h, w) = image.dims();
        if c != 3 {
            return Err(Error::validation(format!(
                "codec expects 3 channels, got {c}"
            )));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "resolution {h}x{w} is not divisible by {DOWNSAMPLE}"
            )));
        }
        let z = no_grad(|| self.encode_tensor(&stack(&[image])));
        LatentGrid::new(z.dim(1), z.dim(2), z.dim(3), z.to_vec())
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<Image> {
        if latent.channels != self.config.latent_channels {
            return Err(Error::validation(format!(
                "latent has {} channels, codec expects {}",
                latent.channels, self.config.latent_channels
            )));
        }
        let z = Tensor::constant(
            vec![1, latent.channels, latent.height, latent.width],
            latent.data.clone(),
        );
        let x = no_grad(|| self.decode_tensor(&z));
        Ok(unstack(&x).remove(0))
    }

    /// Mean reconstruction PSNR over `images`, evaluated in chunks.
    pub fn mean_psnr(&self, images: &[Image]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::validation("no images to evaluate"));
        }
        let mut total = 0.0;
        for chunk in images.chunks(16) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let out = no_grad(|| self.reconstruct(&stack(&refs)));
            for (a, b) in chunk.iter().zip(unstack(&out)) {
                total += psnr(a, &b)?;
            }
        }
        Ok(total / images.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 5000,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecMeta {
    pub architecture_hash: String,
    pub weights_hash: String,
    pub config: CodecConfig,
    pub step: u64,
    pub latent_scale: f64,
    pub heldout_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct CodecCheckpoint {
    pub codec: Codec<f32>,
    pub meta: CodecMeta,
    /// Training loss per step.
    pub losses: Vec<f32>,
}

impl CodecCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        autograd::io::save(&dir.join(WEIGHTS_FILE), &self.codec.named_tensors())?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        let path = dir.join(META_FILE);
        std::fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    /// Loads a frozen codec and checks the stored hashes.
    pub fn load(dir: &Path) -> Result<CodecCheckpoint> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(Error::Config(format!(
                "no codec checkpoint at {}",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CodecMeta = serde_json::from_str(&text).map_err(|e| {
            Error::integrity(format!(
                "corrupt codec metadata {}: {e}",
                meta_path.display()
            ))
        })?;
        let mut codec = Codec::new(0, meta.config);
        codec.latent_scale = meta.latent_scale;
        if codec.architecture_hash() != meta.architecture_hash {
            return Err(Error::integrity("codec architecture hash mismatch"));
        }
        let tensors: BTreeMap<String, Tensor<f32>> = autograd::io::load(&dir.join(WEIGHTS_FILE))?;
        codec.load_named(&tensors).map_err(Error::Integrity)?;
        codec.freeze();
        if codec.weights_hash() != meta.weights_hash {
            return Err(Error::integrity("codec weight hash mismatch"));
        }
        Ok(CodecCheckpoint {
            codec,
            meta,
            losses: Vec::new(),
        })
    }
}

/// Reciprocal standard deviation of raw latents over up to 64 images.
fn unit_variance_scale(codec: &Codec<f32>, images: &[Image]) -> Result<f64> {
    let raw = Codec {
        latent_scale: 1.0,
        ..codec.clone()
    };
    let refs: Vec<&Image> = images.iter().take(64).collect();
    let z = no_grad(|| raw.encode_tensor(&stack(&refs)));
    let n = z.numel() as f64;
    let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = z
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if !(var.is_finite() && var > 1e-12) {
        return Err(Error::Numerical {
            step: 0,
            msg: format!("degenerate latent variance {var}"),
        });
    }
    Ok(1.0 / var.sqrt())
}

/// Trains the codec on `train` with L2 reconstruction; the returned codec is frozen.
pub fn train_codec(
    train: &[Image],
    heldout: &[Image],
    model_seed: u64,
    config: &CodecConfig,
    tc: &CodecTrainConfig,
) -> Result<CodecCheckpoint> {
    if train.is_empty() {
        return Err(Error::validation("codec training set is empty"));
    }
    if tc.batch_size == 0 || !(tc.lr > 0.0) {
        return Err(Error::Config(
            "codec batch size and lr must be positive".into(),
        ));
    }
    let mut codec = Codec::<f32>::new(model_seed, *config);
    let mut opt = Adam::new(AdamConfig::with_lr(tc.lr));
    let mut losses = Vec::with_capacity(tc.steps as usize);
    let batch = tc.batch_size.min(train.len());
    for step in 0..tc.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let idx = sample(&mut rng, train.len(), batch);
        let refs: Vec<&Image> = idx.iter().map(|i| &train[i]).collect();
        let x = stack::<f32>(&refs);
        let loss = codec.reconstruct(&x).mse(&x);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numerical {
                step,
                msg: format!("codec reconstruction loss is {value}"),
            });
        }
        losses.push(value);
        let grads = loss.backward();
        opt.step(&mut codec, &grads);
    }
    codec.freeze();
    codec.latent_scale = unit_variance_scale(&codec, train)?;
    let heldout_psnr = if heldout.is_empty() {
        f64::NAN
    } else {
        codec.mean_psnr(heldout)?
    };
    let meta = CodecMeta {
        architecture_hash: codec.architecture_hash(),
        weights_hash: codec.weights_hash(),
        config: *config,
        step: tc.steps,
        latent_scale: codec.latent_scale,
        heldout_psnr,
    };
    Ok(CodecCheckpoint {
        codec,
        meta,
        losses,
    })
}
