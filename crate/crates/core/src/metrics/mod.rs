//! Image quality metrics, learned-feature proxies and ablation protocols.
//!
//! The perceptual, identity and Fréchet metrics use in-repo networks
//! (codec encoder, identity embedder) instead of external pretrained models;
//! reports label them `*_proxy` so they are never mistaken for the standard
//! scores.

mod ablation;
mod embedder;
mod fid;
mod report;

pub use ablation::{
    ablate_noise, ablate_rotation, evaluate, refine_set, timing, EvalItem, EvalSet, ROTATION_ANGLES,
};
pub use embedder::{
    id_consistency, train_embedder, EmbedderConfig, EmbedderTrainConfig, IdentityEmbedder,
};
pub use fid::{fid_from_features, fid_proxy, frechet_distance, FID_MIN_SAMPLES};
pub use report::{AngleRow, EvalReport, MetricSummary, NoiseRow, Timing};

use autograd::{no_grad, Tensor};

use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::latent_codec::Codec;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::validation(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared error.
pub fn l2_error(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / n)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Peak signal-to-noise ratio for unit peak, capped for exact matches.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(l2_error(a, b)?))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..n).map(|t| k[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|t| k[t] * tmp[(y + t) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged
/// over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.plane(ch).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.plane(ch).iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (ma, ..) = filter_valid(&pa, h, w, &k);
        let (mb, ..) = filter_valid(&pb, h, w, &k);
        let (saa, ..) = filter_valid(&prod(&pa, &pa), h, w, &k);
        let (sbb, ..) = filter_valid(&prod(&pb, &pb), h, w, &k);
        let (sab, ho, wo) = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..ho * wo {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cov = sab[i] - mx * my;
            acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / (ho * wo) as f64;
    }
    Ok((total / c as f64).clamp(-1.0, 1.0))
}

/// Stage-averaged mean squared distance between codec encoder features.
pub fn lpips_proxy(a: &Image, b: &Image, codec: Option<&Codec>) -> Result<f64> {
    let codec =
        codec.ok_or_else(|| Error::Config("perceptual proxy needs a trained codec".into()))?;
    check_pair(a, b)?;
    Ok(lpips_proxy_batch(&[a], &[b], codec)[0])
}

/// Per-pair proxy values for two equally long image lists.
pub fn lpips_proxy_batch(a: &[&Image], b: &[&Image], codec: &Codec) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "lpips_proxy_batch: list lengths differ");
    no_grad(|| {
        let fa = codec.features(&stack(a));
        let fb = codec.features(&stack(b));
        let mut out = vec![0.0; a.len()];
        for (x, y) in fa.iter().zip(&fb) {
            for (i, d) in per_sample_mse(x, y).into_iter().enumerate() {
                out[i] += d / fa.len() as f64;
            }
        }
        out
    })
}

fn per_sample_mse(x: &Tensor, y: &Tensor) -> Vec<f64> {
    let per = x.numel() / x.dim(0);
    x.data()
        .chunks(per)
        .zip(y.data().chunks(per))
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(&u, &v)| ((u - v) as f64).powi(2))
                .sum::<f64>()
                / per as f64
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}
