//! Analytic stand-in for a coarse 3D avatar: pose-dependent blur, sensor
//! noise and a washed-out palette.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthdata::{CameraPose, SceneBundle};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    /// Pixels.
    pub base_blur_sigma: f32,
    /// Pixels per degree of |yaw|.
    pub yaw_blur_gain: f32,
    pub noise_sigma: f32,
    /// Blend fraction toward the image mean.
    pub desaturation: f32,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            base_blur_sigma: 1.0,
            yaw_blur_gain: 0.03,
            noise_sigma: 0.02,
            desaturation: 0.15,
        }
    }
}

impl DegradationConfig {
    pub const NONE: DegradationConfig = DegradationConfig {
        base_blur_sigma: 0.0,
        yaw_blur_gain: 0.0,
        noise_sigma: 0.0,
        desaturation: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.base_blur_sigma,
            self.yaw_blur_gain,
            self.noise_sigma,
            self.desaturation,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) || self.desaturation > 1.0 {
            return Err(Error::validation(format!(
                "invalid degradation config {self:?}"
            )));
        }
        Ok(())
    }

    pub fn blur_sigma(&self, pose: &CameraPose) -> f32 {
        self.base_blur_sigma + self.yaw_blur_gain * pose.yaw.abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseView {
    pub image: Image,
    pub pose: CameraPose,
    pub source_identity_seed: u64,
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (c, h, w) = img.dims();
    let mut tmp = Image::zeros(c, h, w);
    let mut out = Image::zeros(c, h, w);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f32 = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * img.get(ch, y, clamp(x as isize + t as isize - r, w)))
                    .sum();
                tmp.set(ch, y, x, acc);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let acc: f32 = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * tmp.get(ch, clamp(y as isize + t as isize - r, h), x))
                    .sum();
                out.set(ch, y, x, acc);
            }
        }
    }
    out
}

/// Blur by `base + gain * |yaw|`, add seeded Gaussian noise, pull toward the
/// image mean, clamp.
pub fn degrade(
    ground_truth: &Image,
    pose: &CameraPose,
    config: &DegradationConfig,
    rng_seed: u64,
) -> Result<Image> {
    config.validate()?;
    pose.validate()?;
    let (lo, hi) = ground_truth.min_max();
    if lo < 0.0 || hi > 1.0 {
        return Err(Error::validation("degrade expects an image in [0, 1]"));
    }
    let mut img = gaussian_blur(ground_truth, config.blur_sigma(pose));
    if config.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        for v in img.data_mut() {
            let n: f32 = StandardNormal.sample(&mut rng);
            *v += config.noise_sigma * n;
        }
    }
    if config.desaturation > 0.0 {
        let mean = img.data().iter().sum::<f32>() / img.data().len() as f32;
        let d = config.desaturation;
        for v in img.data_mut() {
            *v = (1.0 - d) * *v + d * mean;
        }
    }
    img.clamp01();
    Ok(img)
}

/// Per-view degradation seed, distinct across identities and view slots.
pub fn view_seed(seed: u64, identity_seed: u64, view: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        ^ identity_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (view as u64)
            .wrapping_add(1)
            .wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Degrades every target of a bundle.
pub fn coarsen_bundle(
    bundle: &SceneBundle,
    config: &DegradationConfig,
    seed: u64,
) -> Result<Vec<CoarseView>> {
    bundle
        .targets
        .iter()
        .enumerate()
        .map(|(v, t)| {
            Ok(CoarseView {
                image: degrade(
                    &t.image,
                    &t.pose,
                    config,
                    view_seed(seed, bundle.identity.seed, v),
                )?,
                pose: t.pose,
                source_identity_seed: bundle.identity.seed,
            })
        })
        .collect()
}

/// Fraction of the image width taken as the head radius by [`reproject_reference`].
pub const REPROJECT_RADIUS: f32 = 0.42;

/// Coarse novel view from a lone frontal image: the reference is wrapped onto
/// a vertical cylinder, turned by `yaw` degrees and resampled. Pixels whose
/// surface point faces away are filled with the mean border color.
pub fn reproject_reference(reference: &Image, yaw: f32) -> Result<Image> {
    CameraPose::yaw(yaw).validate()?;
    let (c, h, w) = reference.dims();
    let border = border_mean(reference);
    let cx = (w as f32 - 1.0) / 2.0;
    let radius = REPROJECT_RADIUS * w as f32;
    let turn = yaw.to_radians();
    let mut out = Image::zeros(c, h, w);
    for x in 0..w {
        let u = (x as f32 - cx) / radius;
        let src = if u.abs() <= 1.0 {
            let theta = u.asin() - turn;
            (theta.abs() < std::f32::consts::FRAC_PI_2).then(|| cx + radius * theta.sin())
        } else {
            Some(x as f32)
        };
        for y in 0..h {
            for ch in 0..c {
                let v = match src {
                    Some(sx) => {
                        let sx = sx.clamp(0.0, w as f32 - 1.0);
                        let (x0, t) = (sx.floor() as usize, sx.fract());
                        let x1 = (x0 + 1).min(w - 1);
                        (1.0 - t) * reference.get(ch, y, x0) + t * reference.get(ch, y, x1)
                    }
                    None => border[ch],
                };
                out.set(ch, y, x, v);
            }
        }
    }
    Ok(out)
}

fn border_mean(img: &Image) -> Vec<f32> {
    let (c, h, w) = img.dims();
    (0..c)
        .map(|ch| {
            let mut sum = 0.0;
            for x in 0..w {
                sum += img.get(ch, 0, x) + img.get(ch, h - 1, x);
            }
            for y in 1..h - 1 {
                sum += img.get(ch, y, 0) + img.get(ch, y, w - 1);
            }
            sum / (2 * w + 2 * (h - 2)) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render_view, sample_identity};

    /// Sum of squared 5-point Laplacian responses over interior pixels.
    fn laplacian_energy(img: &Image) -> f64 {
        let (c, h, w) = img.dims();
        let mut e = 0.0f64;
        for ch in 0..c {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let l = img.get(ch, y - 1, x)
                        + img.get(ch, y + 1, x)
                        + img.get(ch, y, x - 1)
                        + img.get(ch, y, x + 1)
                        - 4.0 * img.get(ch, y, x);
                    e += (l as f64).powi(2);
                }
            }
        }
        e
    }

    /// Direct 2-D convolution with the outer-product kernel.
    fn reference_blur(img: &Image, sigma: f32) -> Image {
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as isize;
        let (c, h, w) = img.dims();
        let mut out = Image::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0f64;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                            let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                            acc += (k[(dy + r) as usize] * k[(dx + r) as usize]) as f64
                                * img.get(ch, yy, xx) as f64;
                        }
                    }
                    out.set(ch, y as usize, x as usize, acc as f32);
                }
            }
        }
        out
    }

    fn sample() -> Image {
        render_view(&sample_identity(1), &CameraPose::FRONTAL, 64).unwrap()
    }

    #[test]
    fn zero_config_is_identity() {
        let gt = sample();
        let out = degrade(&gt, &CameraPose::yaw(60.0), &DegradationConfig::NONE, 3).unwrap();
        assert_eq!(out, gt);
    }

    #[test]
    fn yaw_reduces_high_frequency_energy() {
        let gt = sample();
        let cfg = DegradationConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let e0 = laplacian_energy(&degrade(&gt, &CameraPose::yaw(0.0), &cfg, 1).unwrap());
        let e60 = laplacian_energy(&degrade(&gt, &CameraPose::yaw(60.0), &cfg, 1).unwrap());
        assert!(e60 < e0, "{e60} !< {e0}");
        let with_noise = DegradationConfig::default();
        let n0 = laplacian_energy(&degrade(&gt, &CameraPose::yaw(0.0), &with_noise, 1).unwrap());
        let n60 = laplacian_energy(&degrade(&gt, &CameraPose::yaw(60.0), &with_noise, 1).unwrap());
        assert!(n60 < n0);
    }

    #[test]
    fn separable_blur_matches_direct_convolution() {
        let gt = render_view(&sample_identity(9), &CameraPose::yaw(20.0), 32).unwrap();
        for sigma in [0.6, 1.0, 2.3] {
            let a = gaussian_blur(&gt, sigma);
            let b = reference_blur(&gt, sigma);
            let err = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f32::max);
            assert!(err < 1e-5, "sigma {sigma}: {err}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let gt = sample();
        let cfg = DegradationConfig::default();
        let a = degrade(&gt, &CameraPose::yaw(30.0), &cfg, 5).unwrap();
        assert_eq!(a, degrade(&gt, &CameraPose::yaw(30.0), &cfg, 5).unwrap());
        assert_ne!(a, degrade(&gt, &CameraPose::yaw(30.0), &cfg, 6).unwrap());
    }

    #[test]
    fn rejects_invalid_config() {
        let gt = sample();
        let bad = DegradationConfig {
            desaturation: 1.5,
            ..Default::default()
        };
        assert!(degrade(&gt, &CameraPose::FRONTAL, &bad, 0).is_err());
        let neg = DegradationConfig {
            noise_sigma: -0.1,
            ..Default::default()
        };
        assert!(degrade(&gt, &CameraPose::FRONTAL, &neg, 0).is_err());
    }

    #[test]
    fn reprojection_is_identity_at_zero_yaw() {
        let img = render_view(&sample_identity(4), &CameraPose::FRONTAL, 32).unwrap();
        let same = reproject_reference(&img, 0.0).unwrap();
        let err = img
            .data()
            .iter()
            .zip(same.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-5, "{err}");
        let turned = reproject_reference(&img, 40.0).unwrap();
        assert_ne!(turned, img);
        assert!(reproject_reference(&img, 120.0).is_err());
    }
}
