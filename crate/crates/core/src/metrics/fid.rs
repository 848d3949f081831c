use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::embedder::IdentityEmbedder;
use crate::error::{Error, Result};
use crate::image::Image;

pub const FID_MIN_SAMPLES: usize = 32;

fn gaussian_fit(features: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let d = features[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

/// Eigen-decomposition based square root of a symmetric matrix, clamping
/// negative eigenvalues to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, never negative.
pub fn frechet_distance(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> f64 {
    let mean_term = (mu_a - mu_b).norm_squared();
    // tr((S_a S_b)^(1/2)) = tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), the inner product being PSD
    let ra = sqrt_psd(cov_a);
    let inner = &ra * cov_b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    (mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < FID_MIN_SAMPLES || b.len() < FID_MIN_SAMPLES {
        return Err(Error::validation(format!(
            "Fréchet distance needs at least {FID_MIN_SAMPLES} samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    Ok(frechet_distance(&ma, &ca, &mb, &cb))
}

/// Fréchet distance in identity-embedding space.
pub fn fid_proxy(set_a: &[&Image], set_b: &[&Image], embedder: &IdentityEmbedder) -> Result<f64> {
    if set_a.len() < FID_MIN_SAMPLES || set_b.len() < FID_MIN_SAMPLES {
        return Err(Error::validation(format!(
            "fid_proxy needs at least {FID_MIN_SAMPLES} images per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    fid_from_features(&embedder.embed(set_a)?, &embedder.embed(set_b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pool(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn self_distance_is_zero() {
        let a = pool(64, 8, 0);
        assert!(fid_from_features(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn mean_shift_closed_form() {
        let mu = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.3]);
        let d = DVector::from_vec(vec![0.5, 1.0, -2.0]);
        let got = frechet_distance(&mu, &cov, &(&mu + &d), &cov);
        assert!((got - d.norm_squared()).abs() < 1e-6, "{got}");
        let a = pool(40, 4, 1);
        let b: Vec<Vec<f64>> = a
            .iter()
            .map(|r| r.iter().map(|v| v + 0.25).collect())
            .collect();
        assert!((fid_from_features(&a, &b).unwrap() - 4.0 * 0.0625).abs() < 1e-6);
    }

    #[test]
    fn symmetric_and_rank_deficient_safe() {
        let a = pool(40, 6, 2);
        let b = pool(50, 6, 3);
        let ab = fid_from_features(&a, &b).unwrap();
        let ba = fid_from_features(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        // 32 samples in 64 dimensions: rank-deficient covariances
        let c = pool(32, 64, 4);
        let e = pool(33, 64, 5);
        let v = fid_from_features(&c, &e).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        let a = pool(31, 4, 6);
        let err = fid_from_features(&a, &a).unwrap_err().to_string();
        assert!(err.contains("32"), "{err}");
    }

    #[test]
    fn split_halves_closer_than_shifted_pool() {
        let p = pool(128, 4, 7);
        let (h1, h2) = p.split_at(64);
        let shifted: Vec<Vec<f64>> = h2
            .iter()
            .map(|r| r.iter().map(|v| v * 0.5 + 0.3).collect())
            .collect();
        assert!(fid_from_features(h1, h2).unwrap() < fid_from_features(h1, &shifted).unwrap());
    }
}
