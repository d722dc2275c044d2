use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::codec::{FeatureExtractor, PanoImage};
use crate::error::{Error, Result};
use crate::exec::Parallelism;

/// Ridge added to a covariance whose smallest eigenvalue falls below it.
pub const RIDGE: f64 = 1e-6;

/// Mean and sample covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<Self> {
        let k = mean.len();
        if cov.len() != k * k {
            return Err(Error::Shape(format!("covariance has {} entries for k={k}", cov.len())));
        }
        let cov = DMatrix::from_row_slice(k, k, &cov);
        let stats = Self {
            mean: DVector::from_vec(mean),
            cov,
            n,
        };
        stats.check()?;
        Ok(stats)
    }

    /// Unbiased covariance; needs more samples than dimensions.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let k = samples.first().map(|s| s.len()).ok_or_else(|| Error::Empty("feature set".into()))?;
        if samples.len() < k + 1 {
            return Err(Error::TooFewSamples {
                needed: k + 1,
                got: samples.len(),
            });
        }
        if samples.iter().any(|s| s.len() != k) {
            return Err(Error::Shape("ragged feature set".into()));
        }
        let n = samples.len();
        let mut mean = DVector::zeros(k);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(k, k);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
        let stats = Self { mean, cov, n };
        stats.check()?;
        Ok(stats)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self) -> Result<()> {
        if self.mean.iter().chain(self.cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian stats".into()));
        }
        let asym = (&self.cov - self.cov.transpose()).amax();
        if asym > 1e-9 * self.cov.amax().max(1.0) {
            return Err(Error::Shape("covariance is not symmetric".into()));
        }
        Ok(())
    }
}

fn regularized(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let min = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if min < RIDGE {
        cov + DMatrix::identity(cov.nrows(), cov.ncols()) * RIDGE
    } else {
        cov.clone()
    }
}

fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `|μa − μb|² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, clamped at zero.
///
/// The trace of the cross term is taken from the eigenvalues of the
/// symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`, which has the same spectrum.
pub fn frechet(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    a.check()?;
    b.check()?;
    let sa = regularized(&a.cov);
    let sb = regularized(&b.cov);
    let ra = sqrt_psd(sa.clone());
    let mut m = &ra * &sb * &ra;
    m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dmu = (&a.mean - &b.mean).norm_squared();
    let d = dmu + sa.trace() + sb.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(d.max(0.0))
}

fn features(images: &[PanoImage], fx: &FeatureExtractor, par: Parallelism) -> Result<Vec<Vec<f64>>> {
    par.map(images, |_, img| fx.raw(img)).into_iter().collect()
}

/// FID between two image sets over codec features.
pub fn fid(real: &[PanoImage], fake: &[PanoImage], fx: &FeatureExtractor, par: Parallelism) -> Result<f64> {
    let a = GaussianStats::from_samples(&features(real, fx, par)?)?;
    let b = GaussianStats::from_samples(&features(fake, fx, par)?)?;
    frechet(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalFid {
    pub top: f64,
    pub middle: f64,
    pub bottom: f64,
    pub mean: f64,
}

impl SphericalFid {
    pub fn from_parts(top: f64, middle: f64, bottom: f64) -> Self {
        Self {
            top,
            middle,
            bottom,
            mean: (top + middle + bottom) / 3.0,
        }
    }
}

fn strip(images: &[PanoImage], s: usize) -> Result<Vec<PanoImage>> {
    images
        .iter()
        .map(|img| {
            let h = img.height() / 3;
            img.crop(0, s * h, img.width(), (s + 1) * h)
        })
        .collect()
}

/// FID on the top, middle, and bottom thirds of the panoramas.
pub fn spherical_fid(
    real: &[PanoImage],
    fake: &[PanoImage],
    fx: &FeatureExtractor,
    par: Parallelism,
) -> Result<SphericalFid> {
    if let Some(img) = real.iter().chain(fake).find(|i| i.height() % 3 != 0) {
        return Err(Error::Shape(format!("height {} does not split into three strips", img.height())));
    }
    let mut parts = [0.0; 3];
    for (s, part) in parts.iter_mut().enumerate() {
        *part = fid(&strip(real, s)?, &strip(fake, s)?, fx, par)?;
    }
    Ok(SphericalFid::from_parts(parts[0], parts[1], parts[2]))
}
