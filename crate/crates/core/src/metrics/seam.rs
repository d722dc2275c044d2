use crate::codec::PanoImage;
use crate::error::{Error, Result};

/// Lower bound on fitted standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Per pixel row, the largest channel difference between the first and
/// last columns.
pub fn horizontal_gradient(image: &PanoImage) -> Result<Vec<f64>> {
    let w = image.width();
    if w < 2 {
        return Err(Error::Shape("horizontal gradient needs width >= 2".into()));
    }
    Ok((0..image.height())
        .map(|y| {
            image
                .pixel(0, y)
                .iter()
                .zip(image.pixel(w - 1, y))
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Mean and population standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalFit {
    pub mean: f64,
    pub std: f64,
}

impl NormalFit {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("normal fit".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt().max(SIGMA_FLOOR),
        })
    }
}

/// `KL(N(μp, σp²) ‖ N(μq, σq²))`.
pub fn kl_normal(p: NormalFit, q: NormalFit) -> f64 {
    let (sp, sq) = (p.std.max(SIGMA_FLOOR), q.std.max(SIGMA_FLOOR));
    (sq / sp).ln() + (sp * sp + (p.mean - q.mean).powi(2)) / (2.0 * sq * sq) - 0.5
}

fn pooled(images: &[PanoImage]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Empty("image set".into()));
    }
    let mut out = Vec::new();
    for img in images {
        out.extend(horizontal_gradient(img)?);
    }
    Ok(out)
}

/// Left-right continuity score: KL from the prediction set's seam-gradient
/// normal to the ground-truth set's.
pub fn lrcs(pred: &[PanoImage], gt: &[PanoImage]) -> Result<f64> {
    let p = NormalFit::of(&pooled(pred)?)?;
    let q = NormalFit::of(&pooled(gt)?)?;
    Ok(kl_normal(p, q).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> PanoImage {
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        PanoImage::from_data(w, h, 1, data).unwrap()
    }

    #[test]
    fn periodic_image_has_zero_gradient() {
        let img = gray(6, 3, |x, y| if x == 5 { (y * 7) as u8 } else { (x * 10 + y * 7) as u8 });
        assert!(img.pixel(0, 1) == img.pixel(5, 1));
        assert_eq!(horizontal_gradient(&img).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn gray_and_color_gradients() {
        let img = gray(4, 2, |x, _| if x == 0 { 10 } else if x == 3 { 250 } else { 0 });
        assert_eq!(horizontal_gradient(&img).unwrap(), vec![240.0, 240.0]);
        let mut rgb = PanoImage::new(3, 1, 3).unwrap();
        rgb.pixel_mut(0, 0).copy_from_slice(&[20, 40, 60]);
        rgb.pixel_mut(2, 0).copy_from_slice(&[25, 23, 63]);
        assert_eq!(horizontal_gradient(&rgb).unwrap(), vec![17.0]);
        assert!(horizontal_gradient(&gray(1, 2, |_, _| 0)).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let n = |mean, std| NormalFit { mean, std };
        assert!((kl_normal(n(0.0, 1.0), n(1.0, 1.0)) - 0.5).abs() < 1e-12);
        let expect = (0.5f64).ln() + 4.0 / 2.0 - 0.5;
        assert!((kl_normal(n(0.0, 2.0), n(0.0, 1.0)) - expect).abs() < 1e-12);
        assert!((expect - 0.80685).abs() < 1e-5);
        assert_eq!(kl_normal(n(3.0, 2.0), n(3.0, 2.0)), 0.0);
    }

    #[test]
    fn fits_use_population_std_and_floor() {
        let f = NormalFit::of(&[1.0, 3.0]).unwrap();
        assert_eq!((f.mean, f.std), (2.0, 1.0));
        assert_eq!(NormalFit::of(&[5.0, 5.0]).unwrap().std, SIGMA_FLOOR);
        assert!(NormalFit::of(&[]).is_err());
    }

    #[test]
    fn lrcs_of_identical_sets_is_zero() {
        let set: Vec<_> = (0..4).map(|s| gray(5, 4, move |x, y| (x * 31 + y * 17 + s * 5) as u8)).collect();
        assert_eq!(lrcs(&set, &set).unwrap(), 0.0);
        let flat = vec![gray(5, 4, |_, _| 9)];
        // Both degenerate: floors meet, divergence is zero.
        assert_eq!(lrcs(&flat, &flat).unwrap(), 0.0);
        assert!(lrcs(&set, &flat).unwrap() > 0.0);
        assert!(lrcs(&[], &set).is_err());
    }
}
