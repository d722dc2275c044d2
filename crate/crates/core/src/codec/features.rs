use serde::{Deserialize, Serialize};

use super::codebook::Codebook;
use super::image::PanoImage;
use crate::error::{Error, Result};
use crate::sphere_grid::TokenGrid;

/// Block layout `(rows, cols)` with `rows * cols = k` that divides the image
/// evenly, preferring the most square blocks.
pub fn block_grid(k: usize, height: usize, width: usize) -> Result<(usize, usize)> {
    if k == 0 || height == 0 || width == 0 {
        return Err(Error::Shape("degenerate crop".into()));
    }
    (1..=k)
        .filter(|r| k % r == 0 && height % r == 0 && width % (k / r) == 0)
        .map(|r| {
            let bh = (height / r) as f64;
            let bw = (width / (k / r)) as f64;
            ((bh / bw).ln().abs(), r)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, r)| (r, k / r))
        .ok_or_else(|| Error::Shape(format!("no {k}-block layout divides a {width}x{height} crop")))
}

/// Block-average-pooled intensities, shifted by a corpus-level mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub k: usize,
    pub center: f64,
}

impl FeatureExtractor {
    pub fn new(k: usize) -> Self {
        Self { k, center: 0.0 }
    }

    pub fn with_center(k: usize, center: f64) -> Self {
        Self { k, center }
    }

    /// Fit the centering constant: mean of all raw features over `corpus`.
    pub fn fit<'a>(k: usize, corpus: impl IntoIterator<Item = &'a PanoImage>) -> Result<Self> {
        let raw = Self::new(k);
        let (mut sum, mut n) = (0.0, 0usize);
        for img in corpus {
            for f in raw.raw(img)? {
                sum += f;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("feature corpus".into()));
        }
        Ok(Self::with_center(k, sum / n as f64))
    }

    pub fn raw(&self, image: &PanoImage) -> Result<Vec<f64>> {
        let (br, bc) = block_grid(self.k, image.height(), image.width())?;
        let (bh, bw) = (image.height() / br, image.width() / bc);
        let ch = image.channels();
        let norm = (bh * bw * ch) as f64;
        let mut out = vec![0.0; self.k];
        for y in 0..image.height() {
            let row = (y / bh) * bc;
            for x in 0..image.width() {
                let s: u32 = image.pixel(x, y).iter().map(|&v| v as u32).sum();
                out[row + x / bw] += s as f64;
            }
        }
        for v in &mut out {
            *v /= norm;
        }
        Ok(out)
    }

    pub fn extract(&self, image: &PanoImage) -> Result<Vec<f64>> {
        let mut f = self.raw(image)?;
        for v in &mut f {
            *v -= self.center;
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Right,
    Back,
    Left,
}

impl View {
    pub const ALL: [View; 4] = [View::Front, View::Right, View::Back, View::Left];

    /// Quarter of the panorama width this view covers.
    pub fn quarter(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticVector {
    pub view: View,
    pub values: Vec<f64>,
}

impl SemanticVector {
    /// Features of one quarter of a decoded panorama.
    pub fn of_image(image: &PanoImage, view: View, fx: &FeatureExtractor) -> Result<Self> {
        if image.width() % 4 != 0 {
            return Err(Error::Shape("panorama width must split into 4 views".into()));
        }
        let q = image.width() / 4;
        let x0 = view.quarter() * q;
        let crop = image.crop(x0, 0, x0 + q, image.height())?;
        Ok(Self {
            view,
            values: fx.extract(&crop)?,
        })
    }

    pub fn embed(grid: &TokenGrid, view: View, cb: &Codebook, fx: &FeatureExtractor) -> Result<Self> {
        if grid.spec().width() % 4 != 0 {
            return Err(Error::Shape("token width must be divisible by 4".into()));
        }
        let img = cb.decode(grid, 1)?;
        Self::of_image(&img, view, fx)
    }

    /// All four views, decoding the grid once.
    pub fn embed_all(grid: &TokenGrid, cb: &Codebook, fx: &FeatureExtractor) -> Result<Vec<Self>> {
        if grid.spec().width() % 4 != 0 {
            return Err(Error::Shape("token width must be divisible by 4".into()));
        }
        let img = cb.decode(grid, 1)?;
        View::ALL.iter().map(|&v| Self::of_image(&img, v, fx)).collect()
    }

    pub fn cosine(&self, other: &[f64]) -> f64 {
        let dot: f64 = self.values.iter().zip(other).map(|(a, b)| a * b).sum();
        let na: f64 = self.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.iter().map(|a| a * a).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}
