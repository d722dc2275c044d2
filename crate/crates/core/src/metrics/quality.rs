use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::PanoImage;
use crate::error::{Error, Result};

const WINDOW: usize = 8;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn same_dims(a: &PanoImage, b: &PanoImage) -> Result<()> {
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

fn window_ssim(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

/// Mean SSIM over non-overlapping 8x8 windows per channel; edge windows
/// are truncated to the image.
pub fn ssim(a: &PanoImage, b: &PanoImage) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let (mut total, mut count) = (0.0, 0usize);
    let mut xa = Vec::with_capacity(WINDOW * WINDOW);
    let mut xb = Vec::with_capacity(WINDOW * WINDOW);
    for c in 0..ch {
        for y0 in (0..h).step_by(WINDOW) {
            for x0 in (0..w).step_by(WINDOW) {
                xa.clear();
                xb.clear();
                for y in y0..(y0 + WINDOW).min(h) {
                    for x in x0..(x0 + WINDOW).min(w) {
                        xa.push(a.pixel(x, y)[c] as f64);
                        xb.push(b.pixel(x, y)[c] as f64);
                    }
                }
                total += window_ssim(&xa, &xb);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("image".into()));
    }
    Ok(total / count as f64)
}

pub fn mse(a: &PanoImage, b: &PanoImage) -> Result<f64> {
    same_dims(a, b)?;
    if a.data().is_empty() {
        return Err(Error::Empty("image".into()));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio; identical inputs have no finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Identical
        } else {
            Psnr::Db(10.0 * (255.0f64 * 255.0 / mse).log10())
        }
    }

    /// Decibels, with identical inputs ranked above any finite value.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Identical => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Identical => f.write_str("identical"),
            Psnr::Db(v) => write!(f, "{v:.2} dB"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Identical => s.serialize_str("identical"),
            Psnr::Db(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Db(v)),
            Raw::Text(t) if t == "identical" => Ok(Psnr::Identical),
            Raw::Text(t) => Err(de::Error::custom(format!("unexpected psnr value {t:?}"))),
        }
    }
}

pub fn psnr(a: &PanoImage, b: &PanoImage) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}
