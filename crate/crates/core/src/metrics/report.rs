use serde::{Deserialize, Serialize};

use super::frechet::{fid, spherical_fid};
use super::quality::{mse, ssim, Psnr};
use super::seam::lrcs;
use crate::codec::{FeatureExtractor, PanoImage};
use crate::error::Result;
use crate::exec::Parallelism;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardPassStats {
    pub per_patch: u64,
    pub total: u64,
}

/// Metrics of a generated set against a reference set. `ssim` and `psnr`
/// pair images by index and are null when the sets differ in size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub sfid_top: f64,
    pub sfid_middle: f64,
    pub sfid_bottom: f64,
    pub sfid_mean: f64,
    pub lrcs: f64,
    pub ssim: Option<f64>,
    pub psnr: Option<Psnr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_passes: Option<ForwardPassStats>,
}

impl MetricsReport {
    pub fn compute(
        real: &[PanoImage],
        fake: &[PanoImage],
        fx: &FeatureExtractor,
        par: Parallelism,
    ) -> Result<Self> {
        let global = fid(real, fake, fx, par)?;
        let s = spherical_fid(real, fake, fx, par)?;
        let (ssim_mean, psnr) = if real.len() == fake.len() {
            let pairs: Vec<(usize, usize)> = (0..real.len()).map(|i| (i, i)).collect();
            let per: Vec<Result<(f64, f64)>> =
                par.map(&pairs, |_, &(i, j)| Ok((ssim(&real[i], &fake[j])?, mse(&real[i], &fake[j])?)));
            let per: Vec<(f64, f64)> = per.into_iter().collect::<Result<_>>()?;
            let n = per.len() as f64;
            let s_mean = per.iter().map(|p| p.0).sum::<f64>() / n;
            let m = per.iter().map(|p| p.1).sum::<f64>() / n;
            (Some(s_mean), Some(Psnr::from_mse(m)))
        } else {
            (None, None)
        };
        Ok(Self {
            fid: global,
            sfid_top: s.top,
            sfid_middle: s.middle,
            sfid_bottom: s.bottom,
            sfid_mean: s.mean,
            lrcs: lrcs(fake, real)?,
            ssim: ssim_mean,
            psnr,
            forward_passes: None,
        })
    }
}
