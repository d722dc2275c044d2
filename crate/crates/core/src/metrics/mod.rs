//! Distribution and image-quality metrics: Fréchet distance, latitude-strip
//! FID, seam continuity (LRCS), SSIM, PSNR, and the JSON report.

mod frechet;
mod quality;
mod report;
mod seam;

pub use frechet::{fid, frechet, spherical_fid, GaussianStats, SphericalFid, RIDGE};
pub use quality::{mse, psnr, ssim, Psnr};
pub use report::{ForwardPassStats, MetricsReport};
pub use seam::{horizontal_gradient, kl_normal, lrcs, NormalFit, SIGMA_FLOOR};
