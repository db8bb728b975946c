//! Image defocus model: gamma linearization, blur kernels, the
//! blur-then-scale image formation model, its calibrated grid form and the
//! brute-force calibration that fills that grid.
//!
//! A defocused frame is produced from an in-focus one as
//!
//! ```text
//! linear(I_d) = imscale(linear(I_i) * h, alpha)      linear(I) = I^gamma
//! ```
//!
//! where `h` is a disk (radius `r`) or Gaussian (std `sigma`) kernel and
//! `imscale` is a bilinear magnification about the image center.

mod calibrate;
mod convolve;
mod model;

pub use calibrate::{
    calibrate_model, calibrate_pair, CalibrationConfig, CalibrationResult, DirectorySource,
    PairSource,
};
pub use convolve::{convolve, convolve_direct, convolve_pair};
pub use model::{uniform_axis, DefocusModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GammaCurve {
    gamma: f64,
}

impl Default for GammaCurve {
    fn default() -> Self {
        Self { gamma: 2.2 }
    }
}

impl GammaCurve {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Domain(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Display to linear light: `I^gamma`.
    pub fn inverse(&self, image: &GrayImage) -> Result<GrayImage> {
        check_unit_range(image)?;
        Ok(self.inverse_unchecked(image))
    }

    /// Linear to display light: `I^(1/gamma)`.
    pub fn forward(&self, image: &GrayImage) -> Result<GrayImage> {
        check_unit_range(image)?;
        Ok(self.forward_unchecked(image))
    }

    pub(crate) fn inverse_unchecked(&self, image: &GrayImage) -> GrayImage {
        let g = self.gamma;
        image.map(|v| v.clamp(0.0, 1.0).powf(g))
    }

    pub(crate) fn forward_unchecked(&self, image: &GrayImage) -> GrayImage {
        let g = 1.0 / self.gamma;
        image.map(|v| v.clamp(0.0, 1.0).powf(g))
    }
}

fn check_unit_range(image: &GrayImage) -> Result<()> {
    for (i, &v) in image.pixels().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            let (x, y) = (i % image.width(), i / image.width());
            return Err(Error::Domain(format!(
                "pixel ({x}, {y}) = {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

pub fn gamma_inverse(image: &GrayImage, curve: &GammaCurve) -> Result<GrayImage> {
    curve.inverse(image)
}

pub fn gamma_forward(image: &GrayImage, curve: &GammaCurve) -> Result<GrayImage> {
    curve.forward(image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Disk,
    Gaussian,
}

/// Normalized, square, odd-sided blur kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    kind: KernelKind,
    parameter: f64,
    radius: usize,
    taps: Vec<f64>,
}

/// Subsamples per pixel side for disk rasterization.
const DISK_SUBSAMPLES: usize = 4;

impl BlurKernel {
    pub fn identity() -> Self {
        Self {
            kind: KernelKind::Disk,
            parameter: 0.0,
            radius: 0,
            taps: vec![1.0],
        }
    }

    pub fn new(kind: KernelKind, parameter: f64) -> Result<Self> {
        match kind {
            KernelKind::Disk => make_disk_kernel(parameter),
            KernelKind::Gaussian => make_gaussian_kernel(parameter),
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn parameter(&self) -> f64 {
        self.parameter
    }

    /// Half-width of the support; the kernel is `2 * radius + 1` wide.
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn tap(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        self.taps[((dy + r) as usize) * self.side() + (dx + r) as usize]
    }

    pub fn center(&self) -> f64 {
        self.tap(0, 0)
    }

    pub fn is_identity(&self) -> bool {
        self.radius == 0
    }

    fn normalized(kind: KernelKind, parameter: f64, radius: usize, mut taps: Vec<f64>) -> Self {
        let sum: f64 = taps.iter().sum();
        for t in &mut taps {
            *t /= sum;
        }
        Self {
            kind,
            parameter,
            radius,
            taps,
        }
    }
}

/// Disk of radius `r` pixels, rasterized by area sampling on a 4x4
/// subpixel lattice. Radii below half a pixel give the identity.
pub fn make_disk_kernel(r: f64) -> Result<BlurKernel> {
    if !(r.is_finite() && r >= 0.0) {
        return Err(Error::Domain(format!("disk radius must be >= 0, got {r}")));
    }
    if r < 0.5 {
        return Ok(BlurKernel {
            parameter: r,
            ..BlurKernel::identity()
        });
    }
    let radius = ((r + 0.5).ceil() as usize).saturating_sub(1).max(1);
    let side = 2 * radius + 1;
    let n = DISK_SUBSAMPLES;
    let r2 = r * r;
    let mut taps = vec![0.0; side * side];
    for ky in 0..side {
        let cy = ky as f64 - radius as f64;
        for kx in 0..side {
            let cx = kx as f64 - radius as f64;
            let mut inside = 0usize;
            for sy in 0..n {
                let y = cy - 0.5 + (sy as f64 + 0.5) / n as f64;
                for sx in 0..n {
                    let x = cx - 0.5 + (sx as f64 + 0.5) / n as f64;
                    if x * x + y * y <= r2 {
                        inside += 1;
                    }
                }
            }
            taps[ky * side + kx] = inside as f64;
        }
    }
    Ok(BlurKernel::normalized(KernelKind::Disk, r, radius, taps))
}

/// Gaussian with standard deviation `sigma`, truncated at `ceil(3 sigma)`.
pub fn make_gaussian_kernel(sigma: f64) -> Result<BlurKernel> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Domain(format!(
            "gaussian sigma must be >= 0, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    if sigma == 0.0 || radius == 0 {
        return Ok(BlurKernel {
            kind: KernelKind::Gaussian,
            parameter: sigma,
            ..BlurKernel::identity()
        });
    }
    let side = 2 * radius + 1;
    let denom = 2.0 * sigma * sigma;
    let mut taps = Vec::with_capacity(side * side);
    for ky in 0..side {
        let y = ky as f64 - radius as f64;
        for kx in 0..side {
            let x = kx as f64 - radius as f64;
            taps.push((-(x * x + y * y) / denom).exp());
        }
    }
    Ok(BlurKernel::normalized(
        KernelKind::Gaussian,
        sigma,
        radius,
        taps,
    ))
}

/// Bilinear magnification by `alpha` about the image center; the output
/// keeps the input dimensions and replicates the border.
pub fn imscale(image: &GrayImage, alpha: f64) -> Result<GrayImage> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Domain(format!(
            "scale factor must be > 0, got {alpha}"
        )));
    }
    if alpha == 1.0 {
        return Ok(image.clone());
    }
    let cx = (image.width() as f64 - 1.0) / 2.0;
    let cy = (image.height() as f64 - 1.0) / 2.0;
    let inv = 1.0 / alpha;
    Ok(GrayImage::from_fn(image.width(), image.height(), |x, y| {
        image.sample_bilinear(cx + (x as f64 - cx) * inv, cy + (y as f64 - cy) * inv)
    }))
}

/// Blur and magnify in linear light; input and output are linear.
pub fn defocus_linear(linear: &GrayImage, kernel: &BlurKernel, alpha: f64) -> Result<GrayImage> {
    imscale(&convolve(linear, kernel), alpha)
}

/// `gamma_forward(imscale(gamma_inverse(sharp) * kernel, alpha))`.
pub fn synthesize_defocus(
    sharp: &GrayImage,
    kernel: &BlurKernel,
    alpha: f64,
    curve: &GammaCurve,
) -> Result<GrayImage> {
    if sharp.is_empty() {
        return Err(Error::Domain("cannot defocus an empty image".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Domain(format!(
            "scale factor must be > 0, got {alpha}"
        )));
    }
    let linear = curve.inverse(sharp)?;
    let out = defocus_linear(&linear, kernel, alpha)?;
    Ok(curve.forward_unchecked(&out))
}
