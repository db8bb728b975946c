use serde::{Deserialize, Serialize};

use super::{BlurKernel, GammaCurve, KernelKind};
use crate::error::{Error, Result};

/// Calibrated `(r, alpha)` grid over optimal focus `z0` (rows) and sensor
/// position `zi` (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefocusModel {
    pub gamma: GammaCurve,
    pub z_min: f64,
    pub z_max: f64,
    pub z0_axis: Vec<f64>,
    pub zi_axis: Vec<f64>,
    pub r_grid: Vec<Vec<f64>>,
    pub alpha_grid: Vec<Vec<f64>>,
    #[serde(default)]
    pub kernel: KernelKind,
}

/// Inclusive axis `z_min, z_min + spacing, ...` that always ends at `z_max`.
pub fn uniform_axis(z_min: f64, z_max: f64, spacing: f64) -> Result<Vec<f64>> {
    if !(spacing > 0.0) || !(z_max >= z_min) {
        return Err(Error::Config(format!(
            "bad axis [{z_min}, {z_max}] step {spacing}"
        )));
    }
    let n = ((z_max - z_min) / spacing + 1e-9).floor() as usize;
    let mut axis: Vec<f64> = (0..=n).map(|i| z_min + i as f64 * spacing).collect();
    if z_max - axis[n] > 1e-9 {
        axis.push(z_max);
    }
    Ok(axis)
}

impl DefocusModel {
    /// Tabulates `f(z0, zi) -> (r, alpha)` on the given axes.
    pub fn from_fn(
        gamma: GammaCurve,
        kernel: KernelKind,
        z0_axis: Vec<f64>,
        zi_axis: Vec<f64>,
        mut f: impl FnMut(f64, f64) -> (f64, f64),
    ) -> Result<Self> {
        let mut r_grid = Vec::with_capacity(z0_axis.len());
        let mut alpha_grid = Vec::with_capacity(z0_axis.len());
        for &z0 in &z0_axis {
            let (rs, als): (Vec<f64>, Vec<f64>) = zi_axis.iter().map(|&zi| f(z0, zi)).unzip();
            r_grid.push(rs);
            alpha_grid.push(als);
        }
        let z_min = z0_axis
            .first()
            .copied()
            .unwrap_or(0.0)
            .min(zi_axis.first().copied().unwrap_or(0.0));
        let z_max = z0_axis
            .last()
            .copied()
            .unwrap_or(0.0)
            .max(zi_axis.last().copied().unwrap_or(0.0));
        let model = Self {
            gamma,
            z_min,
            z_max,
            z0_axis,
            zi_axis,
            r_grid,
            alpha_grid,
            kernel,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let sorted = |a: &[f64]| a.windows(2).all(|w| w[0] < w[1]);
        if self.z0_axis.is_empty() || self.zi_axis.is_empty() {
            return Err(Error::Config("model axes must be nonempty".into()));
        }
        if !sorted(&self.z0_axis) || !sorted(&self.zi_axis) {
            return Err(Error::Config(
                "model axes must be strictly increasing".into(),
            ));
        }
        if !(self.z_min <= self.z_max) {
            return Err(Error::Config(format!(
                "z_min {} > z_max {}",
                self.z_min, self.z_max
            )));
        }
        for (name, grid) in [("r_grid", &self.r_grid), ("alpha_grid", &self.alpha_grid)] {
            if grid.len() != self.z0_axis.len()
                || grid.iter().any(|row| row.len() != self.zi_axis.len())
            {
                return Err(Error::Config(format!(
                    "{name} must be {}x{}",
                    self.z0_axis.len(),
                    self.zi_axis.len()
                )));
            }
        }
        if self
            .r_grid
            .iter()
            .flatten()
            .any(|r| !(r.is_finite() && *r >= 0.0))
        {
            return Err(Error::Config(
                "r_grid entries must be finite and >= 0".into(),
            ));
        }
        if self
            .alpha_grid
            .iter()
            .flatten()
            .any(|a| !(a.is_finite() && *a > 0.0))
        {
            return Err(Error::Config(
                "alpha_grid entries must be finite and > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format {
                path: path.to_owned(),
                msg: j.to_string(),
            },
            other => other,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::image::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn z0_range(&self) -> (f64, f64) {
        (self.z0_axis[0], *self.z0_axis.last().unwrap())
    }

    pub fn zi_range(&self) -> (f64, f64) {
        (self.zi_axis[0], *self.zi_axis.last().unwrap())
    }

    /// Blur parameter and scale factor at `(z0, zi)`.
    ///
    /// Interpolation runs in `(z0, zi - z0)` coordinates: each bracketing
    /// `z0` row is sampled linearly at the same defocus offset, and the two
    /// samples are blended. At grid nodes this returns the stored values, and
    /// along `zi == z0` it stays on the calibrated diagonal instead of
    /// averaging across it.
    pub fn lookup(&self, z0: f64, zi: f64) -> Result<(f64, f64)> {
        let (a0, b0) = self.z0_range();
        let (ai, bi) = self.zi_range();
        if !(z0 >= a0 && z0 <= b0) {
            return Err(Error::Range(format!(
                "z0 = {z0} outside calibrated [{a0}, {b0}]"
            )));
        }
        if !(zi >= ai && zi <= bi) {
            return Err(Error::Range(format!(
                "zi = {zi} outside calibrated [{ai}, {bi}]"
            )));
        }
        let (i, w) = bracket(&self.z0_axis, z0);
        let offset = zi - z0;
        let row_at = |row: usize| {
            let q = (self.z0_axis[row] + offset).clamp(ai, bi);
            let (j, u) = bracket(&self.zi_axis, q);
            let lerp = |g: &Vec<Vec<f64>>| {
                let lo = g[row][j];
                if u == 0.0 {
                    lo
                } else {
                    lo + (g[row][j + 1] - lo) * u
                }
            };
            (lerp(&self.r_grid), lerp(&self.alpha_grid))
        };
        let (r_a, al_a) = row_at(i);
        if w == 0.0 {
            return Ok((r_a, al_a));
        }
        let (r_b, al_b) = row_at(i + 1);
        Ok((r_a + (r_b - r_a) * w, al_a + (al_b - al_a) * w))
    }

    /// Kernel and scale factor for rendering a `z0` plane seen from `zi`.
    pub fn kernel_at(&self, z0: f64, zi: f64) -> Result<(BlurKernel, f64)> {
        let (r, alpha) = self.lookup(z0, zi)?;
        Ok((BlurKernel::new(self.kernel, r)?, alpha))
    }
}

/// Index of the lower bracketing node and the fractional position towards
/// the next one; `v` must lie inside the axis.
fn bracket(axis: &[f64], v: f64) -> (usize, f64) {
    if axis.len() == 1 {
        return (0, 0.0);
    }
    let j = match axis.binary_search_by(|a| a.partial_cmp(&v).unwrap()) {
        Ok(j) => return (j, 0.0),
        Err(j) => j.saturating_sub(1).min(axis.len() - 2),
    };
    (j, (v - axis[j]) / (axis[j + 1] - axis[j]))
}
