//! Brute-force `(r, alpha)` fitting between an in-focus frame and a
//! defocused frame of the same target, by zero-normalized cross-correlation.

use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::convolve::{fast_size, fft2};
use super::{convolve, BlurKernel, DefocusModel, GammaCurve, KernelKind};
use crate::error::{Error, Result};
use crate::image::{read_pgm, GrayImage, Integral};

/// Scores closer than this to the best are treated as ties.
const TIE_EPS: f64 = 1e-12;
/// Up to this many candidate offsets the correlation is summed directly.
const DIRECT_OFFSET_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub r_candidates: Vec<f64>,
    pub alpha_candidates: Vec<f64>,
    pub outer_patch: usize,
    pub inner_margin: usize,
    /// Maximum translation searched around the nominal position; `None`
    /// searches every placement inside the frame.
    #[serde(default)]
    pub search_window: Option<usize>,
    /// Outer patch center in frame pixels; defaults to the frame center.
    #[serde(default)]
    pub patch_center: Option<(usize, usize)>,
    #[serde(default)]
    pub kernel: KernelKind,
}

impl CalibrationConfig {
    /// Evenly spaced candidate grids; the margin is set to `ceil(r_max)`.
    pub fn grid(
        r_max: f64,
        r_step: f64,
        alpha_lo: f64,
        alpha_hi: f64,
        alpha_step: f64,
        outer_patch: usize,
    ) -> Self {
        let steps = |lo: f64, hi: f64, d: f64| -> Vec<f64> {
            let n = ((hi - lo) / d + 1e-9).floor() as usize;
            (0..=n).map(|i| round_to(lo + i as f64 * d, 1e-9)).collect()
        };
        Self {
            r_candidates: steps(0.0, r_max, r_step),
            alpha_candidates: steps(alpha_lo, alpha_hi, alpha_step),
            outer_patch,
            inner_margin: r_max.ceil() as usize,
            search_window: None,
            patch_center: None,
            kernel: KernelKind::Disk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_candidates.is_empty() || self.alpha_candidates.is_empty() {
            return Err(Error::Config("candidate lists must be nonempty".into()));
        }
        if self
            .r_candidates
            .iter()
            .any(|r| !(r.is_finite() && *r >= 0.0))
        {
            return Err(Error::Config(
                "blur candidates must be finite and >= 0".into(),
            ));
        }
        if self
            .alpha_candidates
            .iter()
            .any(|a| !(a.is_finite() && *a > 0.0))
        {
            return Err(Error::Config(
                "scale candidates must be finite and > 0".into(),
            ));
        }
        let r_max = self.r_candidates.iter().cloned().fold(0.0, f64::max);
        let support = match self.kernel {
            KernelKind::Disk => r_max.ceil(),
            KernelKind::Gaussian => (3.0 * r_max).ceil(),
        } as usize;
        if self.inner_margin < support {
            return Err(Error::Config(format!(
                "inner_margin {} is smaller than the largest kernel reach {support}",
                self.inner_margin
            )));
        }
        if self.outer_patch < 2 * self.inner_margin + 64 {
            return Err(Error::Config(format!(
                "outer_patch {} leaves an inner patch under 64 px with margin {}",
                self.outer_patch, self.inner_margin
            )));
        }
        Ok(())
    }
}

fn round_to(v: f64, q: f64) -> f64 {
    (v / q).round() * q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub r: f64,
    pub alpha: f64,
    pub score: f64,
}

/// A template in frame coordinates, together with where it nominally sits.
struct Template {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    /// Zero-mean values.
    values: Vec<f64>,
    norm: f64,
}

fn build_template(
    blurred: &GrayImage,
    ox: usize,
    oy: usize,
    margin: usize,
    frame: (usize, usize),
    alpha: f64,
) -> Option<Template> {
    let (fw, fh) = frame;
    let cx = (fw as f64 - 1.0) / 2.0;
    let cy = (fh as f64 - 1.0) / 2.0;
    let side = blurred.width();
    let span = |c: f64, lo: f64, hi: f64, len: usize| -> Option<(usize, usize)> {
        let a = (c + alpha * (lo - c) - 1e-9).ceil().max(0.0);
        let b = (c + alpha * (hi - c) + 1e-9).floor().min(len as f64 - 1.0);
        (b >= a).then(|| (a as usize, (b - a) as usize + 1))
    };
    let (x0, w) = span(
        cx,
        (ox + margin) as f64,
        (ox + side - 1 - margin) as f64,
        fw,
    )?;
    let (y0, h) = span(
        cy,
        (oy + margin) as f64,
        (oy + side - 1 - margin) as f64,
        fh,
    )?;
    let inv = 1.0 / alpha;
    let mut values = Vec::with_capacity(w * h);
    for y in y0..y0 + h {
        let py = cy + (y as f64 - cy) * inv - oy as f64;
        for x in x0..x0 + w {
            let px = cx + (x as f64 - cx) * inv - ox as f64;
            values.push(blurred.sample_bilinear(px, py));
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut ss = 0.0;
    for v in &mut values {
        *v -= mean;
        ss += *v * *v;
    }
    Some(Template {
        x0,
        y0,
        w,
        h,
        values,
        norm: ss.sqrt(),
    })
}

/// Frame-side data shared by every candidate of one pair.
struct Matcher<'a> {
    frame: &'a GrayImage,
    sum: Integral,
    sq: Integral,
    window: Option<usize>,
    fft: Option<FrameSpectrum>,
}

struct FrameSpectrum {
    rows: usize,
    cols: usize,
    spectrum: Vec<Complex<f64>>,
    planner: FftPlanner<f64>,
}

impl<'a> Matcher<'a> {
    fn new(frame: &'a GrayImage, window: Option<usize>) -> Self {
        Self {
            frame,
            sum: Integral::new(frame, false),
            sq: Integral::new(frame, true),
            window,
            fft: None,
        }
    }

    fn offsets(
        &self,
        t: &Template,
    ) -> Option<(
        std::ops::RangeInclusive<usize>,
        std::ops::RangeInclusive<usize>,
    )> {
        let (fw, fh) = self.frame.dims();
        if t.w > fw || t.h > fh {
            return None;
        }
        let (ux, uy) = (fw - t.w, fh - t.h);
        Some(match self.window {
            None => (0..=ux, 0..=uy),
            Some(s) => (
                t.x0.saturating_sub(s)..=(t.x0 + s).min(ux),
                t.y0.saturating_sub(s)..=(t.y0 + s).min(uy),
            ),
        })
    }

    fn zncc(&self, t: &Template, u: usize, v: usize, corr: f64) -> f64 {
        let n = (t.w * t.h) as f64;
        let s = self.sum.window(u, v, t.w, t.h);
        let var = (self.sq.window(u, v, t.w, t.h) - s * s / n).max(0.0);
        let denom = t.norm * var.sqrt();
        if denom <= 1e-300 {
            0.0
        } else {
            corr / denom
        }
    }

    fn best_direct(&self, t: &Template) -> f64 {
        let Some((xs, ys)) = self.offsets(t) else {
            return f64::NEG_INFINITY;
        };
        let fw = self.frame.width();
        let px = self.frame.pixels();
        let mut best = f64::NEG_INFINITY;
        for v in ys {
            for u in xs.clone() {
                let mut corr = 0.0;
                for y in 0..t.h {
                    let row = &px[(v + y) * fw + u..(v + y) * fw + u + t.w];
                    let trow = &t.values[y * t.w..(y + 1) * t.w];
                    corr += row.iter().zip(trow).map(|(a, b)| a * b).sum::<f64>();
                }
                best = best.max(self.zncc(t, u, v, corr));
            }
        }
        best
    }

    fn spectrum(&mut self) -> &mut FrameSpectrum {
        let frame = self.frame;
        self.fft.get_or_insert_with(|| {
            let (w, h) = frame.dims();
            let (rows, cols) = (fast_size(h), fast_size(w));
            let mut spectrum = vec![Complex::new(0.0, 0.0); rows * cols];
            for y in 0..h {
                for x in 0..w {
                    spectrum[y * cols + x].re = frame.get(x, y);
                }
            }
            let mut planner = FftPlanner::new();
            fft2(&mut spectrum, rows, cols, false, &mut planner);
            FrameSpectrum {
                rows,
                cols,
                spectrum,
                planner,
            }
        })
    }

    /// Best ZNCC of up to two templates, sharing one forward and one inverse
    /// transform by packing them as real and imaginary parts.
    fn best_fft(&mut self, a: &Template, b: Option<&Template>) -> (f64, f64) {
        let spec = self.spectrum();
        let (rows, cols) = (spec.rows, spec.cols);
        let mut buf = vec![Complex::new(0.0, 0.0); rows * cols];
        for y in 0..a.h {
            for x in 0..a.w {
                buf[y * cols + x].re = a.values[y * a.w + x];
            }
        }
        if let Some(b) = b {
            for y in 0..b.h {
                for x in 0..b.w {
                    buf[y * cols + x].im = b.values[y * b.w + x];
                }
            }
        }
        fft2(&mut buf, rows, cols, false, &mut spec.planner);
        for (t, f) in buf.iter_mut().zip(&spec.spectrum) {
            *t = f * t.conj();
        }
        fft2(&mut buf, rows, cols, true, &mut spec.planner);
        let norm = 1.0 / (rows * cols) as f64;
        // real frame: Re = corr(F, a), Im = -corr(F, b)
        let scan = |t: &Template, pick: &dyn Fn(Complex<f64>) -> f64| -> f64 {
            let Some((xs, ys)) = self.offsets(t) else {
                return f64::NEG_INFINITY;
            };
            let mut best = f64::NEG_INFINITY;
            for v in ys {
                for u in xs.clone() {
                    best = best.max(self.zncc(t, u, v, pick(buf[v * cols + u]) * norm));
                }
            }
            best
        };
        let sa = scan(a, &|c| c.re);
        let sb = b.map_or(f64::NEG_INFINITY, |b| scan(b, &|c| -c.im));
        (sa, sb)
    }

    fn uses_direct(&self, t: &Template) -> bool {
        self.offsets(t)
            .is_none_or(|(xs, ys)| xs.count() * ys.count() <= DIRECT_OFFSET_LIMIT)
    }
}

fn sorted_candidates(values: &[f64], key: impl Fn(f64) -> (f64, f64)) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| key(*a).partial_cmp(&key(*b)).unwrap());
    v.dedup();
    v
}

/// Fits `(r, alpha)` such that blurring and scaling the in-focus outer patch
/// of `frame_at_z0` best matches `frame_at_zi`.
pub fn calibrate_pair(
    frame_at_z0: &GrayImage,
    frame_at_zi: &GrayImage,
    cfg: &CalibrationConfig,
    curve: &GammaCurve,
) -> Result<CalibrationResult> {
    cfg.validate()?;
    if frame_at_z0.dims() != frame_at_zi.dims() {
        return Err(Error::Shape(format!(
            "calibration frames differ: {:?} vs {:?}",
            frame_at_z0.dims(),
            frame_at_zi.dims()
        )));
    }
    let (fw, fh) = frame_at_z0.dims();
    let side = cfg.outer_patch;
    let (pcx, pcy) = cfg.patch_center.unwrap_or((fw / 2, fh / 2));
    if pcx < side / 2 || pcy < side / 2 || pcx - side / 2 + side > fw || pcy - side / 2 + side > fh
    {
        return Err(Error::Config(format!(
            "outer patch {side} at ({pcx}, {pcy}) does not fit a {fw}x{fh} frame"
        )));
    }
    let (ox, oy) = (pcx - side / 2, pcy - side / 2);
    let lin0 = curve.inverse(frame_at_z0)?;
    let lin1 = curve.inverse(frame_at_zi)?;
    let outer = lin0.crop(ox, oy, side, side)?;
    let m = cfg.inner_margin;
    let (lo, hi) = outer.crop(m, m, side - 2 * m, side - 2 * m)?.min_max();
    if hi - lo <= 1e-12 {
        return Err(Error::Calibration(
            "inner patch is constant; correlation is undefined".into(),
        ));
    }

    let rs = sorted_candidates(&cfg.r_candidates, |r| (r, 0.0));
    let alphas = sorted_candidates(&cfg.alpha_candidates, |a| ((a - 1.0).abs(), a));
    let mut matcher = Matcher::new(&lin1, cfg.search_window);
    let mut scored: Vec<CalibrationResult> = Vec::with_capacity(rs.len() * alphas.len());
    for &r in &rs {
        let blurred = convolve(&outer, &BlurKernel::new(cfg.kernel, r)?);
        let templates: Vec<Option<Template>> = alphas
            .iter()
            .map(|&a| build_template(&blurred, ox, oy, m, (fw, fh), a))
            .collect();
        let mut scores = vec![f64::NEG_INFINITY; alphas.len()];
        let mut pending: Option<usize> = None;
        for (k, t) in templates.iter().enumerate() {
            let Some(t) = t else { continue };
            if t.norm <= 1e-12 {
                scores[k] = 0.0;
            } else if matcher.uses_direct(t) {
                scores[k] = matcher.best_direct(t);
            } else if let Some(p) = pending.take() {
                let (sa, sb) = matcher.best_fft(templates[p].as_ref().unwrap(), Some(t));
                scores[p] = sa;
                scores[k] = sb;
            } else {
                pending = Some(k);
            }
        }
        if let Some(p) = pending {
            scores[p] = matcher.best_fft(templates[p].as_ref().unwrap(), None).0;
        }
        scored.extend(
            alphas
                .iter()
                .zip(&scores)
                .map(|(&alpha, &score)| CalibrationResult { r, alpha, score }),
        );
    }
    let best = scored
        .iter()
        .map(|c| c.score)
        .fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Err(Error::Calibration(
            "no candidate produced a template that fits the frame".into(),
        ));
    }
    Ok(*scored.iter().find(|c| c.score >= best - TIE_EPS).unwrap())
}

/// Supplies calibration frames: a planar target whose optimal focus is
/// `z0`, captured with the sensor at `zi`.
pub trait PairSource {
    fn frame(&mut self, z0: f64, zi: f64) -> Result<GrayImage>;
}

/// Recorded frames named `z0_<z0>_zi_<zi>.pgm` in one directory.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    dir: PathBuf,
}

impl DirectorySource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn file_name(z0: f64, zi: f64) -> String {
        format!("z0_{}_zi_{}.pgm", z0.round() as i64, zi.round() as i64)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl PairSource for DirectorySource {
    fn frame(&mut self, z0: f64, zi: f64) -> Result<GrayImage> {
        let path = self.dir.join(Self::file_name(z0, zi));
        if !path.exists() {
            return Err(Error::Capture(format!(
                "missing calibration frame {}",
                path.display()
            )));
        }
        read_pgm(&path)
    }
}

/// Fills a model grid by calibrating every off-diagonal `(z0, zi)` pair.
pub fn calibrate_model(
    source: &mut dyn PairSource,
    z0_list: &[f64],
    zi_list: &[f64],
    cfg: &CalibrationConfig,
    curve: &GammaCurve,
) -> Result<DefocusModel> {
    if z0_list.is_empty() || zi_list.is_empty() {
        return Err(Error::Config(
            "calibration needs at least one z0 and one zi".into(),
        ));
    }
    cfg.validate()?;
    let mut r_grid = Vec::with_capacity(z0_list.len());
    let mut alpha_grid = Vec::with_capacity(z0_list.len());
    for &z0 in z0_list {
        let sharp = source
            .frame(z0, z0)
            .map_err(|e| e.context(format!("z0={z0}")))?;
        let mut rs = Vec::with_capacity(zi_list.len());
        let mut als = Vec::with_capacity(zi_list.len());
        for &zi in zi_list {
            if zi == z0 {
                rs.push(0.0);
                als.push(1.0);
                continue;
            }
            let ctx = format!("(z0={z0}, zi={zi})");
            let frame = source.frame(z0, zi).map_err(|e| e.context(&ctx))?;
            let fit = calibrate_pair(&sharp, &frame, cfg, curve).map_err(|e| e.context(&ctx))?;
            log::debug!(
                "calibrated {ctx}: r={} alpha={} score={:.6}",
                fit.r,
                fit.alpha,
                fit.score
            );
            rs.push(fit.r);
            als.push(fit.alpha);
        }
        log::info!("calibrated row z0={z0}");
        r_grid.push(rs);
        alpha_grid.push(als);
    }
    let model = DefocusModel {
        gamma: *curve,
        z_min: z0_list[0].min(zi_list[0]),
        z_max: z0_list.last().unwrap().max(*zi_list.last().unwrap()),
        z0_axis: z0_list.to_vec(),
        zi_axis: zi_list.to_vec(),
        r_grid,
        alpha_grid,
        kernel: cfg.kernel,
    };
    model.validate()?;
    Ok(model)
}
