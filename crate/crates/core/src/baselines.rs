//! Contrast-maximization baselines: the Tenengrad metric with Fibonacci
//! and rule-based searches over integer motor positions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autofocus::FocusCapture;
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Sum of squared Sobel gradient magnitude over interior pixels.
pub fn tenengrad(patch: &GrayImage) -> Result<f64> {
    let (w, h) = patch.dims();
    if w < 3 || h < 3 {
        return Err(Error::Shape(format!(
            "tenengrad needs at least 3x3, got {w}x{h}"
        )));
    }
    let mut sum = 0.0;
    for y in 1..h - 1 {
        let (a, b, c) = (patch.row(y - 1), patch.row(y), patch.row(y + 1));
        for x in 1..w - 1 {
            let gx = (a[x + 1] - a[x - 1]) + 2.0 * (b[x + 1] - b[x - 1]) + (c[x + 1] - c[x - 1]);
            let gy = (c[x - 1] - a[x - 1]) + 2.0 * (c[x] - a[x]) + (c[x + 1] - a[x + 1]);
            sum += gx * gx + gy * gy;
        }
    }
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub z: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub z: f64,
    /// Metric evaluations at distinct positions.
    pub time_steps: usize,
    pub trajectory: Vec<Probe>,
}

/// Capture plus metric with a per-position cache.
struct Scorer<'a> {
    capture: &'a mut dyn FocusCapture,
    metric: &'a dyn Fn(&GrayImage) -> Result<f64>,
    cache: BTreeMap<i64, f64>,
    trajectory: Vec<Probe>,
}

impl<'a> Scorer<'a> {
    fn new(
        capture: &'a mut dyn FocusCapture,
        metric: &'a dyn Fn(&GrayImage) -> Result<f64>,
    ) -> Self {
        Self {
            capture,
            metric,
            cache: BTreeMap::new(),
            trajectory: Vec::new(),
        }
    }

    fn score(&mut self, z: i64) -> Result<f64> {
        if let Some(&s) = self.cache.get(&z) {
            return Ok(s);
        }
        let s = (self.metric)(&self.capture.capture(z as f64)?)?;
        if !s.is_finite() {
            return Err(Error::Domain(format!("focus metric returned {s} at z={z}")));
        }
        self.cache.insert(z, s);
        self.trajectory.push(Probe {
            z: z as f64,
            score: s,
        });
        Ok(s)
    }

    fn finish(self, z: f64) -> SearchResult {
        SearchResult {
            z,
            time_steps: self.trajectory.len(),
            trajectory: self.trajectory,
        }
    }
}

fn fib(n: usize) -> u64 {
    let (mut a, mut b) = (0u64, 1u64);
    for _ in 0..n {
        (a, b) = (b, a + b);
    }
    a
}

/// Smallest `n` with `2 * width / F(n) <= resolution`, but never so large
/// that a lattice cell drops below one motor step (positions are integers,
/// so finer cells would merge probes).
fn fibonacci_order(width: f64, resolution: f64) -> usize {
    let mut n = 1;
    while 2.0 * width / fib(n) as f64 > resolution && fib(n + 1) as f64 <= width {
        n += 1;
    }
    n
}

/// Evaluations a Fibonacci search makes for this width and resolution.
pub fn fibonacci_evaluations(width: f64, resolution: f64) -> usize {
    match fibonacci_order(width, resolution) {
        n if n >= 4 => n - 2,
        _ => 0,
    }
}

/// Largest resolution that makes the search spend exactly `evaluations`
/// metric calls on an interval of `width` (for `evaluations >= 2`).
pub fn fibonacci_resolution_for(width: f64, evaluations: usize) -> f64 {
    2.0 * width / fib(evaluations + 2) as f64
}

/// Fibonacci interval reduction. The interval is mapped onto a lattice of
/// `F(n)` cells; each reduction reuses one interior point, so `n - 2`
/// evaluations leave a two-cell interval whose midpoint is returned.
pub fn fibonacci_search(
    capture: &mut dyn FocusCapture,
    metric: &dyn Fn(&GrayImage) -> Result<f64>,
    z_min: f64,
    z_max: f64,
    resolution: f64,
) -> Result<SearchResult> {
    let width = z_max - z_min;
    if !(resolution >= 1.0) || !(width >= resolution) {
        return Err(Error::Domain(format!(
            "need z_max - z_min >= resolution >= 1, got width {width}, resolution {resolution}"
        )));
    }
    let n = fibonacci_order(width, resolution);
    let unit = width / fib(n) as f64;
    let at = |i: u64| {
        (z_min + i as f64 * unit)
            .round()
            .clamp(z_min.ceil(), z_max.floor()) as i64
    };
    let mut s = Scorer::new(capture, metric);
    let mut a = 0u64;
    let mut k = n;
    while k >= 4 {
        let x1 = a + fib(k - 2);
        let x2 = a + fib(k - 1);
        if s.score(at(x1))? < s.score(at(x2))? {
            a = x1;
        }
        k -= 1;
    }
    let mid = a as f64 + fib(k) as f64 / 2.0;
    let z = (z_min + mid * unit)
        .round()
        .clamp(z_min.ceil(), z_max.floor());
    Ok(s.finish(z))
}

/// Step sizes of the rule-based search, in motor steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleParams {
    pub initial: f64,
    pub coarse: f64,
    pub fine: f64,
    pub mid: f64,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            initial: 10.0,
            coarse: 40.0,
            fine: 10.0,
            mid: 30.0,
        }
    }
}

impl RuleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.initial, self.coarse, self.fine, self.mid];
        if all.iter().any(|v| !(v.is_finite() && *v >= 1.0)) {
            return Err(Error::Config(format!(
                "rule steps must be >= 1, got {self:?}"
            )));
        }
        if self.fine > self.coarse {
            return Err(Error::Config(format!(
                "fine step {} exceeds coarse step {}",
                self.fine, self.coarse
            )));
        }
        Ok(())
    }
}

/// Staged sweep: probe `±initial` to choose a direction, climb in coarse
/// steps, back up by `mid` after the first drop, then climb in fine steps.
/// Only strict increases count as climbing. Returns the best position seen.
pub fn rule_based_search(
    capture: &mut dyn FocusCapture,
    metric: &dyn Fn(&GrayImage) -> Result<f64>,
    params: &RuleParams,
    z_min: f64,
    z_max: f64,
    start: f64,
) -> Result<SearchResult> {
    params.validate()?;
    if !(z_min < z_max) || !(start >= z_min && start <= z_max) {
        return Err(Error::Domain(format!(
            "start {start} outside [{z_min}, {z_max}]"
        )));
    }
    let lo = z_min.ceil() as i64;
    let hi = z_max.floor() as i64;
    let inside = |z: i64| z >= lo && z <= hi;
    let step = |v: f64| v.round() as i64;
    let mut s = Scorer::new(capture, metric);

    let z0 = (start.round() as i64).clamp(lo, hi);
    let f0 = s.score(z0)?;
    let mut dir = 0i64;
    let mut best_probe = f0;
    for d in [1i64, -1] {
        let z = z0 + d * step(params.initial);
        if inside(z) {
            let f = s.score(z)?;
            if f > best_probe {
                best_probe = f;
                dir = d;
            }
        }
    }
    if dir != 0 {
        let mut cur = z0 + dir * step(params.initial);
        let mut fcur = best_probe;
        let mut dropped_at = None;
        loop {
            let next = cur + dir * step(params.coarse);
            if !inside(next) {
                break;
            }
            let f = s.score(next)?;
            if f > fcur {
                (cur, fcur) = (next, f);
            } else {
                dropped_at = Some(next);
                break;
            }
        }
        let mut fine_dir = dir;
        if let Some(nx) = dropped_at {
            let p = nx - dir * step(params.mid);
            fine_dir = -dir;
            if inside(p) && p != cur {
                let fp = s.score(p)?;
                if fp > fcur {
                    (cur, fcur) = (p, fp);
                    fine_dir = dir;
                }
            }
        }
        loop {
            let next = cur + fine_dir * step(params.fine);
            if !inside(next) {
                break;
            }
            let f = s.score(next)?;
            if f > fcur {
                (cur, fcur) = (next, f);
            } else {
                break;
            }
        }
    }
    let mut best = s.trajectory[0];
    for p in &s.trajectory {
        if p.score > best.score {
            best = *p;
        }
    }
    Ok(s.finish(best.z))
}
