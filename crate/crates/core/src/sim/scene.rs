use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::texture;
use crate::error::{Error, Result};
use crate::image::{read_pgm, read_pgm_raw, GrayImage, Grid};

/// Trajectory of one region: piecewise-linear optimal focus and integer
/// pixel translation, keyed by time step.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMotion {
    /// Region at `t = 0`; rows index y.
    pub mask: Grid<bool>,
    /// `(t, z0)` keyframes; empty keeps the region's depth.
    pub z0_keyframes: Vec<(f64, f64)>,
    /// `(t, dx, dy)` keyframes; empty keeps the region in place.
    pub translation_keyframes: Vec<(f64, f64, f64)>,
}

impl RegionMotion {
    fn horizon(&self) -> f64 {
        let a = self.z0_keyframes.iter().map(|k| k.0);
        let b = self.translation_keyframes.iter().map(|k| k.0);
        a.chain(b).fold(0.0, f64::max)
    }

    pub fn z0_at(&self, t: f64) -> Option<f64> {
        interp(&self.z0_keyframes, t, |k| k.0, |k| k.1)
    }

    pub fn shift_at(&self, t: f64) -> (isize, isize) {
        let keys = &self.translation_keyframes;
        let dx = interp(keys, t, |k| k.0, |k| k.1).unwrap_or(0.0);
        let dy = interp(keys, t, |k| k.0, |k| k.2).unwrap_or(0.0);
        (dx.round() as isize, dy.round() as isize)
    }
}

fn interp<K>(
    keys: &[K],
    t: f64,
    time: impl Fn(&K) -> f64,
    value: impl Fn(&K) -> f64,
) -> Option<f64> {
    let first = keys.first()?;
    if t <= time(first) {
        return Some(value(first));
    }
    for w in keys.windows(2) {
        let (t0, t1) = (time(&w[0]), time(&w[1]));
        if t <= t1 {
            let u = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
            return Some(value(&w[0]) + (value(&w[1]) - value(&w[0])) * u);
        }
    }
    Some(value(keys.last().unwrap()))
}

/// Sharp image with a per-pixel optimal focus position.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sharp: GrayImage,
    /// Optimal focus per pixel; rows index y.
    pub depth: Grid<f64>,
    pub motion: Vec<RegionMotion>,
}

impl Scene {
    pub fn new(sharp: GrayImage, depth: Grid<f64>) -> Result<Self> {
        if depth.shape() != (sharp.height(), sharp.width()) {
            return Err(Error::Shape(format!(
                "depth map {}x{} does not match image {}x{}",
                depth.cols(),
                depth.rows(),
                sharp.width(),
                sharp.height()
            )));
        }
        if depth.iter().any(|z| !z.is_finite()) {
            return Err(Error::Config("depth map has non-finite entries".into()));
        }
        Ok(Self {
            sharp,
            depth,
            motion: Vec::new(),
        })
    }

    /// Single-depth scene.
    pub fn planar(sharp: GrayImage, z0: f64) -> Self {
        let depth = Grid::filled(sharp.height(), sharp.width(), z0);
        Self {
            sharp,
            depth,
            motion: Vec::new(),
        }
    }

    /// Background depth plus regions painted in order.
    pub fn from_regions(
        sharp: GrayImage,
        background_z0: f64,
        regions: &[(Grid<bool>, f64)],
    ) -> Result<Self> {
        let mut depth = Grid::filled(sharp.height(), sharp.width(), background_z0);
        for (mask, z0) in regions {
            mask.ensure_same_shape(&depth, "region mask")?;
            for (d, &m) in depth.as_mut_slice().iter_mut().zip(mask.iter()) {
                if m {
                    *d = *z0;
                }
            }
        }
        Self::new(sharp, depth)
    }

    pub fn with_motion(mut self, motion: Vec<RegionMotion>) -> Result<Self> {
        for m in &motion {
            m.mask.ensure_same_shape(&self.depth, "motion mask")?;
        }
        check_disjoint(motion.iter().map(|m| &m.mask), self.depth.shape())?;
        self.motion = motion;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.sharp.width()
    }

    pub fn height(&self) -> usize {
        self.sharp.height()
    }

    pub fn is_static(&self) -> bool {
        self.motion.is_empty()
    }

    /// Last keyframe time over all regions; `None` for static scenes.
    pub fn horizon(&self) -> Option<f64> {
        (!self.motion.is_empty()).then(|| {
            self.motion
                .iter()
                .map(RegionMotion::horizon)
                .fold(0.0, f64::max)
        })
    }

    pub fn depth_range(&self) -> (f64, f64) {
        self.depth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| {
                (lo.min(z), hi.max(z))
            })
    }

    /// Static snapshot at time `t`.
    ///
    /// Each moving region is lifted out, its vacated pixels are filled from
    /// the nearest non-moving pixel on the same row, and it is pasted back at
    /// its shifted position with its current depth. Parts shifted outside the
    /// frame are dropped.
    pub fn advance(&self, t: f64) -> Result<Scene> {
        if self.motion.is_empty() {
            return Ok(self.clone());
        }
        let (h, w) = self.depth.shape();
        let moving = Grid::from_fn(h, w, |y, x| self.motion.iter().any(|m| *m.mask.get(y, x)));
        let mut sharp = self.sharp.clone();
        let mut depth = self.depth.clone();
        for y in 0..h {
            for x in 0..w {
                if !*moving.get(y, x) {
                    continue;
                }
                let left = (0..x).rev().find(|&i| !*moving.get(y, i));
                let right = (x + 1..w).find(|&i| !*moving.get(y, i));
                let src = match (left, right) {
                    (Some(l), Some(r)) => Some(if x - l <= r - x { l } else { r }),
                    (a, b) => a.or(b),
                };
                if let Some(sx) = src {
                    sharp.set(x, y, self.sharp.get(sx, y));
                    *depth.get_mut(y, x) = *self.depth.get(y, sx);
                }
            }
        }
        let mut occupied = Grid::filled(h, w, false);
        for (id, m) in self.motion.iter().enumerate() {
            let (dx, dy) = m.shift_at(t);
            let z0 = m.z0_at(t);
            for y in 0..h {
                for x in 0..w {
                    if !*m.mask.get(y, x) {
                        continue;
                    }
                    let (tx, ty) = (x as isize + dx, y as isize + dy);
                    if tx < 0 || ty < 0 || tx >= w as isize || ty >= h as isize {
                        continue;
                    }
                    let (tx, ty) = (tx as usize, ty as usize);
                    if std::mem::replace(occupied.get_mut(ty, tx), true) {
                        return Err(Error::Config(format!(
                            "moving region {id} overlaps another region at t={t}"
                        )));
                    }
                    sharp.set(tx, ty, self.sharp.get(x, y));
                    *depth.get_mut(ty, tx) = z0.unwrap_or(*self.depth.get(y, x));
                }
            }
        }
        Ok(Scene {
            sharp,
            depth,
            motion: Vec::new(),
        })
    }

    /// Moving region masks at time `t`.
    pub fn region_masks_at(&self, t: f64) -> Vec<Grid<bool>> {
        let (h, w) = self.depth.shape();
        self.motion
            .iter()
            .map(|m| {
                let (dx, dy) = m.shift_at(t);
                Grid::from_fn(h, w, |y, x| {
                    let (sx, sy) = (x as isize - dx, y as isize - dy);
                    sx >= 0
                        && sy >= 0
                        && (sx as usize) < w
                        && (sy as usize) < h
                        && *m.mask.get(sy as usize, sx as usize)
                })
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SceneConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_owned(),
            msg: e.to_string(),
        })?;
        cfg.build(path.parent().unwrap_or(Path::new(".")))
    }
}

fn check_disjoint<'a>(
    masks: impl Iterator<Item = &'a Grid<bool>>,
    shape: (usize, usize),
) -> Result<()> {
    let mut seen = Grid::filled(shape.0, shape.1, false);
    for (id, m) in masks.enumerate() {
        for (s, &b) in seen.as_mut_slice().iter_mut().zip(m.iter()) {
            if b && std::mem::replace(s, true) {
                return Err(Error::Config(format!(
                    "region {id} overlaps an earlier moving region"
                )));
            }
        }
    }
    Ok(())
}

/// Even-odd rule at pixel centers.
pub fn polygon_mask(w: usize, h: usize, points: &[(f64, f64)]) -> Grid<bool> {
    Grid::from_fn(h, w, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut inside = false;
        let n = points.len();
        for i in 0..n {
            let (xi, yi) = points[i];
            let (xj, yj) = points[(i + n - 1) % n];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
        }
        inside
    })
}

pub fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> Grid<bool> {
    Grid::from_fn(h, w, |y, x| {
        x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh
    })
}

// ---- JSON scene description ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Path(PathBuf),
    Procedural {
        procedural: u64,
        width: usize,
        height: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DepthSource {
    /// 16-bit PGM whose samples are motor steps.
    Path(PathBuf),
    Regions(Vec<DepthRegion>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shape {
    Rect { rect: [usize; 4] },
    Polygon { polygon: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthRegion {
    #[serde(flatten)]
    pub shape: Shape,
    pub z0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionConfig {
    pub region_id: usize,
    #[serde(default)]
    pub z0_keyframes: Vec<[f64; 2]>,
    #[serde(default)]
    pub translation_keyframes: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image: ImageSource,
    pub depth: DepthSource,
    /// Depth of pixels no region covers.
    #[serde(default)]
    pub background_z0: Option<f64>,
    #[serde(default)]
    pub motion: Vec<MotionConfig>,
}

impl SceneConfig {
    pub fn build(&self, base: &Path) -> Result<Scene> {
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_owned()
            } else {
                base.join(p)
            }
        };
        let sharp = match &self.image {
            ImageSource::Path(p) => read_pgm(&resolve(p))?,
            ImageSource::Procedural {
                procedural,
                width,
                height,
            } => texture::procedural(*width, *height, *procedural),
        };
        let (w, h) = sharp.dims();
        let (mut scene, masks) = match &self.depth {
            DepthSource::Path(p) => {
                let path = resolve(p);
                let raw = read_pgm_raw(&path)?;
                if (raw.width, raw.height) != (w, h) {
                    return Err(Error::Format {
                        path,
                        msg: "depth map size differs from image".into(),
                    });
                }
                let depth = Grid::from_vec(h, w, raw.samples.iter().map(|&s| s as f64).collect())?;
                (Scene::new(sharp, depth)?, Vec::new())
            }
            DepthSource::Regions(regions) => {
                let masks: Vec<(Grid<bool>, f64)> = regions
                    .iter()
                    .map(|r| {
                        let mask = match &r.shape {
                            Shape::Rect {
                                rect: [x, y, rw, rh],
                            } => rect_mask(w, h, *x, *y, *rw, *rh),
                            Shape::Polygon { polygon } => polygon_mask(
                                w,
                                h,
                                &polygon.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>(),
                            ),
                        };
                        (mask, r.z0)
                    })
                    .collect();
                let mut covered = Grid::filled(h, w, false);
                for (m, _) in &masks {
                    for (c, &b) in covered.as_mut_slice().iter_mut().zip(m.iter()) {
                        *c |= b;
                    }
                }
                let background = match (self.background_z0, covered.all()) {
                    (Some(z), _) => z,
                    (None, true) => 0.0,
                    (None, false) => {
                        return Err(Error::Config(
                            "regions leave pixels uncovered and no background_z0 is set".into(),
                        ))
                    }
                };
                (Scene::from_regions(sharp, background, &masks)?, masks)
            }
        };
        let mut motion = Vec::with_capacity(self.motion.len());
        for m in &self.motion {
            let (mask, _) = masks.get(m.region_id).ok_or_else(|| {
                Error::Config(format!(
                    "motion refers to region {} but only {} regions exist",
                    m.region_id,
                    masks.len()
                ))
            })?;
            // later regions paint over earlier ones; only the visible part moves
            let visible = Grid::from_fn(h, w, |y, x| {
                *mask.get(y, x)
                    && !masks[m.region_id + 1..]
                        .iter()
                        .any(|(later, _)| *later.get(y, x))
            });
            motion.push(RegionMotion {
                mask: visible,
                z0_keyframes: m.z0_keyframes.iter().map(|k| (k[0], k[1])).collect(),
                translation_keyframes: m
                    .translation_keyframes
                    .iter()
                    .map(|k| (k[0], k[1], k[2]))
                    .collect(),
            });
        }
        if !motion.is_empty() {
            scene = scene.with_motion(motion)?;
        }
        Ok(scene)
    }
}
