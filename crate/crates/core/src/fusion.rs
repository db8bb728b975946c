//! Focus-stack fusion: undo focus breathing, then take every pixel from the
//! frame with the highest local gradient energy.

use crate::defocus::{imscale, DefocusModel};
use crate::error::{Error, Result};
use crate::image::{GrayImage, Grid, Integral};
use crate::sim::Frame;

pub const DEFAULT_WINDOW: usize = 32;
pub const FEATHER_RADIUS: usize = 3;

/// Rescales every frame to the magnification of the first one.
pub fn align(frames: &[Frame], model: &DefocusModel) -> Result<Vec<GrayImage>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Config("empty focus stack".into()))?;
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        if f.pixels.dims() != first.pixels.dims() {
            return Err(Error::Shape(format!(
                "frame at z={} has size {:?}, expected {:?}",
                f.z,
                f.pixels.dims(),
                first.pixels.dims()
            )));
        }
        if f.z == first.z {
            out.push(f.pixels.clone());
            continue;
        }
        let (_, alpha) = model.lookup(first.z, f.z).map_err(|e| {
            Error::Config(format!("model does not cover ({}, {}): {e}", first.z, f.z))
        })?;
        out.push(rescale(&f.pixels, 1.0 / alpha, model)?);
    }
    Ok(out)
}

/// Center scaling by `factor`, done in linear light.
pub fn rescale(img: &GrayImage, factor: f64, model: &DefocusModel) -> Result<GrayImage> {
    let linear = model.gamma.inverse(img)?;
    model
        .gamma
        .forward(&imscale(&linear, factor)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Squared Sobel magnitude per pixel, with clamped borders.
pub fn gradient_energy(img: &GrayImage) -> GrayImage {
    let (w, h) = img.dims();
    GrayImage::from_fn(w, h, |x, y| {
        let p = |dx: isize, dy: isize| img.get_clamped(x as isize + dx, y as isize + dy);
        let gx = p(1, -1) - p(-1, -1) + 2.0 * (p(1, 0) - p(-1, 0)) + p(1, 1) - p(-1, 1);
        let gy = p(-1, 1) - p(-1, -1) + 2.0 * (p(0, 1) - p(0, -1)) + p(1, 1) - p(1, -1);
        gx * gx + gy * gy
    })
}

/// Sum of `energy` over the `side`-wide window around every pixel,
/// clipped at the borders.
fn local_sum(energy: &GrayImage, side: usize) -> GrayImage {
    let (w, h) = energy.dims();
    let integral = Integral::new(energy, false);
    let before = side / 2;
    let after = side - before;
    GrayImage::from_fn(w, h, |x, y| {
        let x0 = x.saturating_sub(before);
        let y0 = y.saturating_sub(before);
        let x1 = (x + after).min(w);
        let y1 = (y + after).min(h);
        integral.window(x0, y0, x1 - x0, y1 - y0)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub image: GrayImage,
    /// Index of the frame chosen at each pixel, rows = y.
    pub selection: Grid<usize>,
}

impl Fused {
    /// Selection map spread over 0..=255 for viewing.
    pub fn selection_image(&self, n_frames: usize) -> GrayImage {
        let scale = if n_frames > 1 {
            1.0 / (n_frames - 1) as f64
        } else {
            0.0
        };
        GrayImage::from_fn(self.selection.cols(), self.selection.rows(), |x, y| {
            *self.selection.get(y, x) as f64 * scale
        })
    }
}

/// Per-pixel argmax of windowed gradient energy; ties go to the earlier
/// frame. With `feather`, the one-hot choice is box-averaged over a
/// `2 * FEATHER_RADIUS + 1` square before blending.
pub fn fuse(frames: &[GrayImage], window: usize, feather: bool) -> Result<Fused> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Config("empty focus stack".into()))?;
    if window == 0 {
        return Err(Error::Config("fusion window must be >= 1".into()));
    }
    let (w, h) = first.dims();
    if frames.iter().any(|f| f.dims() != (w, h)) {
        return Err(Error::Shape("focus stack frames differ in size".into()));
    }
    let scores: Vec<GrayImage> = frames
        .iter()
        .map(|f| local_sum(&gradient_energy(f), window))
        .collect();
    let selection = Grid::from_fn(h, w, |y, x| {
        let mut best = 0;
        for (i, s) in scores.iter().enumerate().skip(1) {
            if s.get(x, y) > scores[best].get(x, y) {
                best = i;
            }
        }
        best
    });
    if !feather || frames.len() == 1 {
        let image = GrayImage::from_fn(w, h, |x, y| frames[*selection.get(y, x)].get(x, y));
        return Ok(Fused { image, selection });
    }
    let side = 2 * FEATHER_RADIUS + 1;
    let mut image = GrayImage::new(w, h);
    let mut weight_total = GrayImage::new(w, h);
    let area = local_sum(&GrayImage::filled(w, h, 1.0), side);
    for (i, f) in frames.iter().enumerate() {
        let onehot = GrayImage::from_fn(
            w,
            h,
            |x, y| if *selection.get(y, x) == i { 1.0 } else { 0.0 },
        );
        if onehot.pixels().iter().all(|&v| v == 0.0) {
            continue;
        }
        let counts = local_sum(&onehot, side);
        for y in 0..h {
            for x in 0..w {
                let wt = counts.get(x, y) / area.get(x, y);
                if wt > 0.0 {
                    image.set(x, y, image.get(x, y) + wt * f.get(x, y));
                    weight_total.set(x, y, weight_total.get(x, y) + wt);
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let t = weight_total.get(x, y);
            if (t - 1.0).abs() > 1e-12 {
                image.set(x, y, image.get(x, y) / t);
            }
        }
    }
    Ok(Fused { image, selection })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::texture::procedural;

    #[test]
    fn single_and_identical_stacks_pass_through() {
        let a = procedural(48, 40, 3);
        assert_eq!(fuse(std::slice::from_ref(&a), 8, true).unwrap().image, a);
        let f = fuse(&[a.clone(), a.clone(), a.clone()], 8, true).unwrap();
        assert_eq!(f.image, a);
        assert!(f.selection.iter().all(|&i| i == 0));
    }

    #[test]
    fn sharper_half_wins() {
        let sharp = procedural(64, 32, 5);
        let flat = GrayImage::filled(64, 32, 0.5);
        let left = GrayImage::from_fn(64, 32, |x, y| if x < 32 { sharp.get(x, y) } else { 0.5 });
        let right = GrayImage::from_fn(64, 32, |x, y| if x >= 32 { sharp.get(x, y) } else { 0.5 });
        let f = fuse(&[left, right, flat], 8, false).unwrap();
        assert_eq!(*f.selection.get(10, 5), 0);
        assert_eq!(*f.selection.get(10, 60), 1);
        assert!(f.selection.iter().all(|&i| i != 2));
    }

    #[test]
    fn local_sum_matches_direct_sum() {
        let e = procedural(20, 17, 9);
        let s = local_sum(&e, 6);
        let (x, y) = (1usize, 12usize);
        let mut direct = 0.0;
        for yy in y.saturating_sub(3)..(y + 3).min(17) {
            for xx in x.saturating_sub(3)..(x + 3).min(20) {
                direct += e.get(xx, yy);
            }
        }
        assert!((s.get(x, y) - direct).abs() < 1e-9);
    }

    #[test]
    fn empty_stack_is_rejected() {
        assert!(fuse(&[], 8, true).is_err());
        assert!(fuse(&[GrayImage::new(3, 3)], 0, true).is_err());
    }
}
