//! Seeded procedural textures for synthetic scenes and training data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::GrayImage;

/// Lattice of random values, smoothly interpolated.
struct Lattice {
    cell: f64,
    cols: usize,
    values: Vec<f64>,
}

impl Lattice {
    fn new(w: usize, h: usize, cell: f64, rng: &mut impl Rng) -> Self {
        let cols = (w as f64 / cell).ceil() as usize + 2;
        let rows = (h as f64 / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.random::<f64>()).collect();
        Self { cell, cols, values }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let gx = x / self.cell;
        let gy = y / self.cell;
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (s(gx - ix as f64), s(gy - iy as f64));
        let v = |i: usize, j: usize| self.values[j * self.cols + i];
        let top = v(ix, iy) * (1.0 - fx) + v(ix + 1, iy) * fx;
        let bot = v(ix, iy + 1) * (1.0 - fx) + v(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Multi-octave value noise plus hard-edged blobs, mapped into
/// `[0.05, 0.95]`. Every seed gives a different, textured image.
pub fn procedural(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let octaves: Vec<(Lattice, f64)> = [96.0, 48.0, 24.0, 12.0, 6.0, 3.0, 1.5]
        .iter()
        .enumerate()
        .map(|(i, &cell)| (Lattice::new(w, h, cell, &mut rng), 0.8f64.powi(i as i32)))
        .collect();
    let blobs = Lattice::new(w, h, rng.random_range(20.0..60.0), &mut rng);
    let threshold = rng.random_range(0.4..0.6);
    let contrast = rng.random_range(0.5..1.0);
    let total: f64 = octaves.iter().map(|(_, a)| a).sum();
    let mut img = GrayImage::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let noise = octaves.iter().map(|(l, a)| a * l.at(fx, fy)).sum::<f64>() / total;
        let edge = if blobs.at(fx, fy) > threshold {
            0.25
        } else {
            -0.25
        };
        0.5 + contrast * ((noise - 0.5) * 1.6 + edge)
    });
    let (lo, hi) = img.min_max();
    let span = (hi - lo).max(1e-9);
    for v in img.pixels_mut() {
        *v = 0.05 + 0.9 * (*v - lo) / span;
    }
    img
}
