//! Replicate-border 2-D convolution.
//!
//! Small kernels run as a direct sum over a padded copy; larger ones go
//! through a complex FFT. Two real planes blurred by the same kernel can
//! share one transform by packing them as real and imaginary parts.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::BlurKernel;
use crate::image::GrayImage;

/// Above this many taps the FFT route is used.
const DIRECT_TAP_LIMIT: usize = 15 * 15;

pub fn convolve(img: &GrayImage, kernel: &BlurKernel) -> GrayImage {
    if kernel.is_identity() {
        return img.clone();
    }
    if kernel.taps().len() <= DIRECT_TAP_LIMIT {
        convolve_direct(img, kernel)
    } else {
        convolve_pair_fft(img, None, kernel).0
    }
}

/// Blurs two same-sized planes with one kernel.
pub fn convolve_pair(a: &GrayImage, b: &GrayImage, kernel: &BlurKernel) -> (GrayImage, GrayImage) {
    assert_eq!(a.dims(), b.dims(), "convolve_pair: planes differ in size");
    if kernel.is_identity() {
        return (a.clone(), b.clone());
    }
    if kernel.taps().len() <= DIRECT_TAP_LIMIT {
        (convolve_direct(a, kernel), convolve_direct(b, kernel))
    } else {
        let (ca, cb) = convolve_pair_fft(a, Some(b), kernel);
        (ca, cb.expect("second plane requested"))
    }
}

fn padded(img: &GrayImage, pad_x: usize, pad_y: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(out_w * out_h);
    for py in 0..out_h {
        let y = py as isize - pad_y as isize;
        for px in 0..out_w {
            let x = px as isize - pad_x as isize;
            buf.push(img.get_clamped(x, y));
        }
    }
    buf
}

pub fn convolve_direct(img: &GrayImage, kernel: &BlurKernel) -> GrayImage {
    let (w, h) = img.dims();
    let r = kernel.radius();
    let side = kernel.side();
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    let src = padded(img, r, r, pw, ph);
    let taps = kernel.taps();
    let mut out = vec![0.0; w * h];
    for ky in 0..side {
        for kx in 0..side {
            let t = taps[ky * side + kx];
            if t == 0.0 {
                continue;
            }
            // symmetric kernel: correlation and convolution coincide
            for y in 0..h {
                let srow = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                let orow = &mut out[y * w..(y + 1) * w];
                for (o, &s) in orow.iter_mut().zip(srow) {
                    *o += t * s;
                }
            }
        }
    }
    GrayImage::from_vec(w, h, out).expect("sizes match")
}

pub(crate) fn fast_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2, 3, 5] {
            while k.is_multiple_of(p) {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

pub(crate) fn fft2(
    buf: &mut [Complex<f64>],
    rows: usize,
    cols: usize,
    inverse: bool,
    planner: &mut FftPlanner<f64>,
) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(cols)
    } else {
        planner.plan_fft_forward(cols)
    };
    for row in buf.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(rows)
    } else {
        planner.plan_fft_forward(rows)
    };
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = buf[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            buf[r * cols + c] = column[r];
        }
    }
}

fn convolve_pair_fft(
    a: &GrayImage,
    b: Option<&GrayImage>,
    kernel: &BlurKernel,
) -> (GrayImage, Option<GrayImage>) {
    let (w, h) = a.dims();
    let r = kernel.radius();
    let cols = fast_size(w + 2 * r);
    let rows = fast_size(h + 2 * r);
    let pa = padded(a, r, r, cols, rows);
    let pb = b.map(|b| padded(b, r, r, cols, rows));
    let mut signal: Vec<Complex<f64>> = match &pb {
        Some(pb) => pa
            .iter()
            .zip(pb)
            .map(|(&re, &im)| Complex::new(re, im))
            .collect(),
        None => pa.iter().map(|&re| Complex::new(re, 0.0)).collect(),
    };
    let mut kbuf = vec![Complex::new(0.0, 0.0); rows * cols];
    let side = kernel.side();
    let taps = kernel.taps();
    for ky in 0..side {
        for kx in 0..side {
            let dy = (ky as isize - r as isize).rem_euclid(rows as isize) as usize;
            let dx = (kx as isize - r as isize).rem_euclid(cols as isize) as usize;
            kbuf[dy * cols + dx] = Complex::new(taps[ky * side + kx], 0.0);
        }
    }
    let mut planner = FftPlanner::new();
    fft2(&mut signal, rows, cols, false, &mut planner);
    fft2(&mut kbuf, rows, cols, false, &mut planner);
    for (s, k) in signal.iter_mut().zip(&kbuf) {
        *s *= *k;
    }
    fft2(&mut signal, rows, cols, true, &mut planner);
    let norm = 1.0 / (rows * cols) as f64;
    let mut out_a = Vec::with_capacity(w * h);
    let mut out_b = Vec::with_capacity(if b.is_some() { w * h } else { 0 });
    for y in 0..h {
        for x in 0..w {
            let v = signal[(y + r) * cols + x + r] * norm;
            out_a.push(v.re);
            if b.is_some() {
                out_b.push(v.im);
            }
        }
    }
    let ia = GrayImage::from_vec(w, h, out_a).expect("sizes match");
    let ib = b.map(|_| GrayImage::from_vec(w, h, out_b).expect("sizes match"));
    (ia, ib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defocus::{make_disk_kernel, make_gaussian_kernel};

    fn ramp_texture(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let v = ((x * 7 + y * 13) % 17) as f64 / 16.0;
            0.5 * v + 0.25 * ((x as f64 * 0.3).sin() + 1.0) * 0.5
        })
    }

    /// Brute-force replicate-border convolution, one pixel at a time.
    fn brute(img: &GrayImage, k: &BlurKernel) -> GrayImage {
        let r = k.radius() as isize;
        let side = k.side();
        GrayImage::from_fn(img.width(), img.height(), |x, y| {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let t = k.taps()[((dy + r) as usize) * side + (dx + r) as usize];
                    acc += t * img.get_clamped(x as isize - dx, y as isize - dy);
                }
            }
            acc
        })
    }

    #[test]
    fn fft_and_direct_routes_agree_with_brute_force() {
        let img = ramp_texture(37, 29);
        for k in [
            make_disk_kernel(2.2).unwrap(),
            make_disk_kernel(9.0).unwrap(),
            make_gaussian_kernel(3.0).unwrap(),
        ] {
            let oracle = brute(&img, &k);
            let direct = convolve_direct(&img, &k);
            let (fft, _) = convolve_pair_fft(&img, None, &k);
            for i in 0..img.pixels().len() {
                assert!((direct.pixels()[i] - oracle.pixels()[i]).abs() < 1e-12);
                assert!((fft.pixels()[i] - oracle.pixels()[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn packed_pair_matches_separate_passes() {
        let a = ramp_texture(40, 33);
        let b = a.map(|v| 1.0 - v * v);
        let k = make_disk_kernel(12.0).unwrap();
        let (pa, pb) = convolve_pair(&a, &b, &k);
        let sa = brute(&a, &k);
        let sb = brute(&b, &k);
        for i in 0..a.pixels().len() {
            assert!((pa.pixels()[i] - sa.pixels()[i]).abs() < 1e-10);
            assert!((pb.pixels()[i] - sb.pixels()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn fast_size_is_five_smooth() {
        assert_eq!(fast_size(97), 100);
        assert_eq!(fast_size(512), 512);
        assert_eq!(fast_size(1), 1);
    }
}
