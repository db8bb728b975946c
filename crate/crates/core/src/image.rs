//! Grayscale planes, generic 2-D grids and PGM (P5) I/O.
//!
//! Pixels are `f64` in `[0, 1]`, row-major. PGM files with `maxval <= 255`
//! store one byte per sample, larger `maxval` two bytes, most significant
//! byte first.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 2-D array.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[r * self.cols + c]
    }

    #[inline]
    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_same_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

impl Grid<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }
}

/// Grayscale image with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with coordinates clamped into the image (replicate border).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Bilinear sample at a real-valued position, replicate outside.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<GrayImage> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h} at ({x0},{y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(GrayImage {
            width: w,
            height: h,
            data,
        })
    }

    /// Centered crop of the given side; errors if the image is smaller.
    pub fn center_crop(&self, side: usize) -> Result<GrayImage> {
        if self.width < side || self.height < side {
            return Err(Error::Shape(format!(
                "need at least {side}x{side}, image is {}x{}",
                self.width, self.height
            )));
        }
        self.crop(
            (self.width - side) / 2,
            (self.height - side) / 2,
            side,
            side,
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mean absolute difference over pixels where `keep` is true.
    pub fn mean_abs_diff_masked(&self, other: &GrayImage, keep: &Grid<bool>) -> Result<f64> {
        if self.dims() != other.dims() || keep.shape() != (self.height, self.width) {
            return Err(Error::Shape(
                "mean_abs_diff_masked: dimension mismatch".into(),
            ));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, (&a, &b)) in self.data.iter().zip(&other.data).enumerate() {
            if keep.as_slice()[i] {
                sum += (a - b).abs();
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Domain("mean_abs_diff_masked: empty mask".into()));
        }
        Ok(sum / n as f64)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Raw PGM contents before normalization.
#[derive(Debug, Clone)]
pub struct PgmRaw {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<PgmRaw> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(format_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(format_err(
            path,
            format!("expected P5 magic, found {magic:?}"),
        ));
    }
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        let tok = next_token(pos)?;
        tok.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad {what} {tok:?}")))
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bps;
    if bytes.len() < pos + need {
        return Err(format_err(
            path,
            format!(
                "raster needs {need} bytes, found {}",
                bytes.len().saturating_sub(pos)
            ),
        ));
    }
    let raster = &bytes[pos..pos + need];
    let samples: Vec<u16> = if bps == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(PgmRaw {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn read_pgm_raw(path: &Path) -> Result<PgmRaw> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes, path)
}

/// Reads a P5 file, mapping samples to `[0, 1]` by dividing by maxval.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let raw = read_pgm_raw(path)?;
    let scale = raw.maxval as f64;
    GrayImage::from_vec(
        raw.width,
        raw.height,
        raw.samples.iter().map(|&s| s as f64 / scale).collect(),
    )
}

pub fn encode_pgm(width: usize, height: usize, maxval: u16, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval < 256 {
        out.extend(samples.iter().map(|&s| s as u8));
    } else {
        for &s in samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

/// Writes an image as 8-bit (`maxval = 255`) or 16-bit (`maxval = 65535`) PGM.
pub fn write_pgm(path: &Path, img: &GrayImage, sixteen_bit: bool) -> Result<()> {
    let maxval: u16 = if sixteen_bit { 65535 } else { 255 };
    let samples: Vec<u16> = img
        .pixels()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * maxval as f64).round() as u16)
        .collect();
    write_atomic(
        path,
        &encode_pgm(img.width(), img.height(), maxval, &samples),
    )
}

pub fn write_mask_pgm(path: &Path, mask: &Grid<bool>) -> Result<()> {
    let samples: Vec<u16> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_atomic(path, &encode_pgm(mask.cols(), mask.rows(), 255, &samples))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Summed-area table with one row/column of zero padding.
pub struct Integral {
    stride: usize,
    sums: Vec<f64>,
}

impl Integral {
    pub fn new(img: &GrayImage, square: bool) -> Self {
        let (w, h) = img.dims();
        let stride = w + 1;
        let mut sums = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut acc = 0.0;
            for x in 0..w {
                let v = img.get(x, y);
                acc += if square { v * v } else { v };
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + acc;
            }
        }
        Self { stride, sums }
    }

    /// Sum over the `w x h` window with top-left corner `(x, y)`.
    #[inline]
    pub fn window(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let s = self.stride;
        self.sums[(y + h) * s + x + w] - self.sums[y * s + x + w] - self.sums[(y + h) * s + x]
            + self.sums[y * s + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_16bit_round_trip_preserves_samples() {
        let samples: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        let bytes = encode_pgm(4, 3, 65535, &samples);
        let raw = parse_pgm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(raw.samples, samples);
        assert_eq!((raw.width, raw.height, raw.maxval), (4, 3, 65535));
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let raw = parse_pgm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(raw.samples, vec![0, 255]);
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let bytes = b"P5 4 4 255\n\x00\x01".to_vec();
        assert!(matches!(
            parse_pgm(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn bilinear_at_integer_positions_is_exact() {
        let img = GrayImage::from_fn(5, 4, |x, y| (x * 10 + y) as f64);
        assert_eq!(img.sample_bilinear(3.0, 2.0), 32.0);
        assert!((img.sample_bilinear(2.5, 1.0) - 26.0).abs() < 1e-12);
    }

    #[test]
    fn integral_window_matches_direct_sum() {
        let img = GrayImage::from_fn(7, 6, |x, y| ((x * 3 + y * 5) % 11) as f64);
        let ii = Integral::new(&img, false);
        let mut direct = 0.0;
        for y in 1..5 {
            for x in 2..6 {
                direct += img.get(x, y);
            }
        }
        assert!((ii.window(2, 1, 4, 4) - direct).abs() < 1e-9);
    }
}
