//! Virtual camera: renders a depth-structured scene at any sensor position
//! through a [`DefocusModel`], and exposes ground truth for oracle tests.

mod scene;
pub mod texture;

pub use scene::{
    polygon_mask, rect_mask, DepthRegion, DepthSource, ImageSource, MotionConfig, RegionMotion,
    Scene, SceneConfig, Shape,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::defocus::{
    convolve, convolve_pair, imscale, uniform_axis, BlurKernel, DefocusModel, GammaCurve,
    KernelKind, PairSource,
};
use crate::error::{Error, Result};
use crate::image::{GrayImage, Grid};

/// Side of the square patch the focus networks see.
pub const PATCH_SIDE: usize = 512;

/// Analytic lens used to generate synthetic models: blur radius grows
/// linearly with defocus, magnification drifts linearly with sensor offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThinLens {
    pub blur_per_step: f64,
    pub breathing_per_step: f64,
}

impl Default for ThinLens {
    fn default() -> Self {
        Self {
            blur_per_step: 0.08,
            breathing_per_step: 2e-5,
        }
    }
}

impl ThinLens {
    pub fn params(&self, z0: f64, zi: f64) -> (f64, f64) {
        (
            self.blur_per_step * (zi - z0).abs(),
            1.0 + self.breathing_per_step * (zi - z0),
        )
    }

    pub fn model(&self, z_min: f64, z_max: f64, spacing: f64) -> Result<DefocusModel> {
        let axis = uniform_axis(z_min, z_max, spacing)?;
        DefocusModel::from_fn(
            GammaCurve::default(),
            KernelKind::Disk,
            axis.clone(),
            axis,
            |z0, zi| self.params(z0, zi),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: GrayImage,
    pub z: f64,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub model: DefocusModel,
    /// Half-width of the depth of focus, in motor steps.
    pub dof_steps: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
    /// Depth layer quantum in motor steps.
    pub depth_quantum: f64,
}

impl Camera {
    pub fn new(
        model: DefocusModel,
        dof_steps: f64,
        noise_sigma: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        if !(dof_steps > 0.0) {
            return Err(Error::Config(format!(
                "dof_steps must be > 0, got {dof_steps}"
            )));
        }
        if !(noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {noise_sigma}"
            )));
        }
        Ok(Self {
            model,
            dof_steps,
            noise_sigma,
            rng_seed,
            depth_quantum: 1.0,
        })
    }

    /// The default synthetic rig: range 1050..2100 calibrated every 50
    /// steps, depth of focus 20 steps, no noise.
    pub fn synthetic() -> Self {
        let model = ThinLens::default()
            .model(1050.0, 2100.0, 50.0)
            .expect("valid default axis");
        Self::new(model, 20.0, 0.0, 0).expect("valid default camera")
    }

    pub fn z_bounds(&self) -> (f64, f64) {
        self.model.zi_range()
    }

    fn check_z(&self, z: f64) -> Result<()> {
        let (lo, hi) = self.z_bounds();
        if !(z >= lo && z <= hi) {
            return Err(Error::Range(format!(
                "focus position {z} outside [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    fn snapshot<'a>(&self, scene: &'a Scene, t: usize) -> Result<std::borrow::Cow<'a, Scene>> {
        if scene.is_static() {
            return Ok(std::borrow::Cow::Borrowed(scene));
        }
        let horizon = scene.horizon().unwrap_or(0.0);
        if t as f64 > horizon {
            return Err(Error::Range(format!(
                "time step {t} beyond motion horizon {horizon}"
            )));
        }
        Ok(std::borrow::Cow::Owned(scene.advance(t as f64)?))
    }

    /// Depth layers far to near (larger optimal focus first).
    fn layers(&self, scene: &Scene) -> Result<Vec<(f64, GrayImage)>> {
        let q = self.depth_quantum;
        let (w, h) = scene.sharp.dims();
        let mut keys: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &z) in scene.depth.iter().enumerate() {
            keys.entry((z / q).round() as i64).or_default().push(i);
        }
        let (lo, hi) = self.model.z0_range();
        keys.into_iter()
            .rev()
            .map(|(k, idx)| {
                let z0_raw = k as f64 * q;
                if z0_raw < lo - q || z0_raw > hi + q {
                    return Err(Error::Range(format!(
                        "scene depth {z0_raw} outside calibrated [{lo}, {hi}]"
                    )));
                }
                let z0 = z0_raw.clamp(lo, hi);
                let mut mask = GrayImage::new(w, h);
                for i in idx {
                    mask.pixels_mut()[i] = 1.0;
                }
                Ok((z0, mask))
            })
            .collect()
    }

    /// Linear-light rendering; `optics(z0)` supplies the kernel and scale for
    /// a layer. Layers are composited far to near, each over the result so
    /// far through its mask, blurred and scaled like the layer itself.
    fn render_linear(
        &self,
        scene: &Scene,
        optics: impl Fn(f64) -> Result<(BlurKernel, f64)>,
    ) -> Result<GrayImage> {
        let linear = self.model.gamma.inverse(&scene.sharp)?;
        let layers = self.layers(scene)?;
        let mut acc: Option<GrayImage> = None;
        for (z0, mask) in layers {
            let (kernel, alpha) = optics(z0)?;
            match acc.as_mut() {
                None => acc = Some(imscale(&convolve(&linear, &kernel), alpha)?),
                Some(acc) => {
                    let (img, m) = convolve_pair(&linear, &mask, &kernel);
                    let img = imscale(&img, alpha)?;
                    let m = imscale(&m, alpha)?;
                    for ((a, &v), &mv) in acc
                        .pixels_mut()
                        .iter_mut()
                        .zip(img.pixels())
                        .zip(m.pixels())
                    {
                        let mv = mv.clamp(0.0, 1.0);
                        *a = *a * (1.0 - mv) + v * mv;
                    }
                }
            }
        }
        acc.ok_or_else(|| Error::Shape("empty scene".into()))
    }

    pub fn capture(&self, scene: &Scene, z: f64, t: usize) -> Result<Frame> {
        self.check_z(z)?;
        let snap = self.snapshot(scene, t)?;
        let linear = self.render_linear(&snap, |z0| self.model.kernel_at(z0, z))?;
        let mut pixels = self.model.gamma.forward_unchecked(&linear);
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(self.rng_seed, z, t));
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma checked");
            for v in pixels.pixels_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        pixels.clamp01();
        Ok(Frame { pixels, z, t })
    }

    /// All-in-focus ground truth in the magnification of a frame taken at
    /// `z_ref`: every layer sharp, each scaled by its own factor.
    pub fn render_sharp(&self, scene: &Scene, z_ref: f64, t: usize) -> Result<GrayImage> {
        self.check_z(z_ref)?;
        let snap = self.snapshot(scene, t)?;
        let linear = self.render_linear(&snap, |z0| {
            Ok((BlurKernel::identity(), self.model.lookup(z0, z_ref)?.1))
        })?;
        Ok(self.model.gamma.forward_unchecked(&linear))
    }
}

fn noise_seed(seed: u64, z: f64, t: usize) -> u64 {
    let mut s = seed ^ z.to_bits().rotate_left(17) ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    s ^= s >> 33;
    s = s.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    s ^ (s >> 33)
}

/// Area-majority depth of a square patch. Ties go to the depth nearer `z`,
/// then to the smaller depth.
pub fn majority_depth(depth: &Grid<f64>, x0: usize, y0: usize, side: usize, z: f64) -> f64 {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    let y1 = (y0 + side).min(depth.rows());
    let x1 = (x0 + side).min(depth.cols());
    for y in y0..y1 {
        for x in x0..x1 {
            *counts.entry(depth.get(y, x).round() as i64).or_default() += 1;
        }
    }
    let mut best: Option<(i64, usize)> = None;
    for (&k, &n) in &counts {
        best = match best {
            None => Some((k, n)),
            Some((bk, bn)) => {
                let closer = (k as f64 - z).abs() < (bk as f64 - z).abs();
                if n > bn || (n == bn && closer) {
                    Some((k, n))
                } else {
                    Some((bk, bn))
                }
            }
        };
    }
    best.map_or(z, |(k, _)| k as f64)
}

/// Ground-truth distance from `z` to the majority depth of the patch at
/// `origin` with the given side.
pub fn oracle_steps(
    scene: &Scene,
    z: f64,
    origin: (usize, usize),
    side: usize,
    t: usize,
) -> Result<f64> {
    let (w, h) = scene.sharp.dims();
    if origin.0 + side > w || origin.1 + side > h {
        return Err(Error::Shape(format!(
            "patch {side} at {origin:?} exceeds {w}x{h}"
        )));
    }
    let depth = if scene.is_static() {
        scene.depth.clone()
    } else {
        scene.advance(t as f64)?.depth
    };
    Ok((z - majority_depth(&depth, origin.0, origin.1, side, z)).abs())
}

/// Planar calibration target rendered by a camera.
pub struct SimTarget<'a> {
    pub camera: &'a Camera,
    pub texture: GrayImage,
}

impl PairSource for SimTarget<'_> {
    fn frame(&mut self, z0: f64, zi: f64) -> Result<GrayImage> {
        let scene = Scene::planar(self.texture.clone(), z0);
        Ok(self.camera.capture(&scene, zi, 0)?.pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defocus::synthesize_defocus;

    fn cam() -> Camera {
        Camera::synthetic()
    }

    #[test]
    fn in_focus_capture_reproduces_sharp_image() {
        let img = texture::procedural(64, 64, 1);
        let s = Scene::planar(img.clone(), 1400.0);
        let f = cam().capture(&s, 1400.0, 0).unwrap();
        for (a, b) in f.pixels.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn defocused_capture_matches_direct_synthesis() {
        let c = cam();
        let img = texture::procedural(64, 64, 2);
        let s = Scene::planar(img.clone(), 1400.0);
        let f = c.capture(&s, 1500.0, 0).unwrap();
        let (r, a) = ThinLens::default().params(1400.0, 1500.0);
        let oracle = synthesize_defocus(
            &img,
            &BlurKernel::new(KernelKind::Disk, r).unwrap(),
            a,
            &c.model.gamma,
        )
        .unwrap();
        for (x, y) in f.pixels.pixels().iter().zip(oracle.pixels()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn noisy_capture_is_deterministic() {
        let mut c = cam();
        c.noise_sigma = 0.01;
        c.rng_seed = 9;
        let s = Scene::planar(texture::procedural(32, 32, 3), 1400.0);
        let a = c.capture(&s, 1450.0, 2).unwrap();
        assert_eq!(a, c.capture(&s, 1450.0, 2).unwrap());
        assert_ne!(a.pixels, c.capture(&s, 1450.0, 3).unwrap().pixels);
    }

    #[test]
    fn out_of_range_focus_is_rejected() {
        let s = Scene::planar(texture::procedural(16, 16, 3), 1400.0);
        assert!(matches!(cam().capture(&s, 1000.0, 0), Err(Error::Range(_))));
    }

    #[test]
    fn two_depth_interiors_match_single_depth_renders() {
        let c = cam();
        let img = texture::procedural(96, 64, 4);
        let left = rect_mask(96, 64, 0, 0, 48, 64);
        let s = Scene::from_regions(img.clone(), 1700.0, &[(left, 1300.0)]).unwrap();
        let z = 1500.0;
        let f = c.capture(&s, z, 0).unwrap();
        let near = c
            .capture(&Scene::planar(img.clone(), 1300.0), z, 0)
            .unwrap();
        let far = c.capture(&Scene::planar(img, 1700.0), z, 0).unwrap();
        let reach = 18; // kernel radius 16 plus scaling drift
        for y in 0..64 {
            for x in 0..48 - reach {
                assert!((f.pixels.get(x, y) - near.pixels.get(x, y)).abs() < 1e-4);
            }
            for x in 48 + reach..96 {
                assert!((f.pixels.get(x, y) - far.pixels.get(x, y)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn oracle_steps_follow_majority() {
        let img = texture::procedural(10, 10, 5);
        let top = rect_mask(10, 10, 0, 0, 10, 6);
        let s = Scene::from_regions(img, 1700.0, &[(top, 1300.0)]).unwrap();
        assert_eq!(oracle_steps(&s, 1500.0, (0, 0), 10, 0).unwrap(), 200.0);
        assert_eq!(oracle_steps(&s, 1300.0, (0, 0), 10, 0).unwrap(), 0.0);
        assert_eq!(oracle_steps(&s, 1450.0, (0, 0), 10, 0).unwrap(), 150.0);
    }

    #[test]
    fn majority_ties_prefer_nearer_depth() {
        let d = Grid::from_fn(2, 2, |_, x| if x == 0 { 1300.0 } else { 1700.0 });
        assert_eq!(majority_depth(&d, 0, 0, 2, 1600.0), 1700.0);
        assert_eq!(majority_depth(&d, 0, 0, 2, 1400.0), 1300.0);
        assert_eq!(majority_depth(&d, 0, 0, 2, 1500.0), 1300.0);
    }
}
