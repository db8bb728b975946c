//! Learned autofocus loop: a step estimator proposes how far the sensor
//! is from focus, both directions are probed when both are reachable, and
//! a discriminator decides when to stop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::NetworkWeights;
use crate::sim::{majority_depth, oracle_steps, Camera, Scene, PATCH_SIDE};

/// Moves the focus motor to `z` and returns the patch the networks see.
pub trait FocusCapture {
    fn capture(&mut self, z: f64) -> Result<GrayImage>;
}

impl<F: FnMut(f64) -> Result<GrayImage>> FocusCapture for F {
    fn capture(&mut self, z: f64) -> Result<GrayImage> {
        self(z)
    }
}

/// Distance to focus in motor steps, without sign.
pub trait StepEstimator {
    fn estimate(&mut self, z: f64, patch: &GrayImage) -> Result<f64>;
}

pub trait FocusDiscriminator {
    fn in_focus(&mut self, z: f64, patch: &GrayImage) -> Result<bool>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfConfig {
    pub z_min: f64,
    pub z_max: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_max_iterations() -> usize {
    50
}

impl AfConfig {
    pub fn new(z_min: f64, z_max: f64) -> Self {
        Self {
            z_min,
            z_max,
            max_iterations: default_max_iterations(),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z_min < self.z_max) {
            return Err(Error::Config(format!(
                "focus range [{}, {}] is empty",
                self.z_min, self.z_max
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// One capture event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfStep {
    pub z: f64,
    /// Discriminator verdict, if it was consulted for this frame.
    pub in_focus: Option<bool>,
    /// Estimated distance, if the estimator was consulted.
    pub estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfResult {
    pub final_z: f64,
    pub time_steps: usize,
    pub trajectory: Vec<AfStep>,
    pub converged: bool,
    /// Number of random restarts taken.
    pub reinits: usize,
}

/// A failure inside the loop; the captures made so far are kept.
#[derive(Debug, thiserror::Error)]
#[error("autofocus aborted after {} captures: {source}", trajectory.len())]
pub struct AfAbort {
    #[source]
    pub source: Error,
    pub trajectory: Vec<AfStep>,
}

/// Time steps of a run: one per captured frame, the first frame included.
pub fn count_time_steps(result: &AfResult) -> usize {
    result.trajectory.len()
}

struct Run<'a> {
    capture: &'a mut dyn FocusCapture,
    fe: &'a mut dyn StepEstimator,
    fd: &'a mut dyn FocusDiscriminator,
    trajectory: Vec<AfStep>,
}

impl Run<'_> {
    fn grab(&mut self, z: f64) -> Result<GrayImage> {
        let patch = self.capture.capture(z)?;
        self.trajectory.push(AfStep {
            z,
            in_focus: None,
            estimate: None,
        });
        Ok(patch)
    }

    fn judge(&mut self, z: f64, patch: &GrayImage) -> Result<bool> {
        let v = self.fd.in_focus(z, patch)?;
        self.trajectory
            .last_mut()
            .expect("judged frame was captured")
            .in_focus = Some(v);
        Ok(v)
    }

    fn measure(&mut self, z: f64, patch: &GrayImage) -> Result<f64> {
        let d = self.fe.estimate(z, patch)?;
        if !(d.is_finite() && d >= 0.0) {
            return Err(Error::Domain(format!(
                "step estimate {d} at z={z} is not a nonnegative number"
            )));
        }
        self.trajectory
            .last_mut()
            .expect("measured frame was captured")
            .estimate = Some(d);
        Ok(d)
    }

    fn finish(self, final_z: f64, converged: bool, reinits: usize) -> AfResult {
        AfResult {
            final_z,
            time_steps: self.trajectory.len(),
            trajectory: self.trajectory,
            converged,
            reinits,
        }
    }
}

/// Runs the loop from `z_init`. Positions are integer motor steps; a move
/// is allowed when it lands inside `[z_min, z_max]` inclusive.
pub fn run_autofocus(
    capture: &mut dyn FocusCapture,
    fe: &mut dyn StepEstimator,
    fd: &mut dyn FocusDiscriminator,
    z_init: f64,
    cfg: &AfConfig,
) -> Result<AfResult, AfAbort> {
    let abort = |source: Error, trajectory: Vec<AfStep>| AfAbort { source, trajectory };
    cfg.validate().map_err(|e| abort(e, Vec::new()))?;
    if !(z_init >= cfg.z_min && z_init <= cfg.z_max) {
        let e = Error::Range(format!(
            "start {z_init} outside [{}, {}]",
            cfg.z_min, cfg.z_max
        ));
        return Err(abort(e, Vec::new()));
    }
    let mut run = Run {
        capture,
        fe,
        fd,
        trajectory: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let lo_i = cfg.z_min.ceil() as i64;
    let hi_i = cfg.z_max.floor() as i64;
    let mut z = z_init.round().clamp(lo_i as f64, hi_i as f64);
    let mut verified = false;
    let mut dz = 0.0;
    let mut reinits = 0;

    macro_rules! tryr {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => return Err(abort(e, run.trajectory)),
            }
        };
    }

    for _ in 0..cfg.max_iterations {
        if !verified {
            let patch = tryr!(run.grab(z));
            if tryr!(run.judge(z, &patch)) {
                return Ok(run.finish(z, true, reinits));
            }
            dz = tryr!(run.measure(z, &patch)).round();
        }
        let up = z + dz;
        let down = z - dz;
        let up_ok = up <= cfg.z_max;
        let down_ok = down >= cfg.z_min;
        match (up_ok, down_ok) {
            (false, false) => {
                z = rng.random_range(lo_i..=hi_i) as f64;
                verified = false;
                reinits += 1;
            }
            (true, false) => {
                z = up;
                verified = false;
            }
            (false, true) => {
                z = down;
                verified = false;
            }
            (true, true) => {
                let p1 = tryr!(run.grab(up));
                let e1 = tryr!(run.measure(up, &p1));
                let p2 = tryr!(run.grab(down));
                let e2 = tryr!(run.measure(down, &p2));
                let (zc, pc, ec, slot) = if e1 < e2 {
                    (up, p1, e1, run.trajectory.len() - 2)
                } else {
                    (down, p2, e2, run.trajectory.len() - 1)
                };
                let ok = tryr!(run.fd.in_focus(zc, &pc));
                run.trajectory[slot].in_focus = Some(ok);
                if ok {
                    return Ok(run.finish(zc, true, reinits));
                }
                z = zc;
                dz = ec.round();
                verified = true;
            }
        }
    }
    Ok(run.finish(z, false, reinits))
}

/// Captures frames from the simulator and crops the patch at `origin`.
pub struct SimCapture<'a> {
    pub camera: &'a Camera,
    pub scene: &'a Scene,
    pub t: usize,
    pub origin: (usize, usize),
    pub side: usize,
}

impl<'a> SimCapture<'a> {
    /// Centered network-sized patch.
    pub fn centered(camera: &'a Camera, scene: &'a Scene) -> Result<Self> {
        let (w, h) = scene.sharp.dims();
        if w < PATCH_SIDE || h < PATCH_SIDE {
            return Err(Error::Shape(format!(
                "scene {w}x{h} smaller than a {PATCH_SIDE} patch"
            )));
        }
        Ok(Self {
            camera,
            scene,
            t: 0,
            origin: ((w - PATCH_SIDE) / 2, (h - PATCH_SIDE) / 2),
            side: PATCH_SIDE,
        })
    }

    /// Majority depth under the patch.
    pub fn truth(&self, z: f64) -> f64 {
        majority_depth(
            &self.scene.depth,
            self.origin.0,
            self.origin.1,
            self.side,
            z,
        )
    }
}

impl FocusCapture for SimCapture<'_> {
    fn capture(&mut self, z: f64) -> Result<GrayImage> {
        let frame = self.camera.capture(self.scene, z, self.t)?;
        frame
            .pixels
            .crop(self.origin.0, self.origin.1, self.side, self.side)
    }
}

/// Ground-truth estimator and discriminator read from the scene depth.
pub struct Oracle<'a> {
    pub scene: &'a Scene,
    pub origin: (usize, usize),
    pub side: usize,
    pub t: usize,
    pub dof: f64,
}

impl<'a> Oracle<'a> {
    pub fn for_capture(cap: &SimCapture<'a>) -> Self {
        Self {
            scene: cap.scene,
            origin: cap.origin,
            side: cap.side,
            t: cap.t,
            dof: cap.camera.dof_steps,
        }
    }
}

impl StepEstimator for Oracle<'_> {
    fn estimate(&mut self, z: f64, _patch: &GrayImage) -> Result<f64> {
        oracle_steps(self.scene, z, self.origin, self.side, self.t)
    }
}

impl FocusDiscriminator for Oracle<'_> {
    fn in_focus(&mut self, z: f64, _patch: &GrayImage) -> Result<bool> {
        Ok(oracle_steps(self.scene, z, self.origin, self.side, self.t)? <= self.dof)
    }
}

/// Trained step estimator.
pub struct NetEstimator(pub NetworkWeights);

impl StepEstimator for NetEstimator {
    fn estimate(&mut self, _z: f64, patch: &GrayImage) -> Result<f64> {
        self.0.forward(patch)
    }
}

/// Trained discriminator; in focus when the output reaches `threshold`.
pub struct NetDiscriminator {
    pub weights: NetworkWeights,
    pub threshold: f64,
}

impl NetDiscriminator {
    pub fn new(weights: NetworkWeights) -> Self {
        Self {
            weights,
            threshold: 0.5,
        }
    }
}

impl FocusDiscriminator for NetDiscriminator {
    fn in_focus(&mut self, _z: f64, patch: &GrayImage) -> Result<bool> {
        Ok(self.weights.forward(patch)? >= self.threshold)
    }
}
