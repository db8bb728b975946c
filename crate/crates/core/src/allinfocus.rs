//! Focus strategy for all-in-focus capture. Each frame yields a grid of
//! focus deviations (one per network-sized patch); cells already seen in
//! focus are masked out and the next position is voted by histogram.
//!
//! Sign convention: a signed deviation is `z - z0`, so a cell is brought
//! into focus by moving to `z - p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Grid;
use crate::nn::{global_forward, NetworkWeights};
use crate::sim::{majority_depth, Camera, Frame, Scene, PATCH_SIDE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationMatrix {
    pub values: Grid<f64>,
    pub z: f64,
    pub t: usize,
    pub stride_out: usize,
}

pub type InFocusMask = Grid<bool>;
pub type ActivationMatrix = Grid<bool>;

/// Produces unsigned deviations for a frame.
pub trait DeviationSource {
    fn abs_deviation(&mut self, frame: &Frame) -> Result<DeviationMatrix>;
}

/// Trained estimator in fully convolutional form.
pub struct NetDeviation {
    pub global: NetworkWeights,
    pub stride_out: usize,
}

impl DeviationSource for NetDeviation {
    fn abs_deviation(&mut self, frame: &Frame) -> Result<DeviationMatrix> {
        deviation_map(&self.global, frame, self.stride_out)
    }
}

pub fn deviation_map(
    global: &NetworkWeights,
    frame: &Frame,
    stride_out: usize,
) -> Result<DeviationMatrix> {
    let values = global_forward(global, &frame.pixels, stride_out)?;
    Ok(DeviationMatrix {
        values,
        z: frame.z,
        t: frame.t,
        stride_out,
    })
}

/// Exact deviations from the scene depth, patch by patch.
pub struct OracleDeviation<'a> {
    pub scene: &'a Scene,
    pub side: usize,
    pub stride_out: usize,
}

impl<'a> OracleDeviation<'a> {
    pub fn new(scene: &'a Scene, stride_out: usize) -> Self {
        Self {
            scene,
            side: PATCH_SIDE,
            stride_out,
        }
    }
}

impl DeviationSource for OracleDeviation<'_> {
    fn abs_deviation(&mut self, frame: &Frame) -> Result<DeviationMatrix> {
        let (w, h) = self.scene.sharp.dims();
        if w < self.side || h < self.side || self.stride_out == 0 {
            return Err(Error::Shape(format!(
                "{w}x{h} scene cannot hold {} patches",
                self.side
            )));
        }
        let advanced;
        let depth = if self.scene.is_static() {
            &self.scene.depth
        } else {
            advanced = self.scene.advance(frame.t as f64)?;
            &advanced.depth
        };
        let rows = (h - self.side) / self.stride_out + 1;
        let cols = (w - self.side) / self.stride_out + 1;
        let values = Grid::from_fn(rows, cols, |gy, gx| {
            let z0 = majority_depth(
                depth,
                gx * self.stride_out,
                gy * self.stride_out,
                self.side,
                frame.z,
            );
            (frame.z - z0).abs()
        });
        Ok(DeviationMatrix {
            values,
            z: frame.z,
            t: frame.t,
            stride_out: self.stride_out,
        })
    }
}

/// Chooses the sign of each deviation so that stepping back by the motor
/// move best reproduces the previous magnitude. Ties keep the positive sign.
pub fn resolve_signs(abs_t: &DeviationMatrix, p_prev: &DeviationMatrix) -> Result<DeviationMatrix> {
    abs_t
        .values
        .ensure_same_shape(&p_prev.values, "previous deviation matrix")?;
    let dz = abs_t.z - p_prev.z;
    let vals: Vec<f64> = abs_t
        .values
        .iter()
        .zip(p_prev.values.iter())
        .map(|(&a, &prev)| resolve_one(a.abs(), dz, prev.abs()))
        .collect();
    Ok(DeviationMatrix {
        values: Grid::from_vec(abs_t.values.rows(), abs_t.values.cols(), vals)?,
        ..abs_t.clone()
    })
}

/// Scalar sign rule on magnitudes.
pub fn resolve_one(abs_p: f64, dz: f64, abs_prev: f64) -> f64 {
    if ((abs_p - dz).abs() - abs_prev).abs() <= ((abs_p + dz).abs() - abs_prev).abs() {
        abs_p
    } else {
        -abs_p
    }
}

/// In-focus threshold as a function of focus position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaOfZ {
    Constant(f64),
    /// `(z, sigma)` knots sorted by z, interpolated linearly.
    Table(Vec<(f64, f64)>),
}

impl SigmaOfZ {
    pub fn at(&self, z: f64) -> Result<f64> {
        match self {
            SigmaOfZ::Constant(s) => Ok(*s),
            SigmaOfZ::Table(knots) => {
                let (first, last) = match (knots.first(), knots.last()) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::Config("empty sigma table".into())),
                };
                if z < first.0 || z > last.0 {
                    return Err(Error::Config(format!("no in-focus threshold for z={z}")));
                }
                let i = knots
                    .partition_point(|k| k.0 <= z)
                    .clamp(1, knots.len().max(2) - 1);
                if knots.len() == 1 {
                    return Ok(first.1);
                }
                let (a, b) = (knots[i - 1], knots[i]);
                let w = if b.0 > a.0 {
                    (z - a.0) / (b.0 - a.0)
                } else {
                    0.0
                };
                Ok(a.1 + w * (b.1 - a.1))
            }
        }
    }
}

pub fn in_focus_mask(p: &DeviationMatrix, sigma: &SigmaOfZ) -> Result<InFocusMask> {
    let s = sigma.at(p.z)?;
    Ok(p.values.map(|v| v.abs() <= s))
}

pub fn update_activation_static(
    u_prev: &ActivationMatrix,
    m_t: &InFocusMask,
) -> Result<ActivationMatrix> {
    u_prev.ensure_same_shape(m_t, "in-focus mask")?;
    let bits = u_prev
        .iter()
        .zip(m_t.iter())
        .map(|(a, b)| *a || *b)
        .collect();
    Grid::from_vec(u_prev.rows(), u_prev.cols(), bits)
}

/// OR over the given masks, newest last; callers pass at most `k + 1`.
pub fn update_activation_dynamic(masks: &[&InFocusMask]) -> Result<ActivationMatrix> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::Shape("no masks to aggregate".into()))?;
    let mut u = (*first).clone();
    for m in rest {
        u = update_activation_static(&u, m)?;
    }
    Ok(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NextFocus {
    /// Signed deviation at the densest bin center.
    Step(f64),
    /// Every cell is already active.
    Exhausted,
}

/// Histogram vote over inactive cells. Bins are centered on multiples of
/// `bin_width`; ties go to the smaller magnitude, then the positive side.
pub fn next_focus(p: &DeviationMatrix, u: &ActivationMatrix, bin_width: f64) -> Result<NextFocus> {
    p.values.ensure_same_shape(u, "activation matrix")?;
    if !(bin_width > 0.0) {
        return Err(Error::Config(format!(
            "bin width must be > 0, got {bin_width}"
        )));
    }
    let mut counts = std::collections::BTreeMap::<i64, usize>::new();
    for (&v, &active) in p.values.iter().zip(u.iter()) {
        if !active {
            *counts
                .entry((v / bin_width + 0.5).floor() as i64)
                .or_default() += 1;
        }
    }
    let best = counts.into_iter().max_by(|(ka, na), (kb, nb)| {
        na.cmp(nb)
            .then_with(|| kb.abs().cmp(&ka.abs()))
            .then_with(|| ka.cmp(kb))
    });
    Ok(match best {
        Some((k, _)) => NextFocus::Step(k as f64 * bin_width),
        None => NextFocus::Exhausted,
    })
}

/// Static stopping rule for a proposed position.
pub fn should_terminate_static(
    visited: &[f64],
    next: NextFocus,
    next_z: f64,
    bounds: (f64, f64),
    dof: f64,
) -> bool {
    match next {
        NextFocus::Exhausted => true,
        NextFocus::Step(_) => {
            next_z < bounds.0
                || next_z > bounds.1
                || visited.iter().any(|z| (next_z - z).abs() <= dof)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub sigma_of_z: SigmaOfZ,
    pub bin_width: f64,
    /// Number of earlier masks kept in the dynamic window.
    pub k: usize,
    pub mode: Mode,
    pub max_frames: usize,
    /// Depth of focus used by the revisit rule.
    pub dof: f64,
}

impl StrategyConfig {
    /// Static strategy with all thresholds equal to the depth of focus.
    pub fn for_dof(dof: f64) -> Self {
        Self {
            sigma_of_z: SigmaOfZ::Constant(dof),
            bin_width: dof,
            k: 0,
            mode: Mode::Static,
            max_frames: 32,
            dof,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0) {
            return Err(Error::Config(format!(
                "bin width must be > 0, got {}",
                self.bin_width
            )));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be >= 1".into()));
        }
        if !(self.dof >= 0.0) {
            return Err(Error::Config(format!("dof must be >= 0, got {}", self.dof)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRecord {
    pub frame: Frame,
    pub deviation: DeviationMatrix,
    pub mask: InFocusMask,
    pub activation: ActivationMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Exhausted,
    OutOfRange,
    Revisit,
    MaxFrames,
    FrameCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub records: Vec<CaptureRecord>,
    pub stop: StopReason,
}

impl StrategyRun {
    pub fn trajectory(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.frame.z).collect()
    }

    pub fn frames(&self) -> Vec<Frame> {
        self.records.iter().map(|r| r.frame.clone()).collect()
    }

    pub fn truncated(&self) -> bool {
        self.stop == StopReason::MaxFrames
    }

    /// Cells in focus in at least one frame.
    pub fn coverage(&self) -> Option<Grid<bool>> {
        let masks: Vec<&InFocusMask> = self.records.iter().map(|r| &r.mask).collect();
        update_activation_dynamic(&masks).ok()
    }
}

/// Target for the first move, when signs are still unknown: positive
/// deviations are assumed, and the opposite side is used if that falls
/// outside the range.
fn first_target(z: f64, step: f64, bounds: (f64, f64)) -> f64 {
    let a = (z - step).round();
    if a >= bounds.0 && a <= bounds.1 {
        a
    } else {
        (z + step).round()
    }
}

fn check_start(camera: &Camera, z_init: f64) -> Result<(f64, (f64, f64))> {
    let bounds = camera.z_bounds();
    if !(z_init >= bounds.0 && z_init <= bounds.1) {
        return Err(Error::Range(format!(
            "start {z_init} outside [{}, {}]",
            bounds.0, bounds.1
        )));
    }
    Ok((
        z_init.round().clamp(bounds.0.ceil(), bounds.1.floor()),
        bounds,
    ))
}

/// Static scene: captures until the remaining cells are out of range, the
/// next position repeats one already taken, or every cell has been in focus.
pub fn run_static(
    camera: &Camera,
    scene: &Scene,
    source: &mut dyn DeviationSource,
    z_init: f64,
    cfg: &StrategyConfig,
) -> Result<StrategyRun> {
    cfg.validate()?;
    if !scene.is_static() {
        return Err(Error::Config("static strategy needs a static scene".into()));
    }
    let (mut z, bounds) = check_start(camera, z_init)?;
    let mut records: Vec<CaptureRecord> = Vec::new();
    let mut visited = Vec::new();
    loop {
        if records.len() == cfg.max_frames {
            return Ok(StrategyRun {
                records,
                stop: StopReason::MaxFrames,
            });
        }
        let t = records.len();
        let frame = camera.capture(scene, z, t)?;
        let abs = source.abs_deviation(&frame)?;
        let p = match records.last() {
            None => DeviationMatrix {
                values: abs.values.map(|v| v.abs()),
                ..abs
            },
            Some(prev) => resolve_signs(&abs, &prev.deviation)?,
        };
        let mask = in_focus_mask(&p, &cfg.sigma_of_z)?;
        let activation = match records.last() {
            None => mask.clone(),
            Some(prev) => update_activation_static(&prev.activation, &mask)?,
        };
        let next = next_focus(&p, &activation, cfg.bin_width)?;
        records.push(CaptureRecord {
            frame,
            deviation: p,
            mask,
            activation,
        });
        visited.push(z);
        let next_z = match next {
            NextFocus::Step(d) if t == 0 => first_target(z, d, bounds),
            NextFocus::Step(d) => (z - d).round(),
            NextFocus::Exhausted => z,
        };
        if should_terminate_static(&visited, next, next_z, bounds, cfg.dof) {
            let stop = match next {
                NextFocus::Exhausted => StopReason::Exhausted,
                _ if next_z < bounds.0 || next_z > bounds.1 => StopReason::OutOfRange,
                _ => StopReason::Revisit,
            };
            return Ok(StrategyRun { records, stop });
        }
        z = next_z;
    }
}

/// Dynamic scene: exactly `n_frames` captures. Activation is the OR of the
/// newest `k + 1` masks; with no inactive cell the lens holds still, and
/// a frame taken without moving keeps the previous signs.
pub fn run_dynamic(
    camera: &Camera,
    scene: &Scene,
    source: &mut dyn DeviationSource,
    z_init: f64,
    cfg: &StrategyConfig,
    n_frames: usize,
) -> Result<StrategyRun> {
    cfg.validate()?;
    if n_frames == 0 {
        return Err(Error::Config("n_frames must be >= 1".into()));
    }
    if let Some(h) = scene.horizon() {
        if ((n_frames - 1) as f64) > h {
            return Err(Error::Config(format!(
                "scene motion ends at t={h}, {n_frames} frames requested"
            )));
        }
    }
    let (mut z, bounds) = check_start(camera, z_init)?;
    let mut records: Vec<CaptureRecord> = Vec::new();
    for t in 0..n_frames {
        let frame = camera.capture(scene, z, t)?;
        let abs = source.abs_deviation(&frame)?;
        let p = match records.last() {
            None => DeviationMatrix {
                values: abs.values.map(|v| v.abs()),
                ..abs
            },
            Some(prev) if prev.deviation.z == abs.z => {
                abs.values
                    .ensure_same_shape(&prev.deviation.values, "previous deviation matrix")?;
                let vals = abs
                    .values
                    .iter()
                    .zip(prev.deviation.values.iter())
                    .map(|(a, q)| a.abs().copysign(*q))
                    .collect();
                DeviationMatrix {
                    values: Grid::from_vec(abs.values.rows(), abs.values.cols(), vals)?,
                    ..abs
                }
            }
            Some(prev) => resolve_signs(&abs, &prev.deviation)?,
        };
        let mask = in_focus_mask(&p, &cfg.sigma_of_z)?;
        let start = records.len().saturating_sub(cfg.k);
        let mut window: Vec<&InFocusMask> = records[start..].iter().map(|r| &r.mask).collect();
        window.push(&mask);
        let activation = update_activation_dynamic(&window)?;
        let next = next_focus(&p, &activation, cfg.bin_width)?;
        let next_z = match next {
            NextFocus::Step(d) if t == 0 => first_target(z, d, bounds),
            NextFocus::Step(d) => (z - d).round(),
            NextFocus::Exhausted => z,
        };
        records.push(CaptureRecord {
            frame,
            deviation: p,
            mask,
            activation,
        });
        z = next_z.clamp(bounds.0.ceil(), bounds.1.floor());
    }
    Ok(StrategyRun {
        records,
        stop: StopReason::FrameCount,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(vals: &[f64], z: f64) -> DeviationMatrix {
        DeviationMatrix {
            values: Grid::from_vec(1, vals.len(), vals.to_vec()).unwrap(),
            z,
            t: 0,
            stride_out: 1,
        }
    }

    #[test]
    fn sign_rule_hand_cases() {
        let prev = dm(&[150.0, 150.0], 1000.0);
        let cur = dm(&[50.0, 250.0], 1100.0);
        let p = resolve_signs(&cur, &prev).unwrap();
        assert_eq!(p.values.as_slice(), &[-50.0, 250.0]);
        assert_eq!(resolve_one(70.0, 0.0, 10.0), 70.0);
    }

    #[test]
    fn mask_boundary_is_inclusive() {
        let p = dm(&[0.0, 20.0, -20.0, 20.5], 1500.0);
        let m = in_focus_mask(&p, &SigmaOfZ::Constant(20.0)).unwrap();
        assert_eq!(m.as_slice(), &[true, true, true, false]);
    }

    #[test]
    fn sigma_table_interpolates_and_rejects_outside() {
        let s = SigmaOfZ::Table(vec![(1000.0, 10.0), (2000.0, 30.0)]);
        assert_eq!(s.at(1500.0).unwrap(), 20.0);
        assert_eq!(s.at(2000.0).unwrap(), 30.0);
        assert!(matches!(s.at(2001.0), Err(Error::Config(_))));
        assert_eq!(
            SigmaOfZ::Table(vec![(1500.0, 7.0)]).at(1500.0).unwrap(),
            7.0
        );
    }

    #[test]
    fn histogram_picks_densest_bin() {
        let p = dm(&[300.0, 300.0, 295.0, -120.0], 1500.0);
        let u = Grid::filled(1, 4, false);
        // 300 sits on the edge between the 280 and 320 bins and rounds up
        assert_eq!(next_focus(&p, &u, 40.0).unwrap(), NextFocus::Step(320.0));
        let q = dm(&[290.0, 310.0, 305.0, -120.0], 1500.0);
        assert_eq!(next_focus(&q, &u, 40.0).unwrap(), NextFocus::Step(320.0));
        let all = Grid::filled(1, 4, true);
        assert_eq!(next_focus(&p, &all, 40.0).unwrap(), NextFocus::Exhausted);
    }

    #[test]
    fn histogram_ties() {
        let u = Grid::filled(1, 2, false);
        assert_eq!(
            next_focus(&dm(&[-200.0, 200.0], 0.0), &u, 40.0).unwrap(),
            NextFocus::Step(200.0)
        );
        assert_eq!(
            next_focus(&dm(&[-400.0, 200.0], 0.0), &u, 40.0).unwrap(),
            NextFocus::Step(200.0)
        );
    }

    #[test]
    fn static_termination_rules() {
        let s = NextFocus::Step(1.0);
        assert!(should_terminate_static(
            &[1500.0],
            s,
            2101.0,
            (1050.0, 2100.0),
            20.0
        ));
        assert!(should_terminate_static(
            &[1500.0],
            s,
            1520.0,
            (1050.0, 2100.0),
            20.0
        ));
        assert!(!should_terminate_static(
            &[1500.0],
            s,
            1521.0,
            (1050.0, 2100.0),
            20.0
        ));
        assert!(should_terminate_static(
            &[],
            NextFocus::Exhausted,
            1600.0,
            (1050.0, 2100.0),
            20.0
        ));
    }

    #[test]
    fn activation_updates() {
        let a = Grid::from_vec(1, 3, vec![true, false, false]).unwrap();
        let b = Grid::from_vec(1, 3, vec![false, false, true]).unwrap();
        let none = Grid::filled(1, 3, false);
        assert_eq!(update_activation_static(&a, &none).unwrap(), a);
        assert_eq!(update_activation_static(&a, &a).unwrap(), a);
        assert_eq!(
            update_activation_dynamic(&[&a, &b]).unwrap().as_slice(),
            &[true, false, true]
        );
        assert_eq!(update_activation_dynamic(&[&b]).unwrap(), b);
        assert!(update_activation_dynamic(&[]).is_err());
    }
}
