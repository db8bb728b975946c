//! Synthetic training data and mini-batch Adam training on mean squared
//! error.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{LayerParams, NetworkWeights, Tensor};
use super::spec::{Head, NetForm, NetSpec};
use crate::defocus::{synthesize_defocus, BlurKernel, DefocusModel};
use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub adam: AdamParams,
    pub rng_seed: u64,
    /// Targets are divided by this during training; the output layer is
    /// multiplied back afterwards. Only valid with an `Abs` head.
    #[serde(default = "one")]
    pub label_scale: f64,
    /// Apply a random flip or quarter turn to every sample each epoch.
    #[serde(default)]
    pub augment: bool,
    /// Anneal the step size along a half cosine, from `learning_rate` in
    /// the first epoch down to `LR_FLOOR` of it in the last.
    #[serde(default)]
    pub cosine_decay: bool,
    /// Scale each sample about its mean by a gain drawn from
    /// `[1 - j, 1 + j]`; 0 disables it.
    #[serde(default)]
    pub contrast_jitter: f64,
}

/// Final fraction of the learning rate under cosine decay.
pub const LR_FLOOR: f64 = 0.05;

/// Dataset size of the desk-scale preset.
pub const DESK_SAMPLES: usize = 2000;
/// Epoch count of the desk-scale preset.
pub const DESK_EPOCHS: usize = 60;
/// Procedural source textures behind the desk-scale dataset.
pub const DESK_TEXTURES: usize = 200;
/// Gain jitter of the desk-scale preset.
pub const DESK_CONTRAST_JITTER: f64 = 0.4;

fn one() -> f64 {
    1.0
}

impl TrainingConfig {
    /// Step estimator recipe: batch 32, learning rate 0.001, 300 epochs.
    pub fn estimator_full() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 300,
            adam: AdamParams::default(),
            rng_seed: 0,
            label_scale: 100.0,
            augment: false,
            cosine_decay: false,
            contrast_jitter: 0.0,
        }
    }

    /// Focus discriminator recipe: batch 128, learning rate 0.001, 100 epochs.
    pub fn discriminator_full() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            epochs: 100,
            adam: AdamParams::default(),
            rng_seed: 0,
            label_scale: 1.0,
            augment: false,
            cosine_decay: false,
            contrast_jitter: 0.0,
        }
    }

    /// Same recipe cut to desk scale: fewer epochs, augmented samples and
    /// an annealed step size.
    pub fn desk(self) -> Self {
        Self {
            epochs: DESK_EPOCHS,
            augment: true,
            cosine_decay: true,
            contrast_jitter: DESK_CONTRAST_JITTER,
            ..self
        }
    }

    /// Step size used during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if !self.cosine_decay || self.epochs < 2 {
            return self.learning_rate;
        }
        let progress = epoch as f64 / (self.epochs - 1) as f64;
        let shape = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (LR_FLOOR + (1.0 - LR_FLOOR) * shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.label_scale > 0.0) {
            return Err(Error::Config("label_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// A square patch stored as 16-bit samples, and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub side: usize,
    pub pixels: Vec<u16>,
    pub label: f64,
}

impl LabeledPatch {
    pub fn from_image(img: &GrayImage, label: f64) -> Self {
        let pixels = img
            .pixels()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        Self {
            side: img.width(),
            pixels,
            label,
        }
    }

    pub fn image(&self) -> GrayImage {
        let data = self.pixels.iter().map(|&v| v as f64 / 65535.0).collect();
        GrayImage::from_vec(self.side, self.side, data).expect("square patch")
    }

    /// Tensor after one of the eight square symmetries: bit 0 mirrors x,
    /// bit 1 mirrors y, bit 2 transposes.
    fn tensor_dihedral(&self, k: u8) -> Tensor {
        let n = self.side;
        let at = |v: u16| v as f64 / 65535.0;
        let mut data = Vec::with_capacity(n * n);
        for y in 0..n {
            if k & 4 == 0 {
                let ty = if k & 2 != 0 { n - 1 - y } else { y };
                let row = &self.pixels[ty * n..(ty + 1) * n];
                if k & 1 != 0 {
                    data.extend(row.iter().rev().map(|&v| at(v)));
                } else {
                    data.extend(row.iter().map(|&v| at(v)));
                }
            } else {
                // Transposed: output row y reads a source column.
                let col = if k & 1 != 0 { n - 1 - y } else { y };
                for x in 0..n {
                    let row = if k & 2 != 0 { n - 1 - x } else { x };
                    data.push(at(self.pixels[row * n + col]));
                }
            }
        }
        Tensor::new(1, n, n, data)
    }
}

struct Adam {
    p: AdamParams,
    lr: f64,
    t: i32,
    m: Vec<LayerParams>,
    v: Vec<LayerParams>,
}

impl Adam {
    fn new(w: &NetworkWeights, p: AdamParams, lr: f64) -> Self {
        Self {
            p,
            lr,
            t: 0,
            m: w.zero_grads(),
            v: w.zero_grads(),
        }
    }

    fn step(&mut self, w: &mut NetworkWeights, g: &[LayerParams]) {
        self.t += 1;
        let AdamParams {
            beta1: b1,
            beta2: b2,
            eps,
        } = self.p;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        for (((p, g), m), v) in w.params.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            };
            update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight);
            update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

/// Mean squared error of a batch and its parameter gradient.
pub fn batch_gradient(
    w: &NetworkWeights,
    batch: &[(Tensor, f64)],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<LayerParams>)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let mut grads = w.zero_grads();
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for (x, target) in batch {
        loss += accumulate(w, x.clone(), *target, n, dropout.as_deref_mut(), &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::Training(format!("loss became non-finite ({loss})")));
    }
    Ok((loss, grads))
}

/// Adds one sample's share of the batch loss gradient; returns its loss share.
fn accumulate(
    w: &NetworkWeights,
    x: Tensor,
    target: f64,
    n: f64,
    dropout: Option<&mut ChaCha8Rng>,
    grads: &mut [LayerParams],
) -> Result<f64> {
    let trace = w.run_traced(x, dropout)?;
    let e = trace.output()[0] - target;
    w.backward(&trace, &[2.0 * e / n], grads);
    Ok(e * e / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, in scaled label units.
    pub epoch_losses: Vec<f64>,
}

pub fn train(
    dataset: &[LabeledPatch],
    spec: &NetSpec,
    cfg: &TrainingConfig,
) -> Result<(NetworkWeights, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("dataset is empty".into()));
    }
    if cfg.label_scale != 1.0 && spec.head != Head::Abs {
        return Err(Error::Config(
            "label scaling needs an absolute-value output".into(),
        ));
    }
    if let NetForm::Patch { input_side } = spec.form {
        if let Some(bad) = dataset.iter().find(|p| p.side != input_side) {
            return Err(Error::Shape(format!(
                "patch side {} but network expects {input_side}",
                bad.side
            )));
        }
    }
    let mut w = NetworkWeights::init(spec, cfg.rng_seed)?;
    let mut adam = Adam::new(&w, cfg.adam, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            // Draw every view first so the shuffle stream does not depend
            // on how dropout consumes the generator.
            let views: Vec<(u8, f64)> = chunk
                .iter()
                .map(|_| {
                    let k = if cfg.augment {
                        rng.random_range(0..8u8)
                    } else {
                        0
                    };
                    let g = if cfg.contrast_jitter > 0.0 {
                        1.0 + cfg.contrast_jitter * rng.random_range(-1.0..=1.0)
                    } else {
                        1.0
                    };
                    (k, g)
                })
                .collect();
            let mut grads = w.zero_grads();
            let mut loss = 0.0;
            let n = chunk.len() as f64;
            for (&i, &(k, g)) in chunk.iter().zip(&views) {
                let mut x = dataset[i].tensor_dihedral(k);
                if g != 1.0 {
                    let mean = x.data.iter().sum::<f64>() / x.data.len() as f64;
                    x.data.iter_mut().for_each(|v| *v = mean + g * (*v - mean));
                }
                let target = dataset[i].label / cfg.label_scale;
                loss += accumulate(&w, x, target, n, Some(&mut rng), &mut grads)
                    .map_err(|e| e.context(format!("epoch {epoch}")))?;
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became non-finite in epoch {epoch}"
                )));
            }
            total += loss * chunk.len() as f64;
            adam.step(&mut w, &grads);
        }
        let mean = total / dataset.len() as f64;
        if !w.is_finite() {
            return Err(Error::Training(format!(
                "weights diverged in epoch {epoch}"
            )));
        }
        log::info!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    if cfg.label_scale != 1.0 {
        let last = w.spec.last_param_layer();
        let p = &mut w.params[last];
        p.weight
            .iter_mut()
            .chain(p.bias.iter_mut())
            .for_each(|v| *v *= cfg.label_scale);
    }
    w.metadata = serde_json::json!({ "training": cfg, "epoch_losses": report.epoch_losses, "samples": dataset.len() });
    Ok((w, report))
}

/// Which network a generated set is labeled for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum LabelKind {
    /// Label `|z0 - zi|`.
    Estimator,
    /// Label 1 when `|z0 - zi| <= dof`, else 0. A fraction of samples is
    /// forced in focus, and another drawn just outside the depth of focus.
    Discriminator {
        dof: f64,
        focus_fraction: f64,
        near_miss_fraction: f64,
    },
}

/// Share of samples whose sensor position is drawn within `span` steps
/// of the object position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearFocus {
    pub fraction: f64,
    pub span: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub labels: LabelKind,
    pub patch_side: usize,
    #[serde(default)]
    pub near_focus: Option<NearFocus>,
}

impl DatasetConfig {
    pub fn estimator() -> Self {
        Self {
            labels: LabelKind::Estimator,
            patch_side: 512,
            near_focus: Some(NearFocus {
                fraction: 0.5,
                span: 200.0,
            }),
        }
    }

    pub fn discriminator(dof: f64) -> Self {
        Self {
            labels: LabelKind::Discriminator {
                dof,
                focus_fraction: 0.5,
                near_miss_fraction: 0.25,
            },
            patch_side: 512,
            near_focus: None,
        }
    }
}

/// Draws `(z0, zi)` pairs on the model range, synthesizes the defocused
/// patch from a random crop of a random source image, and labels it.
pub fn generate_training_set(
    sharp_images: &[GrayImage],
    model: &DefocusModel,
    n: usize,
    seed: u64,
    cfg: &DatasetConfig,
) -> Result<Vec<LabeledPatch>> {
    if sharp_images.is_empty() {
        return Err(Error::Config("no source images".into()));
    }
    let (lo, hi) = model.z0_range();
    let (ilo, ihi) = model.zi_range();
    let (lo_i, hi_i) = (lo.max(ilo).ceil() as i64, hi.min(ihi).floor() as i64);
    if lo_i > hi_i {
        return Err(Error::Config("model axes do not overlap".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.patch_side;
    let mut out = Vec::with_capacity(n);
    let mut skipped = vec![false; sharp_images.len()];
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 4 * n + 100 {
            return Err(Error::Config(
                "source images are too small for the requested patches".into(),
            ));
        }
        let z0 = rng.random_range(lo_i..=hi_i);
        let zi = match cfg.labels {
            LabelKind::Estimator => match cfg.near_focus {
                Some(nf) if rng.random::<f64>() < nf.fraction => {
                    let span = nf.span.max(0.0).floor() as i64;
                    let off = rng.random_range(-span..=span);
                    let zi = if (lo_i..=hi_i).contains(&(z0 + off)) {
                        z0 + off
                    } else {
                        z0 - off
                    };
                    zi.clamp(lo_i, hi_i)
                }
                _ => rng.random_range(lo_i..=hi_i),
            },
            LabelKind::Discriminator {
                dof,
                focus_fraction,
                near_miss_fraction,
            } => {
                let u: f64 = rng.random();
                let d = dof.floor() as i64;
                if u < focus_fraction {
                    (z0 + rng.random_range(-d..=d)).clamp(lo_i, hi_i)
                } else if u < focus_fraction + near_miss_fraction {
                    let off = rng.random_range(d + 1..=4 * d + 1);
                    let zi = if rng.random::<bool>() {
                        z0 + off
                    } else {
                        z0 - off
                    };
                    let zi = if zi < lo_i || zi > hi_i {
                        2 * z0 - zi
                    } else {
                        zi
                    };
                    zi.clamp(lo_i, hi_i)
                } else {
                    rng.random_range(lo_i..=hi_i)
                }
            }
        };
        let idx = rng.random_range(0..sharp_images.len());
        let src = &sharp_images[idx];
        let (r, alpha) = model.lookup(z0 as f64, zi as f64)?;
        let kernel = BlurKernel::new(model.kernel, r)?;
        let reach_scale = ((side as f64 / 2.0) * (alpha - 1.0).abs().max((1.0 / alpha - 1.0).abs()))
            .ceil() as usize;
        let pad = kernel.radius() + reach_scale + 2;
        let crop_side = side + 2 * pad;
        if src.width() < crop_side || src.height() < crop_side {
            if !skipped[idx] {
                log::warn!(
                    "source image {idx} ({}x{}) is smaller than {crop_side}; skipping",
                    src.width(),
                    src.height()
                );
                skipped[idx] = true;
            }
            continue;
        }
        let x0 = rng.random_range(0..=src.width() - crop_side);
        let y0 = rng.random_range(0..=src.height() - crop_side);
        let crop = src.crop(x0, y0, crop_side, crop_side)?;
        let img =
            synthesize_defocus(&crop, &kernel, alpha, &model.gamma)?.crop(pad, pad, side, side)?;
        let delta = (z0 - zi).abs() as f64;
        let label = match cfg.labels {
            LabelKind::Estimator => delta,
            LabelKind::Discriminator { dof, .. } => {
                if delta <= dof {
                    1.0
                } else {
                    0.0
                }
            }
        };
        out.push(LabeledPatch::from_image(&img, label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    fn tiny_spec() -> NetSpec {
        NetSpec {
            form: NetForm::Patch { input_side: 16 },
            layers: vec![
                LayerSpec::conv(2, 4, 4),
                LayerSpec::Flatten,
                LayerSpec::fc(8),
                LayerSpec::fc(1),
            ],
            head: Head::Abs,
            standardize: false,
        }
    }

    fn tiny_patch(seed: u64, label: f64) -> LabeledPatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabeledPatch::from_image(
            &GrayImage::from_fn(16, 16, |_, _| rng.random::<f64>()),
            label,
        )
    }

    fn cfg(epochs: usize, lr: f64) -> TrainingConfig {
        TrainingConfig {
            batch_size: 4,
            learning_rate: lr,
            epochs,
            adam: AdamParams::default(),
            rng_seed: 3,
            label_scale: 1.0,
            augment: false,
            cosine_decay: false,
            contrast_jitter: 0.0,
        }
    }

    #[test]
    fn cosine_schedule_ends_at_floor() {
        let c = TrainingConfig {
            cosine_decay: true,
            ..cfg(11, 0.01)
        };
        assert_eq!(c.learning_rate_at(0), 0.01);
        assert!((c.learning_rate_at(5) - 0.01 * (LR_FLOOR + 1.0) / 2.0).abs() < 1e-15);
        assert!((c.learning_rate_at(10) - 0.01 * LR_FLOOR).abs() < 1e-15);
        assert_eq!(cfg(11, 0.01).learning_rate_at(10), 0.01);
    }

    #[test]
    fn single_sample_overfits() {
        let data = vec![tiny_patch(1, 3.0)];
        let (_, report) = train(&data, &tiny_spec(), &cfg(200, 1e-2)).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < 1e-3 * first, "{first} -> {last}");
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let data = vec![tiny_patch(1, 3.0), tiny_patch(2, 1.0)];
        let (w, _) = train(&data, &tiny_spec(), &cfg(3, 0.0)).unwrap();
        let init = NetworkWeights::init(&tiny_spec(), 3).unwrap();
        assert_eq!(w.params, init.params);
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<_> = (0..6).map(|i| tiny_patch(i, i as f64)).collect();
        let (a, _) = train(&data, &tiny_spec(), &cfg(4, 1e-3)).unwrap();
        let (b, _) = train(&data, &tiny_spec(), &cfg(4, 1e-3)).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn label_scale_is_folded_into_output_layer() {
        let data = vec![tiny_patch(1, 300.0)];
        let mut c = cfg(300, 1e-2);
        c.label_scale = 100.0;
        let (w, _) = train(&data, &tiny_spec(), &c).unwrap();
        let out = w.forward(&data[0].image()).unwrap();
        assert!((out - 300.0).abs() < 3.0, "{out}");
    }

    #[test]
    fn zero_error_gives_zero_output_bias_gradient() {
        let w = NetworkWeights::init(&tiny_spec(), 9).unwrap();
        let x = tiny_patch(4, 0.0).tensor_dihedral(0);
        let y = w.run(x.clone()).unwrap().data[0];
        let (loss, g) = batch_gradient(&w, &[(x, y)], None).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.last().unwrap().bias[0], 0.0);
    }

    #[test]
    fn duplicated_batch_matches_single_sample() {
        let w = NetworkWeights::init(&tiny_spec(), 9).unwrap();
        let x = tiny_patch(5, 0.0).tensor_dihedral(0);
        let (_, one) = batch_gradient(&w, &[(x.clone(), 2.0)], None).unwrap();
        let (_, two) = batch_gradient(&w, &[(x.clone(), 2.0), (x, 2.0)], None).unwrap();
        for (a, b) in one.iter().zip(&two) {
            for (u, v) in a.weight.iter().zip(&b.weight) {
                assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn generated_labels_follow_positions() {
        let model = crate::sim::ThinLens::default()
            .model(1050.0, 1250.0, 50.0)
            .unwrap();
        let src = vec![crate::sim::texture::procedural(96, 96, 1)];
        let est = generate_training_set(
            &src,
            &model,
            12,
            4,
            &DatasetConfig {
                patch_side: 32,
                ..DatasetConfig::estimator()
            },
        )
        .unwrap();
        assert_eq!(est.len(), 12);
        assert!(est
            .iter()
            .all(|p| p.label >= 0.0 && p.label <= 200.0 && p.side == 32));
        let disc_cfg = DatasetConfig {
            labels: LabelKind::Discriminator {
                dof: 20.0,
                focus_fraction: 1.0,
                near_miss_fraction: 0.0,
            },
            patch_side: 32,
            near_focus: None,
        };
        let disc = generate_training_set(&src, &model, 8, 4, &disc_cfg).unwrap();
        assert!(disc.iter().all(|p| p.label == 1.0));
    }

    #[test]
    fn dihedral_views_are_permutations() {
        let p = tiny_patch(7, 0.0);
        let base = p.tensor_dihedral(0);
        let mut sorted_base = base.data.clone();
        sorted_base.sort_by(f64::total_cmp);
        let mut seen = Vec::new();
        for k in 0..8 {
            let t = p.tensor_dihedral(k);
            let mut s = t.data.clone();
            s.sort_by(f64::total_cmp);
            assert_eq!(s, sorted_base);
            assert!(!seen.contains(&t.data), "view {k} repeats");
            seen.push(t.data);
        }
        // transpose plus x mirror sends the origin to the top-right sample
        let n = p.side;
        let t = p.tensor_dihedral(4 | 1);
        assert_eq!(t.data[0], base.data[n - 1]);
        for k in 0..8u8 {
            let t = p.tensor_dihedral(k);
            for y in 0..n {
                for x in 0..n {
                    let (mut sx, mut sy) = if k & 4 != 0 { (y, x) } else { (x, y) };
                    if k & 1 != 0 {
                        sx = n - 1 - sx;
                    }
                    if k & 2 != 0 {
                        sy = n - 1 - sy;
                    }
                    assert_eq!(
                        t.data[y * n + x],
                        base.data[sy * n + sx],
                        "view {k} at ({x}, {y})"
                    );
                }
            }
        }
    }

    #[test]
    fn undersized_sources_are_reported() {
        let model = crate::sim::ThinLens::default()
            .model(1050.0, 1250.0, 50.0)
            .unwrap();
        let src = vec![GrayImage::filled(20, 20, 0.5)];
        assert!(generate_training_set(&src, &model, 2, 1, &DatasetConfig::estimator()).is_err());
    }

    #[test]
    fn empty_dataset_is_training_error() {
        assert!(matches!(
            train(&[], &tiny_spec(), &cfg(1, 1e-3)),
            Err(Error::Training(_))
        ));
    }
}
