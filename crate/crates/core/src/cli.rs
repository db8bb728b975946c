use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use focuslab::allinfocus::{
    run_dynamic, run_static, DeviationSource, Mode, NetDeviation, OracleDeviation, SigmaOfZ,
    StrategyConfig,
};
use focuslab::autofocus::{
    run_autofocus, AfConfig, AfResult, NetDiscriminator, NetEstimator, Oracle, SimCapture,
};
use focuslab::baselines::{
    fibonacci_resolution_for, fibonacci_search, rule_based_search, tenengrad, RuleParams,
};
use focuslab::defocus::{
    calibrate_model, CalibrationConfig, DefocusModel, DirectorySource, PairSource,
};
use focuslab::fusion::{align, fuse, DEFAULT_WINDOW};
use focuslab::image::{read_pgm, write_atomic, write_mask_pgm, write_pgm, GrayImage};
use focuslab::nn::{
    build_discriminator_spec, build_estimator_spec, generate_training_set, load_weights,
    save_weights, to_global, train, DatasetConfig, NetForm, NetworkWeights, TrainingConfig,
    DESK_SAMPLES, DESK_TEXTURES,
};
use focuslab::sim::{rect_mask, texture, Camera, Scene, SimTarget, ThinLens, PATCH_SIDE};

/// Bad invocation; mapped to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

macro_rules! usage {
    ($($arg:tt)*) => { anyhow::Error::new(Usage(format!($($arg)*))) };
}

#[derive(Debug, Parser)]
#[command(
    name = "focuslab",
    version,
    about = "Defocus simulation, learned autofocus and all-in-focus capture"
)]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Defocus model JSON; the synthetic lens is used when omitted.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Step estimator weights.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    Full,
    Desk,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the blur/magnification grid from frame pairs.
    Calibrate(CalibrateArgs),
    /// Render one frame of a scene.
    Synth(SynthArgs),
    /// Generate a dataset and train a network.
    Train(TrainArgs),
    /// Run the learned autofocus loop from several starting positions.
    Autofocus(AutofocusArgs),
    /// Capture a focus stack and fuse it.
    Allinfocus(AllinfocusArgs),
    /// Compare learned autofocus with the contrast-search baselines.
    Bench(BenchArgs),
    /// Time network inference against one contrast evaluation.
    Timeit(TimeitArgs),
}

#[derive(Debug, Clone, Args)]
struct CameraArgs {
    /// Half-width of the depth of focus, in motor steps.
    #[arg(long, default_value_t = 20.0)]
    dof: f64,
    /// Standard deviation of additive sensor noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Debug, Clone, Args)]
struct SceneArgs {
    /// Scene JSON; a random planar scene is used when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Depth of the random planar scene.
    #[arg(long)]
    z0: Option<f64>,
    /// Side of the random planar scene.
    #[arg(long, default_value_t = 768)]
    size: usize,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Directory of `z0_<z0>_zi_<zi>.pgm` frames; simulated when omitted.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Comma-separated object positions; defaults to the range grid.
    #[arg(long)]
    z0: Option<String>,
    /// Comma-separated sensor positions; defaults to the range grid.
    #[arg(long)]
    zi: Option<String>,
    #[arg(long, default_value_t = 1050.0)]
    z_min: f64,
    #[arg(long, default_value_t = 2100.0)]
    z_max: f64,
    #[arg(long, default_value_t = 50.0)]
    spacing: f64,
    #[arg(long, default_value_t = 90.0)]
    r_max: f64,
    #[arg(long, default_value_t = 0.5)]
    r_step: f64,
    #[arg(long, default_value_t = 0.978)]
    alpha_lo: f64,
    #[arg(long, default_value_t = 1.022)]
    alpha_hi: f64,
    #[arg(long, default_value_t = 0.002)]
    alpha_step: f64,
    /// Side of the outer calibration patch.
    #[arg(long, default_value_t = 256)]
    outer: usize,
    /// Frame side of the simulated target.
    #[arg(long, default_value_t = 384)]
    target_size: usize,
    #[arg(long, default_value_t = 0.08)]
    blur_per_step: f64,
    #[arg(long, default_value_t = 2e-5)]
    breathing_per_step: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    camera: CameraArgs,
    /// Focus position to render at.
    #[arg(long)]
    z: f64,
    #[arg(long, default_value_t = 0)]
    t: usize,
    /// Render every layer sharp instead.
    #[arg(long)]
    sharp: bool,
    #[arg(long)]
    sixteen_bit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NetKind {
    Estimator,
    Discriminator,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = NetKind::Estimator)]
    kind: NetKind,
    /// Dataset size (profile default when omitted).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Directory of sharp PGM source images; procedural textures otherwise.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = DESK_TEXTURES)]
    textures: usize,
    #[arg(long, default_value_t = 768)]
    texture_size: usize,
    #[arg(long, default_value_t = 20.0)]
    dof: f64,
}

#[derive(Debug, Clone, Args)]
struct NetArgs {
    /// Use ground-truth depth instead of trained networks.
    #[arg(long)]
    oracle: bool,
    /// Focus discriminator weights.
    #[arg(long)]
    disc_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AutofocusArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    camera: CameraArgs,
    #[command(flatten)]
    nets: NetArgs,
    /// Comma-separated starting positions.
    #[arg(long, default_value = "1100,1400,1700,2000")]
    start: String,
    #[arg(long, default_value_t = 50)]
    max_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Static,
    Dynamic,
}

#[derive(Debug, Args)]
struct AllinfocusArgs {
    /// Scene JSON; otherwise vertical bands at evenly spread depths.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Number of depth bands of the generated scene.
    #[arg(long, default_value_t = 3)]
    bands: usize,
    #[arg(long, default_value_t = 1024)]
    size: usize,
    #[command(flatten)]
    camera: CameraArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Static)]
    mode: ModeArg,
    /// Earlier masks kept in the dynamic activation window.
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// Frames to capture in dynamic mode.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    max_frames: usize,
    /// Patch-grid stride.
    #[arg(long, default_value_t = 64)]
    stride: usize,
    #[arg(long, default_value_t = 1100.0)]
    start: f64,
    /// In-focus threshold; the depth of focus when omitted.
    #[arg(long)]
    sigma: Option<f64>,
    /// Histogram bin width; the depth of focus when omitted.
    #[arg(long)]
    bin_width: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long)]
    no_feather: bool,
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// JSON list of scene file paths, relative to the manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of random planar scenes when no manifest is given.
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    #[arg(long, default_value_t = 768)]
    size: usize,
    #[command(flatten)]
    camera: CameraArgs,
    #[command(flatten)]
    nets: NetArgs,
    #[arg(long, default_value = "1100,1400,1700,2000")]
    start: String,
    /// Starting position of the rule-based search.
    #[arg(long, default_value_t = 1100.0)]
    rule_start: f64,
    /// Fibonacci resolution; chosen for 13 evaluations when omitted.
    #[arg(long)]
    resolution: Option<f64>,
}

#[derive(Debug, Args)]
struct TimeitArgs {
    #[arg(long, default_value_t = 50)]
    reps: usize,
    /// Focus discriminator weights; random weights when omitted.
    #[arg(long)]
    disc_weights: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        model: cli.model,
        weights: cli.weights,
        out: cli.out,
        profile: cli.profile,
    };
    match cli.command {
        Command::Calibrate(a) => cmd_calibrate(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Autofocus(a) => cmd_autofocus(&ctx, a),
        Command::Allinfocus(a) => cmd_allinfocus(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Timeit(a) => cmd_timeit(&ctx, a),
    }
}

struct Ctx {
    seed: u64,
    model: Option<PathBuf>,
    weights: Option<PathBuf>,
    out: Option<PathBuf>,
    profile: Profile,
}

impl Ctx {
    fn out(&self, what: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| usage!("--out is required for {what}"))
    }

    fn defocus_model(&self) -> Result<DefocusModel> {
        match &self.model {
            Some(p) => {
                DefocusModel::load(p).with_context(|| format!("loading model {}", p.display()))
            }
            None => Ok(ThinLens::default().model(1050.0, 2100.0, 50.0)?),
        }
    }

    fn camera(&self, args: &CameraArgs) -> Result<Camera> {
        Camera::new(self.defocus_model()?, args.dof, args.noise, self.seed)
            .map_err(|e| usage!("{e}"))
    }

    fn estimator(&self) -> Result<NetworkWeights> {
        let p = self
            .weights
            .as_deref()
            .ok_or_else(|| usage!("--weights is required without --oracle"))?;
        load_patch_net(p)
    }
}

fn load_patch_net(path: &Path) -> Result<NetworkWeights> {
    let w = load_weights(path).with_context(|| format!("loading weights {}", path.display()))?;
    if w.spec.form
        != (NetForm::Patch {
            input_side: PATCH_SIDE,
        })
    {
        return Err(usage!(
            "{} is not a {PATCH_SIDE}x{PATCH_SIDE} patch network",
            path.display()
        ));
    }
    Ok(w)
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    let items: Vec<&str> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect();
    if items.is_empty() {
        return Err(usage!("{what} list is empty"));
    }
    items
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| usage!("bad number {t:?} in {what} list"))
        })
        .collect()
}

fn range_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    focuslab::defocus::uniform_axis(lo, hi, step).map_err(|e| usage!("{e}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Random planar scene number `i`, depth drawn on the model range.
fn planar_scene(seed: u64, i: u64, size: usize, z0: Option<f64>, camera: &Camera) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i));
    let (lo, hi) = camera.z_bounds();
    let z = z0.unwrap_or_else(|| rng.random_range(lo.ceil() as i64..=hi.floor() as i64) as f64);
    Scene::planar(texture::procedural(size, size, rng.random()), z)
}

fn load_scene(args: &SceneArgs, seed: u64, camera: &Camera) -> Result<Scene> {
    match &args.scene {
        Some(p) => Scene::load(p).with_context(|| format!("loading scene {}", p.display())),
        None => {
            if args.size < PATCH_SIDE {
                return Err(usage!("--size must be at least {PATCH_SIDE}"));
            }
            Ok(planar_scene(seed, 0, args.size, args.z0, camera))
        }
    }
}

fn cmd_calibrate(ctx: &Ctx, a: CalibrateArgs) -> Result<()> {
    let out = ctx.out("calibrate")?;
    let z0s = match &a.z0 {
        Some(s) => parse_list(s, "z0")?,
        None => range_grid(a.z_min, a.z_max, a.spacing)?,
    };
    let zis = match &a.zi {
        Some(s) => parse_list(s, "zi")?,
        None => range_grid(a.z_min, a.z_max, a.spacing)?,
    };
    let cfg = CalibrationConfig::grid(
        a.r_max,
        a.r_step,
        a.alpha_lo,
        a.alpha_hi,
        a.alpha_step,
        a.outer,
    );
    cfg.validate().map_err(|e| usage!("{e}"))?;
    let curve = focuslab::defocus::GammaCurve::default();
    let model = match &a.frames {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(usage!("frame directory {} does not exist", dir.display()));
            }
            for z0 in &z0s {
                for zi in std::iter::once(z0).chain(&zis) {
                    let f = dir.join(DirectorySource::file_name(*z0, *zi));
                    if !f.is_file() {
                        return Err(usage!("missing calibration frame {}", f.display()));
                    }
                }
            }
            let mut src = DirectorySource::new(dir);
            calibrate_model(&mut src, &z0s, &zis, &cfg, &curve)?
        }
        None => {
            let lens = ThinLens {
                blur_per_step: a.blur_per_step,
                breathing_per_step: a.breathing_per_step,
            };
            let truth = DefocusModel::from_fn(
                curve,
                Default::default(),
                z0s.clone(),
                zis.clone(),
                |z0, zi| lens.params(z0, zi),
            )
            .map_err(|e| usage!("{e}"))?;
            let camera = Camera::new(truth, 20.0, 0.0, ctx.seed)?;
            let mut src = SimTarget {
                camera: &camera,
                texture: texture::procedural(a.target_size, a.target_size, ctx.seed),
            };
            let src: &mut dyn PairSource = &mut src;
            calibrate_model(src, &z0s, &zis, &cfg, &curve)?
        }
    };
    model
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    log::info!(
        "wrote {}x{} model to {}",
        model.z0_axis.len(),
        model.zi_axis.len(),
        out.display()
    );
    Ok(())
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let out = ctx.out("synth")?;
    let camera = ctx.camera(&a.camera)?;
    let scene = load_scene(&a.scene, ctx.seed, &camera)?;
    let img = if a.sharp {
        camera.render_sharp(&scene, a.z, a.t)?
    } else {
        camera.capture(&scene, a.z, a.t)?.pixels
    };
    write_pgm(out, &img, a.sixteen_bit)?;
    Ok(())
}

fn source_images(a: &TrainArgs, seed: u64) -> Result<Vec<GrayImage>> {
    match &a.images {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(usage!("no .pgm images in {}", dir.display()));
            }
            paths
                .iter()
                .map(|p| read_pgm(p).with_context(|| format!("reading {}", p.display())))
                .collect()
        }
        None => Ok((0..a.textures as u64)
            .map(|i| {
                texture::procedural(
                    a.texture_size,
                    a.texture_size,
                    seed.wrapping_mul(1000).wrapping_add(i),
                )
            })
            .collect()),
    }
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let out = ctx.out("train")?;
    let model = ctx.defocus_model()?;
    let (spec, data_cfg, mut cfg) = match a.kind {
        NetKind::Estimator => (
            build_estimator_spec(),
            DatasetConfig::estimator(),
            TrainingConfig::estimator_full(),
        ),
        NetKind::Discriminator => (
            build_discriminator_spec(),
            DatasetConfig::discriminator(a.dof),
            TrainingConfig::discriminator_full(),
        ),
    };
    let default_n = match ctx.profile {
        Profile::Full => 20_000,
        Profile::Desk => {
            cfg = cfg.desk();
            DESK_SAMPLES
        }
    };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.rng_seed = ctx.seed;
    cfg.validate().map_err(|e| usage!("{e}"))?;
    let n = a.n.unwrap_or(default_n);
    if n == 0 {
        return Err(usage!("--n must be positive"));
    }
    let images = source_images(&a, ctx.seed)?;
    let t = Instant::now();
    let data = generate_training_set(&images, &model, n, ctx.seed, &data_cfg)?;
    log::info!(
        "generated {} patches in {:.1}s",
        data.len(),
        t.elapsed().as_secs_f64()
    );
    let t = Instant::now();
    let (mut weights, report) = train(&data, &spec, &cfg)?;
    log::info!(
        "trained {} epochs in {:.1}s",
        cfg.epochs,
        t.elapsed().as_secs_f64()
    );
    if let serde_json::Value::Object(m) = &mut weights.metadata {
        m.insert(
            "dataset".into(),
            json!({ "config": data_cfg, "n": n, "seed": ctx.seed }),
        );
    }
    save_weights(out, &weights)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let log_path = out.with_extension("losses.csv");
    write_atomic(&log_path, csv.as_bytes())?;
    log::info!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

/// Samples a trained or oracle autofocus run from one start.
fn af_once(
    camera: &Camera,
    scene: &Scene,
    nets: Option<&(NetworkWeights, NetworkWeights)>,
    start: f64,
    cfg: &AfConfig,
) -> Result<AfResult> {
    let mut cap = SimCapture::centered(camera, scene)?;
    let mut oracle = Oracle::for_capture(&cap);
    let mut oracle_d = Oracle::for_capture(&cap);
    let res = match nets {
        Some((est, disc)) => {
            let mut fe = NetEstimator(est.clone());
            let mut fd = NetDiscriminator::new(disc.clone());
            run_autofocus(&mut cap, &mut fe, &mut fd, start, cfg)
        }
        None => run_autofocus(&mut cap, &mut oracle, &mut oracle_d, start, cfg),
    };
    res.map_err(|e| anyhow::anyhow!("{e}"))
}

fn load_nets(ctx: &Ctx, nets: &NetArgs) -> Result<Option<(NetworkWeights, NetworkWeights)>> {
    if nets.oracle {
        return Ok(None);
    }
    let disc = nets
        .disc_weights
        .as_deref()
        .ok_or_else(|| usage!("--disc-weights is required without --oracle"))?;
    Ok(Some((ctx.estimator()?, load_patch_net(disc)?)))
}

fn cmd_autofocus(ctx: &Ctx, a: AutofocusArgs) -> Result<()> {
    let starts = parse_list(&a.start, "start")?;
    let camera = ctx.camera(&a.camera)?;
    let nets = load_nets(ctx, &a.nets)?;
    let scene = load_scene(&a.scene, ctx.seed, &camera)?;
    let (lo, hi) = camera.z_bounds();
    let cfg = AfConfig {
        z_min: lo,
        z_max: hi,
        max_iterations: a.max_iterations,
        rng_seed: ctx.seed,
    };
    cfg.validate().map_err(|e| usage!("{e}"))?;
    if let Some(s) = starts.iter().find(|s| !(**s >= lo && **s <= hi)) {
        return Err(usage!("start {s} outside [{lo}, {hi}]"));
    }
    let truth = SimCapture::centered(&camera, &scene)?.truth(starts[0]);
    let mut results = Vec::new();
    for &start in &starts {
        let r = af_once(&camera, &scene, nets.as_ref(), start, &cfg)?;
        for (i, s) in r.trajectory.iter().enumerate() {
            println!(
                "{}",
                json!({ "start": start, "index": i, "z": s.z, "in_focus": s.in_focus, "estimate": s.estimate })
            );
        }
        results.push(json!({ "start": start, "truth": truth, "error": (r.final_z - truth).abs(), "result": r }));
    }
    if let Some(out) = &ctx.out {
        write_json(out, &results)?;
    }
    Ok(())
}

/// Vertical bands with evenly spread depths inside the camera range.
fn band_scene(seed: u64, bands: usize, size: usize, camera: &Camera) -> Result<Scene> {
    if bands == 0 || size < PATCH_SIDE {
        return Err(usage!("need at least one band and --size >= {PATCH_SIDE}"));
    }
    let (lo, hi) = camera.z_bounds();
    let width = size / bands;
    let depth = |i: usize| (lo + (hi - lo) * (i as f64 + 0.5) / bands as f64).round();
    let regions: Vec<_> = (1..bands)
        .map(|i| {
            let rw = if i + 1 == bands {
                size - i * width
            } else {
                width
            };
            (rect_mask(size, size, i * width, 0, rw, size), depth(i))
        })
        .collect();
    Ok(Scene::from_regions(
        texture::procedural(size, size, seed),
        depth(0),
        &regions,
    )?)
}

fn cmd_allinfocus(ctx: &Ctx, a: AllinfocusArgs) -> Result<()> {
    let dir = ctx.out("allinfocus")?.to_path_buf();
    let camera = ctx.camera(&a.camera)?;
    let scene = match &a.scene {
        Some(p) => Scene::load(p).with_context(|| format!("loading scene {}", p.display()))?,
        None => band_scene(ctx.seed, a.bands, a.size, &camera)?,
    };
    let mode = match a.mode {
        ModeArg::Static => Mode::Static,
        ModeArg::Dynamic => Mode::Dynamic,
    };
    let cfg = StrategyConfig {
        sigma_of_z: SigmaOfZ::Constant(a.sigma.unwrap_or(a.camera.dof)),
        bin_width: a.bin_width.unwrap_or(a.camera.dof),
        k: a.k,
        mode,
        max_frames: a.max_frames,
        dof: a.camera.dof,
    };
    cfg.validate().map_err(|e| usage!("{e}"))?;
    let mut source: Box<dyn DeviationSource + '_> = if a.oracle {
        Box::new(OracleDeviation::new(&scene, a.stride))
    } else {
        Box::new(NetDeviation {
            global: to_global(&ctx.estimator()?)?,
            stride_out: a.stride,
        })
    };
    let run = match mode {
        Mode::Static => run_static(&camera, &scene, source.as_mut(), a.start, &cfg)?,
        Mode::Dynamic => run_dynamic(&camera, &scene, source.as_mut(), a.start, &cfg, a.frames)?,
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut lines = String::new();
    for (t, r) in run.records.iter().enumerate() {
        write_pgm(
            &dir.join(format!("frame_{t:03}.pgm")),
            &r.frame.pixels,
            false,
        )?;
        write_mask_pgm(&dir.join(format!("mask_{t:03}.pgm")), &r.mask)?;
        write_mask_pgm(&dir.join(format!("activation_{t:03}.pgm")), &r.activation)?;
        write_json(&dir.join(format!("deviation_{t:03}.json")), &r.deviation)?;
        let line = json!({
            "t": t,
            "z": r.frame.z,
            "in_focus_cells": r.mask.count_true(),
            "active_cells": r.activation.count_true(),
            "cells": r.mask.rows() * r.mask.cols(),
        });
        lines.push_str(&format!("{line}\n"));
    }
    write_atomic(&dir.join("trajectory.jsonl"), lines.as_bytes())?;
    let frames = run.frames();
    let aligned = align(&frames, &camera.model)?;
    let fused = fuse(&aligned, a.window, !a.no_feather)?;
    write_pgm(&dir.join("fused.pgm"), &fused.image, false)?;
    write_pgm(
        &dir.join("selection.pgm"),
        &fused.selection_image(frames.len()),
        false,
    )?;
    write_json(
        &dir.join("summary.json"),
        &json!({ "mode": format!("{mode:?}").to_lowercase(), "stop": run.stop, "frames": frames.len(), "trajectory": run.trajectory(), "config": cfg }),
    )?;
    log::info!(
        "captured {} frames ({:?}) into {}",
        frames.len(),
        run.stop,
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    scene: String,
    method: &'static str,
    start: Option<f64>,
    time_steps: usize,
    final_z: f64,
    truth: f64,
    error: f64,
}

fn bench_scenes(ctx: &Ctx, a: &BenchArgs, camera: &Camera) -> Result<Vec<(String, Scene)>> {
    match &a.manifest {
        Some(m) => {
            let text = fs::read_to_string(m).with_context(|| format!("reading {}", m.display()))?;
            let list: Vec<PathBuf> =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", m.display()))?;
            let base = m.parent().unwrap_or(Path::new("."));
            list.iter()
                .map(|p| {
                    let path = base.join(p);
                    let s = Scene::load(&path)
                        .with_context(|| format!("loading scene {}", path.display()))?;
                    Ok((p.display().to_string(), s))
                })
                .collect()
        }
        None => Ok((0..a.scenes as u64)
            .map(|i| {
                (
                    format!("planar{i}"),
                    planar_scene(ctx.seed, i, a.size, None, camera),
                )
            })
            .collect()),
    }
}

fn cmd_bench(ctx: &Ctx, a: BenchArgs) -> Result<()> {
    let starts = parse_list(&a.start, "start")?;
    let camera = ctx.camera(&a.camera)?;
    let nets = load_nets(ctx, &a.nets)?;
    let (lo, hi) = camera.z_bounds();
    let resolution = a
        .resolution
        .unwrap_or_else(|| fibonacci_resolution_for(hi - lo, 13));
    let cfg = AfConfig {
        z_min: lo,
        z_max: hi,
        max_iterations: 50,
        rng_seed: ctx.seed,
    };
    let metric = |p: &GrayImage| tenengrad(p);
    let mut rows = Vec::new();
    for (name, scene) in bench_scenes(ctx, &a, &camera)? {
        let mut cap = SimCapture::centered(&camera, &scene)?;
        let truth = cap.truth(lo);
        let row = |method, start, steps, z: f64| BenchRow {
            scene: name.clone(),
            method,
            start,
            time_steps: steps,
            final_z: z,
            truth,
            error: (z - truth).abs(),
        };
        let r = rule_based_search(
            &mut cap,
            &metric,
            &RuleParams::default(),
            lo,
            hi,
            a.rule_start,
        )?;
        rows.push(row("rule_based", Some(a.rule_start), r.time_steps, r.z));
        let f = fibonacci_search(&mut cap, &metric, lo, hi, resolution)?;
        rows.push(row("fibonacci", None, f.time_steps, f.z));
        for &s in &starts {
            let r = af_once(&camera, &scene, nets.as_ref(), s, &cfg)?;
            rows.push(row("proposed", Some(s), r.time_steps, r.final_z));
        }
    }
    let mut csv = String::from("scene,method,start,time_steps,final_z,truth,error\n");
    for r in &rows {
        let start = r.start.map(|s| s.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.scene, r.method, start, r.time_steps, r.final_z, r.truth, r.error
        ));
    }
    for method in ["rule_based", "fibonacci", "proposed"] {
        let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.method == method).collect();
        if sel.is_empty() {
            continue;
        }
        let n = sel.len() as f64;
        let steps = sel.iter().map(|r| r.time_steps as f64).sum::<f64>() / n;
        let err = sel.iter().map(|r| r.error).sum::<f64>() / n;
        csv.push_str(&format!("mean,{method},,{steps:.3},,,{err:.3}\n"));
    }
    emit_text(ctx.out.as_deref(), &csv)
}

fn time_ms(reps: usize, mut f: impl FnMut() -> Result<f64>) -> Result<(f64, f64)> {
    let mut sink = 0.0;
    sink += f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        sink += f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    std::hint::black_box(sink);
    let mean = times.iter().sum::<f64>() / reps as f64;
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((mean, min))
}

fn cmd_timeit(ctx: &Ctx, a: TimeitArgs) -> Result<()> {
    if a.reps == 0 {
        return Err(usage!("--reps must be positive"));
    }
    let est = match &ctx.weights {
        Some(p) => load_patch_net(p)?,
        None => NetworkWeights::init(&build_estimator_spec(), ctx.seed)?,
    };
    let disc = match &a.disc_weights {
        Some(p) => load_patch_net(p)?,
        None => NetworkWeights::init(&build_discriminator_spec(), ctx.seed)?,
    };
    let patch = texture::procedural(PATCH_SIDE, PATCH_SIDE, ctx.seed);
    let trad = time_ms(a.reps, || Ok(tenengrad(&patch)?))?;
    let e = time_ms(a.reps, || Ok(est.forward(&patch)?))?;
    let d = time_ms(a.reps, || Ok(disc.forward(&patch)?))?;
    let p = time_ms(a.reps, || Ok(est.forward(&patch)? + disc.forward(&patch)?))?;
    let mut csv = String::from("component,mean_ms,min_ms\n");
    for (name, (mean, min)) in [
        ("traditional", trad),
        ("estimator", e),
        ("discriminator", d),
        ("proposed", p),
    ] {
        csv.push_str(&format!("{name},{mean:.4},{min:.4}\n"));
    }
    emit_text(ctx.out.as_deref(), &csv)
}
