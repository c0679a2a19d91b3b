//! Command-line front end: scene generation, training, rendering, evaluation,
//! warp inspection, and the mode-deviation demo.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ipsm_core::dataset::{Dataset, View};
use ipsm_core::eval::{evaluate, EvalOptions, MetricReport};
use ipsm_core::geometry::relative_pose;
use ipsm_core::io::image_io::heatmap;
use ipsm_core::io::{
    read_scene, read_scores, write_csv, write_image, write_scene, Config, SceneFile,
};
use ipsm_core::rasterizer::{render, RenderOptions};
use ipsm_core::scene::checkpoint;
use ipsm_core::scene::GaussianCloud;
use ipsm_core::score::{run_mode_demo, G2Anchor, ModeDemoConfig, NoiseSchedule};
use ipsm_core::synthetic::{generate_synthetic, SyntheticSceneSpec};
use ipsm_core::trainer::{
    initial_cloud, render_options, train_with_checkpoints, Profile, SyntheticPrior, TrainConfig,
    TrainData, TrainError,
};
use ipsm_core::warp::{inverse_warp, DepthUnits};

#[derive(Parser)]
#[command(
    name = "ipsm",
    version,
    about = "Sparse-view Gaussian splatting with inline-prior score matching"
)]
struct Cli {
    /// Random seed; overrides any seed from a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ring-camera scene.
    GenScene(GenSceneArgs),
    /// Train a Gaussian cloud on a scene's training views.
    Train(TrainArgs),
    /// Render a checkpoint at a scene's cameras.
    Render(RenderArgs),
    /// Score a checkpoint against held-out views.
    Eval(EvalArgs),
    /// Warp one view into another and dump the image, mask, and depth error.
    WarpDebug(WarpArgs),
    /// Run the two-mode basin test for SDS and the rectified gradient.
    ModeDemo(ModeDemoArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 12)]
    cameras: usize,
    #[arg(long, default_value_t = 3)]
    train_views: usize,
    #[arg(long, default_value_t = 300)]
    gaussians: usize,
    /// Standard deviation of additive image noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene file; may also come from `scene` in the config's `[data]` section.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// INI file with a `[train]` section of TrainConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Total iterations; rescales the schedule.
    #[arg(long)]
    iters: Option<usize>,
    /// Override one TrainConfig field, e.g. `--set lambda_geo=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Turn off the prior and the depth and geometry regularizers.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Llff,
    Dtu,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Llff => Profile::Llff,
            ProfileArg::Dtu => Profile::Dtu,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    views: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    views: Split,
    /// CSV of `view,score` perceptual scores computed elsewhere.
    #[arg(long)]
    perceptual: Option<PathBuf>,
    /// Where to write the per-view CSV; stdout gets the summary either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Index of the source (seen) view.
    #[arg(long)]
    source: usize,
    /// Index of the target view.
    #[arg(long)]
    target: usize,
    /// Render the target depth from this checkpoint instead of using the stored depth.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    /// Compare depths divided by the scene extent.
    #[arg(long)]
    normalized: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnchorArg {
    Shared,
    Renoised,
}

#[derive(Args)]
struct ModeDemoArgs {
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7.5)]
    guidance: f64,
    #[arg(long, default_value_t = 0.1)]
    eta_r: f64,
    /// Per-coordinate standard deviation of each mixture component.
    #[arg(long, default_value_t = 0.05)]
    component_std: f64,
    #[arg(long, value_enum, default_value = "renoised")]
    anchor: AnchorArg,
    /// Draw separate noise for the two terms of the rectified gradient.
    #[arg(long)]
    independent_draws: bool,
    /// Record distances every this many iterations.
    #[arg(long, default_value_t = 50)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenScene(a) => gen_scene(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::WarpDebug(a) => warp_cmd(a),
        Command::ModeDemo(a) => mode_demo_cmd(a, seed),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<GaussianCloud> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    checkpoint::read_binary(std::io::BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))
}

fn save_checkpoint(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    fs::write(path, checkpoint::to_bytes(cloud))
        .with_context(|| format!("writing {}", path.display()))
}

fn depth_render_options() -> RenderOptions {
    RenderOptions {
        normalize_depth: true,
        ..RenderOptions::default()
    }
}

fn select_views(ds: &Dataset, split: Split) -> Vec<&View> {
    match split {
        Split::Train => ds.train_views().collect(),
        Split::Test => ds.test_views().collect(),
        Split::All => ds.views.iter().collect(),
    }
}

fn gen_scene(a: GenSceneArgs, seed: Option<u64>) -> Result<()> {
    let spec = SyntheticSceneSpec {
        seed: seed.unwrap_or(0),
        gaussian_count: a.gaussians,
        width: a.width,
        height: a.height,
        camera_count: a.cameras,
        train_count: a.train_views,
        noise: a.noise,
        ..Default::default()
    };
    let scene = generate_synthetic(&spec)?;
    let path = write_scene(
        &a.out,
        &SceneFile {
            dataset: scene.dataset,
            ground_truth: Some(scene.ground_truth),
        },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Preset from the profile and iteration count, then config-file keys, then `--set`.
fn resolve_config(a: &TrainArgs, seed: Option<u64>) -> Result<(TrainConfig, Option<PathBuf>)> {
    let file = match &a.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Some(Config::parse(&text)?)
        }
        None => None,
    };
    let mut cfg = match &file {
        Some(f) => TrainConfig::from_ini(f)?,
        None => TrainConfig::new(Profile::Llff, TrainConfig::DEFAULT_ITERS),
    };
    if a.profile.is_some() || a.iters.is_some() {
        let profile = a.profile.map(Profile::from).unwrap_or(cfg.profile);
        let iters = a.iters.unwrap_or(cfg.total_iters);
        let mut preset = TrainConfig::new(profile, iters);
        if let Some(f) = &file {
            for (k, v) in f
                .section(ipsm_core::trainer::config::SECTION)
                .unwrap_or_default()
            {
                let schedule_key = matches!(k.as_str(), "profile" | "total_iters");
                if !schedule_key {
                    preset.set(k, v)?;
                }
            }
        }
        cfg = preset;
    }
    if a.baseline {
        cfg = cfg.without_priors();
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let scene = match (&a.scene, &file) {
        (Some(s), _) => Some(s.clone()),
        (None, Some(f)) => f.get("data", "scene").map(|s| {
            let base = a
                .config
                .as_deref()
                .and_then(Path::parent)
                .unwrap_or(Path::new("."));
            base.join(s)
        }),
        (None, None) => None,
    };
    Ok((cfg, scene))
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let (cfg, scene_path) = resolve_config(&a, seed)?;
    let scene_path =
        scene_path.ok_or_else(|| anyhow!("no scene given (use --scene or [data] scene)"))?;
    let scene = read_scene(&scene_path)?;
    let data = TrainData::from_dataset(&scene.dataset);
    let prior = scene.ground_truth.as_ref().map(|gt| {
        SyntheticPrior::new(
            gt.clone(),
            data.camera,
            data.seen.iter().map(|v| v.image.clone()).collect(),
        )
    });
    let ckpt_dir = a.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    fs::write(a.out.join("config.ini"), cfg.to_ini().to_text()).context("writing config.ini")?;

    let mut ckpt_err = None;
    let init = initial_cloud(&cfg, &data.bounds);
    let result = train_with_checkpoints(
        &cfg,
        init,
        &data,
        prior.as_ref().map(|p| p as _),
        |it, cloud| {
            if ckpt_err.is_none() {
                ckpt_err =
                    save_checkpoint(&ckpt_dir.join(format!("iter_{it:06}.gsck")), cloud).err();
            }
        },
    );
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    let out = match result {
        Ok(o) => o,
        Err(TrainError::Diverged {
            iteration,
            checkpoint,
        }) => {
            let p = ckpt_dir.join("diverged.gsck");
            save_checkpoint(&p, &checkpoint)?;
            bail!(
                "loss diverged at iteration {iteration}; last finite state saved to {}",
                p.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&a.out.join("final.gsck"), &out.cloud)?;

    write_csv(
        &a.out.join("losses.csv"),
        &[
            "iteration",
            "total",
            "l1",
            "ssim",
            "depth",
            "geo",
            "ipsm",
            "w_geo",
            "w_ipsm",
            "ramp",
            "seen_depth_coef",
            "prior_active",
            "mask_fraction",
            "gaussians",
            "position_lr",
            "spike",
        ],
        out.losses.iter().map(|r| {
            let b = &r.breakdown;
            vec![
                r.iteration.to_string(),
                b.total.to_string(),
                b.parts.l1.to_string(),
                b.parts.ssim.to_string(),
                b.parts.depth.to_string(),
                b.parts.geo.to_string(),
                b.parts.ipsm.to_string(),
                r.weights.geo.to_string(),
                r.weights.ipsm.to_string(),
                r.ramp.to_string(),
                r.seen_depth_coef.to_string(),
                r.prior_active.to_string(),
                r.mask_fraction.to_string(),
                r.gaussians.to_string(),
                r.position_lr.to_string(),
                r.spike.to_string(),
            ]
        }),
    )?;
    write_csv(
        &a.out.join("metrics.csv"),
        &["iteration", "psnr", "ssim", "avge2"],
        out.metrics.iter().map(|m| {
            [
                m.iteration.to_string(),
                m.psnr.to_string(),
                m.ssim.to_string(),
                m.avge2.to_string(),
            ]
        }),
    )?;
    let render_dir = a.out.join("renders");
    create_dir(&render_dir)?;
    for v in &data.validation {
        let r = render(&out.cloud, &data.camera, &v.pose, &render_options(&cfg))?;
        write_image(&render_dir.join(format!("{}.ppm", v.name)), &r.color)?;
    }
    match out.metrics.last() {
        Some(m) => println!(
            "iterations={} gaussians={} psnr={:.3} ssim={:.4} avge2={:.4} prior_calls={} spikes={}",
            cfg.total_iters,
            out.cloud.len(),
            m.psnr,
            m.ssim,
            m.avge2,
            out.prior_calls,
            out.spikes
        ),
        None => println!(
            "iterations={} gaussians={} (no held-out views)",
            cfg.total_iters,
            out.cloud.len()
        ),
    }
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let cloud = load_checkpoint(&a.checkpoint)?;
    let scene = read_scene(&a.scene)?;
    create_dir(&a.out)?;
    let opts = depth_render_options();
    for v in select_views(&scene.dataset, a.views) {
        let r = render(&cloud, &scene.dataset.camera, &v.pose, &opts)?;
        write_image(&a.out.join(format!("{}.ppm", v.name)), &r.color)?;
        write_image(&a.out.join(format!("{}_depth.frst", v.name)), &r.depth)?;
        write_image(
            &a.out.join(format!("{}_depth.ppm", v.name)),
            &heatmap(&r.depth),
        )?;
    }
    println!("rendered to {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cloud = load_checkpoint(&a.checkpoint)?;
    let scene = read_scene(&a.scene)?;
    let views = select_views(&scene.dataset, a.views);
    let perceptual: HashMap<String, f64> = match &a.perceptual {
        Some(p) => read_scores(p)?.into_iter().collect(),
        None => HashMap::new(),
    };
    let opts = EvalOptions {
        perceptual,
        ..EvalOptions::default()
    };
    let report = evaluate(&cloud, &scene.dataset.camera, &views, &opts)?;
    if let Some(path) = &a.out {
        write_report(path, &report)?;
    }
    let m = &report.mean;
    let extra = m.avge3.map(|v| format!(" avge={v:.4}")).unwrap_or_default();
    println!(
        "views={} psnr={:.3} ssim={:.4} avge2={:.4}{extra}",
        report.rows.len(),
        m.psnr,
        m.ssim,
        m.avge2
    );
    Ok(())
}

fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    write_csv(
        path,
        &["view", "psnr", "ssim", "avge2", "perceptual", "avge"],
        report
            .rows
            .iter()
            .chain(std::iter::once(&report.mean))
            .map(|r| {
                [
                    r.name.clone(),
                    r.psnr.to_string(),
                    r.ssim.to_string(),
                    r.avge2.to_string(),
                    opt(r.perceptual),
                    opt(r.avge3),
                ]
            }),
    )?;
    Ok(())
}

fn warp_cmd(a: WarpArgs) -> Result<()> {
    let scene = read_scene(&a.scene)?;
    let ds = &scene.dataset;
    let view = |i: usize| {
        ds.views
            .get(i)
            .ok_or_else(|| anyhow!("view index {i} out of range (scene has {})", ds.views.len()))
    };
    let (src, tgt) = (view(a.source)?, view(a.target)?);
    let src_depth = src
        .depth
        .as_ref()
        .ok_or_else(|| anyhow!("source view `{}` has no depth", src.name))?;
    let tgt_depth = match &a.checkpoint {
        Some(p) => {
            let cloud = load_checkpoint(p)?;
            render(&cloud, &ds.camera, &tgt.pose, &depth_render_options())?.depth
        }
        None => tgt
            .depth
            .clone()
            .ok_or_else(|| anyhow!("target view `{}` has no depth; pass --checkpoint", tgt.name))?,
    };
    let units = if a.normalized {
        DepthUnits::ExtentNormalized(ds.bounds.extent)
    } else {
        DepthUnits::World
    };
    let rel = relative_pose(&tgt.pose, &src.pose);
    let w = inverse_warp(
        &src.image, src_depth, &tgt_depth, &rel, &ds.camera, a.tau, units,
    )?;
    create_dir(&a.out)?;
    write_image(&a.out.join("warped.ppm"), &w.warped_image)?;
    write_image(&a.out.join("mask.pgm"), &w.mask.to_image())?;
    write_image(&a.out.join("depth_error.frst"), &w.depth_error)?;
    write_image(&a.out.join("depth_error.ppm"), &heatmap(&w.depth_error))?;
    println!(
        "source={} target={} tau={} valid_fraction={:.4}",
        src.name, tgt.name, a.tau, w.valid_fraction
    );
    Ok(())
}

fn mode_demo_cmd(a: ModeDemoArgs, seed: Option<u64>) -> Result<()> {
    let cfg = ModeDemoConfig {
        width: a.size,
        height: a.size,
        component_std: a.component_std,
        guidance: a.guidance,
        eta_r: a.eta_r,
        anchor: match a.anchor {
            AnchorArg::Shared => G2Anchor::SharedNoisy,
            AnchorArg::Renoised => G2Anchor::RectifiedRenoised,
        },
        shared_draw: !a.independent_draws,
        seeds: a.seeds,
        first_seed: seed.unwrap_or(0),
        iterations: a.iterations,
        trajectory_stride: a.stride,
        ..ModeDemoConfig::default()
    };
    let report = run_mode_demo(&cfg, &NoiseSchedule::default())?;
    create_dir(&a.out)?;
    fs::write(a.out.join("trajectories.csv"), report.trajectory_csv())
        .context("writing trajectories.csv")?;
    let summary = report.summary();
    fs::write(a.out.join("summary.txt"), format!("{summary}\n")).context("writing summary.txt")?;
    println!("{summary}");
    Ok(())
}
