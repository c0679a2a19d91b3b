//! The optimization loop: photometric supervision on seen views, prior and
//! geometry regularization on sampled pseudo views, and density control.

pub mod config;
pub mod density;
pub mod optimizer;
pub mod prior;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{Dataset, View};
use crate::eval::{evaluate, EvalError, EvalOptions};
use crate::geometry::{
    pose_distance, relative_pose, CameraIntrinsics, GeometryError, Pose, PseudoViewConfig,
    PseudoViewSampler,
};
use crate::image::Image;
use crate::rasterizer::{render, render_backward, DensificationStats, RenderError, RenderOptions};
use crate::regularizers::{
    depth_term, geo_loss, l1_loss, ssim_loss, total_loss, DepthPair, Loss, LossBreakdown,
    LossError, LossParts, LossWeights,
};
use crate::scene::{init_synthetic, GaussianCloud, InitSpec, SceneBounds};
use crate::score::{ipsm_grad, IpsmOptions, NoiseSchedule, ScoreError};
use crate::warp::{inverse_warp, DepthUnits, WarpError};

pub use config::{Profile, TrainConfig};
pub use density::{densify_and_unpool, prune, reset_opacity, DensifyParams, DensifyReport};
pub use optimizer::{LearningRates, OptimizerState};
pub use prior::{PriorError, PriorSource, PseudoTargets, SyntheticPrior};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training needs at least one seen view")]
    NoSeenViews,
    #[error("the prior weight is positive but no prior source was given")]
    MissingPrior,
    #[error("seen view `{0}` has no depth, which warping needs")]
    MissingDepth(String),
    #[error("loss diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        /// The cloud before the diverging step.
        checkpoint: Box<GaussianCloud>,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Views and camera the trainer sees.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub camera: CameraIntrinsics,
    pub bounds: SceneBounds,
    pub seen: Vec<&'a View>,
    /// Held-out views for the metric log.
    pub validation: Vec<&'a View>,
}

impl<'a> TrainData<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Self {
        Self {
            camera: ds.camera,
            bounds: ds.bounds,
            seen: ds.train_views().collect(),
            validation: ds.test_views().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
    /// Effective weights, including the warm-up ramp.
    pub weights: LossWeights,
    pub ramp: f64,
    pub seen_depth_coef: f64,
    pub prior_active: bool,
    pub mask_fraction: f64,
    pub gaussians: usize,
    pub position_lr: f64,
    /// Total loss exceeded ten times the previous iteration's.
    pub spike: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub avge2: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cloud: GaussianCloud,
    pub optimizer: OptimizerState,
    pub losses: Vec<LossRow>,
    pub metrics: Vec<MetricRow>,
    pub prior_calls: usize,
    pub zero_variance: usize,
    pub spikes: usize,
}

/// Independent random streams per iteration.
mod stream {
    pub const SEEN: u64 = 1;
    pub const PSEUDO_POSE: u64 = 2;
    pub const PRIOR: u64 = 3;
    pub const DENSIFY: u64 = 4;
}

/// Counter-based generator keyed by seed, iteration, purpose, and slot.
pub fn stream_rng(seed: u64, iteration: usize, purpose: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 16) | (purpose << 8) | (slot & 0xff));
    rng
}

/// Random initial cloud inside the scene bounds.
pub fn initial_cloud(config: &TrainConfig, bounds: &SceneBounds) -> GaussianCloud {
    let spec = InitSpec {
        count: config.init_count,
        bounds: *bounds,
        sh_degree: config.sh_degree,
        initial_opacity: config.init_opacity,
    };
    init_synthetic(&spec, &mut stream_rng(config.seed, 0, 0, 0))
}

pub fn render_options(config: &TrainConfig) -> RenderOptions {
    RenderOptions {
        background: config.background,
        normalize_depth: true,
    }
}

/// Linear warm-up factor for the prior-window terms.
pub fn ramp(config: &TrainConfig, iteration: usize) -> f64 {
    if iteration < config.prior_start || iteration > config.prior_end {
        return 0.0;
    }
    if config.warmup_iters == 0 {
        return 1.0;
    }
    ((iteration - config.prior_start + 1) as f64 / config.warmup_iters as f64).min(1.0)
}

fn zero_variance_as_zero(
    r: Result<Loss, LossError>,
    shape: &Image,
    skipped: &mut usize,
) -> Result<Loss, LossError> {
    match r {
        Err(LossError::ZeroVariance) | Err(LossError::TooShort(_)) => {
            *skipped += 1;
            Ok(Loss {
                value: 0.0,
                grad: Image::new(shape.width(), shape.height(), 1),
            })
        }
        other => other,
    }
}

fn axpy(acc: &mut Image, a: f64, x: &Image) {
    for (y, v) in acc.data_mut().iter_mut().zip(x.data()) {
        *y += a * v;
    }
}

fn nearest_seen(pose: &Pose, seen: &[Pose], extent: f64) -> usize {
    seen.iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            pose_distance(pose, a, extent).total_cmp(&pose_distance(pose, b, extent))
        })
        .map(|(i, _)| i)
        .unwrap_or(0)
}

pub fn train(
    config: &TrainConfig,
    init: GaussianCloud,
    data: &TrainData<'_>,
    prior: Option<&dyn PriorSource>,
) -> Result<TrainOutcome, TrainError> {
    train_with_checkpoints(config, init, data, prior, |_, _| {})
}

/// [`train`], calling `on_checkpoint` every `checkpoint_interval` iterations.
pub fn train_with_checkpoints(
    config: &TrainConfig,
    init: GaussianCloud,
    data: &TrainData<'_>,
    prior: Option<&dyn PriorSource>,
    mut on_checkpoint: impl FnMut(usize, &GaussianCloud),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.seen.is_empty() {
        return Err(TrainError::NoSeenViews);
    }
    let w = config.weights;
    if w.ipsm > 0.0 && prior.is_none() {
        return Err(TrainError::MissingPrior);
    }
    if w.ipsm > 0.0 || w.geo > 0.0 {
        if let Some(v) = data.seen.iter().find(|v| v.depth.is_none()) {
            return Err(TrainError::MissingDepth(v.name.clone()));
        }
    }
    let cam = &data.camera;
    let extent = data.bounds.extent;
    let opts = render_options(config);
    let schedule = NoiseSchedule::default();
    let ipsm_opts = IpsmOptions {
        eta_r: config.eta_r,
        guidance: config.guidance,
        rectified_guidance: config.rectified_guidance,
        shared_draw: config.shared_draw,
        anchor: config.anchor,
    };
    let seen_poses: Vec<Pose> = data.seen.iter().map(|v| v.pose).collect();
    let pseudo_needed = w.ipsm > 0.0 || w.geo > 0.0 || w.depth > 0.0;
    let densify_params = DensifyParams {
        grad_threshold: config.grad_threshold,
        percent_dense: config.percent_dense,
        extent,
        k: config.k_unpool,
    };

    let mut cloud = init;
    let mut optimizer = OptimizerState::new(&cloud, config.lr, extent, config.total_iters as u64);
    let mut stats = DensificationStats::new(cloud.len());
    let mut losses = Vec::with_capacity(config.total_iters);
    let mut metrics = Vec::new();
    let (mut prior_calls, mut zero_variance, mut spikes) = (0, 0, 0);
    let mut prev_total: Option<f64> = None;

    for iteration in 1..=config.total_iters {
        let mut seen_rng = stream_rng(config.seed, iteration, stream::SEEN, 0);
        let view = data.seen[seen_rng.random_range(0..data.seen.len())];
        let out = render(&cloud, cam, &view.pose, &opts)?;
        let mut parts = LossParts::default();
        let l1 = l1_loss(&out.color, &view.image, config.band)?;
        let ss = ssim_loss(&out.color, &view.image)?;
        parts.l1 = l1.value;
        parts.ssim = ss.value;
        let mut dcolor = Image::new(cam.width, cam.height, 3);
        axpy(&mut dcolor, w.l1, &l1.grad);
        axpy(&mut dcolor, w.ssim, &ss.grad);
        let mut ddepth = Image::new(cam.width, cam.height, 1);
        let seen_coef = if iteration <= config.prior_end {
            config.eta_d
        } else {
            config.late_seen_depth_weight
        };
        if let (true, Some(oracle)) = (w.depth > 0.0, view.depth.as_ref()) {
            let pair = DepthPair {
                rendered: &out.depth,
                oracle,
                accum_alpha: &out.accum_alpha,
            };
            let term = zero_variance_as_zero(
                depth_term(pair, config.correlation),
                &out.depth,
                &mut zero_variance,
            )?;
            parts.depth += seen_coef * term.value;
            axpy(&mut ddepth, w.depth * seen_coef, &term.grad);
        }
        let mut grads = render_backward(&cloud, &out, &dcolor, &ddepth)?;
        let densifying = config.densify_interval > 0 && iteration <= config.densify_until;
        if densifying {
            stats.accumulate(&out, &grads);
        }

        let r = ramp(config, iteration);
        let prior_active = pseudo_needed && r > 0.0;
        let mut mask_fraction = 0.0;
        if prior_active {
            let share = 1.0 / config.pseudo_views as f64;
            for k in 0..config.pseudo_views {
                let mut pose_rng =
                    stream_rng(config.seed, iteration, stream::PSEUDO_POSE, k as u64);
                let mut sampler = PseudoViewSampler::new(PseudoViewConfig {
                    seed: pose_rng.random(),
                    rotation_jitter: config.rotation_jitter,
                    translation_jitter: config.translation_jitter,
                    interpolate: config.interpolate_pseudo,
                })?;
                let pose = sampler.sample(&seen_poses)?;
                let src_idx = nearest_seen(&pose, &seen_poses, extent);
                let src = data.seen[src_idx];
                let pout = render(&cloud, cam, &pose, &opts)?;
                let targets = match prior {
                    Some(p) if w.ipsm > 0.0 || w.depth > 0.0 => Some(p.targets(&pose, src_idx)?),
                    _ => None,
                };
                let rel = relative_pose(&pose, &src.pose);
                let mut pc = Image::new(cam.width, cam.height, 3);
                let mut pd = Image::new(cam.width, cam.height, 1);
                if w.ipsm > 0.0 {
                    let t = targets.as_ref().expect("prior presence checked above");
                    let src_depth = src.depth.as_ref().expect("seen depth checked above");
                    let warp = inverse_warp(
                        &src.image,
                        src_depth,
                        &pout.depth,
                        &rel,
                        cam,
                        config.tau_ipsm,
                        DepthUnits::World,
                    )?;
                    let mut prior_rng = stream_rng(config.seed, iteration, stream::PRIOR, k as u64);
                    let step = ipsm_grad(
                        &pout.color,
                        &warp,
                        t.prior.as_ref(),
                        t.rectified.as_ref(),
                        &schedule,
                        &ipsm_opts,
                        &mut prior_rng,
                    )?;
                    prior_calls += 1;
                    let value = step
                        .g1
                        .data()
                        .iter()
                        .zip(step.g2.data())
                        .map(|(a, b)| config.eta_r * a * a + b * b)
                        .sum::<f64>();
                    parts.ipsm += share * value;
                    axpy(&mut pc, share * r * w.ipsm, &step.grad);
                    mask_fraction += share * warp.valid_fraction;
                }
                if w.geo > 0.0 {
                    let src_depth = src.depth.as_ref().expect("seen depth checked above");
                    let warp = inverse_warp(
                        &src.image,
                        src_depth,
                        &pout.depth,
                        &rel,
                        cam,
                        config.tau_geo,
                        DepthUnits::World,
                    )?;
                    let geo = geo_loss(&pout.color, &warp)?;
                    parts.geo += share * geo.value;
                    axpy(&mut pc, share * r * w.geo, &geo.grad);
                }
                if let (true, Some(oracle)) = (
                    w.depth > 0.0,
                    targets.as_ref().and_then(|t| t.depth.as_ref()),
                ) {
                    let pair = DepthPair {
                        rendered: &pout.depth,
                        oracle,
                        accum_alpha: &pout.accum_alpha,
                    };
                    let term = zero_variance_as_zero(
                        depth_term(pair, config.correlation),
                        &pout.depth,
                        &mut zero_variance,
                    )?;
                    parts.depth += share * r * term.value;
                    axpy(&mut pd, share * r * w.depth, &term.grad);
                }
                let pg = render_backward(&cloud, &pout, &pc, &pd)?;
                grads.add_scaled(&pg, 1.0);
            }
        }

        let effective = LossWeights {
            geo: w.geo * r,
            ipsm: w.ipsm * r,
            ..w
        };
        let breakdown = total_loss(parts, &effective)?;
        if !breakdown.total.is_finite() || !grads.is_finite() {
            return Err(TrainError::Diverged {
                iteration,
                checkpoint: Box::new(cloud),
            });
        }
        let spike = prev_total.is_some_and(|p| p > 0.0 && breakdown.total > 10.0 * p);
        spikes += spike as usize;
        prev_total = Some(breakdown.total);

        let position_lr = optimizer.position_lr(optimizer.step);
        optimizer.step(&mut cloud, &grads);
        cloud.renormalize_rotations();

        maintain(
            config,
            iteration,
            &mut cloud,
            &mut optimizer,
            &mut stats,
            &densify_params,
        );

        losses.push(LossRow {
            iteration,
            breakdown,
            weights: effective,
            ramp: r,
            seen_depth_coef: seen_coef,
            prior_active,
            mask_fraction,
            gaussians: cloud.len(),
            position_lr,
            spike,
        });
        if config.eval_interval > 0
            && iteration % config.eval_interval == 0
            && iteration != config.total_iters
        {
            if let Some(m) = metric_row(&cloud, data, config, iteration)? {
                metrics.push(m);
            }
        }
        if config.checkpoint_interval > 0 && iteration % config.checkpoint_interval == 0 {
            on_checkpoint(iteration, &cloud);
        }
    }
    if let Some(m) = metric_row(&cloud, data, config, config.total_iters)? {
        metrics.push(m);
    }
    Ok(TrainOutcome {
        cloud,
        optimizer,
        losses,
        metrics,
        prior_calls,
        zero_variance,
        spikes,
    })
}

fn metric_row(
    cloud: &GaussianCloud,
    data: &TrainData<'_>,
    config: &TrainConfig,
    iteration: usize,
) -> Result<Option<MetricRow>, TrainError> {
    if data.validation.is_empty() {
        return Ok(None);
    }
    let opts = EvalOptions {
        render: render_options(config),
        ..EvalOptions::default()
    };
    let report = evaluate(cloud, &data.camera, &data.validation, &opts)?;
    Ok(Some(MetricRow {
        iteration,
        psnr: report.mean.psnr,
        ssim: report.mean.ssim,
        avge2: report.mean.avge2,
    }))
}

/// Density control, pruning, opacity resets, and SH level-up for the end of `iteration`.
fn maintain(
    config: &TrainConfig,
    iteration: usize,
    cloud: &mut GaussianCloud,
    optimizer: &mut OptimizerState,
    stats: &mut DensificationStats,
    params: &DensifyParams,
) {
    if config.densify_interval > 0
        && iteration % config.densify_interval == 0
        && iteration >= config.densify_from
        && iteration <= config.densify_until
    {
        if cloud.len() < config.max_gaussians {
            let mut rng = stream_rng(config.seed, iteration, stream::DENSIFY, 0);
            let report = densify_and_unpool(cloud, stats, params, &mut rng);
            optimizer.extend_to(report.keep.len());
            optimizer.retain(&report.keep);
        }
        stats.reset(cloud.len());
    }
    if config.prune_interval > 0 && iteration % config.prune_interval == 0 {
        let keep = prune(cloud, config.prune_opacity);
        optimizer.retain(&keep);
        stats.retain(&keep);
    }
    if config.opacity_reset_iters.contains(&iteration) {
        reset_opacity(cloud, config.reset_opacity_target);
        optimizer.zero_opacity_moments();
    }
    if config.sh_level_interval > 0 && iteration % config.sh_level_interval == 0 {
        cloud.active_sh_degree = (cloud.active_sh_degree + 1).min(cloud.sh_degree());
    }
    assert!(
        optimizer.is_congruent(cloud) && stats.len() == cloud.len(),
        "optimizer state or statistics out of step with the cloud"
    );
}
