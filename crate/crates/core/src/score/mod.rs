//! Diffusion noise schedule, denoiser oracles, and score-distillation gradients.
//!
//! Everything here works on image-shaped vectors. Oracle outputs are treated
//! as constants w.r.t. the rendered image: gradients never flow through a
//! denoiser.

mod mixture;
mod mode_demo;
mod sampling;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use mixture::{GaussianMixtureOracle, MixtureDiagnostics};
pub use mode_demo::{
    aliasing_ratio, aliasing_ratio_noisy, run_mode_demo, ModeDemoConfig, ModeDemoReport, ModeScene,
    SeedOutcome,
};
pub use sampling::ancestral_sample;

use crate::image::{Image, Mask};
use crate::warp::WarpResult;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("invalid beta range [{0}, {1}]")]
    InvalidBetaRange(f64, f64),
    #[error("timestep {t} outside schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("image shapes disagree")]
    DimensionMismatch,
    #[error("all mixture weights underflowed")]
    DegenerateMixture,
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("negative rectification weight {0}")]
    NegativeWeight(f64),
}

/// Choice of the per-timestep weight ω(t).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// ω(t) = 1 − ᾱ_t.
    OneMinusAlphaBar,
    /// ω(t) = 1.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub weight: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Inclusive timestep sampling range.
    pub t_min: usize,
    pub t_max: usize,
}

/// Linear β schedule of length `steps`.
pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    mode: WeightMode,
) -> Result<NoiseSchedule, ScoreError> {
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) || steps == 0 {
        return Err(ScoreError::InvalidBetaRange(beta_start, beta_end));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    let weight = alpha_bar
        .iter()
        .map(|&a| match mode {
            WeightMode::OneMinusAlphaBar => 1.0 - a,
            WeightMode::Unit => 1.0,
        })
        .collect();
    let gamma = alpha_bar
        .iter()
        .map(|&a| (1.0 - a).sqrt() / a.sqrt())
        .collect();
    let t_min = (0.02 * steps as f64).round() as usize;
    let t_max = ((0.98 * steps as f64).round() as usize).clamp(t_min, steps - 1);
    Ok(NoiseSchedule {
        beta,
        alpha_bar,
        weight,
        gamma,
        t_min,
        t_max,
    })
}

impl Default for NoiseSchedule {
    /// T = 1000, β linear in [1e-4, 0.02], ω = 1 − ᾱ.
    fn default() -> Self {
        make_schedule(1000, 1e-4, 0.02, WeightMode::OneMinusAlphaBar).expect("valid defaults")
    }
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, t: usize) -> Result<(), ScoreError> {
        if t >= self.len() {
            return Err(ScoreError::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.t_min..=self.t_max)
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, x0: &Image, t: usize, eps: &Image) -> Result<Image, ScoreError> {
        self.check(t)?;
        if !x0.same_shape(eps) {
            return Err(ScoreError::DimensionMismatch);
        }
        let (a, b) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
        Ok(zip_map(x0, eps, |x, e| a * x + b * e))
    }

    /// `x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
    pub fn predict_x0(&self, x_t: &Image, eps_hat: &Image, t: usize) -> Result<Image, ScoreError> {
        self.check(t)?;
        if !x_t.same_shape(eps_hat) {
            return Err(ScoreError::DimensionMismatch);
        }
        let (a, b) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
        Ok(zip_map(x_t, eps_hat, |x, e| (x - b * e) / a))
    }
}

pub(crate) fn zip_map(a: &Image, b: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Image::from_vec(a.width(), a.height(), a.channels(), data).unwrap()
}

pub(crate) fn standard_normal_like<R: Rng + ?Sized>(shape: &Image, rng: &mut R) -> Image {
    let data = (0..shape.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Image::from_vec(shape.width(), shape.height(), shape.channels(), data).unwrap()
}

/// Conditioning passed to a denoiser.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreCondition {
    Unconditional,
    /// Known pixels `masked_image` wherever `mask` is set.
    Inpaint {
        masked_image: Image,
        mask: Mask,
    },
}

impl ScoreCondition {
    /// Builds the inpainting condition `(M ⊙ I^{i→j}, M)` from a warp.
    pub fn from_warp(warp: &WarpResult) -> Self {
        let mut masked = warp.warped_image.clone();
        let ch = masked.channels();
        for y in 0..masked.height() {
            for x in 0..masked.width() {
                if !warp.mask.get(x, y) {
                    for c in 0..ch {
                        masked.set(x, y, c, 0.0);
                    }
                }
            }
        }
        ScoreCondition::Inpaint {
            masked_image: masked,
            mask: warp.mask.clone(),
        }
    }
}

/// Noise-prediction network interface.
pub trait DenoiserOracle: Sync {
    fn predict_noise(
        &self,
        x_t: &Image,
        t: usize,
        schedule: &NoiseSchedule,
        condition: &ScoreCondition,
        guidance: f64,
    ) -> Result<Image, ScoreError>;

    /// Identical inputs give identical outputs.
    fn is_stateless(&self) -> bool {
        true
    }
}

/// One SDS sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SdsStep {
    pub grad: Image,
    pub t: usize,
}

/// `ω(t)·(ε_*(x_t, t) − ε)` for one draw of `(t, ε)`.
pub fn sds_grad<R: Rng + ?Sized>(
    x0: &Image,
    prior: &dyn DenoiserOracle,
    schedule: &NoiseSchedule,
    rng: &mut R,
    guidance: f64,
) -> Result<SdsStep, ScoreError> {
    let t = schedule.sample_t(rng);
    let eps = standard_normal_like(x0, rng);
    sds_grad_at(x0, prior, schedule, t, &eps, guidance)
}

/// SDS gradient for a fixed draw.
pub fn sds_grad_at(
    x0: &Image,
    prior: &dyn DenoiserOracle,
    schedule: &NoiseSchedule,
    t: usize,
    eps: &Image,
    guidance: f64,
) -> Result<SdsStep, ScoreError> {
    let x_t = schedule.add_noise(x0, t, eps)?;
    let eps_star =
        prior.predict_noise(&x_t, t, schedule, &ScoreCondition::Unconditional, guidance)?;
    let w = schedule.weight[t];
    Ok(SdsStep {
        grad: zip_map(&eps_star, eps, |a, b| w * (a - b)),
        t,
    })
}

/// Where the prior-matching term (G2) is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum G2Anchor {
    /// `ω(ε_*(x_t) − ε_φ(x_t))` on the noisy render itself.
    SharedNoisy,
    /// `ω(ε_*(x_t^R) − ε)` where `x_t^R` re-noises the rectified estimate
    /// `x̂0^φ = predict_x0(x_t, ε_φ)` with the same `(t, ε)`.
    RectifiedRenoised,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpsmOptions {
    pub eta_r: f64,
    pub guidance: f64,
    /// Guidance used for the rectified (inpainting) oracle.
    pub rectified_guidance: f64,
    /// One `(t, ε)` draw for both terms; otherwise G2 draws its own.
    pub shared_draw: bool,
    pub anchor: G2Anchor,
}

impl Default for IpsmOptions {
    fn default() -> Self {
        Self {
            eta_r: 0.1,
            guidance: 7.5,
            rectified_guidance: 7.5,
            shared_draw: true,
            anchor: G2Anchor::RectifiedRenoised,
        }
    }
}

/// IPSM gradient and its two parts; `grad = eta_r·g1 + g2`.
#[derive(Debug, Clone, PartialEq)]
pub struct IpsmStep {
    pub grad: Image,
    /// `ω(ε_φ − ε)`, before scaling by `eta_r`.
    pub g1: Image,
    pub g2: Image,
    pub t: usize,
    pub t_g2: usize,
}

/// Rectified score-matching gradient for a pseudo-view render `x0`.
pub fn ipsm_grad<R: Rng + ?Sized>(
    x0: &Image,
    warp: &WarpResult,
    prior: &dyn DenoiserOracle,
    rectified: &dyn DenoiserOracle,
    schedule: &NoiseSchedule,
    opts: &IpsmOptions,
    rng: &mut R,
) -> Result<IpsmStep, ScoreError> {
    if !x0.same_shape(&warp.warped_image) {
        return Err(ScoreError::DimensionMismatch);
    }
    ipsm_grad_with_condition(
        x0,
        &ScoreCondition::from_warp(warp),
        prior,
        rectified,
        schedule,
        opts,
        rng,
    )
}

/// As [`ipsm_grad`] but with an explicit inpainting condition.
pub fn ipsm_grad_with_condition<R: Rng + ?Sized>(
    x0: &Image,
    condition: &ScoreCondition,
    prior: &dyn DenoiserOracle,
    rectified: &dyn DenoiserOracle,
    schedule: &NoiseSchedule,
    opts: &IpsmOptions,
    rng: &mut R,
) -> Result<IpsmStep, ScoreError> {
    if !(opts.eta_r >= 0.0) {
        return Err(ScoreError::NegativeWeight(opts.eta_r));
    }
    if let ScoreCondition::Inpaint { masked_image, .. } = condition {
        if !x0.same_shape(masked_image) {
            return Err(ScoreError::DimensionMismatch);
        }
    }
    let t = schedule.sample_t(rng);
    let eps = standard_normal_like(x0, rng);
    let x_t = schedule.add_noise(x0, t, &eps)?;
    let eps_phi = rectified.predict_noise(&x_t, t, schedule, condition, opts.rectified_guidance)?;
    let w = schedule.weight[t];
    let g1 = zip_map(&eps_phi, &eps, |a, b| w * (a - b));

    let (t2, eps2, x_t2, eps_phi2) = if opts.shared_draw {
        (t, eps, x_t, eps_phi)
    } else {
        let t2 = schedule.sample_t(rng);
        let eps2 = standard_normal_like(x0, rng);
        let x_t2 = schedule.add_noise(x0, t2, &eps2)?;
        let eps_phi2 =
            rectified.predict_noise(&x_t2, t2, schedule, condition, opts.rectified_guidance)?;
        (t2, eps2, x_t2, eps_phi2)
    };
    let w2 = schedule.weight[t2];
    let uncond = ScoreCondition::Unconditional;
    let g2 = match opts.anchor {
        G2Anchor::SharedNoisy => {
            let eps_star = prior.predict_noise(&x_t2, t2, schedule, &uncond, opts.guidance)?;
            zip_map(&eps_star, &eps_phi2, |a, b| w2 * (a - b))
        }
        G2Anchor::RectifiedRenoised => {
            let x0_phi = schedule.predict_x0(&x_t2, &eps_phi2, t2)?;
            let x_t_r = schedule.add_noise(&x0_phi, t2, &eps2)?;
            let eps_star = prior.predict_noise(&x_t_r, t2, schedule, &uncond, opts.guidance)?;
            zip_map(&eps_star, &eps2, |a, b| w2 * (a - b))
        }
    };
    let grad = zip_map(&g1, &g2, |a, b| opts.eta_r * a + b);
    Ok(IpsmStep {
        grad,
        g1,
        g2,
        t,
        t_g2: t2,
    })
}

/// Stop-gradient surrogate `½‖x0 − sg(x0_ref − grad)‖²` whose gradient at
/// `x0 = x0_ref` is exactly `grad`; used to express a sampled score
/// gradient as a scalar loss for logging and finite-difference checks.
pub fn surrogate_loss(x0: &Image, x0_ref: &Image, grad: &Image) -> f64 {
    x0.data()
        .iter()
        .zip(x0_ref.data())
        .zip(grad.data())
        .map(|((&x, &r), &g)| {
            let d = x - (r - g);
            0.5 * d * d
        })
        .sum::<f64>()
        - 0.5 * grad.data().iter().map(|g| g * g).sum::<f64>()
}
