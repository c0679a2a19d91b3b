//! Training hyperparameters, dataset presets, and their text form.

use std::fmt::Display;
use std::str::FromStr;

use crate::io::Config;
use crate::regularizers::{CorrelationLoss, IntensityBand, LossWeights};
use crate::score::G2Anchor;

use super::optimizer::LearningRates;
use super::TrainError;

pub const SECTION: &str = "train";

/// Hyperparameter presets for forward-facing and object-centric scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Llff,
    Dtu,
}

impl FromStr for Profile {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s.to_ascii_lowercase().as_str() {
            "llff" => Ok(Profile::Llff),
            "dtu" => Ok(Profile::Dtu),
            other => Err(TrainError::Config(format!("unknown profile `{other}`"))),
        }
    }
}

impl Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Llff => "llff",
            Profile::Dtu => "dtu",
        })
    }
}

/// Schedule anchors as fractions of the run length.
pub mod fraction {
    pub const PRIOR_START: f64 = 0.2;
    pub const PRIOR_END: f64 = 0.95;
    pub const WARMUP: f64 = 0.05;
    pub const DENSIFY_FROM: f64 = 0.05;
    pub const DENSIFY_UNTIL: f64 = 0.5;
    pub const DENSIFY_INTERVAL: f64 = 0.01;
    pub const PRUNE_INTERVAL: f64 = 0.05;
    pub const SH_LEVEL_INTERVAL: f64 = 0.05;
    pub const OPACITY_RESET: f64 = 0.2;
    /// Spacing of the repeated resets of the object-centric profile.
    pub const OPACITY_RESET_REPEAT: f64 = 0.1;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub total_iters: usize,
    pub prior_start: usize,
    pub prior_end: usize,
    pub warmup_iters: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    /// 0 disables the corresponding schedule.
    pub densify_interval: usize,
    pub prune_interval: usize,
    pub sh_level_interval: usize,
    pub opacity_reset_iters: Vec<usize>,
    pub tau_ipsm: f64,
    pub tau_geo: f64,
    pub weights: LossWeights,
    pub eta_r: f64,
    pub eta_d: f64,
    /// Seen-view depth coefficient once the prior window has closed.
    pub late_seen_depth_weight: f64,
    pub guidance: f64,
    pub rectified_guidance: f64,
    pub shared_draw: bool,
    pub anchor: G2Anchor,
    pub correlation: CorrelationLoss,
    pub band: Option<IntensityBand>,
    pub lr: LearningRates,
    pub k_unpool: usize,
    pub grad_threshold: f64,
    pub percent_dense: f64,
    pub prune_opacity: f64,
    pub reset_opacity_target: f64,
    pub max_gaussians: usize,
    pub pseudo_views: usize,
    pub rotation_jitter: f64,
    pub translation_jitter: f64,
    pub interpolate_pseudo: bool,
    pub background: [f64; 3],
    pub init_count: usize,
    pub init_opacity: f64,
    pub sh_degree: usize,
    pub seed: u64,
    /// Iterations between held-out evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// Iterations between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
}

fn at(total: usize, f: f64) -> usize {
    (total as f64 * f).round() as usize
}

fn every(total: usize, f: f64) -> usize {
    at(total, f).max(1)
}

impl TrainConfig {
    pub const DEFAULT_ITERS: usize = 10_000;

    pub fn new(profile: Profile, total_iters: usize) -> Self {
        let t = total_iters;
        let weights = match profile {
            Profile::Llff => LossWeights::default(),
            Profile::Dtu => LossWeights {
                l1: 0.4,
                ssim: 0.6,
                depth: 0.05,
                geo: 0.2,
                ipsm: 2.0,
            },
        };
        let opacity_reset_iters = match profile {
            Profile::Llff => vec![at(t, fraction::OPACITY_RESET)],
            Profile::Dtu => {
                let mut v = Vec::new();
                let mut f = fraction::OPACITY_RESET;
                while f < fraction::PRIOR_END {
                    v.push(at(t, f));
                    f += fraction::OPACITY_RESET_REPEAT;
                }
                v
            }
        };
        Self {
            profile,
            total_iters: t,
            prior_start: at(t, fraction::PRIOR_START),
            prior_end: at(t, fraction::PRIOR_END),
            warmup_iters: at(t, fraction::WARMUP),
            densify_from: at(t, fraction::DENSIFY_FROM),
            densify_until: at(t, fraction::DENSIFY_UNTIL),
            densify_interval: every(t, fraction::DENSIFY_INTERVAL),
            prune_interval: every(t, fraction::PRUNE_INTERVAL),
            sh_level_interval: every(t, fraction::SH_LEVEL_INTERVAL),
            opacity_reset_iters,
            tau_ipsm: 0.3,
            tau_geo: 0.1,
            weights,
            eta_r: 0.1,
            eta_d: 0.1,
            late_seen_depth_weight: 0.001,
            guidance: 7.5,
            rectified_guidance: 7.5,
            shared_draw: true,
            anchor: G2Anchor::RectifiedRenoised,
            correlation: CorrelationLoss::OneMinus,
            band: match profile {
                Profile::Llff => None,
                Profile::Dtu => Some(IntensityBand::default()),
            },
            lr: LearningRates::default(),
            k_unpool: 3,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            prune_opacity: 0.005,
            reset_opacity_target: 0.01,
            max_gaussians: 2_000,
            pseudo_views: 1,
            rotation_jitter: 0.05,
            translation_jitter: 0.02,
            interpolate_pseudo: true,
            background: [0.0; 3],
            init_count: 500,
            init_opacity: 0.1,
            sh_degree: 3,
            seed: 0,
            eval_interval: 0,
            checkpoint_interval: 0,
        }
    }

    /// The prior and regularizers switched off.
    pub fn without_priors(mut self) -> Self {
        self.weights.depth = 0.0;
        self.weights.geo = 0.0;
        self.weights.ipsm = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_iters > 0
            && !(self.prior_start < self.prior_end && self.prior_end <= self.total_iters)
        {
            return bad(format!(
                "prior window [{}, {}] must satisfy start < end <= {}",
                self.prior_start, self.prior_end, self.total_iters
            ));
        }
        let nonneg = [
            ("tau_ipsm", self.tau_ipsm),
            ("tau_geo", self.tau_geo),
            ("eta_r", self.eta_r),
            ("eta_d", self.eta_d),
            ("late_seen_depth_weight", self.late_seen_depth_weight),
            ("lambda_l1", self.weights.l1),
            ("lambda_ssim", self.weights.ssim),
            ("lambda_depth", self.weights.depth),
            ("lambda_geo", self.weights.geo),
            ("lambda_ipsm", self.weights.ipsm),
            ("guidance", self.guidance),
            ("rectified_guidance", self.rectified_guidance),
            ("rotation_jitter", self.rotation_jitter),
            ("translation_jitter", self.translation_jitter),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.tau_ipsm > 0.0 && self.tau_geo > 0.0) {
            return bad("depth thresholds must be positive".into());
        }
        if self.k_unpool == 0 {
            return bad("k_unpool must be at least 1".into());
        }
        if self.pseudo_views == 0 {
            return bad("pseudo_views must be at least 1".into());
        }
        for (name, v) in [
            ("prune_opacity", self.prune_opacity),
            ("reset_opacity_target", self.reset_opacity_target),
            ("init_opacity", self.init_opacity),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.sh_degree > crate::scene::MAX_SH_DEGREE {
            return bad(format!("sh_degree {} exceeds the maximum", self.sh_degree));
        }
        Ok(())
    }

    /// Every settable key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let band = self.band.unwrap_or_default();
        vec![
            ("profile", self.profile.to_string()),
            ("total_iters", self.total_iters.to_string()),
            ("prior_start", self.prior_start.to_string()),
            ("prior_end", self.prior_end.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("densify_from", self.densify_from.to_string()),
            ("densify_until", self.densify_until.to_string()),
            ("densify_interval", self.densify_interval.to_string()),
            ("prune_interval", self.prune_interval.to_string()),
            ("sh_level_interval", self.sh_level_interval.to_string()),
            ("opacity_reset_iters", list(&self.opacity_reset_iters)),
            ("tau_ipsm", self.tau_ipsm.to_string()),
            ("tau_geo", self.tau_geo.to_string()),
            ("lambda_l1", self.weights.l1.to_string()),
            ("lambda_ssim", self.weights.ssim.to_string()),
            ("lambda_depth", self.weights.depth.to_string()),
            ("lambda_geo", self.weights.geo.to_string()),
            ("lambda_ipsm", self.weights.ipsm.to_string()),
            ("eta_r", self.eta_r.to_string()),
            ("eta_d", self.eta_d.to_string()),
            (
                "late_seen_depth_weight",
                self.late_seen_depth_weight.to_string(),
            ),
            ("guidance", self.guidance.to_string()),
            ("rectified_guidance", self.rectified_guidance.to_string()),
            ("shared_draw", self.shared_draw.to_string()),
            (
                "g2_anchor",
                match self.anchor {
                    G2Anchor::SharedNoisy => "shared",
                    G2Anchor::RectifiedRenoised => "renoised",
                }
                .to_string(),
            ),
            (
                "depth_correlation",
                match self.correlation {
                    CorrelationLoss::OneMinus => "one-minus",
                    CorrelationLoss::Absolute => "absolute",
                }
                .to_string(),
            ),
            ("band_mask", self.band.is_some().to_string()),
            ("band_low", band.low.to_string()),
            ("band_high", band.high.to_string()),
            ("lr_position_init", self.lr.position_init.to_string()),
            ("lr_position_final", self.lr.position_final.to_string()),
            ("lr_sh_dc", self.lr.sh_dc.to_string()),
            ("lr_sh_rest", self.lr.sh_rest.to_string()),
            ("lr_opacity", self.lr.opacity.to_string()),
            ("lr_scaling", self.lr.scaling.to_string()),
            ("lr_rotation", self.lr.rotation.to_string()),
            ("k_unpool", self.k_unpool.to_string()),
            ("grad_threshold", self.grad_threshold.to_string()),
            ("percent_dense", self.percent_dense.to_string()),
            ("prune_opacity", self.prune_opacity.to_string()),
            (
                "reset_opacity_target",
                self.reset_opacity_target.to_string(),
            ),
            ("max_gaussians", self.max_gaussians.to_string()),
            ("pseudo_views", self.pseudo_views.to_string()),
            ("rotation_jitter", self.rotation_jitter.to_string()),
            ("translation_jitter", self.translation_jitter.to_string()),
            ("interpolate_pseudo", self.interpolate_pseudo.to_string()),
            (
                "background",
                self.background
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
            ("init_count", self.init_count.to_string()),
            ("init_opacity", self.init_opacity.to_string()),
            ("sh_degree", self.sh_degree.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
        ]
    }

    /// Sets one field from its text form. `profile` and `total_iters` only
    /// record the value; use [`TrainConfig::new`] to rebuild the schedule.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value
                .trim()
                .parse()
                .map_err(|_| TrainError::Config(format!("invalid value `{value}` for {key}")))
        }
        fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, TrainError> {
            value.split_whitespace().map(|v| p(key, v)).collect()
        }
        match key {
            "profile" => self.profile = value.parse()?,
            "total_iters" => self.total_iters = p(key, value)?,
            "prior_start" => self.prior_start = p(key, value)?,
            "prior_end" => self.prior_end = p(key, value)?,
            "warmup_iters" => self.warmup_iters = p(key, value)?,
            "densify_from" => self.densify_from = p(key, value)?,
            "densify_until" => self.densify_until = p(key, value)?,
            "densify_interval" => self.densify_interval = p(key, value)?,
            "prune_interval" => self.prune_interval = p(key, value)?,
            "sh_level_interval" => self.sh_level_interval = p(key, value)?,
            "opacity_reset_iters" => self.opacity_reset_iters = list(key, value)?,
            "tau_ipsm" => self.tau_ipsm = p(key, value)?,
            "tau_geo" => self.tau_geo = p(key, value)?,
            "lambda_l1" => self.weights.l1 = p(key, value)?,
            "lambda_ssim" => self.weights.ssim = p(key, value)?,
            "lambda_depth" => self.weights.depth = p(key, value)?,
            "lambda_geo" => self.weights.geo = p(key, value)?,
            "lambda_ipsm" => self.weights.ipsm = p(key, value)?,
            "eta_r" => self.eta_r = p(key, value)?,
            "eta_d" => self.eta_d = p(key, value)?,
            "late_seen_depth_weight" => self.late_seen_depth_weight = p(key, value)?,
            "guidance" => self.guidance = p(key, value)?,
            "rectified_guidance" => self.rectified_guidance = p(key, value)?,
            "shared_draw" => self.shared_draw = p(key, value)?,
            "g2_anchor" => {
                self.anchor = match value.trim() {
                    "shared" => G2Anchor::SharedNoisy,
                    "renoised" => G2Anchor::RectifiedRenoised,
                    _ => return Err(TrainError::Config(format!("invalid g2_anchor `{value}`"))),
                }
            }
            "depth_correlation" => {
                self.correlation = match value.trim() {
                    "one-minus" => CorrelationLoss::OneMinus,
                    "absolute" => CorrelationLoss::Absolute,
                    _ => {
                        return Err(TrainError::Config(format!(
                            "invalid depth_correlation `{value}`"
                        )))
                    }
                }
            }
            "band_mask" => {
                let on: bool = p(key, value)?;
                self.band = match (on, self.band) {
                    (false, _) => None,
                    (true, Some(b)) => Some(b),
                    (true, None) => Some(IntensityBand::default()),
                };
            }
            "band_low" | "band_high" => {
                let v: f64 = p(key, value)?;
                if let Some(b) = &mut self.band {
                    if key == "band_low" {
                        b.low = v;
                    } else {
                        b.high = v;
                    }
                }
            }
            "lr_position_init" => self.lr.position_init = p(key, value)?,
            "lr_position_final" => self.lr.position_final = p(key, value)?,
            "lr_sh_dc" => self.lr.sh_dc = p(key, value)?,
            "lr_sh_rest" => self.lr.sh_rest = p(key, value)?,
            "lr_opacity" => self.lr.opacity = p(key, value)?,
            "lr_scaling" => self.lr.scaling = p(key, value)?,
            "lr_rotation" => self.lr.rotation = p(key, value)?,
            "k_unpool" => self.k_unpool = p(key, value)?,
            "grad_threshold" => self.grad_threshold = p(key, value)?,
            "percent_dense" => self.percent_dense = p(key, value)?,
            "prune_opacity" => self.prune_opacity = p(key, value)?,
            "reset_opacity_target" => self.reset_opacity_target = p(key, value)?,
            "max_gaussians" => self.max_gaussians = p(key, value)?,
            "pseudo_views" => self.pseudo_views = p(key, value)?,
            "rotation_jitter" => self.rotation_jitter = p(key, value)?,
            "translation_jitter" => self.translation_jitter = p(key, value)?,
            "interpolate_pseudo" => self.interpolate_pseudo = p(key, value)?,
            "background" => {
                let v: Vec<f64> = list(key, value)?;
                self.background = v
                    .try_into()
                    .map_err(|_| TrainError::Config("background needs 3 values".into()))?;
            }
            "init_count" => self.init_count = p(key, value)?,
            "init_opacity" => self.init_opacity = p(key, value)?,
            "sh_degree" => self.sh_degree = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "eval_interval" => self.eval_interval = p(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = p(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Builds from the `[train]` section: the profile and `total_iters`
    /// choose the preset, and every other key overrides it.
    pub fn from_ini(cfg: &Config) -> Result<Self, TrainError> {
        let profile: Profile = cfg.get(SECTION, "profile").unwrap_or("llff").parse()?;
        let total = match cfg.get(SECTION, "total_iters") {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| TrainError::Config(format!("invalid total_iters `{v}`")))?,
            None => Self::DEFAULT_ITERS,
        };
        let mut out = Self::new(profile, total);
        for (k, v) in cfg.section(SECTION).unwrap_or_default() {
            if k != "profile" && k != "total_iters" {
                out.set(k, v)?;
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn to_ini(&self) -> Config {
        let mut cfg = Config::new();
        for (k, v) in self.entries() {
            cfg.set(SECTION, k, v);
        }
        cfg
    }
}
