//! Two-mode basin experiment: plain score distillation versus the rectified
//! gradient, both descending on a free image `x0` against a mixture prior with
//! a target mode `m^T` and a failure mode `m^F`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{
    ipsm_grad_with_condition, sds_grad, G2Anchor, GaussianMixtureOracle, IpsmOptions,
    NoiseSchedule, ScoreCondition, ScoreError,
};
use crate::image::{Image, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct ModeDemoConfig {
    pub width: usize,
    pub height: usize,
    /// Per-coordinate standard deviation of each mixture component.
    pub component_std: f64,
    pub guidance: f64,
    pub eta_r: f64,
    pub anchor: G2Anchor,
    pub shared_draw: bool,
    pub seeds: u64,
    pub first_seed: u64,
    pub iterations: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_final_fraction: f64,
    /// Start at `midpoint + init_bias·(m^F − m^T)`, i.e. nearer the failure mode.
    pub init_bias: f64,
    /// Standard deviation of per-seed jitter on the start point, as a fraction of `‖m^T − m^F‖/√D`.
    pub init_jitter: f64,
    /// Fraction of pixels observed by the inpainting condition.
    pub observed_fraction: f64,
    /// Success radius as a fraction of `‖m^T − m^F‖`.
    pub radius: f64,
    /// Record distances every this many iterations (0 disables trajectories).
    pub trajectory_stride: usize,
    pub scene_seed: u64,
}

impl Default for ModeDemoConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            component_std: 0.05,
            guidance: 7.5,
            eta_r: 0.1,
            anchor: G2Anchor::RectifiedRenoised,
            shared_draw: true,
            seeds: 100,
            first_seed: 0,
            iterations: 1000,
            lr: 0.5,
            lr_final_fraction: 0.05,
            init_bias: 0.1,
            init_jitter: 0.1,
            observed_fraction: 0.5,
            radius: 0.1,
            trajectory_stride: 0,
            scene_seed: 7,
        }
    }
}

/// Target and failure modes plus the conditioning that singles out the target.
#[derive(Debug, Clone)]
pub struct ModeScene {
    pub m_t: Image,
    pub m_f: Image,
    pub oracle: GaussianMixtureOracle,
    pub condition: ScoreCondition,
}

impl ModeScene {
    pub fn new(cfg: &ModeDemoConfig) -> Result<Self, ScoreError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.scene_seed);
        let d = cfg.width * cfg.height * 3;
        // The failure mode is the photographic negative of the target.
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let m_f = Image::from_vec(
            cfg.width,
            cfg.height,
            3,
            v.iter().map(|x| 1.0 - x).collect(),
        )
        .unwrap();
        let m_t = Image::from_vec(cfg.width, cfg.height, 3, v).unwrap();
        let oracle = GaussianMixtureOracle::new(
            vec![m_t.clone(), m_f.clone()],
            vec![0.5, 0.5],
            cfg.component_std * cfg.component_std,
        )?;
        let observed = ((cfg.width as f64) * cfg.observed_fraction).round() as usize;
        let mut mask = Mask::new(cfg.width, cfg.height, false);
        let mut masked = Image::new(cfg.width, cfg.height, 3);
        for y in 0..cfg.height {
            for x in 0..observed.min(cfg.width) {
                mask.set(x, y, true);
                for c in 0..3 {
                    masked.set(x, y, c, m_t.get(x, y, c));
                }
            }
        }
        Ok(Self {
            m_t,
            m_f,
            oracle,
            condition: ScoreCondition::Inpaint {
                masked_image: masked,
                mask,
            },
        })
    }

    pub fn separation(&self) -> f64 {
        dist(&self.m_t, &self.m_f)
    }
}

fn dist(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Final distances to (m^T, m^F), normalized by the mode separation.
    pub sds_final: (f64, f64),
    pub ipsm_final: (f64, f64),
    /// `(iteration, sds_to_t, sds_to_f, ipsm_to_t, ipsm_to_f)`, normalized.
    pub trajectory: Vec<(usize, f64, f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeDemoReport {
    pub outcomes: Vec<SeedOutcome>,
    pub separation: f64,
    pub radius: f64,
}

impl ModeDemoReport {
    /// Fraction of seeds where SDS ended within the radius of m^F.
    pub fn sds_failure_rate(&self) -> f64 {
        self.rate(|o| o.sds_final.1 <= self.radius)
    }

    /// Fraction of seeds where SDS ended within the radius of m^T.
    pub fn sds_target_rate(&self) -> f64 {
        self.rate(|o| o.sds_final.0 <= self.radius)
    }

    /// Fraction of seeds where the rectified gradient ended within the radius of m^T.
    pub fn ipsm_target_rate(&self) -> f64 {
        self.rate(|o| o.ipsm_final.0 <= self.radius)
    }

    fn rate(&self, f: impl Fn(&SeedOutcome) -> bool) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| f(o)).count() as f64 / self.outcomes.len() as f64
    }

    /// CSV of per-seed trajectories.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("seed,iteration,sds_to_t,sds_to_f,ipsm_to_t,ipsm_to_f\n");
        for o in &self.outcomes {
            for &(it, a, b, c, d) in &o.trajectory {
                s.push_str(&format!("{},{it},{a},{b},{c},{d}\n", o.seed));
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "seeds={} separation={:.4} radius={} sds_to_failure={:.3} sds_to_target={:.3} ipsm_to_target={:.3}",
            self.outcomes.len(),
            self.separation,
            self.radius,
            self.sds_failure_rate(),
            self.sds_target_rate(),
            self.ipsm_target_rate()
        )
    }
}

fn lr_at(cfg: &ModeDemoConfig, it: usize) -> f64 {
    let p = it as f64 / cfg.iterations.max(1) as f64;
    let f = cfg.lr_final_fraction
        + (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    cfg.lr * f
}

fn descend(img: &mut Image, grad: &Image, lr: f64) {
    for (x, g) in img.data_mut().iter_mut().zip(grad.data()) {
        *x -= lr * g;
    }
}

pub fn run_mode_demo(
    cfg: &ModeDemoConfig,
    schedule: &NoiseSchedule,
) -> Result<ModeDemoReport, ScoreError> {
    let scene = ModeScene::new(cfg)?;
    let opts = IpsmOptions {
        eta_r: cfg.eta_r,
        guidance: cfg.guidance,
        rectified_guidance: cfg.guidance,
        shared_draw: cfg.shared_draw,
        anchor: cfg.anchor,
    };
    let outcomes = (cfg.first_seed..cfg.first_seed + cfg.seeds)
        .into_par_iter()
        .map(|seed| run_seed(cfg, &scene, schedule, &opts, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModeDemoReport {
        outcomes,
        separation: scene.separation(),
        radius: cfg.radius,
    })
}

fn run_seed(
    cfg: &ModeDemoConfig,
    scene: &ModeScene,
    schedule: &NoiseSchedule,
    opts: &IpsmOptions,
    seed: u64,
) -> Result<SeedOutcome, ScoreError> {
    let sep = scene.separation();
    let d = scene.m_t.len();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(0);
    let jitter = cfg.init_jitter * sep / (d as f64).sqrt();
    let init_data = scene
        .m_t
        .data()
        .iter()
        .zip(scene.m_f.data())
        .map(|(t, f)| {
            let mid = 0.5 * (t + f);
            mid + cfg.init_bias * (f - t) + jitter * init_rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let init = Image::from_vec(cfg.width, cfg.height, 3, init_data).unwrap();

    let mut sds_rng = ChaCha8Rng::seed_from_u64(seed);
    sds_rng.set_stream(1);
    let mut ipsm_rng = ChaCha8Rng::seed_from_u64(seed);
    ipsm_rng.set_stream(2);
    let (mut xs, mut xi) = (init.clone(), init);
    let mut trajectory = Vec::new();
    for it in 0..cfg.iterations {
        if cfg.trajectory_stride > 0 && it % cfg.trajectory_stride == 0 {
            trajectory.push((
                it,
                dist(&xs, &scene.m_t) / sep,
                dist(&xs, &scene.m_f) / sep,
                dist(&xi, &scene.m_t) / sep,
                dist(&xi, &scene.m_f) / sep,
            ));
        }
        let lr = lr_at(cfg, it);
        let g = sds_grad(&xs, &scene.oracle, schedule, &mut sds_rng, cfg.guidance)?;
        descend(&mut xs, &g.grad, lr);
        let g = ipsm_grad_with_condition(
            &xi,
            &scene.condition,
            &scene.oracle,
            &scene.oracle,
            schedule,
            opts,
            &mut ipsm_rng,
        )?;
        descend(&mut xi, &g.grad, lr);
    }
    Ok(SeedOutcome {
        seed,
        sds_final: (dist(&xs, &scene.m_t) / sep, dist(&xs, &scene.m_f) / sep),
        ipsm_final: (dist(&xi, &scene.m_t) / sep, dist(&xi, &scene.m_f) / sep),
        trajectory,
    })
}

/// `Γ(√ᾱ x0, √ᾱ m_t) / Γ(√ᾱ x0, √ᾱ m_f)` with Γ the Euclidean distance.
pub fn aliasing_ratio(alpha_bar: f64, x0: &Image, m_t: &Image, m_f: &Image) -> f64 {
    let s = alpha_bar.sqrt();
    let scaled = |a: &Image| a.map(|v| v * s);
    dist(&scaled(x0), &scaled(m_t)) / dist(&scaled(x0), &scaled(m_f))
}

/// Monte-Carlo version on noisy samples: `E‖x_t − √ᾱ m_t‖ / E‖x_t − √ᾱ m_f‖`
/// with `x_t = √ᾱ x0 + √(1−ᾱ) ε`.
pub fn aliasing_ratio_noisy<R: Rng + ?Sized>(
    alpha_bar: f64,
    x0: &Image,
    m_t: &Image,
    m_f: &Image,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (mut dt, mut df) = (0.0, 0.0);
    for _ in 0..samples {
        let (mut st, mut sf) = (0.0, 0.0);
        for ((x, t), f) in x0.data().iter().zip(m_t.data()).zip(m_f.data()) {
            let xt = a * x + b * rng.sample::<f64, _>(StandardNormal);
            st += (xt - a * t).powi(2);
            sf += (xt - a * f).powi(2);
        }
        dt += st.sqrt();
        df += sf.sqrt();
    }
    dt / df
}
