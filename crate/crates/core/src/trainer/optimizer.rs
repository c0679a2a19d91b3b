//! Adam with per-group learning rates and an exponentially decaying position rate.

use nalgebra::Vector3;

use crate::rasterizer::CloudGradients;
use crate::scene::GaussianCloud;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the spatial scale (scene extent).
    pub position_init: f64,
    pub position_final: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scaling: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            opacity: 0.05,
            scaling: 5e-3,
            rotation: 1e-3,
        }
    }
}

/// First and second moments for one parameter array with `width` values per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub width: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn new(width: usize, rows: usize) -> Self {
        Self {
            width,
            m: vec![0.0; width * rows],
            v: vec![0.0; width * rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len() / self.width
    }

    fn retain(&mut self, keep: &[bool]) {
        let w = self.width;
        let filter = |xs: &[f64]| -> Vec<f64> {
            xs.chunks(w)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(row, _)| row.iter().copied())
                .collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }

    fn resize(&mut self, rows: usize) {
        self.m.resize(rows * self.width, 0.0);
        self.v.resize(rows * self.width, 0.0);
    }

    fn zero(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
    }

    /// One Adam update of `params` in place; `lr(i)` gives the rate for value `i`.
    fn update(&mut self, params: &mut [f64], grads: &[f64], step: u64, lr: impl Fn(usize) -> f64) {
        let bc1 = 1.0 - BETA1.powi(step as i32);
        let bc2 = 1.0 - BETA2.powi(step as i32);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let m = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            let v = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= lr(i) * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub positions: Moments,
    pub rotations: Moments,
    pub log_scales: Moments,
    pub opacity: Moments,
    pub sh: Moments,
    pub step: u64,
    pub lr: LearningRates,
    pub spatial_scale: f64,
    /// Steps over which the position rate decays from init to final.
    pub decay_steps: u64,
}

fn update_vectors(
    moments: &mut Moments,
    params: &mut [Vector3<f64>],
    grads: &[Vector3<f64>],
    step: u64,
    lr: f64,
) {
    let mut flat: Vec<f64> = params.iter().flat_map(|v| v.iter().copied()).collect();
    let g: Vec<f64> = grads.iter().flat_map(|v| v.iter().copied()).collect();
    moments.update(&mut flat, &g, step, |_| lr);
    for (v, c) in params.iter_mut().zip(flat.chunks_exact(3)) {
        *v = Vector3::new(c[0], c[1], c[2]);
    }
}

impl OptimizerState {
    pub fn new(
        cloud: &GaussianCloud,
        lr: LearningRates,
        spatial_scale: f64,
        decay_steps: u64,
    ) -> Self {
        let n = cloud.len();
        Self {
            positions: Moments::new(3, n),
            rotations: Moments::new(4, n),
            log_scales: Moments::new(3, n),
            opacity: Moments::new(1, n),
            sh: Moments::new(cloud.sh_stride(), n),
            step: 0,
            lr,
            spatial_scale,
            decay_steps,
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Log-linear interpolation from `position_init` to `position_final`, times the spatial scale.
    pub fn position_lr(&self, step: u64) -> f64 {
        let t = if self.decay_steps == 0 {
            1.0
        } else {
            (step as f64 / self.decay_steps as f64).clamp(0.0, 1.0)
        };
        let (a, b) = (self.lr.position_init, self.lr.position_final);
        let lr = if a > 0.0 && b > 0.0 {
            ((1.0 - t) * a.ln() + t * b.ln()).exp()
        } else {
            (1.0 - t) * a + t * b
        };
        lr * self.spatial_scale
    }

    /// Every moment array has one row per Gaussian of `cloud`.
    pub fn is_congruent(&self, cloud: &GaussianCloud) -> bool {
        let n = cloud.len();
        [
            &self.positions,
            &self.rotations,
            &self.log_scales,
            &self.opacity,
            &self.sh,
        ]
        .iter()
        .all(|m| m.rows() == n && m.v.len() == m.m.len())
            && self.sh.width == cloud.sh_stride()
    }

    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &CloudGradients) {
        assert!(self.is_congruent(cloud) && grads.len() == cloud.len());
        self.step += 1;
        let step = self.step;
        let pos_lr = self.position_lr(step - 1);
        update_vectors(
            &mut self.positions,
            &mut cloud.positions,
            &grads.positions,
            step,
            pos_lr,
        );
        let rot_lr = self.lr.rotation;
        self.rotations.update(
            cloud.rotations.as_flattened_mut(),
            grads.rotations.as_flattened(),
            step,
            |_| rot_lr,
        );
        let scale_lr = self.lr.scaling;
        update_vectors(
            &mut self.log_scales,
            &mut cloud.log_scales,
            &grads.log_scales,
            step,
            scale_lr,
        );
        let op_lr = self.lr.opacity;
        self.opacity.update(
            &mut cloud.opacity_logits,
            &grads.opacity_logits,
            step,
            |_| op_lr,
        );
        let stride = self.sh.width;
        let (dc, rest) = (self.lr.sh_dc, self.lr.sh_rest);
        self.sh.update(&mut cloud.sh, &grads.sh, step, |i| {
            if i % stride < 3 {
                dc
            } else {
                rest
            }
        });
    }

    /// Drops rows whose `keep` flag is false.
    pub fn retain(&mut self, keep: &[bool]) {
        for m in self.groups_mut() {
            m.retain(keep);
        }
    }

    /// Appends zeroed rows up to `rows`.
    pub fn extend_to(&mut self, rows: usize) {
        for m in self.groups_mut() {
            m.resize(rows);
        }
    }

    pub fn zero_opacity_moments(&mut self) {
        self.opacity.zero();
    }

    fn groups_mut(&mut self) -> [&mut Moments; 5] {
        [
            &mut self.positions,
            &mut self.rotations,
            &mut self.log_scales,
            &mut self.opacity,
            &mut self.sh,
        ]
    }
}
