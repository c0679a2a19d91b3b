//! Procedural ground-truth scenes observed by a ring of cameras.
//!
//! The scene is a textured backdrop plane behind a handful of coloured blobs.
//! Images and depths are rendered with the crate's own rasterizer, so the
//! generating cloud re-renders the training images exactly when no noise is added.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dataset::{even_split, Dataset, View};
use crate::geometry::{CameraIntrinsics, GeometryError, Pose};
use crate::image::Image;
use crate::rasterizer::{render, RenderError, RenderOptions};
use crate::scene::{logit, sh, GaussianCloud, SceneBounds};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub gaussian_count: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, radians.
    pub fov_x: f64,
    pub camera_count: usize,
    pub ring_radius: f64,
    /// Camera height above the look-at target.
    pub ring_elevation: f64,
    /// Angular span of the ring, radians; cameras are spread evenly over it.
    pub arc: f64,
    pub look_at: Vector3<f64>,
    pub train_count: usize,
    /// Standard deviation of additive image noise (images are clamped to [0, 1]).
    pub noise: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            gaussian_count: 300,
            width: 32,
            height: 32,
            fov_x: 60f64.to_radians(),
            camera_count: 12,
            ring_radius: 3.5,
            ring_elevation: 0.6,
            arc: 90f64.to_radians(),
            look_at: Vector3::zeros(),
            train_count: 3,
            noise: 0.0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::InvalidSpec(m.to_string()));
        if self.gaussian_count == 0 || self.camera_count == 0 {
            return bad("gaussian and camera counts must be at least 1");
        }
        if self.width < 16 || self.height < 16 {
            return bad("resolution must be at least 16 pixels per side");
        }
        if !(self.fov_x > 0.0 && self.fov_x < std::f64::consts::PI) {
            return bad("field of view must lie in (0, π)");
        }
        if !(self.ring_radius > 0.0) || !(self.arc >= 0.0) || !(self.noise >= 0.0) {
            return bad("ring radius must be positive, arc and noise non-negative");
        }
        if self.train_count == 0 || self.train_count > self.camera_count {
            return bad("train count must be between 1 and the camera count");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub dataset: Dataset,
    pub ground_truth: GaussianCloud,
}

/// Camera poses on a horizontal arc around `look_at`, y up.
pub fn ring_poses(spec: &SyntheticSceneSpec) -> Vec<Pose> {
    let n = spec.camera_count;
    (0..n)
        .map(|k| {
            let theta = if n == 1 {
                0.0
            } else {
                -0.5 * spec.arc + spec.arc * k as f64 / (n - 1) as f64
            };
            let eye = spec.look_at
                + Vector3::new(
                    spec.ring_radius * theta.sin(),
                    spec.ring_elevation,
                    spec.ring_radius * theta.cos(),
                );
            Pose::look_at(eye, spec.look_at, Vector3::y())
        })
        .collect()
}

fn ground_truth_cloud(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let mut cloud = GaussianCloud::empty(0);
    let c = spec.look_at;
    let opaque = logit(0.95);
    let backdrop = ((spec.gaussian_count as f64 * 0.6).sqrt().floor() as usize).max(1);
    let (half_w, half_h) = (2.2, 1.6);
    let spacing = 2.0 * half_w / backdrop.max(2) as f64;
    let phases: Vec<f64> = (0..6)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    for i in 0..backdrop {
        for j in 0..backdrop {
            let u = if backdrop == 1 {
                0.5
            } else {
                i as f64 / (backdrop - 1) as f64
            };
            let v = if backdrop == 1 {
                0.5
            } else {
                j as f64 / (backdrop - 1) as f64
            };
            let (x, y) = ((2.0 * u - 1.0) * half_w, (2.0 * v - 1.0) * half_h);
            let rgb: Vec<f64> = (0..3)
                .map(|ch| {
                    let t =
                        0.5 + 0.3 * (1.7 * x + phases[ch]).sin() * (1.3 * y + phases[ch + 3]).cos();
                    sh::rgb_to_dc(t.clamp(0.05, 0.95))
                })
                .collect();
            cloud.push(
                c + Vector3::new(x, y, -1.2),
                [1.0, 0.0, 0.0, 0.0],
                Vector3::new(
                    0.75 * spacing,
                    0.75 * (half_h / half_w) * spacing,
                    0.05 * spacing,
                )
                .map(f64::ln),
                opaque,
                &rgb,
            );
        }
    }
    let rest = spec.gaussian_count.saturating_sub(backdrop * backdrop);
    let blobs = 4.min(rest.max(1));
    let centers: Vec<(Vector3<f64>, [f64; 3])> = (0..blobs)
        .map(|_| {
            let p = c + Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.7..0.7),
                rng.random_range(-0.4..0.7),
            );
            let col = [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ];
            (p, col)
        })
        .collect();
    for k in 0..rest {
        let (center, col) = centers[k % blobs];
        let offset = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * 0.18;
        let axis = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let q = UnitQuaternion::from_scaled_axis(axis * 0.8);
        let scale = Vector3::new(
            rng.random_range(0.06..0.16),
            rng.random_range(0.06..0.16),
            rng.random_range(0.06..0.16),
        );
        let rgb: Vec<f64> = col
            .iter()
            .map(|&v| sh::rgb_to_dc((v + rng.random_range(-0.08..0.08)).clamp(0.02, 0.98)))
            .collect();
        cloud.push(
            center + offset,
            [q.w, q.i, q.j, q.k],
            scale.map(f64::ln),
            opaque,
            &rgb,
        );
    }
    cloud
}

/// Ground-truth depth is alpha-normalized so partially covered pixels keep surface depth.
pub fn ground_truth_options() -> RenderOptions {
    RenderOptions {
        normalize_depth: true,
        ..RenderOptions::default()
    }
}

/// Builds the ground-truth cloud, renders every ring camera, and splits the views.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticScene, SyntheticError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let camera = CameraIntrinsics::from_fov(spec.width, spec.height, spec.fov_x)?;
    let cloud = ground_truth_cloud(spec, &mut rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let mut views = Vec::with_capacity(spec.camera_count);
    for (k, pose) in ring_poses(spec).into_iter().enumerate() {
        let out = render(&cloud, &camera, &pose, &ground_truth_options())?;
        let mut image = out.color;
        if spec.noise > 0.0 {
            for v in image.data_mut() {
                *v = (*v + spec.noise * noise_rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
            }
        }
        views.push(View {
            name: format!("view_{k:02}"),
            pose,
            image,
            depth: Some(out.depth),
        });
    }
    let (train, test) = even_split(spec.camera_count, spec.train_count);
    let bounds = SceneBounds::new(spec.look_at, 2.5).expect("positive extent");
    Ok(SyntheticScene {
        dataset: Dataset {
            camera,
            views,
            bounds,
            train,
            test,
        },
        ground_truth: cloud,
    })
}

/// Renders a ground-truth image for an arbitrary pose.
pub fn render_ground_truth(
    scene: &SyntheticScene,
    pose: &Pose,
) -> Result<(Image, Image), RenderError> {
    let out = render(
        &scene.ground_truth,
        &scene.dataset.camera,
        pose,
        &ground_truth_options(),
    )?;
    Ok((out.color, out.depth))
}
