//! Pinhole cameras, rigid poses, and pseudo-viewpoint sampling.
//!
//! Conventions used throughout the crate:
//!
//! * poses map world points into the camera frame: `x_cam = R·x_world + t`;
//! * the camera looks down `+z`, with `+x` to the right and `+y` down the image;
//! * pixel `(u, v)` has its center at integer coordinates, origin top-left.

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Points closer to the image plane than this are not projectable.
pub const MIN_DEPTH: f64 = 1e-6;

const ORTHO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("camera-frame depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("pseudo-view sampling needs at least one seen pose")]
    EmptySeenSet,
    #[error("negative jitter magnitude")]
    NegativeJitter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square pixels, principal point at the image center, given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Result<Self, GeometryError> {
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            fx,
            fx,
            (width as f64 - 1.0) * 0.5,
            (height as f64 - 1.0) * 0.5,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Back-projects a pixel at camera-frame depth `depth`.
    pub fn unproject_camera(
        &self,
        pixel: &Vector2<f64>,
        depth: f64,
    ) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 || depth.is_nan() {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        ))
    }
}

/// World-to-camera rigid transform. Also used for camera-to-camera transforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self {
            rotation,
            translation,
        };
        if !pose.is_valid() {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(pose)
    }

    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        ortho <= ORTHO_TOLERANCE
            && (r.determinant() - 1.0).abs() <= ORTHO_TOLERANCE
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Camera placed at `eye`, looking at `target`, with `up` as the world up hint.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let up_perp = up - z * up.dot(&z);
        let y = -up_perp.normalize();
        let x = y.cross(&z);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    /// Builds a pose from a camera center and world-to-camera rotation.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` applied first, then `next`.
    pub fn then(&self, next: &Pose) -> Pose {
        Pose {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
        }
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// Angle of the relative rotation between two poses, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

/// Projects a world point; returns the pixel and the camera-frame depth.
pub fn project(
    point: &Vector3<f64>,
    cam: &CameraIntrinsics,
    pose: &Pose,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let pc = pose.transform(point);
    let px = cam.project_camera(&pc)?;
    Ok((px, pc.z))
}

/// Inverse of [`project`].
pub fn unproject(
    pixel: &Vector2<f64>,
    depth: f64,
    cam: &CameraIntrinsics,
    pose: &Pose,
) -> Result<Vector3<f64>, GeometryError> {
    let pc = cam.unproject_camera(pixel, depth)?;
    Ok(pose.rotation.transpose() * (pc - pose.translation))
}

/// Transform taking camera-`j` frame points into the camera-`i` frame.
pub fn relative_pose(pose_j: &Pose, pose_i: &Pose) -> Pose {
    pose_j.inverse().then(pose_i)
}

/// Rotation-angle plus extent-scaled camera-center distance.
pub fn pose_distance(a: &Pose, b: &Pose, extent: f64) -> f64 {
    a.rotation_angle_to(b) + (a.center() - b.center()).norm() / extent.max(f64::EPSILON)
}

/// Slerp on rotation, lerp on camera center.
pub fn interpolate_poses(a: &Pose, b: &Pose, s: f64) -> Pose {
    let qa = a.unit_quaternion();
    let qb = b.unit_quaternion();
    let q = qa.slerp(&qb, s);
    let center = a.center() * (1.0 - s) + b.center() * s;
    Pose::from_center(*q.to_rotation_matrix().matrix(), center)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoViewConfig {
    pub seed: u64,
    /// Maximum rotation perturbation, radians.
    pub rotation_jitter: f64,
    /// Maximum camera-center perturbation, world units.
    pub translation_jitter: f64,
    /// Mix in slerp/lerp samples between neighbouring seen poses.
    pub interpolate: bool,
}

impl Default for PseudoViewConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rotation_jitter: 0.05,
            translation_jitter: 0.02,
            interpolate: true,
        }
    }
}

/// Samples pseudo viewpoints around a set of seen poses. Owns its rng stream.
#[derive(Debug, Clone)]
pub struct PseudoViewSampler {
    config: PseudoViewConfig,
    rng: ChaCha8Rng,
}

impl PseudoViewSampler {
    pub fn new(config: PseudoViewConfig) -> Result<Self, GeometryError> {
        if !(config.rotation_jitter >= 0.0 && config.translation_jitter >= 0.0) {
            return Err(GeometryError::NegativeJitter);
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn config(&self) -> &PseudoViewConfig {
        &self.config
    }

    pub fn sample(&mut self, seen: &[Pose]) -> Result<Pose, GeometryError> {
        if seen.is_empty() {
            return Err(GeometryError::EmptySeenSet);
        }
        let anchor_idx = self.rng.random_range(0..seen.len());
        let anchor = &seen[anchor_idx];
        if self.config.interpolate && seen.len() > 1 && self.rng.random::<bool>() {
            let neighbour = seen
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != anchor_idx)
                .min_by(|(_, a), (_, b)| {
                    let da = (a.center() - anchor.center()).norm();
                    let db = (b.center() - anchor.center()).norm();
                    da.total_cmp(&db)
                })
                .map(|(_, p)| p)
                .unwrap_or(anchor);
            let s: f64 = self.rng.random();
            return Ok(interpolate_poses(anchor, neighbour, s));
        }
        Ok(self.jitter(anchor))
    }

    fn jitter(&mut self, anchor: &Pose) -> Pose {
        let angle = self.config.rotation_jitter * self.rng.random::<f64>();
        let axis = self.random_unit();
        let offset =
            self.random_unit() * self.config.translation_jitter * self.rng.random::<f64>().cbrt();
        if angle == 0.0 && offset == Vector3::zeros() {
            return *anchor;
        }
        let delta = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner();
        // Rotation perturbs the camera frame; the camera center moves by `offset`.
        Pose {
            rotation: delta * anchor.rotation,
            translation: delta * (anchor.translation - anchor.rotation * offset),
        }
    }

    fn random_unit(&mut self) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                self.rng.random_range(-1.0..1.0),
                self.rng.random_range(-1.0..1.0),
                self.rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn golden_projection() {
        let (px, d) = project(&Vector3::new(0.0, 0.0, 5.0), &cam(), &Pose::identity()).unwrap();
        assert_eq!((px.x, px.y, d), (32.0, 32.0, 5.0));
        let (px, d) = project(&Vector3::new(1.0, 0.0, 5.0), &cam(), &Pose::identity()).unwrap();
        assert_eq!((px.x, px.y, d), (52.0, 32.0, 5.0));
        // +y in the camera frame is down the image.
        let (px, _) = project(&Vector3::new(0.0, 1.0, 5.0), &cam(), &Pose::identity()).unwrap();
        assert!(px.y > 32.0);
    }

    #[test]
    fn rotated_pose_projects_new_axis_to_principal_point() {
        // 90° about y, written out by hand: maps world +x onto camera +z.
        let r = Matrix3::new(0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), -FRAC_PI_2).into_inner();
        assert!((r - rot).abs().max() < 1e-15);
        let pose = Pose::new(r, Vector3::zeros()).unwrap();
        let (px, d) = project(&Vector3::new(3.0, 0.0, 0.0), &cam(), &pose).unwrap();
        assert!((px.x - 32.0).abs() < 1e-12 && (px.y - 32.0).abs() < 1e-12);
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let err = project(&Vector3::new(0.0, 0.0, -1.0), &cam(), &Pose::identity());
        assert!(matches!(err, Err(GeometryError::NonPositiveDepth(_))));
        let err = unproject(&Vector2::new(1.0, 1.0), 0.0, &cam(), &Pose::identity());
        assert!(matches!(err, Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn unproject_examples() {
        let p = unproject(&Vector2::new(32.0, 32.0), 5.0, &cam(), &Pose::identity()).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 5.0));
        let p = unproject(&Vector2::new(52.0, 32.0), 5.0, &cam(), &Pose::identity()).unwrap();
        assert!((p - Vector3::new(1.0, 0.0, 5.0)).norm() < 1e-12);
    }

    #[test]
    fn relative_pose_identity_and_translation() {
        let p = Pose::look_at(Vector3::new(1.0, 2.0, -4.0), Vector3::zeros(), Vector3::y());
        assert!(relative_pose(&p, &p).max_abs_diff(&Pose::identity()) < 1e-12);

        // Oracle: compose the 4x4 homogeneous maps directly.
        let t = Vector3::new(0.3, -0.2, 0.5);
        let pose_i = Pose {
            rotation: p.rotation,
            translation: p.translation + p.rotation * (-t),
        };
        let to_h = |q: &Pose| {
            let mut m = nalgebra::Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&q.rotation);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&q.translation);
            m
        };
        let expected = to_h(&pose_i) * to_h(&p).try_inverse().unwrap();
        let rel = relative_pose(&p, &pose_i);
        assert!((to_h(&rel) - expected).abs().max() < 1e-12);
        // Same rotation, so the relative translation is R_i·(−t).
        assert!((rel.translation - p.rotation * (-t)).norm() < 1e-12);
    }

    #[test]
    fn sampler_zero_jitter_returns_seen_pose() {
        let seen = [Pose::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::y(),
        )];
        let mut s = PseudoViewSampler::new(PseudoViewConfig {
            seed: 3,
            rotation_jitter: 0.0,
            translation_jitter: 0.0,
            interpolate: false,
        })
        .unwrap();
        for _ in 0..10 {
            assert_eq!(s.sample(&seen).unwrap(), seen[0]);
        }
        assert_eq!(s.sample(&[]), Err(GeometryError::EmptySeenSet));
    }

    #[test]
    fn interpolation_midpoint_translation() {
        let a = Pose::from_center(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.0));
        let b = Pose::from_center(Matrix3::identity(), Vector3::new(2.0, 0.0, 0.0));
        let mid = interpolate_poses(&a, &b, 0.5);
        assert!((mid.translation - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((mid.center() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rotation_jitter_is_bounded() {
        let anchor = Pose::look_at(Vector3::new(0.5, 0.2, -3.0), Vector3::zeros(), Vector3::y());
        let mut s = PseudoViewSampler::new(PseudoViewConfig {
            seed: 11,
            rotation_jitter: 0.1,
            translation_jitter: 0.05,
            interpolate: false,
        })
        .unwrap();
        for _ in 0..1000 {
            let p = s.sample(&[anchor]).unwrap();
            assert!(p.is_valid());
            assert!(anchor.rotation_angle_to(&p) <= 0.1 + 1e-9);
            assert!((p.center() - anchor.center()).norm() <= 0.05 + 1e-9);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let seen: Vec<Pose> = (0..3)
            .map(|i| {
                Pose::look_at(
                    Vector3::new(i as f64, 0.0, -4.0),
                    Vector3::zeros(),
                    Vector3::y(),
                )
            })
            .collect();
        let cfg = PseudoViewConfig {
            seed: 42,
            ..Default::default()
        };
        let mut a = PseudoViewSampler::new(cfg).unwrap();
        let mut b = PseudoViewSampler::new(cfg).unwrap();
        for _ in 0..50 {
            let pa = a.sample(&seen).unwrap();
            let pb = b.sample(&seen).unwrap();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn look_at_centers_target() {
        let eye = Vector3::new(2.0, 1.0, -3.0);
        let pose = Pose::look_at(eye, Vector3::new(0.1, 0.2, 0.3), Vector3::y());
        assert!(pose.is_valid());
        let (px, _) = project(&Vector3::new(0.1, 0.2, 0.3), &cam(), &pose).unwrap();
        assert!((px - Vector2::new(32.0, 32.0)).norm() < 1e-9);
        assert!((pose.center() - eye).norm() < 1e-12);
    }
}
