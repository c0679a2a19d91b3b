//! EWA projection of 3D Gaussians to screen-space ellipses.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::scene::{quat_to_matrix, sh, GaussianCloud, SceneError};

/// Gaussians whose center is closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic screen-space low-pass added to every projected covariance, pixels².
pub const COV_DILATION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2DGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectionResult {
    Visible(Projected2DGaussian),
    Culled,
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PixelRect {
    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }
}

/// Everything the backward pass needs about one visible Gaussian.
#[derive(Debug, Clone)]
pub(crate) struct Projection {
    pub public: Projected2DGaussian,
    /// Inverse of `cov2d` as (a, b, c) for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub radius: f64,
    pub rect: PixelRect,
    pub cam_point: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    /// Camera-frame 3D covariance `W Σ Wᵀ`.
    pub cam_cov: Matrix3<f64>,
    pub rot: Matrix3<f64>,
    pub scales: Vector3<f64>,
    pub view_dir: Vector3<f64>,
    pub color_clamped: [bool; 3],
}

pub(crate) fn projection_jacobian(cam: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz2,
    )
}

pub(crate) fn project_full(
    cloud: &GaussianCloud,
    n: usize,
    cam: &CameraIntrinsics,
    pose: &Pose,
    camera_center: &Vector3<f64>,
) -> Result<Option<Projection>, SceneError> {
    let mu = cloud.positions[n];
    let rot = quat_to_matrix(&cloud.rotations[n])?;
    let t = pose.transform(&mu);
    if t.z <= NEAR_PLANE {
        return Ok(None);
    }
    let scales = cloud.log_scales[n].map(f64::exp);
    let rs = rot * Matrix3::from_diagonal(&scales);
    let sigma = rs * rs.transpose();
    let w = &pose.rotation;
    let cam_cov = w * sigma * w.transpose();
    let jacobian = projection_jacobian(cam, &t);
    let cov2d = jacobian * cam_cov * jacobian.transpose() + Matrix2::identity() * COV_DILATION;
    let (a, b, c) = (
        cov2d[(0, 0)],
        0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]),
        cov2d[(1, 1)],
    );
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return Ok(None);
    }
    let conic = [c / det, -b / det, a / det];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.1).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    let mean2d = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);

    let xmin = (mean2d.x - radius).ceil().max(0.0);
    let xmax = (mean2d.x + radius).floor().min(cam.width as f64 - 1.0);
    let ymin = (mean2d.y - radius).ceil().max(0.0);
    let ymax = (mean2d.y + radius).floor().min(cam.height as f64 - 1.0);
    if !(xmin <= xmax && ymin <= ymax) {
        return Ok(None);
    }
    let rect = PixelRect {
        x0: xmin as usize,
        x1: xmax as usize,
        y0: ymin as usize,
        y1: ymax as usize,
    };

    let view_dir = mu - camera_center;
    let dn = view_dir.normalize();
    let raw = sh::eval_unclamped(cloud.sh_row(n), &dn, cloud.active_sh_degree);
    let color_clamped = raw.map(|v| v < 0.0);
    let color = raw.map(|v| v.max(0.0));

    Ok(Some(Projection {
        public: Projected2DGaussian {
            mean2d,
            cov2d: Matrix2::new(a, b, b, c),
            depth: t.z,
            color,
            opacity: cloud.opacity(n),
        },
        conic,
        radius,
        rect,
        cam_point: t,
        jacobian,
        cam_cov,
        rot,
        scales,
        view_dir,
        color_clamped,
    }))
}

/// Projects Gaussian `n`; `Culled` when behind the near plane or off-screen.
pub fn project_gaussian(
    cloud: &GaussianCloud,
    n: usize,
    cam: &CameraIntrinsics,
    pose: &Pose,
) -> Result<ProjectionResult, SceneError> {
    if n >= cloud.len() {
        return Err(SceneError::IndexOutOfRange {
            index: n,
            len: cloud.len(),
        });
    }
    Ok(match project_full(cloud, n, cam, pose, &pose.center())? {
        Some(p) => ProjectionResult::Visible(p.public),
        None => ProjectionResult::Culled,
    })
}
