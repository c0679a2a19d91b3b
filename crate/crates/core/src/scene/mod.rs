//! The trainable Gaussian point cloud and its parameterization.
//!
//! Constraints hold by construction: scales are stored as logs, opacities as
//! logits, and rotations as quaternions that the optimizer renormalizes after
//! every step.

pub mod checkpoint;
pub mod sh;

use std::hash::{Hash, Hasher};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

pub use sh::{coeff_count, MAX_SH_DEGREE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("gaussian index {index} out of range for cloud of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("requested SH degree {requested} exceeds stored degree {stored}")]
    DegreeTooHigh { requested: usize, stored: usize },
    #[error("view direction is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("scene extent must be positive")]
    InvalidBounds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub center: Vector3<f64>,
    /// Half-width of the axis-aligned cube around `center`.
    pub extent: f64,
}

impl SceneBounds {
    pub fn new(center: Vector3<f64>, extent: f64) -> Result<Self, SceneError> {
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(SceneError::InvalidBounds);
        }
        Ok(Self { center, extent })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - self.center).iter().all(|d| d.abs() <= self.extent)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Result<Matrix3<f64>, SceneError> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(SceneError::ZeroQuaternion);
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// `Σ = R·S·Sᵀ·Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance(
    rotation: &[f64; 4],
    log_scale: &Vector3<f64>,
) -> Result<Matrix3<f64>, SceneError> {
    let r = quat_to_matrix(rotation)?;
    let s2 = Matrix3::from_diagonal(&log_scale.map(|l| (2.0 * l).exp()));
    let sigma = r * s2 * r.transpose();
    // Exact symmetry; the product can differ by an ulp across the diagonal.
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Trainable parameters θ. Row `n` of each array describes Gaussian `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    /// Quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    /// `coeff_count(sh_degree) * 3` values per Gaussian, coefficient-major.
    pub sh: Vec<f64>,
    sh_degree: usize,
    pub active_sh_degree: usize,
}

impl GaussianCloud {
    pub fn empty(sh_degree: usize) -> Self {
        assert!(sh_degree <= MAX_SH_DEGREE);
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
            sh_degree,
            active_sh_degree: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Stored (maximum) SH degree.
    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    /// Values per Gaussian in `sh`.
    pub fn sh_stride(&self) -> usize {
        coeff_count(self.sh_degree) * 3
    }

    pub fn sh_row(&self, n: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[n * s..(n + 1) * s]
    }

    pub fn sh_row_mut(&mut self, n: usize) -> &mut [f64] {
        let s = self.sh_stride();
        &mut self.sh[n * s..(n + 1) * s]
    }

    pub fn opacity(&self, n: usize) -> f64 {
        sigmoid(self.opacity_logits[n])
    }

    /// Appends a Gaussian. `sh` must hold `sh_stride()` values or just the rgb DC term.
    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: [f64; 4],
        log_scale: Vector3<f64>,
        opacity_logit: f64,
        sh: &[f64],
    ) {
        let stride = self.sh_stride();
        assert!(sh.len() == stride || sh.len() == 3, "bad SH row length");
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.sh.extend_from_slice(sh);
        self.sh.resize(self.sh.len() + stride - sh.len(), 0.0);
    }

    /// Keeps only rows with `keep[n] == true`.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let stride = self.sh_stride();
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.rotations.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.log_scales.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.opacity_logits.retain(|_| *it.next().unwrap());
        let sh = std::mem::take(&mut self.sh);
        self.sh = sh
            .chunks(stride)
            .zip(keep)
            .filter(|(_, &k)| k)
            .flat_map(|(row, _)| row.iter().copied())
            .collect();
    }

    pub fn covariance(&self, n: usize) -> Result<Matrix3<f64>, SceneError> {
        self.check_index(n)?;
        covariance(&self.rotations[n], &self.log_scales[n])
    }

    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 && n.is_finite() {
                for v in q.iter_mut() {
                    *v /= n;
                }
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    /// Hash of every parameter bit pattern; used to detect stale render workspaces.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.len().hash(&mut h);
        self.sh_degree.hash(&mut h);
        self.active_sh_degree.hash(&mut h);
        let bits = self
            .positions
            .iter()
            .flat_map(|p| p.iter().copied())
            .chain(self.rotations.iter().flatten().copied())
            .chain(self.log_scales.iter().flat_map(|p| p.iter().copied()))
            .chain(self.opacity_logits.iter().copied())
            .chain(self.sh.iter().copied());
        for v in bits {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_index(&self, n: usize) -> Result<(), SceneError> {
        if n >= self.len() {
            return Err(SceneError::IndexOutOfRange {
                index: n,
                len: self.len(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self
                .log_scales
                .iter()
                .all(|p| p.iter().all(|v| v.is_finite()))
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh.iter().all(|v| v.is_finite())
    }
}

/// Unnormalized Gaussian kernel `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))` of Gaussian `n`.
pub fn gaussian_density(
    cloud: &GaussianCloud,
    point: &Vector3<f64>,
    n: usize,
) -> Result<f64, SceneError> {
    let sigma = cloud.covariance(n)?;
    let d = point - cloud.positions[n];
    let inv = sigma.try_inverse().ok_or(SceneError::ZeroQuaternion)?;
    Ok((-0.5 * d.dot(&(inv * d))).exp())
}

/// View-dependent color of one SH row, clamped at zero.
pub fn evaluate_sh(
    coeffs: &[f64],
    stored_degree: usize,
    dir: &Vector3<f64>,
    degree: usize,
) -> Result<[f64; 3], SceneError> {
    if degree > stored_degree {
        return Err(SceneError::DegreeTooHigh {
            requested: degree,
            stored: stored_degree,
        });
    }
    let n = dir.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(SceneError::NonUnitDirection(n));
    }
    Ok(sh::eval_unclamped(coeffs, dir, degree).map(|v| v.max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub count: usize,
    pub bounds: SceneBounds,
    pub sh_degree: usize,
    pub initial_opacity: f64,
}

impl InitSpec {
    pub fn new(count: usize, bounds: SceneBounds) -> Self {
        Self {
            count,
            bounds,
            sh_degree: MAX_SH_DEGREE,
            initial_opacity: 0.1,
        }
    }
}

/// Mean squared distance from each point to its `k` nearest neighbours (brute force).
pub fn knn_mean_sq_dist(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    knn(points, k)
        .iter()
        .map(|nb| {
            if nb.is_empty() {
                0.0
            } else {
                nb.iter().map(|&(_, d2)| d2).sum::<f64>() / nb.len() as f64
            }
        })
        .collect()
}

/// `k` nearest neighbours (index, squared distance) of each point, ties by index.
pub fn knn(points: &[Vector3<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    use rayon::prelude::*;
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
            for (j, q) in points.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d2 = (q - points[i]).norm_squared();
                if best.len() < k || d2 < best[best.len() - 1].1 {
                    let pos = best.partition_point(|&(_, e)| e <= d2);
                    best.insert(pos, (j, d2));
                    best.truncate(k);
                }
            }
            best
        })
        .collect()
}

/// Random initialization replacing structure-from-motion points.
pub fn init_synthetic<R: Rng + ?Sized>(spec: &InitSpec, rng: &mut R) -> GaussianCloud {
    let mut cloud = GaussianCloud::empty(spec.sh_degree);
    let b = &spec.bounds;
    let positions: Vec<Vector3<f64>> = (0..spec.count)
        .map(|_| {
            Vector3::new(
                b.center.x + b.extent * rng.random_range(-1.0..=1.0),
                b.center.y + b.extent * rng.random_range(-1.0..=1.0),
                b.center.z + b.extent * rng.random_range(-1.0..=1.0),
            )
        })
        .collect();
    let colors: Vec<[f64; 3]> = (0..spec.count)
        .map(|_| {
            [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ]
        })
        .collect();
    let d2 = knn_mean_sq_dist(&positions, 3);
    let fallback = (0.1 * b.extent).powi(2);
    let alpha_logit = logit(spec.initial_opacity);
    for ((p, c), d2) in positions.into_iter().zip(colors).zip(d2) {
        let d2 = if d2 > 1e-14 { d2 } else { fallback };
        let log_s = 0.5 * d2.ln();
        cloud.push(
            p,
            [1.0, 0.0, 0.0, 0.0],
            Vector3::repeat(log_s),
            alpha_logit,
            &[
                sh::rgb_to_dc(c[0]),
                sh::rgb_to_dc(c[1]),
                sh::rgb_to_dc(c[2]),
            ],
        );
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

    fn sym_eigenvalues(m: &Matrix3<f64>) -> Vec<f64> {
        let mut e: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    }

    #[test]
    fn covariance_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert!(
            (covariance(&id, &Vector3::zeros()).unwrap() - Matrix3::identity())
                .abs()
                .max()
                < 1e-15
        );
        let c = covariance(&id, &Vector3::new(LN_2, 0.0, 0.0)).unwrap();
        assert!(
            (c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)))
                .abs()
                .max()
                < 1e-12
        );
        // 90° about z: R = [[0,-1,0],[1,0,0],[0,0,1]], R·diag(4,1,1)·Rᵀ = diag(1,4,1).
        let qz = [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2];
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * r.transpose();
        let c = covariance(&qz, &Vector3::new(LN_2, 0.0, 0.0)).unwrap();
        assert!((c - expected).abs().max() < 1e-12);
        assert!(
            (c - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)))
                .abs()
                .max()
                < 1e-12
        );
        assert_eq!(
            covariance(&[0.0; 4], &Vector3::zeros()),
            Err(SceneError::ZeroQuaternion)
        );
    }

    proptest! {
        #[test]
        fn covariance_is_spd_with_scale_eigenvalues(
            q in prop::array::uniform4(-1.0f64..1.0),
            ls in prop::array::uniform3(-2.0f64..1.0),
        ) {
            let qn = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
            prop_assume!(qn > 1e-3);
            let ls = Vector3::from(ls);
            let c = covariance(&q, &ls).unwrap();
            prop_assert!((c - c.transpose()).abs().max() <= 1e-12);
            let eig = sym_eigenvalues(&c);
            let mut expected: Vec<f64> = ls.iter().map(|l| (2.0 * l).exp()).collect();
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
            prop_assert!(eig[0] > 0.0);
            let neg = [-q[0], -q[1], -q[2], -q[3]];
            let c2 = covariance(&neg, &ls).unwrap();
            prop_assert!((c - c2).abs().max() <= 1e-12);
        }
    }

    fn single(pos: Vector3<f64>, ls: Vector3<f64>) -> GaussianCloud {
        let mut c = GaussianCloud::empty(0);
        c.push(pos, [1.0, 0.0, 0.0, 0.0], ls, 0.0, &[0.0, 0.0, 0.0]);
        c
    }

    #[test]
    fn density_examples() {
        let mu = Vector3::new(1.0, 2.0, 3.0);
        let c = single(mu, Vector3::zeros());
        assert_eq!(gaussian_density(&c, &mu, 0).unwrap(), 1.0);
        let v = gaussian_density(&c, &(mu + Vector3::new(0.0, 1.0, 0.0)), 0).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        let c = single(Vector3::zeros(), Vector3::new(LN_2, 0.0, 0.0));
        let v = gaussian_density(&c, &Vector3::new(1.0, 0.0, 0.0), 0).unwrap();
        assert!((v - (-0.125f64).exp()).abs() < 1e-14);
        assert!(matches!(
            gaussian_density(&c, &mu, 1),
            Err(SceneError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn density_peaks_at_mean() {
        let mut c = single(Vector3::new(0.2, -0.1, 0.4), Vector3::new(-0.3, 0.1, 0.2));
        c.rotations[0] = [0.9, 0.1, -0.3, 0.2];
        let mu = c.positions[0];
        let h = 1e-5;
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            let fp = gaussian_density(&c, &(mu + e), 0).unwrap();
            let fm = gaussian_density(&c, &(mu - e), 0).unwrap();
            assert!(((fp - fm) / (2.0 * h)).abs() < 1e-9);
        }
    }

    #[test]
    fn sh_examples() {
        let dir = Vector3::new(0.0, 0.0, 1.0);
        let rgb = evaluate_sh(&[0.0; 3], 0, &dir, 0).unwrap();
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
        let coeffs = [0.3, -0.2, 0.9];
        let a = evaluate_sh(&coeffs, 0, &dir, 0).unwrap();
        let b = evaluate_sh(&coeffs, 0, &Vector3::new(0.6, 0.0, 0.8), 0).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            evaluate_sh(&coeffs, 0, &dir, 1),
            Err(SceneError::DegreeTooHigh { .. })
        ));
    }

    #[test]
    fn sh_degree_one_matches_textbook_basis() {
        // Real SH table: Y00 = 1/(2√π); Y1,-1 = √(3/4π)·y; Y10 = √(3/4π)·z; Y11 = √(3/4π)·x.
        // The color basis uses (−Y1,-1, Y10, −Y11).
        let pi = std::f64::consts::PI;
        let y00 = 0.5 / pi.sqrt();
        let y1 = (3.0 / (4.0 * pi)).sqrt();
        let coeffs: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.4).collect();
        for dir in [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.6, 0.0, 0.8),
            Vector3::new(0.0, -0.28, 0.96),
        ] {
            let rgb = sh::eval_unclamped(&coeffs, &dir, 1);
            for c in 0..3 {
                let expected = 0.5 + y00 * coeffs[c] - y1 * dir.y * coeffs[3 + c]
                    + y1 * dir.z * coeffs[6 + c]
                    - y1 * dir.x * coeffs[9 + c];
                assert!((rgb[c] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sh_basis_gradient_matches_finite_differences() {
        let dir = Vector3::new(0.3, -0.5, 0.7);
        let g = sh::basis_gradient(&dir, 3);
        let h = 1e-6;
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            let bp = sh::basis(&(dir + e), 3);
            let bm = sh::basis(&(dir - e), 3);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }

    #[test]
    fn init_examples() {
        let bounds = SceneBounds::new(Vector3::repeat(0.5), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(init_synthetic(&InitSpec::new(0, bounds), &mut rng).is_empty());
        let spec = InitSpec::new(100, bounds);
        let a = init_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        for p in &a.positions {
            assert!(
                (0.0..=1.0).contains(&p.x)
                    && (0.0..=1.0).contains(&p.y)
                    && (0.0..=1.0).contains(&p.z)
            );
        }
        for n in 0..a.len() {
            assert!((a.opacity(n) - 0.1).abs() < 1e-12);
        }
        assert_eq!(a.active_sh_degree, 0);
    }

    #[test]
    fn retain_keeps_rows_aligned() {
        let mut c = GaussianCloud::empty(1);
        for i in 0..5 {
            let v = i as f64;
            c.push(
                Vector3::repeat(v),
                [1.0, 0.0, 0.0, 0.0],
                Vector3::repeat(v),
                v,
                &[v; 3],
            );
        }
        c.retain(&[true, false, true, false, true]);
        assert_eq!(c.len(), 3);
        assert_eq!(c.opacity_logits, vec![0.0, 2.0, 4.0]);
        assert_eq!(c.sh_row(1)[..3], [2.0; 3]);
        assert_eq!(c.sh.len(), 3 * c.sh_stride());
    }
}
