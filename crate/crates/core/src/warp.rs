//! Depth-based inverse warping of a seen view into a pseudo view.
//!
//! For a pseudo-view pixel `p_j` with rendered depth `D_j(p_j)`:
//!
//! ```text
//! p_{j→i} ~ K · R^{j→i} · D_j(p_j) · K⁻¹ · p_j
//! I^{i→j}(p_j) = I_i(round(p_{j→i}))          nearest sampling, round half up
//! M(p_j) = |D_j(p_j) − D^{i→j}(p_j)| < τ       and in bounds and both depths valid
//! ```

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::{Image, Mask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("depth {0} is not a valid positive depth")]
    InvalidDepth(f64),
    #[error("warped point lies behind the source camera (z = {0})")]
    BehindCamera(f64),
    #[error("input images disagree in size or channel count")]
    DimensionMismatch,
    #[error("depth threshold must be positive, got {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub warped_image: Image,
    pub warped_depth: Image,
    pub mask: Mask,
    /// `|D_j − D^{i→j}|` where both depths are valid and the warp is in bounds, else 0.
    pub depth_error: Image,
    pub valid_fraction: f64,
}

/// How depth differences are compared against τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthUnits {
    World,
    /// Differences are divided by this scene extent before thresholding.
    ExtentNormalized(f64),
}

impl DepthUnits {
    fn scale(self) -> f64 {
        match self {
            DepthUnits::World => 1.0,
            DepthUnits::ExtentNormalized(e) => e,
        }
    }
}

/// Depth values that mark a usable pixel.
#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    d > 0.0 && d.is_finite()
}

/// Round half up: `floor(v + 0.5)`.
#[inline]
pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Maps pseudo-view pixel `p_j` at depth `depth_j` into the seen view.
///
/// `rel` takes camera-`j` points to camera-`i` points. Returns the
/// continuous source pixel and the camera-`i` depth.
pub fn warp_pixel(
    p_j: &Vector2<f64>,
    depth_j: f64,
    rel: &Pose,
    cam: &CameraIntrinsics,
) -> Result<(Vector2<f64>, f64), WarpError> {
    if !is_valid_depth(depth_j) {
        return Err(WarpError::InvalidDepth(depth_j));
    }
    let x_j = Vector3::new(
        (p_j.x - cam.cx) / cam.fx * depth_j,
        (p_j.y - cam.cy) / cam.fy * depth_j,
        depth_j,
    );
    let x_i = rel.transform(&x_j);
    if x_i.z <= 0.0 {
        return Err(WarpError::BehindCamera(x_i.z));
    }
    let p = Vector2::new(
        cam.fx * x_i.x / x_i.z + cam.cx,
        cam.fy * x_i.y / x_i.z + cam.cy,
    );
    Ok((p, x_i.z))
}

/// Warps `src_image`/`src_depth` (seen view `i`) onto the pseudo view `j`
/// whose rendered depth is `target_depth`.
pub fn inverse_warp(
    src_image: &Image,
    src_depth: &Image,
    target_depth: &Image,
    rel: &Pose,
    cam: &CameraIntrinsics,
    tau: f64,
    units: DepthUnits,
) -> Result<WarpResult, WarpError> {
    let (w, h) = (cam.width, cam.height);
    let ch = src_image.channels();
    if src_image.width() != w
        || src_image.height() != h
        || !src_depth.same_shape(target_depth)
        || src_depth.width() != w
        || src_depth.height() != h
        || src_depth.channels() != 1
    {
        return Err(WarpError::DimensionMismatch);
    }
    if !(tau > 0.0) {
        return Err(WarpError::InvalidThreshold(tau));
    }
    let scale = units.scale();

    struct Px {
        color: Vec<f64>,
        depth: f64,
        err: f64,
        ok: bool,
    }
    let rows: Vec<Vec<Px>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let miss = Px {
                        color: vec![0.0; ch],
                        depth: 0.0,
                        err: 0.0,
                        ok: false,
                    };
                    let dj = target_depth.get(x, y, 0);
                    let Ok((p, _)) = warp_pixel(&Vector2::new(x as f64, y as f64), dj, rel, cam)
                    else {
                        return miss;
                    };
                    let (sx, sy) = (round_half_up(p.x), round_half_up(p.y));
                    if !(sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64) {
                        return miss;
                    }
                    let (sx, sy) = (sx as usize, sy as usize);
                    let di = src_depth.get(sx, sy, 0);
                    let color = src_image.pixel(sx, sy).to_vec();
                    if !is_valid_depth(di) {
                        return Px {
                            color,
                            depth: di,
                            err: 0.0,
                            ok: false,
                        };
                    }
                    let err = (dj - di).abs();
                    Px {
                        color,
                        depth: di,
                        err,
                        ok: err / scale < tau,
                    }
                })
                .collect()
        })
        .collect();

    let mut warped_image = Image::new(w, h, ch);
    let mut warped_depth = Image::new(w, h, 1);
    let mut depth_error = Image::new(w, h, 1);
    let mut mask = Mask::new(w, h, false);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, px) in row.into_iter().enumerate() {
            for (c, v) in px.color.iter().enumerate() {
                warped_image.set(x, y, c, *v);
            }
            warped_depth.set(x, y, 0, px.depth);
            depth_error.set(x, y, 0, px.err);
            mask.set(x, y, px.ok);
        }
    }
    let valid_fraction = mask.fraction();
    Ok(WarpResult {
        warped_image,
        warped_depth,
        mask,
        depth_error,
        valid_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, relative_pose, unproject};
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(9.0, 8.5, 3.7, 3.4, w, h).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let r = nalgebra::Rotation3::new(axis.normalize() * rng.random_range(0.0..rot));
        let t = Vector3::new(
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
        );
        Pose::new(*r.matrix(), t).unwrap()
    }

    #[test]
    fn identity_warp_is_fixed_point() {
        let c = cam(8, 8);
        let (p, d) = warp_pixel(&Vector2::new(2.0, 5.0), 3.5, &Pose::identity(), &c).unwrap();
        assert!((p - Vector2::new(2.0, 5.0)).norm() < 1e-12);
        assert!((d - 3.5).abs() < 1e-12);
    }

    #[test]
    fn forward_translation_reduces_depth() {
        let c = cam(8, 8);
        let rel = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -0.75)).unwrap();
        let (p, d) = warp_pixel(&Vector2::new(c.cx, c.cy), 3.0, &rel, &c).unwrap();
        assert!((p - Vector2::new(c.cx, c.cy)).norm() < 1e-12);
        assert!((d - 2.25).abs() < 1e-12);
    }

    #[test]
    fn warp_pixel_errors() {
        let c = cam(8, 8);
        assert_eq!(
            warp_pixel(&Vector2::zeros(), 0.0, &Pose::identity(), &c),
            Err(WarpError::InvalidDepth(0.0))
        );
        let rel = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -5.0)).unwrap();
        assert!(matches!(
            warp_pixel(&Vector2::zeros(), 1.0, &rel, &c),
            Err(WarpError::BehindCamera(_))
        ));
    }

    #[test]
    fn warp_pixel_matches_world_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cam(8, 8);
        let pose_i = random_pose(&mut rng, 0.4, 0.3);
        let pose_j = random_pose(&mut rng, 0.4, 0.3);
        let rel = relative_pose(&pose_j, &pose_i);
        for _ in 0..5 {
            let p = Vector2::new(rng.random_range(0.0..8.0), rng.random_range(0.0..8.0));
            let d = rng.random_range(2.0..5.0);
            let world = unproject(&p, d, &c, &pose_j).unwrap();
            let (want, want_d) = project(&world, &c, &pose_i).unwrap();
            let (got, got_d) = warp_pixel(&p, d, &rel, &c).unwrap();
            assert!((got - want).norm() < 1e-9 && (got_d - want_d).abs() < 1e-9);
        }
    }

    #[test]
    fn rounding_convention_is_half_up() {
        assert_eq!(round_half_up(2.5), 3.0);
        assert_eq!(round_half_up(-0.5), 0.0);
        assert_eq!(round_half_up(3.4999), 3.0);
        assert_eq!(round_half_up(-1.5), -1.0);
    }

    #[test]
    fn identity_warp_copies_source() {
        let c = cam(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::from_vec(8, 8, 3, (0..192).map(|_| rng.random()).collect()).unwrap();
        let mut depth = Image::filled(8, 8, 1, 2.0);
        depth.set(3, 3, 0, 0.0);
        let r = inverse_warp(
            &img,
            &depth,
            &depth,
            &Pose::identity(),
            &c,
            0.3,
            DepthUnits::World,
        )
        .unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let valid = !(x == 3 && y == 3);
                assert_eq!(r.mask.get(x, y), valid);
                if valid {
                    assert_eq!(r.warped_image.pixel(x, y), img.pixel(x, y));
                }
            }
        }
        assert!((r.valid_fraction - 63.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn offset_depth_fails_mask() {
        let c = cam(8, 8);
        let img = Image::filled(8, 8, 3, 0.5);
        let src = Image::filled(8, 8, 1, 2.0);
        let tgt = Image::filled(8, 8, 1, 2.6);
        let r = inverse_warp(
            &img,
            &src,
            &tgt,
            &Pose::identity(),
            &c,
            0.3,
            DepthUnits::World,
        )
        .unwrap();
        assert_eq!(r.mask.count(), 0);
        let r = inverse_warp(
            &img,
            &src,
            &tgt,
            &Pose::identity(),
            &c,
            0.3,
            DepthUnits::ExtentNormalized(4.0),
        )
        .unwrap();
        assert_eq!(r.mask.count(), 64);
    }

    #[test]
    fn shape_and_threshold_errors() {
        let c = cam(8, 8);
        let img = Image::new(8, 8, 3);
        let d = Image::filled(8, 8, 1, 1.0);
        let bad = Image::new(7, 8, 1);
        assert_eq!(
            inverse_warp(
                &img,
                &d,
                &bad,
                &Pose::identity(),
                &c,
                0.3,
                DepthUnits::World
            ),
            Err(WarpError::DimensionMismatch)
        );
        assert_eq!(
            inverse_warp(&img, &d, &d, &Pose::identity(), &c, 0.0, DepthUnits::World),
            Err(WarpError::InvalidThreshold(0.0))
        );
    }

    proptest! {
        #[test]
        fn mask_is_monotone_in_tau(seed in 0u64..1000, t1 in 0.01f64..1.0, dt in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = cam(8, 8);
            let img = Image::new(8, 8, 3);
            let src = Image::from_vec(8, 8, 1, (0..64).map(|_| rng.random_range(1.0..3.0)).collect()).unwrap();
            let tgt = Image::from_vec(8, 8, 1, (0..64).map(|_| rng.random_range(1.0..3.0)).collect()).unwrap();
            let rel = random_pose(&mut rng, 0.2, 0.2);
            let a = inverse_warp(&img, &src, &tgt, &rel, &c, t1, DepthUnits::World).unwrap();
            let b = inverse_warp(&img, &src, &tgt, &rel, &c, t1 + dt, DepthUnits::World).unwrap();
            prop_assert!(a.mask.is_subset_of(&b.mask));
        }

        #[test]
        fn out_of_bounds_is_masked(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = cam(8, 8);
            let img = Image::filled(8, 8, 3, 1.0);
            let d = Image::filled(8, 8, 1, 2.0);
            // Large sideways shift: everything lands off-image.
            let rel = Pose::new(Matrix3::identity(), Vector3::new(rng.random_range(20.0..40.0), 0.0, 0.0)).unwrap();
            let r = inverse_warp(&img, &d, &d, &rel, &c, 10.0, DepthUnits::World).unwrap();
            prop_assert_eq!(r.mask.count(), 0);
            prop_assert!(r.warped_image.data().iter().all(|&v| v == 0.0));
        }
    }
}
