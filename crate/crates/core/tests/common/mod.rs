//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use ipsm_core::geometry::{relative_pose, CameraIntrinsics, Pose};
use ipsm_core::image::{Image, Mask};
use ipsm_core::synthetic::{
    generate_synthetic, render_ground_truth, SyntheticScene, SyntheticSceneSpec,
};
use ipsm_core::warp::{inverse_warp, DepthUnits, WarpResult};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct per-pixel loop: back-project with K⁻¹, move with the relative pose,
/// project with K, sample the nearest source pixel, threshold the depth gap.
pub fn reference_warp(
    src: &Image,
    src_depth: &Image,
    tgt_depth: &Image,
    rel: &Pose,
    cam: &CameraIntrinsics,
    tau: f64,
) -> (Image, Image, Mask) {
    let k = Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
    let k_inv = Matrix3::new(
        1.0 / cam.fx,
        0.0,
        -cam.cx / cam.fx,
        0.0,
        1.0 / cam.fy,
        -cam.cy / cam.fy,
        0.0,
        0.0,
        1.0,
    );
    let (w, h) = (cam.width, cam.height);
    let mut img = Image::new(w, h, 3);
    let mut dep = Image::new(w, h, 1);
    let mut mask = Mask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let d = tgt_depth.get(x, y, 0);
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            let ray = k_inv * Vector3::new(x as f64, y as f64, 1.0);
            let pc = rel.rotation * (ray * d) + rel.translation;
            if pc.z <= 0.0 {
                continue;
            }
            let hom = k * (pc / pc.z);
            let (sx, sy) = ((hom.x + 0.5).floor(), (hom.y + 0.5).floor());
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            for c in 0..3 {
                img.set(x, y, c, src.get(sx, sy, c));
            }
            let di = src_depth.get(sx, sy, 0);
            dep.set(x, y, 0, di);
            mask.set(x, y, di > 0.0 && di.is_finite() && (d - di).abs() < tau);
        }
    }
    (img, dep, mask)
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let r = Rotation3::new(axis.normalize() * rng.random_range(0.0..0.3));
    let t = Vector3::new(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    );
    Pose::new(*r.matrix(), t).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, lo: f64, hi: f64) -> Image {
    Image::from_vec(
        8,
        8,
        c,
        (0..64 * c).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn bits(img: &Image) -> Vec<u64> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

/// Number of random scenes whose output matched the reference bit for bit.
pub fn reference_equivalence(scenes: u64) -> usize {
    let mut equal = 0;
    for seed in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = CameraIntrinsics::new(
            rng.random_range(6.0..10.0),
            rng.random_range(6.0..10.0),
            rng.random_range(3.0..4.0),
            rng.random_range(3.0..4.0),
            8,
            8,
        )
        .unwrap();
        let src = random_image(&mut rng, 3, 0.0, 1.0);
        let mut src_depth = random_image(&mut rng, 1, 1.5, 3.0);
        let mut tgt_depth = random_image(&mut rng, 1, 1.5, 3.0);
        // A few invalid depths on both sides.
        for _ in 0..4 {
            let (x, y) = (rng.random_range(0..8), rng.random_range(0..8));
            src_depth.set(x, y, 0, 0.0);
            let (x, y) = (rng.random_range(0..8), rng.random_range(0..8));
            tgt_depth.set(x, y, 0, 0.0);
        }
        let pose_i = random_pose(&mut rng);
        let pose_j = random_pose(&mut rng);
        let rel = relative_pose(&pose_j, &pose_i);
        let tau = rng.random_range(0.1..1.0);
        let got: WarpResult = inverse_warp(
            &src,
            &src_depth,
            &tgt_depth,
            &rel,
            &cam,
            tau,
            DepthUnits::World,
        )
        .unwrap();
        let (img, dep, mask) = reference_warp(&src, &src_depth, &tgt_depth, &rel, &cam, tau);
        if bits(&got.warped_image) == bits(&img)
            && bits(&got.warped_depth) == bits(&dep)
            && got.mask == mask
            && got.valid_fraction == mask.fraction()
        {
            equal += 1;
        }
    }
    equal
}

/// Masked mean L1 between seen view `i` warped to a pose orbited by `degrees`
/// about the look-at point and the true render from that pose, plus the mask coverage.
pub fn orbit_photometric_error(
    scene: &SyntheticScene,
    i: usize,
    degrees: f64,
    tau: f64,
) -> (f64, f64) {
    let ds = &scene.dataset;
    let vi = &ds.views[i];
    let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), degrees.to_radians());
    let eye = rot * vi.pose.center() + Vector3::new(0.0, 0.05, 0.0);
    let pj = Pose::look_at(eye, Vector3::zeros(), Vector3::y());
    let (img_j, depth_j) = render_ground_truth(scene, &pj).unwrap();
    let rel = relative_pose(&pj, &vi.pose);
    let r = inverse_warp(
        &vi.image,
        vi.depth.as_ref().unwrap(),
        &depth_j,
        &rel,
        &ds.camera,
        tau,
        DepthUnits::World,
    )
    .unwrap();
    let mut sum = 0.0;
    for y in 0..ds.camera.height {
        for x in 0..ds.camera.width {
            if r.mask.get(x, y) {
                for c in 0..3 {
                    sum += (r.warped_image.get(x, y, c) - img_j.get(x, y, c)).abs();
                }
            }
        }
    }
    (sum / (3 * r.mask.count().max(1)) as f64, r.valid_fraction)
}

/// The default synthetic scene at a resolution where nearest sampling is fine-grained.
pub fn photometric_scene() -> SyntheticScene {
    generate_synthetic(&SyntheticSceneSpec {
        width: 128,
        height: 128,
        ..Default::default()
    })
    .unwrap()
}
