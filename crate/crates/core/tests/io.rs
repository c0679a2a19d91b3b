use ipsm_core::eval::{psnr, DEFAULT_PSNR_CAP};
use ipsm_core::image::Image;
use ipsm_core::io::image_io::{decode_pnm, decode_raster, encode_pnm, encode_raster};
use ipsm_core::io::{read_image, read_scene, write_image, write_scene, Config, SceneFile};
use ipsm_core::rasterizer::render;
use ipsm_core::scene::checkpoint;
use ipsm_core::synthetic::{
    generate_synthetic, ground_truth_options, ring_poses, SyntheticSceneSpec,
};
use nalgebra::Vector3;
use proptest::prelude::*;

fn small_spec(seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        seed,
        gaussian_count: 30,
        width: 16,
        height: 16,
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn float_raster_round_trip_is_bit_identical(
        w in 1usize..6, h in 1usize..6, c in prop::sample::select(vec![1usize, 3]),
        seed in any::<u64>(),
    ) {
        let data: Vec<f64> = (0..w * h * c)
            .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 35) as u32 | 0x3c00_0000) as f64)
            .collect();
        let img = Image::from_vec(w, h, c, data).unwrap();
        let back = decode_raster(&encode_raster(&img)).unwrap();
        prop_assert_eq!(back.data(), img.data());
    }

    #[test]
    fn eight_bit_round_trip_error_is_at_most_half_a_step(vals in prop::collection::vec(0.0f64..=1.0, 12)) {
        let img = Image::from_vec(2, 2, 3, vals).unwrap();
        let back = decode_pnm(&encode_pnm(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn config_print_parse_is_a_fixpoint(
        entries in prop::collection::vec(("[a-z]{1,6}", "[a-z_]{1,8}", "[a-zA-Z0-9 .-]{0,12}"), 0..10),
    ) {
        let mut cfg = Config::new();
        for (s, k, v) in &entries {
            cfg.set(s, k, v.trim());
        }
        let text = cfg.to_text();
        let parsed = Config::parse(&text).unwrap();
        prop_assert_eq!(parsed.to_text(), text);
    }
}

#[test]
fn float_image_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_vec(2, 1, 3, vec![0.0, 0.25, 0.5, 1.0, -3.5, 1e-3f32 as f64]).unwrap();
    let p = dir.path().join("x.frst");
    write_image(&p, &img).unwrap();
    assert_eq!(read_image(&p).unwrap(), img);
}

#[test]
fn fixed_seed_gives_identical_scenes() {
    let a = generate_synthetic(&small_spec(11)).unwrap();
    let b = generate_synthetic(&small_spec(11)).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.ground_truth, b.ground_truth);
    let c = generate_synthetic(&small_spec(12)).unwrap();
    assert_ne!(a.ground_truth, c.ground_truth);
}

#[test]
fn ring_cameras_look_at_the_target() {
    let spec = SyntheticSceneSpec {
        look_at: Vector3::new(0.3, -0.2, 0.5),
        ..Default::default()
    };
    let poses = ring_poses(&spec);
    assert_eq!(poses.len(), 12);
    for p in &poses {
        let dir = (spec.look_at - p.center()).normalize();
        let axis = p.rotation.row(2).transpose();
        assert!(
            (axis - dir).norm() < 1e-6,
            "optical axis {axis:?} vs {dir:?}"
        );
        let in_cam = p.transform(&spec.look_at);
        assert!(in_cam.x.abs() < 1e-6 && in_cam.y.abs() < 1e-6 && in_cam.z > 0.0);
    }
}

#[test]
fn noiseless_images_re_render_exactly() {
    let scene = generate_synthetic(&small_spec(4)).unwrap();
    let ds = &scene.dataset;
    assert_eq!(ds.train.len(), 3);
    assert_eq!(ds.train.len() + ds.test.len(), 12);
    for v in &ds.views {
        let out = render(
            &scene.ground_truth,
            &ds.camera,
            &v.pose,
            &ground_truth_options(),
        )
        .unwrap();
        let p = psnr(&out.color, &v.image, None, DEFAULT_PSNR_CAP).unwrap();
        assert_eq!(p, DEFAULT_PSNR_CAP);
    }
}

#[test]
fn scene_file_round_trip() {
    let scene = generate_synthetic(&small_spec(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_scene(
        dir.path(),
        &SceneFile {
            dataset: scene.dataset.clone(),
            ground_truth: Some(scene.ground_truth.clone()),
        },
    )
    .unwrap();
    let back = read_scene(&path).unwrap();
    let (a, b) = (&scene.dataset, &back.dataset);
    let stored = checkpoint::read_binary(&checkpoint::to_bytes(&scene.ground_truth)[..]).unwrap();
    assert_eq!(back.ground_truth, Some(stored));
    assert_eq!(a.camera, b.camera);
    assert_eq!(a.bounds, b.bounds);
    assert_eq!((&a.train, &a.test), (&b.train, &b.test));
    assert_eq!(a.views.len(), b.views.len());
    for (u, v) in a.views.iter().zip(&b.views) {
        assert_eq!(u.name, v.name);
        assert_eq!(u.pose, v.pose);
        for (x, y) in u.image.data().iter().zip(v.image.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
        let (du, dv) = (u.depth.as_ref().unwrap(), v.depth.as_ref().unwrap());
        for (x, y) in du.data().iter().zip(dv.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
}

#[test]
fn scene_with_missing_image_is_rejected() {
    let scene = generate_synthetic(&small_spec(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_scene(
        dir.path(),
        &SceneFile {
            dataset: scene.dataset,
            ground_truth: None,
        },
    )
    .unwrap();
    std::fs::remove_file(dir.path().join("view_03.frst")).unwrap();
    assert!(read_scene(&path).is_err());
}
