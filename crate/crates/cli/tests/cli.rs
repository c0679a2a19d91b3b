use std::path::Path;
use std::process::{Command, Output};

fn ipsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipsm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ipsm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with_one_line(args: &[&str]) -> String {
    let out = ipsm(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic was: {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn scene_train_eval_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    ok(&[
        "gen-scene",
        "--out",
        s(&scene_dir),
        "--width",
        "16",
        "--height",
        "16",
        "--gaussians",
        "40",
        "--seed",
        "3",
    ]);
    let scene = scene_dir.join("scene.ini");
    assert!(scene.is_file());

    let config = dir.path().join("run.ini");
    std::fs::write(
        &config,
        "[data]\nscene = scene/scene.ini\n\n[train]\ntotal_iters = 30\ninit_count = 50\ncheckpoint_interval = 10\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let summary = ok(&[
        "train",
        "--config",
        s(&config),
        "--set",
        "lambda_geo=0.2",
        "--out",
        s(&run),
        "--seed",
        "1",
    ]);
    assert!(summary.contains("psnr="), "{summary}");
    for f in [
        "losses.csv",
        "metrics.csv",
        "final.gsck",
        "config.ini",
        "checkpoints/iter_000030.gsck",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let losses = std::fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 31);
    let resolved = std::fs::read_to_string(run.join("config.ini")).unwrap();
    assert!(
        resolved.contains("seed = 1") && resolved.contains("lambda_geo = 0.2"),
        "{resolved}"
    );
    assert!(std::fs::read_dir(run.join("renders")).unwrap().count() > 0);

    let ckpt = run.join("final.gsck");
    let csv = dir.path().join("eval.csv");
    let line = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--scene",
        s(&scene),
        "--out",
        s(&csv),
    ]);
    assert!(line.starts_with("views=9 "), "{line}");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 11);

    let renders = dir.path().join("renders");
    ok(&[
        "render",
        "--checkpoint",
        s(&ckpt),
        "--scene",
        s(&scene),
        "--views",
        "train",
        "--out",
        s(&renders),
    ]);
    assert!(renders.join("view_00.ppm").is_file() && renders.join("view_00_depth.frst").is_file());

    let warp = dir.path().join("warp");
    let line = ok(&[
        "warp-debug",
        "--scene",
        s(&scene),
        "--source",
        "0",
        "--target",
        "1",
        "--out",
        s(&warp),
    ]);
    assert!(line.contains("valid_fraction="), "{line}");
    for f in ["warped.ppm", "mask.pgm", "depth_error.ppm"] {
        assert!(warp.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    ok(&[
        "gen-scene",
        "--out",
        s(&scene_dir),
        "--width",
        "16",
        "--height",
        "16",
        "--gaussians",
        "30",
    ]);
    let scene = scene_dir.join("scene.ini");
    let train = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train",
            "--scene",
            s(&scene),
            "--iters",
            "20",
            "--set",
            "init_count=40",
            "--seed",
            "5",
            "--out",
            s(&out),
        ]);
        std::fs::read(out.join("final.gsck")).unwrap()
    };
    assert_eq!(train("a"), train("b"));
}

#[test]
fn mode_demo_writes_trajectories_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let line = ok(&[
        "mode-demo",
        "--seeds",
        "2",
        "--iterations",
        "20",
        "--size",
        "8",
        "--stride",
        "10",
        "--out",
        s(dir.path()),
    ]);
    assert!(line.starts_with("seeds=2 "), "{line}");
    let csv = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert!(csv.starts_with("seed,iteration,"));
    assert!(dir.path().join("summary.txt").is_file());
}

#[test]
fn errors_exit_nonzero_with_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ini");
    let err = fails_with_one_line(&["eval", "--checkpoint", s(&missing), "--scene", s(&missing)]);
    assert!(err.starts_with("error: "));
    let out = dir.path().join("o");
    fails_with_one_line(&[
        "train",
        "--scene",
        s(&missing),
        "--set",
        "no_such_key=1",
        "--out",
        s(&out),
    ]);
    fails_with_one_line(&[
        "train",
        "--scene",
        s(&missing),
        "--set",
        "lambda_ipsm=-1",
        "--out",
        s(&out),
    ]);
    fails_with_one_line(&["train", "--scene", s(&missing), "--out", s(&out)]);
    fails_with_one_line(&["gen-scene", "--width", "4", "--out", s(&out)]);

    let scene_dir = dir.path().join("scene");
    ok(&[
        "gen-scene",
        "--out",
        s(&scene_dir),
        "--width",
        "16",
        "--height",
        "16",
        "--gaussians",
        "20",
    ]);
    let scene = scene_dir.join("scene.ini");
    let err = fails_with_one_line(&[
        "warp-debug",
        "--scene",
        s(&scene),
        "--source",
        "0",
        "--target",
        "99",
        "--out",
        s(&out),
    ]);
    assert!(err.contains("out of range"), "{err}");
}
