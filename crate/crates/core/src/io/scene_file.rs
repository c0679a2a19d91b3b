//! Scene description files: intrinsics, poses, image references, and splits.
//!
//! ```text
//! [camera]
//! width = 32
//! height = 32
//! fx = 27.7
//! fy = 27.7
//! cx = 15.5
//! cy = 15.5
//!
//! [bounds]
//! center = 0 0 0
//! extent = 2.5
//!
//! [split]
//! train = 0 6 11
//! test = 1 2 3 4 5 7 8 9 10
//!
//! [scene]
//! ground_truth = ground_truth.gsck
//!
//! [view.view_00]
//! rotation = r00 r01 r02 r10 r11 r12 r20 r21 r22
//! translation = tx ty tz
//! image = view_00.frst
//! depth = view_00_depth.frst
//! ```
//!
//! File references are relative to the scene file's directory. Views are
//! indexed in the order their sections appear.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use super::config::{join, Config};
use super::image_io::{read_image, write_image};
use super::IoError;
use crate::dataset::{Dataset, View};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::scene::checkpoint;
use crate::scene::{GaussianCloud, SceneBounds};

pub const VIEW_PREFIX: &str = "view.";

#[derive(Debug, Clone)]
pub struct SceneFile {
    pub dataset: Dataset,
    /// Generating cloud, present for synthetic scenes.
    pub ground_truth: Option<GaussianCloud>,
}

fn resolve(base: &Path, rel: &str) -> Result<PathBuf, IoError> {
    let p = base.join(rel);
    if !p.is_file() {
        return Err(IoError::MissingFile(p));
    }
    Ok(p)
}

pub fn read_scene(path: &Path) -> Result<SceneFile, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    let cfg = Config::parse(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let camera = CameraIntrinsics::new(
        cfg.require("camera", "fx")?,
        cfg.require("camera", "fy")?,
        cfg.require("camera", "cx")?,
        cfg.require("camera", "cy")?,
        cfg.require("camera", "width")?,
        cfg.require("camera", "height")?,
    )
    .map_err(|e| IoError::Malformed(e.to_string()))?;
    let center: Vec<f64> = cfg
        .list("bounds", "center")?
        .unwrap_or_else(|| vec![0.0; 3]);
    if center.len() != 3 {
        return Err(IoError::Malformed("[bounds] center needs 3 values".into()));
    }
    let bounds = SceneBounds::new(
        Vector3::new(center[0], center[1], center[2]),
        cfg.require("bounds", "extent")?,
    )
    .map_err(|e| IoError::Malformed(e.to_string()))?;

    let mut views = Vec::new();
    for name in cfg.section_names() {
        let Some(view_name) = name.strip_prefix(VIEW_PREFIX) else {
            continue;
        };
        let r: Vec<f64> = cfg
            .list(name, "rotation")?
            .ok_or_else(|| IoError::Malformed(format!("[{name}] rotation is missing")))?;
        let t: Vec<f64> = cfg
            .list(name, "translation")?
            .ok_or_else(|| IoError::Malformed(format!("[{name}] translation is missing")))?;
        if r.len() != 9 || t.len() != 3 {
            return Err(IoError::Malformed(format!(
                "[{name}] rotation needs 9 values and translation 3"
            )));
        }
        let pose = Pose::new(Matrix3::from_row_slice(&r), Vector3::new(t[0], t[1], t[2]))
            .map_err(|e| IoError::Malformed(format!("[{name}] {e}")))?;
        let image_ref: String = cfg.require(name, "image")?;
        let image = read_image(&resolve(base, &image_ref)?)?;
        let depth = match cfg.get(name, "depth") {
            Some(d) => Some(read_image(&resolve(base, d)?)?),
            None => None,
        };
        views.push(View {
            name: view_name.to_string(),
            pose,
            image,
            depth,
        });
    }
    let train = cfg.list("split", "train")?.unwrap_or_default();
    let test = cfg.list("split", "test")?.unwrap_or_default();
    let dataset = Dataset {
        camera,
        views,
        bounds,
        train,
        test,
    };
    dataset.validate()?;
    let ground_truth = match cfg.get("scene", "ground_truth") {
        Some(g) => {
            let p = resolve(base, g)?;
            let file = fs::File::open(&p).map_err(|e| IoError::file(&p, e))?;
            Some(checkpoint::read_binary(std::io::BufReader::new(file))?)
        }
        None => None,
    };
    Ok(SceneFile {
        dataset,
        ground_truth,
    })
}

/// Writes `scene.ini` plus float rasters (and 8-bit previews) into `dir`.
pub fn write_scene(dir: &Path, scene: &SceneFile) -> Result<PathBuf, IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
    let ds = &scene.dataset;
    let mut cfg = Config::new();
    let c = &ds.camera;
    cfg.set("camera", "width", c.width);
    cfg.set("camera", "height", c.height);
    cfg.set("camera", "fx", c.fx);
    cfg.set("camera", "fy", c.fy);
    cfg.set("camera", "cx", c.cx);
    cfg.set("camera", "cy", c.cy);
    cfg.set("bounds", "center", join(ds.bounds.center.as_slice()));
    cfg.set("bounds", "extent", ds.bounds.extent);
    cfg.set("split", "train", join(&ds.train));
    cfg.set("split", "test", join(&ds.test));
    if let Some(gt) = &scene.ground_truth {
        let p = dir.join("ground_truth.gsck");
        fs::write(&p, checkpoint::to_bytes(gt)).map_err(|e| IoError::file(&p, e))?;
        cfg.set("scene", "ground_truth", "ground_truth.gsck");
    }
    for v in &ds.views {
        let section = format!("{VIEW_PREFIX}{}", v.name);
        let r = v.pose.rotation;
        let rows: Vec<f64> = (0..3)
            .flat_map(|i| (0..3).map(move |j| r[(i, j)]))
            .collect();
        cfg.set(&section, "rotation", join(&rows));
        cfg.set(&section, "translation", join(v.pose.translation.as_slice()));
        let image = format!("{}.frst", v.name);
        write_image(&dir.join(&image), &v.image)?;
        write_image(&dir.join(format!("{}.ppm", v.name)), &v.image)?;
        cfg.set(&section, "image", &image);
        if let Some(d) = &v.depth {
            let depth = format!("{}_depth.frst", v.name);
            write_image(&dir.join(&depth), d)?;
            cfg.set(&section, "depth", &depth);
        }
    }
    let path = dir.join("scene.ini");
    fs::write(&path, cfg.to_text()).map_err(|e| IoError::file(&path, e))?;
    Ok(path)
}
