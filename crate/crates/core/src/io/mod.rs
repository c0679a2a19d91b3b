//! File formats: images, configs, scene descriptions, and CSV logs.

pub mod config;
pub mod image_io;
pub mod scene_file;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::scene::checkpoint::CheckpointError;

pub use config::Config;
pub use image_io::{read_image, write_image};
pub use scene_file::{read_scene, write_scene, SceneFile};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("referenced file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl IoError {
    pub(crate) fn file(path: &Path, err: impl std::fmt::Display) -> Self {
        IoError::File {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

/// Writes a header and rows of displayable cells.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), IoError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: ToString,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.into_iter().map(|c| c.to_string()))?;
    }
    w.flush().map_err(|e| IoError::file(path, e))?;
    Ok(())
}

/// Reads `view,score` rows (header optional) of externally computed perceptual scores.
pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(IoError::Malformed(format!(
                "{}: row {} needs 2 fields",
                path.display(),
                n + 1
            )));
        }
        match rec[1].parse::<f64>() {
            Ok(v) => out.push((rec[0].to_string(), v)),
            Err(_) if n == 0 => continue,
            Err(_) => {
                return Err(IoError::Malformed(format!(
                    "{}: row {} has non-numeric score `{}`",
                    path.display(),
                    n + 1,
                    &rec[1]
                )))
            }
        }
    }
    Ok(out)
}
