//! Posed image collections with train/test splits.

use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::Image;
use crate::scene::SceneBounds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("view {0} does not match the camera resolution")]
    ResolutionMismatch(String),
    #[error("view index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("view {0} appears in both the train and test splits")]
    OverlappingSplits(usize),
    #[error("the train split is empty")]
    NoTrainViews,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    pub pose: Pose,
    pub image: Image,
    /// Depth from an external oracle (ground truth for synthetic scenes).
    pub depth: Option<Image>,
}

/// All views share one set of intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub camera: CameraIntrinsics,
    pub views: Vec<View>,
    pub bounds: SceneBounds,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for v in &self.views {
            let ok = v.image.width() == self.camera.width
                && v.image.height() == self.camera.height
                && v.image.channels() == 3
                && v.depth.as_ref().is_none_or(|d| {
                    d.width() == self.camera.width
                        && d.height() == self.camera.height
                        && d.channels() == 1
                });
            if !ok {
                return Err(DatasetError::ResolutionMismatch(v.name.clone()));
            }
        }
        if self.train.is_empty() {
            return Err(DatasetError::NoTrainViews);
        }
        for &i in self.train.iter().chain(&self.test) {
            if i >= self.views.len() {
                return Err(DatasetError::IndexOutOfRange(i));
            }
        }
        if let Some(&i) = self.train.iter().find(|i| self.test.contains(i)) {
            return Err(DatasetError::OverlappingSplits(i));
        }
        Ok(())
    }

    pub fn train_views(&self) -> impl Iterator<Item = &View> {
        self.train.iter().map(|&i| &self.views[i])
    }

    pub fn test_views(&self) -> impl Iterator<Item = &View> {
        self.test.iter().map(|&i| &self.views[i])
    }
}

/// `k` indices spread evenly over `0..n`, first and last included.
pub fn even_split(n: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let k = k.min(n);
    let train: Vec<usize> = match k {
        0 => Vec::new(),
        1 => vec![0],
        _ => (0..k)
            .map(|i| ((i * (n - 1)) as f64 / (k - 1) as f64 + 0.5).floor() as usize)
            .collect(),
    };
    let test = (0..n).filter(|i| !train.contains(i)).collect();
    (train, test)
}
