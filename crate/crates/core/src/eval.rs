//! Held-out reconstruction metrics.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::View;
use crate::geometry::CameraIntrinsics;
use crate::image::{Image, Mask};
use crate::rasterizer::{render, RenderError, RenderOptions};
use crate::regularizers::{ssim_value, LossError};
use crate::scene::GaussianCloud;

pub const DEFAULT_PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("images disagree in shape")]
    ShapeMismatch,
    #[error("every pixel is excluded by the mask")]
    EmptyMask,
    #[error("metric out of range: {0}")]
    InvalidRange(String),
    #[error("no views to evaluate")]
    NoViews,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// `10·log10(1/MSE)` over the pixels where `mask` is set, clamped to `[0, cap]`.
pub fn psnr(
    rendered: &Image,
    target: &Image,
    mask: Option<&Mask>,
    cap: f64,
) -> Result<f64, EvalError> {
    if !rendered.same_shape(target) {
        return Err(EvalError::ShapeMismatch);
    }
    if let Some(m) = mask {
        if m.width() != target.width() || m.height() != target.height() {
            return Err(EvalError::ShapeMismatch);
        }
    }
    let ch = target.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for p in 0..target.pixel_count() {
        if mask.is_some_and(|m| !m.bits()[p]) {
            continue;
        }
        for c in 0..ch {
            let d = rendered.data()[p * ch + c] - target.data()[p * ch + c];
            sum += d * d;
        }
        n += ch;
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).clamp(0.0, cap))
}

/// Geometric mean of `√(1−SSIM)`, the perceptual score if given, and `10^(−PSNR/10)`.
///
/// Without a perceptual score this is the two-term aggregate, which is not
/// comparable to the three-term one.
pub fn avge(ssim: f64, psnr: f64, perceptual: Option<f64>) -> Result<f64, EvalError> {
    if !(-1.0..=1.0).contains(&ssim) {
        return Err(EvalError::InvalidRange(format!("SSIM {ssim}")));
    }
    if !psnr.is_finite() {
        return Err(EvalError::InvalidRange(format!("PSNR {psnr}")));
    }
    let s = (1.0 - ssim).sqrt();
    let mse = 10f64.powf(-psnr / 10.0);
    match perceptual {
        Some(l) if !(l >= 0.0 && l.is_finite()) => {
            Err(EvalError::InvalidRange(format!("perceptual score {l}")))
        }
        Some(l) => Ok((s * l * mse).cbrt()),
        None => Ok((s * mse).sqrt()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub avge2: f64,
    pub perceptual: Option<f64>,
    pub avge3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ViewMetrics>,
    /// Per-field mean of `rows`; `avge3` only when every row has one.
    pub mean: ViewMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub render: RenderOptions,
    pub psnr_cap: f64,
    /// Externally computed perceptual scores keyed by view name.
    pub perceptual: HashMap<String, f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            render: RenderOptions::default(),
            psnr_cap: DEFAULT_PSNR_CAP,
            perceptual: HashMap::new(),
        }
    }
}

pub fn view_metrics(
    name: &str,
    rendered: &Image,
    target: &Image,
    opts: &EvalOptions,
) -> Result<ViewMetrics, EvalError> {
    let p = psnr(rendered, target, None, opts.psnr_cap)?;
    let s = ssim_value(rendered, target)?;
    let perceptual = opts.perceptual.get(name).copied();
    Ok(ViewMetrics {
        name: name.to_string(),
        psnr: p,
        ssim: s,
        avge2: avge(s, p, None)?,
        perceptual,
        avge3: perceptual.map(|l| avge(s, p, Some(l))).transpose()?,
    })
}

/// Renders every view and aggregates its metrics.
pub fn evaluate(
    cloud: &GaussianCloud,
    cam: &CameraIntrinsics,
    views: &[&View],
    opts: &EvalOptions,
) -> Result<MetricReport, EvalError> {
    if views.is_empty() {
        return Err(EvalError::NoViews);
    }
    let rows = views
        .par_iter()
        .map(|v| {
            let out = render(cloud, cam, &v.pose, &opts.render)?;
            view_metrics(&v.name, &out.color, &v.image, opts)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(MetricReport {
        mean: mean_row(&rows),
        rows,
    })
}

fn mean_row(rows: &[ViewMetrics]) -> ViewMetrics {
    let n = rows.len() as f64;
    let mean = |f: fn(&ViewMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let optional_mean = |f: fn(&ViewMetrics) -> Option<f64>| {
        rows.iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n)
    };
    ViewMetrics {
        name: "mean".to_string(),
        psnr: mean(|r| r.psnr),
        ssim: mean(|r| r.ssim),
        avge2: mean(|r| r.avge2),
        perceptual: optional_mean(|r| r.perceptual),
        avge3: optional_mean(|r| r.avge3),
    }
}
