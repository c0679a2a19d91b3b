//! Tile-parallel differentiable rasterizer for color and depth.
//!
//! Per pixel, Gaussians whose 3σ footprint covers the pixel are composited
//! front to back:
//!
//! ```text
//! color = Σ c_n α̃_n T_n + background · T_final
//! depth = Σ d_n α̃_n T_n                 (no background term)
//! T_n   = Π_{m<n} (1 − α̃_m)
//! α̃_n  = min(0.99, α_n · exp(−½ δᵀ Σ₂ᴰ⁻¹ δ)),   skipped below 1/255
//! ```
//!
//! Pixels whose accumulated alpha is below [`MIN_DEPTH_ALPHA`] report depth 0.
//! Work is split into 16×16 tiles; every per-pixel composite runs in a fixed
//! order and per-tile gradient buffers are merged in tile order, so results
//! do not depend on the number of worker threads.

mod backward;
mod project;
mod stats;

use rayon::prelude::*;
use thiserror::Error;

pub use backward::{render_backward, CloudGradients};
pub use project::{
    project_gaussian, PixelRect, Projected2DGaussian, ProjectionResult, COV_DILATION, NEAR_PLANE,
};
pub use stats::DensificationStats;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::Image;
use crate::scene::{GaussianCloud, SceneError};
use project::Projection;

pub const TILE_SIZE: usize = 16;
pub const MAX_FRAGMENT_ALPHA: f64 = 0.99;
pub const MIN_FRAGMENT_ALPHA: f64 = 1.0 / 255.0;
/// Below this accumulated alpha a pixel's depth is reported as 0 (invalid).
pub const MIN_DEPTH_ALPHA: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("cloud changed since the forward pass")]
    StaleWorkspace,
    #[error("gradient buffer has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Divide composited depth by accumulated alpha.
    pub normalize_depth: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            normalize_depth: false,
        }
    }
}

impl RenderOptions {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background,
            ..Self::default()
        }
    }
}

/// One composited contribution at a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub index: u32,
    /// Position of the Gaussian in its tile's depth-sorted list.
    pub(crate) local: u32,
    pub alpha: f64,
    /// Transmittance in front of this fragment.
    pub transmittance: f64,
    pub(crate) clamped: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Tile {
    pub rect: PixelRect,
    /// Visible Gaussians overlapping the tile, sorted by (depth, index).
    pub gaussians: Vec<u32>,
}

#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    pub fingerprint: u64,
    pub cam: CameraIntrinsics,
    pub pose: Pose,
    pub options: RenderOptions,
    pub projections: Vec<Option<Projection>>,
    pub tiles: Vec<Tile>,
    /// `fragments[offsets[p]..offsets[p + 1]]` belong to pixel `p`.
    pub fragments: Vec<Fragment>,
    pub offsets: Vec<usize>,
    pub raw_depth: Vec<f64>,
}

/// Rendered images plus the workspace retained for [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: Image,
    pub accum_alpha: Image,
    pub final_transmittance: Image,
    pub(crate) ws: Workspace,
}

impl RenderOutput {
    pub fn fragments(&self, x: usize, y: usize) -> &[Fragment] {
        let p = y * self.ws.cam.width + x;
        &self.ws.fragments[self.ws.offsets[p]..self.ws.offsets[p + 1]]
    }

    pub fn is_visible(&self, n: usize) -> bool {
        self.ws.projections.get(n).is_some_and(|p| p.is_some())
    }

    pub fn projected(&self, n: usize) -> Option<&Projected2DGaussian> {
        self.ws.projections.get(n)?.as_ref().map(|p| &p.public)
    }

    /// Screen radius (pixels) of each Gaussian; 0 when culled.
    pub fn radii(&self) -> Vec<f64> {
        self.ws
            .projections
            .iter()
            .map(|p| p.as_ref().map_or(0.0, |p| p.radius))
            .collect()
    }

    /// Depth-validity mask: accumulated alpha at least [`MIN_DEPTH_ALPHA`].
    pub fn valid_depth(&self) -> Vec<bool> {
        self.accum_alpha
            .data()
            .iter()
            .map(|&a| a >= MIN_DEPTH_ALPHA)
            .collect()
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.ws.cam
    }

    pub fn pose(&self) -> &Pose {
        &self.ws.pose
    }
}

struct PixelResult {
    color: [f64; 3],
    raw_depth: f64,
    accum: f64,
    transmittance: f64,
    fragments: Vec<Fragment>,
}

pub(crate) fn tile_grid(width: usize, height: usize) -> Vec<PixelRect> {
    let mut rects = Vec::new();
    for ty in (0..height).step_by(TILE_SIZE) {
        for tx in (0..width).step_by(TILE_SIZE) {
            rects.push(PixelRect {
                x0: tx,
                x1: (tx + TILE_SIZE).min(width) - 1,
                y0: ty,
                y1: (ty + TILE_SIZE).min(height) - 1,
            });
        }
    }
    rects
}

#[inline]
pub(crate) fn fragment_alpha(p: &Projection, x: usize, y: usize) -> Option<(f64, f64, bool)> {
    let dx = x as f64 - p.public.mean2d.x;
    let dy = y as f64 - p.public.mean2d.y;
    let [a, b, c] = p.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let raw = p.public.opacity * g;
    let (alpha, clamped) = if raw > MAX_FRAGMENT_ALPHA {
        (MAX_FRAGMENT_ALPHA, true)
    } else {
        (raw, false)
    };
    (alpha >= MIN_FRAGMENT_ALPHA).then_some((alpha, g, clamped))
}

/// Forward pass: color, depth, and accumulated alpha.
pub fn render(
    cloud: &GaussianCloud,
    cam: &CameraIntrinsics,
    pose: &Pose,
    options: &RenderOptions,
) -> Result<RenderOutput, RenderError> {
    let center = pose.center();
    let projections: Vec<Option<Projection>> = (0..cloud.len())
        .into_par_iter()
        .map(|n| project::project_full(cloud, n, cam, pose, &center))
        .collect::<Result<_, _>>()?;

    let tiles: Vec<Tile> = tile_grid(cam.width, cam.height)
        .into_par_iter()
        .map(|rect| {
            let mut gaussians: Vec<u32> = projections
                .iter()
                .enumerate()
                .filter_map(|(n, p)| {
                    p.as_ref()
                        .filter(|p| p.rect.intersects(&rect))
                        .map(|_| n as u32)
                })
                .collect();
            gaussians.sort_by(|&i, &j| {
                let di = projections[i as usize].as_ref().unwrap().public.depth;
                let dj = projections[j as usize].as_ref().unwrap().public.depth;
                di.total_cmp(&dj).then(i.cmp(&j))
            });
            Tile { rect, gaussians }
        })
        .collect();

    let bg = options.background;
    let tile_pixels: Vec<Vec<PixelResult>> = tiles
        .par_iter()
        .map(|tile| {
            let r = tile.rect;
            let mut out = Vec::with_capacity((r.x1 - r.x0 + 1) * (r.y1 - r.y0 + 1));
            for y in r.y0..=r.y1 {
                for x in r.x0..=r.x1 {
                    let mut t = 1.0;
                    let mut color = [0.0; 3];
                    let mut depth = 0.0;
                    let mut accum = 0.0;
                    let mut fragments = Vec::new();
                    for (local, &n) in tile.gaussians.iter().enumerate() {
                        let p = projections[n as usize].as_ref().unwrap();
                        if !p.rect.contains(x, y) {
                            continue;
                        }
                        let Some((alpha, _, clamped)) = fragment_alpha(p, x, y) else {
                            continue;
                        };
                        let w = alpha * t;
                        for c in 0..3 {
                            color[c] += p.public.color[c] * w;
                        }
                        depth += p.public.depth * w;
                        accum += w;
                        fragments.push(Fragment {
                            index: n,
                            local: local as u32,
                            alpha,
                            transmittance: t,
                            clamped,
                        });
                        t *= 1.0 - alpha;
                    }
                    for c in 0..3 {
                        color[c] += bg[c] * t;
                    }
                    out.push(PixelResult {
                        color,
                        raw_depth: depth,
                        accum,
                        transmittance: t,
                        fragments,
                    });
                }
            }
            out
        })
        .collect();

    let (w, h) = (cam.width, cam.height);
    let mut color = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut accum_alpha = Image::new(w, h, 1);
    let mut final_t = Image::new(w, h, 1);
    let mut raw_depth = vec![0.0; w * h];
    let mut per_pixel: Vec<Vec<Fragment>> = vec![Vec::new(); w * h];
    for (tile, pixels) in tiles.iter().zip(tile_pixels) {
        let r = tile.rect;
        let mut it = pixels.into_iter();
        for y in r.y0..=r.y1 {
            for x in r.x0..=r.x1 {
                let px = it.next().unwrap();
                for c in 0..3 {
                    color.set(x, y, c, px.color[c]);
                }
                let d = if px.accum < MIN_DEPTH_ALPHA {
                    0.0
                } else if options.normalize_depth {
                    px.raw_depth / px.accum
                } else {
                    px.raw_depth
                };
                depth.set(x, y, 0, d);
                accum_alpha.set(x, y, 0, px.accum);
                final_t.set(x, y, 0, px.transmittance);
                raw_depth[y * w + x] = px.raw_depth;
                per_pixel[y * w + x] = px.fragments;
            }
        }
    }
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut fragments = Vec::new();
    offsets.push(0);
    for f in per_pixel {
        fragments.extend(f);
        offsets.push(fragments.len());
    }

    Ok(RenderOutput {
        color,
        depth,
        accum_alpha,
        final_transmittance: final_t,
        ws: Workspace {
            fingerprint: cloud.fingerprint(),
            cam: *cam,
            pose: *pose,
            options: *options,
            projections,
            tiles,
            fragments,
            offsets,
            raw_depth,
        },
    })
}
