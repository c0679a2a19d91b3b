//! Analytic gradients of the rendered color and depth w.r.t. every Gaussian parameter.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::project::Projection;
use super::{fragment_alpha, RenderError, RenderOutput, MIN_DEPTH_ALPHA};
use crate::geometry::CameraIntrinsics;
use crate::image::Image;
use crate::scene::{sh, GaussianCloud};

/// Gradients laid out like the cloud's parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradients {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    /// Gradient w.r.t. each projected 2D mean, in pixels.
    pub mean2d: Vec<Vector2<f64>>,
}

impl CloudGradients {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; cloud.sh.len()],
            mean2d: vec![Vector2::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &CloudGradients, scale: f64) {
        assert_eq!(self.len(), other.len());
        assert_eq!(self.sh.len(), other.sh.len());
        for i in 0..self.len() {
            self.positions[i] += other.positions[i] * scale;
            self.log_scales[i] += other.log_scales[i] * scale;
            self.opacity_logits[i] += other.opacity_logits[i] * scale;
            self.mean2d[i] += other.mean2d[i] * scale;
            for k in 0..4 {
                self.rotations[i][k] += other.rotations[i][k] * scale;
            }
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b * scale;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for i in 0..self.len() {
            self.positions[i] *= s;
            self.log_scales[i] *= s;
            self.opacity_logits[i] *= s;
            self.mean2d[i] *= s;
            for q in &mut self.rotations[i] {
                *q *= s;
            }
        }
        for v in &mut self.sh {
            *v *= s;
        }
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

/// Screen-space gradient of one Gaussian.
#[derive(Debug, Clone, Copy, Default)]
struct Partial2D {
    mean2d: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl Partial2D {
    fn add(&mut self, o: &Partial2D) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

fn check_shape(img: &Image, w: usize, h: usize, c: usize) -> Result<(), RenderError> {
    let got = (img.width(), img.height(), img.channels());
    if got != (w, h, c) {
        return Err(RenderError::ShapeMismatch {
            got,
            expected: (w, h, c),
        });
    }
    Ok(())
}

/// Backpropagates `dcolor` (W×H×3) and `ddepth` (W×H×1) through the render in `out`.
///
/// Fails with [`RenderError::StaleWorkspace`] if `cloud` was modified after
/// the forward pass that produced `out`.
pub fn render_backward(
    cloud: &GaussianCloud,
    out: &RenderOutput,
    dcolor: &Image,
    ddepth: &Image,
) -> Result<CloudGradients, RenderError> {
    let ws = &out.ws;
    if cloud.fingerprint() != ws.fingerprint {
        return Err(RenderError::StaleWorkspace);
    }
    let (w, h) = (ws.cam.width, ws.cam.height);
    check_shape(dcolor, w, h, 3)?;
    check_shape(ddepth, w, h, 1)?;
    let bg = ws.options.background;
    let proj = &ws.projections;

    let tile_partials: Vec<Vec<Partial2D>> = ws
        .tiles
        .par_iter()
        .map(|tile| {
            let mut acc = vec![Partial2D::default(); tile.gaussians.len()];
            let r = tile.rect;
            for y in r.y0..=r.y1 {
                for x in r.x0..=r.x1 {
                    let pix = y * w + x;
                    let frags = &ws.fragments[ws.offsets[pix]..ws.offsets[pix + 1]];
                    let t_final = out.final_transmittance.get(x, y, 0);
                    let dc = [
                        dcolor.get(x, y, 0),
                        dcolor.get(x, y, 1),
                        dcolor.get(x, y, 2),
                    ];
                    let accum = out.accum_alpha.get(x, y, 0);
                    let dd_out = ddepth.get(x, y, 0);
                    let (d_raw, d_acc) = if accum < MIN_DEPTH_ALPHA {
                        (0.0, 0.0)
                    } else if ws.options.normalize_depth {
                        (
                            dd_out / accum,
                            -dd_out * ws.raw_depth[pix] / (accum * accum),
                        )
                    } else {
                        (dd_out, 0.0)
                    };
                    if dc.iter().all(|&v| v == 0.0) && d_raw == 0.0 && d_acc == 0.0 {
                        continue;
                    }
                    let mut s_color = [bg[0] * t_final, bg[1] * t_final, bg[2] * t_final];
                    let mut s_depth = 0.0;
                    let mut s_acc = 0.0;
                    for f in frags.iter().rev() {
                        let p = proj[f.index as usize].as_ref().unwrap();
                        let (alpha, t) = (f.alpha, f.transmittance);
                        let wgt = alpha * t;
                        let part = &mut acc[f.local as usize];
                        for c in 0..3 {
                            part.color[c] += dc[c] * wgt;
                        }
                        part.depth += d_raw * wgt;

                        if !f.clamped {
                            let inv = 1.0 / (1.0 - alpha);
                            let mut dalpha = 0.0;
                            for c in 0..3 {
                                dalpha += dc[c] * (p.public.color[c] * t - s_color[c] * inv);
                            }
                            dalpha += d_raw * (p.public.depth * t - s_depth * inv);
                            dalpha += d_acc * (t - s_acc * inv);

                            let (_, g, _) = fragment_alpha(p, x, y).unwrap();
                            part.opacity += dalpha * g;
                            let dpower = dalpha * alpha;
                            let dx = x as f64 - p.public.mean2d.x;
                            let dy = y as f64 - p.public.mean2d.y;
                            let [a, b, c] = p.conic;
                            part.mean2d[0] += dpower * (a * dx + b * dy);
                            part.mean2d[1] += dpower * (b * dx + c * dy);
                            part.conic[0] += -0.5 * dx * dx * dpower;
                            part.conic[1] += -dx * dy * dpower;
                            part.conic[2] += -0.5 * dy * dy * dpower;
                        }

                        for c in 0..3 {
                            s_color[c] += p.public.color[c] * wgt;
                        }
                        s_depth += p.public.depth * wgt;
                        s_acc += wgt;
                    }
                }
            }
            acc
        })
        .collect();

    let mut partials = vec![Partial2D::default(); cloud.len()];
    for (tile, acc) in ws.tiles.iter().zip(&tile_partials) {
        for (&n, part) in tile.gaussians.iter().zip(acc) {
            partials[n as usize].add(part);
        }
    }

    let stride = cloud.sh_stride();
    let per_gaussian: Vec<Option<PerGaussian>> = (0..cloud.len())
        .into_par_iter()
        .map(|n| {
            proj[n]
                .as_ref()
                .map(|p| chain_to_3d(cloud, n, p, &partials[n], &ws.pose.rotation, &ws.cam))
        })
        .collect();

    let mut grads = CloudGradients::zeros(cloud);
    for (n, g) in per_gaussian.into_iter().enumerate() {
        let Some(g) = g else { continue };
        grads.positions[n] = g.position;
        grads.rotations[n] = g.rotation;
        grads.log_scales[n] = g.log_scale;
        grads.opacity_logits[n] = g.opacity_logit;
        grads.mean2d[n] = Vector2::new(partials[n].mean2d[0], partials[n].mean2d[1]);
        grads.sh[n * stride..(n + 1) * stride].copy_from_slice(&g.sh);
    }
    Ok(grads)
}

struct PerGaussian {
    position: Vector3<f64>,
    rotation: [f64; 4],
    log_scale: Vector3<f64>,
    opacity_logit: f64,
    sh: Vec<f64>,
}

fn chain_to_3d(
    cloud: &GaussianCloud,
    n: usize,
    p: &Projection,
    g2: &Partial2D,
    w: &Matrix3<f64>,
    cam: &CameraIntrinsics,
) -> PerGaussian {
    let t = p.cam_point;
    let jac: Matrix2x3<f64> = p.jacobian;

    // Conic → 2D covariance.
    let [a, b, c] = p.conic;
    let q = Matrix2::new(a, b, b, c);
    let g_q = Matrix2::new(
        g2.conic[0],
        0.5 * g2.conic[1],
        0.5 * g2.conic[1],
        g2.conic[2],
    );
    let g_cov2 = -(q * g_q * q);

    // cov2d = J M Jᵀ + dilation.
    let g_j = 2.0 * g_cov2 * jac * p.cam_cov;
    let g_m = jac.transpose() * g_cov2 * jac;
    let g_sigma = w.transpose() * g_m * w;

    // Σ = A Aᵀ, A = R S.
    let s = Matrix3::from_diagonal(&p.scales);
    let a_mat = p.rot * s;
    let g_a = (g_sigma + g_sigma.transpose()) * a_mat;
    let g_r = g_a * s;
    let mut log_scale = Vector3::zeros();
    for j in 0..3 {
        let mut gs = 0.0;
        for i in 0..3 {
            gs += g_a[(i, j)] * p.rot[(i, j)];
        }
        log_scale[j] = gs * p.scales[j];
    }
    let rotation = quaternion_grad(&cloud.rotations[n], &g_r);

    // Camera-frame point through mean2d, J, and depth.
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = Vector3::new(
        g2.mean2d[0] * fx * iz,
        g2.mean2d[1] * fy * iz,
        -g2.mean2d[0] * fx * t.x * iz2 - g2.mean2d[1] * fy * t.y * iz2,
    );
    g_t.x += g_j[(0, 2)] * (-fx * iz2);
    g_t.y += g_j[(1, 2)] * (-fy * iz2);
    g_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    g_t.z += g2.depth;
    let mut position = w.transpose() * g_t;

    // View-dependent color.
    let degree = cloud.active_sh_degree;
    let v = p.view_dir;
    let vnorm = v.norm();
    let dir = v / vnorm;
    let basis = sh::basis(&dir, degree);
    let coeffs = cloud.sh_row(n);
    let mut sh_grad = vec![0.0; cloud.sh_stride()];
    let dcol: [f64; 3] = std::array::from_fn(|ch| {
        if p.color_clamped[ch] {
            0.0
        } else {
            g2.color[ch]
        }
    });
    for k in 0..sh::coeff_count(degree) {
        for ch in 0..3 {
            sh_grad[k * 3 + ch] = basis[k] * dcol[ch];
        }
    }
    if degree > 0 {
        let bg = sh::basis_gradient(&dir, degree);
        let mut g_dir = Vector3::zeros();
        for k in 1..sh::coeff_count(degree) {
            let s: f64 = (0..3).map(|ch| coeffs[k * 3 + ch] * dcol[ch]).sum();
            g_dir += Vector3::new(bg[k][0], bg[k][1], bg[k][2]) * s;
        }
        position += (g_dir - dir * dir.dot(&g_dir)) / vnorm;
    }

    let o = p.public.opacity;
    PerGaussian {
        position,
        rotation,
        log_scale,
        opacity_logit: g2.opacity * o * (1.0 - o),
        sh: sh_grad,
    }
}

/// Gradient w.r.t. the raw quaternion given the gradient w.r.t. its rotation matrix.
fn quaternion_grad(q: &[f64; 4], g_r: &Matrix3<f64>) -> [f64; 4] {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    let d_w = Matrix3::new(
        0.0,
        -2.0 * z,
        2.0 * y,
        2.0 * z,
        0.0,
        -2.0 * x,
        -2.0 * y,
        2.0 * x,
        0.0,
    );
    let d_x = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let d_y = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let d_z = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    let gh = [
        g_r.component_mul(&d_w).sum(),
        g_r.component_mul(&d_x).sum(),
        g_r.component_mul(&d_y).sum(),
        g_r.component_mul(&d_z).sum(),
    ];
    let qh = [w, x, y, z];
    let dot: f64 = (0..4).map(|i| qh[i] * gh[i]).sum();
    std::array::from_fn(|i| (gh[i] - qh[i] * dot) / norm)
}
