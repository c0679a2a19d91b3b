//! Photometric, structural, depth-correlation, and geometry-consistency losses.
//!
//! Every loss returns its value together with the gradient with respect to
//! its first (rendered) argument.

use thiserror::Error;

use crate::image::Image;
use crate::rasterizer::MIN_DEPTH_ALPHA;
use crate::warp::{is_valid_depth, WarpResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("inputs disagree in shape")]
    ShapeMismatch,
    #[error("every pixel is excluded by the mask")]
    EmptyMask,
    #[error("image {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    ImageTooSmall { width: usize, height: usize },
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("correlation needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("loss weight {0} is negative")]
    NegativeWeight(f64),
}

/// A scalar loss and its gradient with respect to the rendered input.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Image,
}

/// Excludes target samples outside `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityBand {
    pub low: f64,
    pub high: f64,
}

impl Default for IntensityBand {
    fn default() -> Self {
        Self {
            low: 30.0 / 255.0,
            high: 0.99,
        }
    }
}

impl IntensityBand {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.low && v <= self.high
    }
}

/// Mean absolute error over the samples kept by `band` (all samples if `None`).
pub fn l1_loss(
    rendered: &Image,
    target: &Image,
    band: Option<IntensityBand>,
) -> Result<Loss, LossError> {
    if !rendered.same_shape(target) {
        return Err(LossError::ShapeMismatch);
    }
    let keep: Vec<bool> = target
        .data()
        .iter()
        .map(|&t| band.is_none_or(|b| b.contains(t)))
        .collect();
    let n = keep.iter().filter(|&&k| k).count();
    if n == 0 {
        return Err(LossError::EmptyMask);
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Image::new(rendered.width(), rendered.height(), rendered.channels());
    for (i, ((&r, &t), &k)) in rendered
        .data()
        .iter()
        .zip(target.data())
        .zip(&keep)
        .enumerate()
    {
        if k {
            value += (r - t).abs();
            grad.data_mut()[i] = inv * sign(r - t);
        }
    }
    Ok(Loss {
        value: value * inv,
        grad,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, v) in g.iter_mut().enumerate() {
        *v = (-(k as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-window separable filtering of one channel: output is `(w−10)×(h−10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|k| g[k] * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a `(w−10)×(h−10)` map back to `w×h`.
fn filter_adjoint(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut cols = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for k in 0..SSIM_WINDOW {
                cols[(y + k) * ow + x] += g[k] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = cols[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += g[k] * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    let ch = img.channels();
    img.data().iter().skip(c).step_by(ch).copied().collect()
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>), LossError> {
    if !a.same_shape(b) {
        return Err(LossError::ShapeMismatch);
    }
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(LossError::ImageTooSmall {
            width: w,
            height: h,
        });
    }
    let g = gaussian_window();
    let terms = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW) * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, ch));
    for c in 0..ch {
        let (ca, cb) = (channel(a, c), channel(b, c));
        let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&ca, w, h, &g);
        let mu_b = filter_valid(&cb, w, h, &g);
        let e_aa = filter_valid(&sq(&ca, &ca), w, h, &g);
        let e_bb = filter_valid(&sq(&cb, &cb), w, h, &g);
        let e_ab = filter_valid(&sq(&ca, &cb), w, h, &g);
        let n = mu_a.len();
        let (mut d_mu, mut d_aa, mut d_ab) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = var_a + var_b + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_mu[i] = s * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2);
                d_aa[i] = -s / b2;
                d_ab[i] = 2.0 * s / a2;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let g_mu = filter_adjoint(&d_mu, w, h, &g);
            let g_aa = filter_adjoint(&d_aa, w, h, &g);
            let g_ab = filter_adjoint(&d_ab, w, h, &g);
            for p in 0..w * h {
                let v = g_mu[p] + 2.0 * ca[p] * g_aa[p] + cb[p] * g_ab[p];
                grad.data_mut()[p * ch + c] = v / terms;
            }
        }
    }
    Ok((total / terms, grad))
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows and channels.
pub fn ssim_value(a: &Image, b: &Image) -> Result<f64, LossError> {
    ssim_impl(a, b, false).map(|(v, _)| v)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim(a: &Image, b: &Image) -> Result<(f64, Image), LossError> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Structural loss `1 − SSIM(rendered, target)`.
pub fn ssim_loss(rendered: &Image, target: &Image) -> Result<Loss, LossError> {
    let (v, g) = ssim(rendered, target)?;
    Ok(Loss {
        value: 1.0 - v,
        grad: g.map(|x| -x),
    })
}

struct Centered {
    a: Vec<f64>,
    b: Vec<f64>,
    saa: f64,
    sbb: f64,
    sab: f64,
}

fn center(a: &[f64], b: &[f64]) -> Result<Centered, LossError> {
    if a.len() != b.len() {
        return Err(LossError::ShapeMismatch);
    }
    if a.len() < 2 {
        return Err(LossError::TooShort(a.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let ca: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let cb: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    let (saa, sbb, sab) = (dot(&ca, &ca), dot(&cb, &cb), dot(&ca, &cb));
    // Relative test: rounding leaves a constant input with ~1e-32 relative variance.
    let degenerate = |s: f64, raw: &[f64]| s <= 1e-20 * dot(raw, raw) || s == 0.0;
    if degenerate(saa, a) || degenerate(sbb, b) {
        return Err(LossError::ZeroVariance);
    }
    Ok(Centered {
        a: ca,
        b: cb,
        saa,
        sbb,
        sab,
    })
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    let c = center(a, b)?;
    Ok((c.sab / (c.saa.sqrt() * c.sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation and its gradient with respect to `a`.
pub fn pearson_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    let c = center(a, b)?;
    let norm = c.saa.sqrt() * c.sbb.sqrt();
    let rho = c.sab / norm;
    let grad =
        c.a.iter()
            .zip(&c.b)
            .map(|(ca, cb)| cb / norm - rho * ca / c.saa)
            .collect();
    Ok((rho, grad))
}

/// How a correlation is turned into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrelationLoss {
    /// `1 − ρ`: rewards positive correlation with the oracle.
    #[default]
    OneMinus,
    /// `|ρ|`, the printed objective; drives correlation toward zero.
    Absolute,
}

/// A rendered depth, the oracle depth it is compared against, and the
/// rendered accumulated alpha that decides which pixels count.
#[derive(Debug, Clone, Copy)]
pub struct DepthPair<'a> {
    pub rendered: &'a Image,
    pub oracle: &'a Image,
    pub accum_alpha: &'a Image,
}

/// Correlation loss for one depth pair. `Err(ZeroVariance)` means the pair
/// carries no signal.
pub fn depth_term(pair: DepthPair<'_>, form: CorrelationLoss) -> Result<Loss, LossError> {
    let DepthPair {
        rendered,
        oracle,
        accum_alpha,
    } = pair;
    if !rendered.same_shape(oracle) || !rendered.same_shape(accum_alpha) || rendered.channels() != 1
    {
        return Err(LossError::ShapeMismatch);
    }
    let idx: Vec<usize> = (0..rendered.len())
        .filter(|&i| accum_alpha.data()[i] >= MIN_DEPTH_ALPHA && is_valid_depth(oracle.data()[i]))
        .collect();
    let a: Vec<f64> = idx.iter().map(|&i| rendered.data()[i]).collect();
    let b: Vec<f64> = idx.iter().map(|&i| oracle.data()[i]).collect();
    let (rho, g) = pearson_grad(&a, &b)?;
    let (value, scale) = match form {
        CorrelationLoss::OneMinus => (1.0 - rho, -1.0),
        CorrelationLoss::Absolute => (rho.abs(), sign(rho)),
    };
    let mut grad = Image::new(rendered.width(), rendered.height(), 1);
    for (&i, gi) in idx.iter().zip(g) {
        grad.data_mut()[i] = scale * gi;
    }
    Ok(Loss { value, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub seen: f64,
    pub pseudo: f64,
    pub grad_seen: Image,
    pub grad_pseudo: Option<Image>,
    /// Pairs that were skipped because one side was constant.
    pub zero_variance: usize,
}

/// `η_d·L(seen) + L(pseudo)` where each `L` is the correlation loss of a depth pair.
pub fn depth_loss(
    seen: DepthPair<'_>,
    pseudo: Option<DepthPair<'_>>,
    eta_d: f64,
    form: CorrelationLoss,
) -> Result<DepthLoss, LossError> {
    if !(eta_d >= 0.0) {
        return Err(LossError::NegativeWeight(eta_d));
    }
    let mut zero_variance = 0;
    let mut term = |pair: DepthPair<'_>| -> Result<Loss, LossError> {
        match depth_term(pair, form) {
            Err(LossError::ZeroVariance) | Err(LossError::TooShort(_)) => {
                zero_variance += 1;
                Ok(Loss {
                    value: 0.0,
                    grad: Image::new(pair.rendered.width(), pair.rendered.height(), 1),
                })
            }
            other => other,
        }
    };
    let s = term(seen)?;
    let p = pseudo.map(&mut term).transpose()?;
    let pseudo_value = p.as_ref().map_or(0.0, |l| l.value);
    Ok(DepthLoss {
        value: eta_d * s.value + pseudo_value,
        seen: s.value,
        pseudo: pseudo_value,
        grad_seen: s.grad.map(|g| eta_d * g),
        grad_pseudo: p.map(|l| l.grad),
        zero_variance,
    })
}

/// Masked L1 between a pseudo-view render and the warped seen view, averaged
/// over the 3 channels of every mask pixel.
pub fn geo_loss(x0: &Image, warp: &WarpResult) -> Result<Loss, LossError> {
    let target = &warp.warped_image;
    if !x0.same_shape(target)
        || warp.mask.width() != x0.width()
        || warp.mask.height() != x0.height()
    {
        return Err(LossError::ShapeMismatch);
    }
    let mut grad = Image::new(x0.width(), x0.height(), x0.channels());
    let count = warp.mask.count();
    if count == 0 {
        return Ok(Loss { value: 0.0, grad });
    }
    let ch = x0.channels();
    let inv = 1.0 / (ch * count) as f64;
    let mut value = 0.0;
    for (p, &on) in warp.mask.bits().iter().enumerate() {
        if on {
            for c in 0..ch {
                let i = p * ch + c;
                let d = x0.data()[i] - target.data()[i];
                value += d.abs();
                grad.data_mut()[i] = inv * sign(d);
            }
        }
    }
    Ok(Loss {
        value: value * inv,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub depth: f64,
    pub geo: f64,
    pub ipsm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.8,
            ssim: 0.2,
            depth: 0.5,
            geo: 2.0,
            ipsm: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for w in [self.l1, self.ssim, self.depth, self.geo, self.ipsm] {
            if !(w >= 0.0) {
                return Err(LossError::NegativeWeight(w));
            }
        }
        Ok(())
    }
}

/// Unweighted loss components. `ssim` holds the structural loss `1 − SSIM`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l1: f64,
    pub ssim: f64,
    pub depth: f64,
    pub geo: f64,
    pub ipsm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub parts: LossParts,
    pub total: f64,
}

pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let total = weights.l1 * parts.l1
        + weights.ssim * parts.ssim
        + weights.depth * parts.depth
        + weights.geo * parts.geo
        + weights.ipsm * parts.ipsm;
    Ok(LossBreakdown { parts, total })
}
