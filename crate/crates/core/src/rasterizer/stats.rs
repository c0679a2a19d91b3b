//! Per-Gaussian screen-space statistics gathered between densification steps.

use super::{CloudGradients, RenderOutput};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensificationStats {
    /// Running sum of view-space positional gradient norms, NDC units.
    pub grad_accum: Vec<f64>,
    /// Number of renders in which each Gaussian was visible.
    pub visible_count: Vec<u32>,
    /// Largest screen radius seen, pixels.
    pub max_radius: Vec<f64>,
}

impl DensificationStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            visible_count: vec![0; n],
            max_radius: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_accum.is_empty()
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }

    /// Records one render. Pixel gradients are rescaled by half the image
    /// size so the norm matches the NDC-space convention.
    pub fn accumulate(&mut self, out: &RenderOutput, grads: &CloudGradients) {
        assert_eq!(self.len(), grads.len());
        let (hw, hh) = (
            out.camera().width as f64 / 2.0,
            out.camera().height as f64 / 2.0,
        );
        for (n, r) in out.radii().into_iter().enumerate() {
            if r <= 0.0 {
                continue;
            }
            let g = grads.mean2d[n];
            self.grad_accum[n] += (g.x * hw).hypot(g.y * hh);
            self.visible_count[n] += 1;
            self.max_radius[n] = self.max_radius[n].max(r);
        }
    }

    /// Mean accumulated gradient; 0 for Gaussians never seen.
    pub fn mean_grad(&self) -> Vec<f64> {
        self.grad_accum
            .iter()
            .zip(&self.visible_count)
            .map(|(&g, &c)| if c == 0 { 0.0 } else { g / c as f64 })
            .collect()
    }

    /// Keeps rows where `keep` is true, matching `GaussianCloud::retain`.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.grad_accum.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.visible_count.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.max_radius.retain(|_| *it.next().unwrap());
    }

    /// Appends zeroed rows for newly added Gaussians.
    pub fn extend_to(&mut self, n: usize) {
        self.grad_accum.resize(n, 0.0);
        self.visible_count.resize(n, 0);
        self.max_radius.resize(n, 0.0);
    }
}
