//! Adaptive density control: clone, split, proximity unpooling, pruning, opacity reset.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rasterizer::DensificationStats;
use crate::scene::{knn, logit, quat_to_matrix, GaussianCloud};

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyParams {
    /// Mean screen-space gradient (NDC units) above which a Gaussian densifies.
    pub grad_threshold: f64,
    /// Gaussians whose largest scale is at most this fraction of `extent` are cloned, larger ones split.
    pub percent_dense: f64,
    pub extent: f64,
    /// Neighbours used for unpooling.
    pub k: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub unpooled: usize,
    /// Per row of the grown cloud (before split sources are removed): keep flag.
    pub keep: Vec<bool>,
}

impl DensifyReport {
    pub fn added(&self) -> usize {
        self.cloned + 2 * self.split + self.unpooled
    }
}

fn max_scale(cloud: &GaussianCloud, n: usize) -> f64 {
    cloud.log_scales[n].max().exp()
}

/// Densifies `cloud` in place.
///
/// New rows are appended first, then split sources are removed, so callers
/// that track per-row state should extend to `keep.len()` rows and then
/// apply `keep`.
pub fn densify_and_unpool<R: Rng + ?Sized>(
    cloud: &mut GaussianCloud,
    stats: &DensificationStats,
    params: &DensifyParams,
    rng: &mut R,
) -> DensifyReport {
    let n = cloud.len();
    assert_eq!(stats.len(), n, "stats must track the cloud");
    let grads = stats.mean_grad();
    let over: Vec<usize> = (0..n)
        .filter(|&i| grads[i] > params.grad_threshold)
        .collect();
    let mut report = DensifyReport::default();
    if over.is_empty() {
        report.keep = vec![true; n];
        return report;
    }
    let mut remove = vec![false; n];
    let limit = params.percent_dense * params.extent;
    for &i in &over {
        let row = cloud.sh_row(i).to_vec();
        if max_scale(cloud, i) <= limit {
            cloud.push(
                cloud.positions[i],
                cloud.rotations[i],
                cloud.log_scales[i],
                cloud.opacity_logits[i],
                &row,
            );
            report.cloned += 1;
        } else {
            let rot = quat_to_matrix(&cloud.rotations[i])
                .unwrap_or_else(|_| nalgebra::Matrix3::identity());
            let scales = cloud.log_scales[i].map(f64::exp);
            let child_scale = cloud.log_scales[i].add_scalar(-SPLIT_SCALE_DIVISOR.ln());
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let offset = rot * scales.component_mul(&z);
                cloud.push(
                    cloud.positions[i] + offset,
                    cloud.rotations[i],
                    child_scale,
                    cloud.opacity_logits[i],
                    &row,
                );
            }
            remove[i] = true;
            report.split += 1;
        }
    }
    if n > params.k && params.k > 0 {
        let source = &cloud.positions[..n];
        let neighbours = knn(source, params.k);
        let mut nearest: Vec<f64> = neighbours.iter().map(|nb| nb[0].1.sqrt()).collect();
        nearest.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            nearest[n / 2]
        } else {
            0.5 * (nearest[n / 2 - 1] + nearest[n / 2])
        };
        let zero_sh = vec![0.0; cloud.sh_stride()];
        for &i in &over {
            let nb = &neighbours[i];
            if nb[0].1.sqrt() <= median {
                continue;
            }
            let mut centroid = cloud.positions[i];
            for &(j, _) in nb {
                centroid += cloud.positions[j];
            }
            centroid /= (nb.len() + 1) as f64;
            let mean_dist = nb.iter().map(|&(_, d2)| d2.sqrt()).sum::<f64>() / nb.len() as f64;
            let log_s = (0.5 * mean_dist).max(1e-7).ln();
            cloud.push(
                centroid,
                [1.0, 0.0, 0.0, 0.0],
                Vector3::repeat(log_s),
                cloud.opacity_logits[i],
                &zero_sh,
            );
            report.unpooled += 1;
        }
    }
    let mut keep: Vec<bool> = remove.iter().map(|&r| !r).collect();
    keep.resize(cloud.len(), true);
    cloud.retain(&keep);
    report.keep = keep;
    report
}

/// Removes Gaussians whose opacity is below `floor`; returns the keep flags.
pub fn prune(cloud: &mut GaussianCloud, floor: f64) -> Vec<bool> {
    let keep: Vec<bool> = (0..cloud.len())
        .map(|n| cloud.opacity(n) >= floor)
        .collect();
    cloud.retain(&keep);
    keep
}

/// Caps every opacity at `target`.
pub fn reset_opacity(cloud: &mut GaussianCloud, target: f64) {
    let cap = logit(target);
    for l in &mut cloud.opacity_logits {
        *l = l.min(cap);
    }
}
