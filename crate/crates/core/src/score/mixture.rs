//! Analytic isotropic Gaussian-mixture denoiser.
//!
//! With components `N(m_k, s²I)` the noisy marginal at step t is a mixture of
//! `N(√ᾱ m_k, vI)` with `v = ᾱ s² + 1 − ᾱ`, so the exact noise prediction is
//!
//! ```text
//! ε̂ = √(1−ᾱ) · (x_t − √ᾱ Σ_k r_k m_k) / v,    r_k ∝ (w_k · N(x_t; √ᾱ m_k, vI))^g
//! ```
//!
//! An inpainting condition multiplies `w_k` by the likelihood of the observed
//! pixels under component k before the posterior is formed. Guidance `g`
//! sharpens the responsibilities; `g = 1` is the exact posterior.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::{DenoiserOracle, NoiseSchedule, ScoreCondition, ScoreError};
use crate::image::Image;

#[derive(Debug)]
pub struct GaussianMixtureOracle {
    means: Vec<Image>,
    log_weights: Vec<f64>,
    s2: f64,
    degenerate: AtomicUsize,
}

impl Clone for GaussianMixtureOracle {
    fn clone(&self) -> Self {
        Self {
            means: self.means.clone(),
            log_weights: self.log_weights.clone(),
            s2: self.s2,
            degenerate: AtomicUsize::new(self.degenerate_events()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDiagnostics {
    pub responsibilities: Vec<f64>,
    /// All reweighted log-weights were non-finite; uniform weights were used.
    pub degenerate: bool,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GaussianMixtureOracle {
    /// `weights` need not be normalized but must be positive.
    pub fn new(means: Vec<Image>, weights: Vec<f64>, s2: f64) -> Result<Self, ScoreError> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(ScoreError::InvalidMixture(
                "need one weight per mean".into(),
            ));
        }
        if means
            .iter()
            .any(|m| !m.same_shape(&means[0]) || !m.is_finite())
        {
            return Err(ScoreError::InvalidMixture(
                "means must be finite and equally shaped".into(),
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) || !(s2 > 0.0 && s2.is_finite()) {
            return Err(ScoreError::InvalidMixture(
                "weights and s² must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            means,
            log_weights: weights.iter().map(|w| (w / total).ln()).collect(),
            s2,
            degenerate: AtomicUsize::new(0),
        })
    }

    pub fn single(mean: Image, s2: f64) -> Result<Self, ScoreError> {
        Self::new(vec![mean], vec![1.0], s2)
    }

    pub fn means(&self) -> &[Image] {
        &self.means
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }

    /// Number of queries that fell back to uniform weights.
    pub fn degenerate_events(&self) -> usize {
        self.degenerate.load(Ordering::Relaxed)
    }

    /// Component weights after conditioning, in log space (unnormalized).
    fn conditioned_log_weights(&self, condition: &ScoreCondition) -> Result<Vec<f64>, ScoreError> {
        match condition {
            ScoreCondition::Unconditional => Ok(self.log_weights.clone()),
            ScoreCondition::Inpaint { masked_image, mask } => {
                let m0 = &self.means[0];
                if !masked_image.same_shape(m0)
                    || mask.width() != m0.width()
                    || mask.height() != m0.height()
                {
                    return Err(ScoreError::DimensionMismatch);
                }
                let ch = m0.channels();
                Ok(self
                    .means
                    .iter()
                    .zip(&self.log_weights)
                    .map(|(m, lw)| {
                        let mut ll = 0.0;
                        for (p, &on) in mask.bits().iter().enumerate() {
                            if on {
                                for c in 0..ch {
                                    let d = masked_image.data()[p * ch + c] - m.data()[p * ch + c];
                                    ll -= d * d / (2.0 * self.s2);
                                }
                            }
                        }
                        lw + ll
                    })
                    .collect())
            }
        }
    }

    /// Noise prediction plus the posterior responsibilities used to form it.
    pub fn predict_with_diagnostics(
        &self,
        x_t: &Image,
        t: usize,
        schedule: &NoiseSchedule,
        condition: &ScoreCondition,
        guidance: f64,
    ) -> Result<(Image, MixtureDiagnostics), ScoreError> {
        if t >= schedule.len() {
            return Err(ScoreError::TimestepOutOfRange {
                t,
                len: schedule.len(),
            });
        }
        if !x_t.same_shape(&self.means[0]) {
            return Err(ScoreError::DimensionMismatch);
        }
        let ab = schedule.alpha_bar[t];
        let sa = ab.sqrt();
        let v = ab * self.s2 + 1.0 - ab;
        let prior = self.conditioned_log_weights(condition)?;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&prior)
            .map(|(m, lw)| {
                let d2: f64 = x_t
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(x, mk)| (x - sa * mk).powi(2))
                    .sum();
                guidance * (lw - d2 / (2.0 * v))
            })
            .collect();
        let lse = log_sum_exp(&logits);
        let k = self.means.len();
        let (resp, degenerate) = if lse.is_finite() {
            (
                logits.iter().map(|l| (l - lse).exp()).collect::<Vec<_>>(),
                false,
            )
        } else {
            self.degenerate.fetch_add(1, Ordering::Relaxed);
            (vec![1.0 / k as f64; k], true)
        };
        let mut mbar = vec![0.0; x_t.len()];
        for (m, r) in self.means.iter().zip(&resp) {
            for (acc, mk) in mbar.iter_mut().zip(m.data()) {
                *acc += r * mk;
            }
        }
        let c = (1.0 - ab).sqrt() / v;
        let data = x_t
            .data()
            .iter()
            .zip(&mbar)
            .map(|(x, mb)| c * (x - sa * mb))
            .collect();
        let eps = Image::from_vec(x_t.width(), x_t.height(), x_t.channels(), data).unwrap();
        Ok((
            eps,
            MixtureDiagnostics {
                responsibilities: resp,
                degenerate,
            },
        ))
    }
}

impl DenoiserOracle for GaussianMixtureOracle {
    fn predict_noise(
        &self,
        x_t: &Image,
        t: usize,
        schedule: &NoiseSchedule,
        condition: &ScoreCondition,
        guidance: f64,
    ) -> Result<Image, ScoreError> {
        self.predict_with_diagnostics(x_t, t, schedule, condition, guidance)
            .map(|(e, _)| e)
    }
}
