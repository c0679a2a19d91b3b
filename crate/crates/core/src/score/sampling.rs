use rand::Rng;

use super::{standard_normal_like, DenoiserOracle, NoiseSchedule, ScoreCondition, ScoreError};
use crate::image::Image;

/// Draws a sample with `steps` strided ancestral (DDIM, η = 1) updates,
/// starting from pure noise at the last timestep.
pub fn ancestral_sample<R: Rng + ?Sized>(
    oracle: &dyn DenoiserOracle,
    schedule: &NoiseSchedule,
    shape: &Image,
    condition: &ScoreCondition,
    guidance: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Image, ScoreError> {
    let n = schedule.len();
    let steps = steps.clamp(1, n);
    let ts: Vec<usize> = (0..steps)
        .map(|i| {
            ((n - 1) as f64 * (steps - 1 - i) as f64 / (steps - 1).max(1) as f64).round() as usize
        })
        .collect();
    let mut x = standard_normal_like(shape, rng);
    for (i, &t) in ts.iter().enumerate() {
        let eps = oracle.predict_noise(&x, t, schedule, condition, guidance)?;
        let x0 = schedule.predict_x0(&x, &eps, t)?;
        let Some(&t_prev) = ts.get(i + 1) else {
            return Ok(x0);
        };
        let (ab, ab_prev) = (schedule.alpha_bar[t], schedule.alpha_bar[t_prev]);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
            .max(0.0)
            .sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let z = standard_normal_like(shape, rng);
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .zip(z.data())
            .map(|((&x0, &e), &z)| ab_prev.sqrt() * x0 + dir * e + sigma * z)
            .collect();
        x = Image::from_vec(shape.width(), shape.height(), shape.channels(), data).unwrap();
    }
    unreachable!("the last step always returns")
}
