//! Forward noising process.

use crate::error::{Error, Result};

pub const TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(TRAIN_STEPS, BETA_START, BETA_END)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, start: f64, end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps.max(2) - 1) as f64)
            .collect();
        let mut ab = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                ab *= 1.0 - b;
                ab
            })
            .collect();
        Self { betas, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::config(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        if x0.len() != eps.len() {
            return Err(Error::Shape(format!("x0 has {} values, eps {}", x0.len(), eps.len())));
        }
        let ab = self.alpha_bar[t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = NoiseSchedule::default();
        let x0 = [0.5, -1.0];
        assert!((1.0 - s.alpha_bar[0]).sqrt() < 0.011);
        let out = s.q_sample(&x0, 500, &[0.0, 0.0]).unwrap();
        let a = s.alpha_bar[500].sqrt();
        assert_eq!(out, vec![a * 0.5, -a]);
        assert!(s.q_sample(&x0, 1000, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn q_sample_variance_matches_schedule() {
        use crate::diffusion::sampler::standard_normal;
        use rand::SeedableRng;
        let s = NoiseSchedule::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let eps = standard_normal(&mut rng, 100_000);
        let x0 = vec![0.7; eps.len()];
        let t = 400;
        let out = s.q_sample(&x0, t, &eps).unwrap();
        let centre = s.alpha_bar[t].sqrt() * 0.7;
        let var = out.iter().map(|v| (v - centre) * (v - centre)).sum::<f64>() / out.len() as f64;
        let expect = 1.0 - s.alpha_bar[t];
        assert!((var / expect - 1.0).abs() < 0.02, "{var} vs {expect}");
    }
}
