//! DDIM sampling with classifier-free guidance and a noise-scale multiplier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub eta: f64,
    pub cfg_scale: f64,
    /// Multiplier (≥ 1) on the stochastic term of every step.
    pub noise_gamma: f64,
    pub seed: u64,
    /// Clamp each x0 prediction to `[-c, c]` before stepping; `None` disables.
    #[serde(default = "default_clip")]
    pub clip_x0: Option<f64>,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 0.0,
            cfg_scale: 5.0,
            noise_gamma: 1.1,
            seed: 0,
            clip_x0: default_clip(),
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("sample.steps must be >= 1"));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::config("sample.eta must be >= 0"));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::config("sample.cfg_scale must be >= 0"));
        }
        if !(self.noise_gamma >= 1.0) {
            return Err(Error::config("sample.noise_gamma must be >= 1"));
        }
        if self.clip_x0.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("sample.clip_x0 must be > 0"));
        }
        Ok(())
    }
}

/// Anything that predicts the noise in `x` at timestep `t`.
pub trait EpsModel {
    fn predict_eps(&self, x: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64], usize) -> Result<Vec<f64>>> EpsModel for F {
    fn predict_eps(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self(x, t)
    }
}

/// Guided combination `eps_u + s·(eps_c − eps_u)`; scales 0 and 1 return the
/// corresponding branch unchanged.
pub fn guide(eps_c: &[f64], eps_u: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return eps_c.to_vec();
    }
    if scale == 0.0 {
        return eps_u.to_vec();
    }
    eps_c.iter().zip(eps_u).map(|(c, u)| u + scale * (c - u)).collect()
}

/// Evenly spaced timesteps from `T − 1` downward.
pub fn ddim_timesteps(steps: usize, train_steps: usize) -> Vec<usize> {
    let stride = train_steps as f64 / steps as f64;
    (0..steps)
        .map(|i| train_steps - 1 - (i as f64 * stride).floor() as usize)
        .collect()
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Run DDIM from seeded unit noise of length `len`.
pub fn ddim_sample_with<M: EpsModel>(model: &M, len: usize, schedule: &NoiseSchedule, cfg: &SampleConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = standard_normal(&mut rng, len);
    ddim_loop(model, x, schedule, cfg, &mut rng)
}

/// DDIM updates from `x` (at timestep `T − 1`) down to a clean sample.
pub fn ddim_loop<M: EpsModel>(
    model: &M,
    mut x: Vec<f64>,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let ts = ddim_timesteps(cfg.steps, schedule.steps());
    for (i, &t) in ts.iter().enumerate() {
        let ab_t = schedule.alpha_bar[t];
        let ab_s = ts.get(i + 1).map_or(1.0, |&s| schedule.alpha_bar[s]);
        let eps = model.predict_eps(&x, t)?;
        if eps.len() != x.len() {
            return Err(Error::Shape(format!("model returned {} values for {}", eps.len(), x.len())));
        }
        let sigma_ddim = ((1.0 - ab_s) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_s).max(0.0).sqrt();
        let sigma = cfg.noise_gamma * cfg.eta * sigma_ddim;
        let dir = (1.0 - ab_s - sigma * sigma).max(0.0).sqrt();
        let (sa_t, sn_t, sa_s) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_s.sqrt());
        let z = if sigma > 0.0 { standard_normal(rng, x.len()) } else { Vec::new() };
        for j in 0..x.len() {
            let mut x0 = (x[j] - sn_t * eps[j]) / sa_t;
            let mut e = eps[j];
            if let Some(c) = cfg.clip_x0 {
                if x0.abs() > c {
                    x0 = x0.clamp(-c, c);
                    e = (x[j] - sa_t * x0) / sn_t;
                }
            }
            let mut v = sa_s * x0 + dir * e;
            if sigma > 0.0 {
                v += sigma * z[j];
            }
            x[j] = v;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite latent at DDIM step {i} (t = {t})")));
        }
    }
    Ok(x)
}
