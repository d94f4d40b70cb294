//! Denoiser training: ground-frame noising, conditioning dropout, Adam and a
//! cyclic cosine learning-rate schedule.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codec::{LATENT_LEN, LATENT_SIZE};
use super::net::{DenoiseInput, Denoiser};
use super::sampler::standard_normal;
use super::schedule::NoiseSchedule;
use super::StackContext;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub iterations: usize,
    pub batch_size: usize,
    /// Learning rate at the start of every cycle.
    pub lr_max: f64,
    /// Learning rate reached at the end of every cycle.
    pub lr_min: f64,
    pub lr_cycle: usize,
    pub cond_dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Clip the global gradient norm to this value when set.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Keep an exponential moving average of the weights for sampling.
    #[serde(default)]
    pub ema_decay: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: 1,
            iterations: 3000,
            batch_size: 2,
            lr_max: 1e-5,
            lr_min: 2.5e-6,
            lr_cycle: 3000,
            cond_dropout: 0.10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            ema_decay: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config("train.version must be 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config("train.lr_min/lr_max must satisfy 0 < lr_min <= lr_max"));
        }
        if self.lr_cycle == 0 {
            return Err(Error::config("train.lr_cycle must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::config("train.cond_dropout must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1/beta2 must be in [0, 1)"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("train.grad_clip must be > 0"));
        }
        if self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return Err(Error::config("train.ema_decay must be in [0, 1)"));
        }
        Ok(())
    }

    /// Cosine decay from `lr_max` to `lr_min` within each cycle, then reset.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let phase = (iteration % self.lr_cycle) as f64 / self.lr_cycle as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * phase).cos())
    }
}

/// One training example: context plus the clean ground latent (model space).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub ctx: StackContext,
    pub target: Vec<f64>,
}

/// Random choices for one batch element.
#[derive(Debug, Clone)]
pub struct SampleDraw {
    pub index: usize,
    pub t: usize,
    pub eps: Vec<f64>,
    pub drop_tokens: bool,
}

/// Per-iteration randomness, a pure function of `(seed, iteration)`.
pub fn draw_batch(cfg: &TrainConfig, iteration: usize, n_samples: usize, eps_len: usize, steps: usize) -> Vec<SampleDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iteration as u64);
    let indices: Vec<usize> = if cfg.batch_size <= n_samples {
        rand::seq::index::sample(&mut rng, n_samples, cfg.batch_size).into_vec()
    } else {
        (0..cfg.batch_size).map(|_| rng.random_range(0..n_samples)).collect()
    };
    indices
        .into_iter()
        .map(|index| {
            let t = rng.random_range(0..steps);
            let drop_tokens = rng.random_bool(cfg.cond_dropout);
            let eps = standard_normal(&mut rng, eps_len);
            SampleDraw { index, t, eps, drop_tokens }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: u64,
}

impl Adam {
    pub fn new(shapes: impl Iterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, steps: 0 }
    }

    /// One bias-corrected update of `params` (flat groups) in place.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.steps += 1;
        let bc1 = 1.0 - b1.powi(self.steps as i32);
        let bc2 = 1.0 - b2.powi(self.steps as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
    }
}

pub struct Trainer {
    pub net: Denoiser,
    pub adam: Adam,
    pub config: TrainConfig,
    pub iteration: usize,
    pub losses: Vec<f64>,
    /// Weight average, present when `config.ema_decay` is set.
    pub ema: Option<Denoiser>,
    schedule: NoiseSchedule,
}

impl Trainer {
    pub fn new(net: Denoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(net.params.iter().map(|p| p.len()));
        let ema = config.ema_decay.map(|_| net.clone());
        Ok(Self {
            ema,
            net,
            adam,
            config,
            iteration: 0,
            losses: Vec::new(),
            schedule: NoiseSchedule::default(),
        })
    }

    /// Batch loss and summed gradients without updating anything.
    pub fn batch_loss_and_grad(&self, samples: &[TrainSample], draws: &[SampleDraw]) -> Result<(f64, Vec<Vec<f64>>)> {
        let per: Vec<Result<(f64, Vec<Vec<f64>>)>> = draws
            .par_iter()
            .map(|d| {
                let s = &samples[d.index];
                let noisy = self.schedule.q_sample(&s.target, d.t, &d.eps)?;
                let stack = s.ctx.stack(&noisy)?;
                let inp = DenoiseInput {
                    stack: &stack.data,
                    frames: stack.frames,
                    height: LATENT_SIZE,
                    width: LATENT_SIZE,
                    t: d.t,
                    cam_features: &s.ctx.cam_features,
                    tokens: (!d.drop_tokens).then_some(s.ctx.tokens.as_slice()),
                };
                self.net.loss_and_grad(&inp, &d.eps)
            })
            .collect();
        let scale = 1.0 / draws.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Vec<f64>> = self.net.params.iter().map(|p| vec![0.0; p.len()]).collect();
        // Fixed-order reduction keeps the result independent of scheduling.
        for r in per {
            let (l, g) = r?;
            loss += scale * l;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += scale * b);
            }
        }
        Ok((loss, grads))
    }

    /// One optimizer step on a batch drawn from `samples`; returns the batch loss.
    pub fn step(&mut self, samples: &[TrainSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("no training samples".into()));
        }
        let draws = draw_batch(&self.config, self.iteration, samples.len(), LATENT_LEN, self.schedule.steps());
        let (loss, mut grads) = self.batch_loss_and_grad(samples, &draws)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at iteration {}", self.iteration)));
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = self.config.learning_rate(self.iteration);
        let mut params: Vec<&mut [f64]> = self.net.params.iter_mut().map(|p| p.data.as_mut_slice()).collect();
        self.adam
            .update(&mut params, &grads, lr, self.config.beta1, self.config.beta2, self.config.adam_eps);
        if let (Some(ema), Some(d)) = (self.ema.as_mut(), self.config.ema_decay) {
            for (e, p) in ema.params.iter_mut().zip(&self.net.params) {
                e.data.iter_mut().zip(&p.data).for_each(|(a, b)| *a = d * *a + (1.0 - d) * b);
            }
        }
        self.iteration += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Weights used for sampling: the average when kept, else the live weights.
    pub fn sampling_net(&self) -> &Denoiser {
        self.ema.as_ref().unwrap_or(&self.net)
    }

    /// Run until `config.iterations`, calling `progress` after every step.
    pub fn run(&mut self, samples: &[TrainSample], mut progress: impl FnMut(usize, f64)) -> Result<()> {
        while self.iteration < self.config.iterations {
            let loss = self.step(samples)?;
            progress(self.iteration, loss);
        }
        Ok(())
    }
}
