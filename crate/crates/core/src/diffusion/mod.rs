//! Multi-view latent diffusion for ground-view synthesis from aerial references.
//!
//! A frame stack holds `N` clean aerial latents followed by one ground latent.
//! Only the ground frame is noised and denoised; the aerial frames are fixed
//! context seen through frame-axis attention.

pub mod codec;
pub mod embed;
pub mod net;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod train;

use crate::condition::ConditioningBundle;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

use codec::{decode, encode, Latent, LATENT_CHANNELS, LATENT_LEN, LATENT_SIZE};
use embed::{camera_features, point_tokens, CAMERA_FEATURES};
use net::{DenoiseInput, Denoiser};
use sampler::{ddim_loop, guide, standard_normal, EpsModel, SampleConfig};
use schedule::NoiseSchedule;

pub use codec::{decode as decode_latent, encode as encode_image};

/// Codec latents live roughly in `[0, 1]`; the network sees `2z − 1`.
pub fn to_model_space(z: &Latent) -> Vec<f64> {
    z.data.iter().map(|v| 2.0 * v - 1.0).collect()
}

pub fn from_model_space(x: &[f64]) -> Result<Latent> {
    Latent::from_vec(x.iter().map(|v| 0.5 * (v + 1.0)).collect())
}

/// `(N+1) × 32 × 32 × 4` latent stack; frames `0..N` aerial, frame `N` ground.
/// Stored frame-major with channel-major frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub frames: usize,
    pub data: Vec<f64>,
}

impl FrameStack {
    pub fn new(frames: usize, data: Vec<f64>) -> Result<Self> {
        if frames < 2 || data.len() != frames * LATENT_LEN {
            return Err(Error::Shape(format!(
                "frame stack must be (N+1)x{LATENT_SIZE}x{LATENT_SIZE}x{LATENT_CHANNELS} with N >= 1; got {} values for {frames} frames",
                data.len()
            )));
        }
        Ok(Self { frames, data })
    }

    /// Logical shape `[N+1, 32, 32, 4]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.frames, LATENT_SIZE, LATENT_SIZE, LATENT_CHANNELS]
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * LATENT_LEN..(i + 1) * LATENT_LEN]
    }

    pub fn ground(&self) -> &[f64] {
        self.frame(self.frames - 1)
    }
}

/// Everything the denoiser needs besides the ground latent itself, already in
/// model space.
#[derive(Debug, Clone, PartialEq)]
pub struct StackContext {
    /// `N` aerial latents, each `LATENT_LEN` long.
    pub aerial: Vec<Vec<f64>>,
    /// `N + 1` camera feature vectors (aerial frames then the ground frame).
    pub cam_features: Vec<[f64; CAMERA_FEATURES]>,
    pub tokens: Vec<f64>,
}

impl StackContext {
    pub fn from_bundle(bundle: &ConditioningBundle, scene_diameter: f64) -> Result<Self> {
        bundle.check()?;
        let aerial = bundle
            .ref_images
            .iter()
            .map(|img| Ok(to_model_space(&encode(img)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut cam_features: Vec<_> = bundle
            .ref_cameras
            .iter()
            .map(|c| camera_features(c, scene_diameter))
            .collect();
        cam_features.push(camera_features(&bundle.ground_camera, scene_diameter));
        Ok(Self {
            aerial,
            cam_features,
            tokens: point_tokens(&bundle.point_render)?,
        })
    }

    pub fn num_refs(&self) -> usize {
        self.aerial.len()
    }

    /// Stack the aerial latents with `ground` as the last frame.
    pub fn stack(&self, ground: &[f64]) -> Result<FrameStack> {
        let mut data = Vec::with_capacity((self.aerial.len() + 1) * LATENT_LEN);
        for a in &self.aerial {
            data.extend_from_slice(a);
        }
        data.extend_from_slice(ground);
        FrameStack::new(self.aerial.len() + 1, data)
    }
}

fn input<'a>(stack: &'a FrameStack, t: usize, ctx: &'a StackContext, tokens: Option<&'a [f64]>) -> DenoiseInput<'a> {
    DenoiseInput {
        stack: &stack.data,
        frames: stack.frames,
        height: LATENT_SIZE,
        width: LATENT_SIZE,
        t,
        cam_features: &ctx.cam_features,
        tokens,
    }
}

/// Noise prediction for the whole stack.
pub fn denoise(net: &Denoiser, stack: &FrameStack, t: usize, ctx: &StackContext, conditioned: bool) -> Result<Vec<f64>> {
    let tokens = conditioned.then_some(ctx.tokens.as_slice());
    net.denoise(&input(stack, t, ctx, tokens))
}

/// Guided noise prediction for the ground frame.
pub fn cfg_predict(net: &Denoiser, stack: &FrameStack, t: usize, ctx: &StackContext, scale: f64) -> Result<Vec<f64>> {
    let n = stack.frames - 1;
    let range = n * LATENT_LEN..(n + 1) * LATENT_LEN;
    let cond = || denoise(net, stack, t, ctx, true).map(|e| e[range.clone()].to_vec());
    let uncond = || denoise(net, stack, t, ctx, false).map(|e| e[range.clone()].to_vec());
    if scale == 1.0 {
        return cond();
    }
    if scale == 0.0 {
        return uncond();
    }
    Ok(guide(&cond()?, &uncond()?, scale))
}

/// Ground-frame noise predictor with the aerial context held fixed.
pub struct GroundEps<'a> {
    pub net: &'a Denoiser,
    pub ctx: &'a StackContext,
    pub cfg_scale: f64,
}

impl EpsModel for GroundEps<'_> {
    fn predict_eps(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let stack = self.ctx.stack(x)?;
        cfg_predict(self.net, &stack, t, self.ctx, self.cfg_scale)
    }
}

/// Sample a ground latent (codec space) for one context.
pub fn ddim_sample(net: &Denoiser, ctx: &StackContext, cfg: &SampleConfig) -> Result<Latent> {
    cfg.validate()?;
    if ctx.num_refs() != net.config.num_refs {
        return Err(Error::Shape(format!(
            "context has {} references, network expects {}",
            ctx.num_refs(),
            net.config.num_refs
        )));
    }
    let schedule = NoiseSchedule::default();
    let model = GroundEps { net, ctx, cfg_scale: cfg.cfg_scale };
    let mut rng = rand::SeedableRng::seed_from_u64(cfg.seed);
    let x = standard_normal(&mut rng, LATENT_LEN);
    let out = ddim_loop(&model, x, &schedule, cfg, &mut rng)?;
    from_model_space(&out)
}

/// Sample and decode a ground view.
pub fn sample_ground_view(net: &Denoiser, ctx: &StackContext, cfg: &SampleConfig) -> Result<RgbImage> {
    decode(&ddim_sample(net, ctx, cfg)?)
}

/// PSNR between two latents over all channels (peak 1).
pub fn latent_psnr(a: &Latent, b: &Latent) -> f64 {
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        crate::metrics::PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(crate::metrics::PSNR_CAP)
    }
}
