//! Multi-frame U-Net denoiser with frame-axis, spatial and point-token attention.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::codec::LATENT_CHANNELS;
use super::schedule::{NoiseSchedule, TRAIN_STEPS};
use super::embed::{timestep_sinusoid, CAMERA_FEATURES, EMBED_DIM, NUM_TOKENS, TOKEN_DIM};
use super::tape::{Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub version: u32,
    /// Channel widths of the full- and half-resolution stages.
    pub channels: [usize; 2],
    pub groups: usize,
    pub heads: usize,
    /// Number of aerial reference frames per stack.
    pub num_refs: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            version: 1,
            channels: [64, 128],
            groups: 8,
            heads: 4,
            num_refs: 3,
        }
    }
}

impl DenoiserConfig {
    /// Narrow network for CPU-scale experiments.
    pub fn tiny() -> Self {
        Self {
            channels: [16, 32],
            groups: 4,
            heads: 2,
            ..Self::default()
        }
    }

    /// Smallest sensible network, used for gradient checks.
    pub fn miniature() -> Self {
        Self {
            channels: [4, 8],
            groups: 2,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c0, c1] = self.channels;
        if self.version != 1 {
            return Err(Error::config("denoiser.version must be 1"));
        }
        if c0 == 0 || c1 == 0 || self.groups == 0 || self.heads == 0 {
            return Err(Error::config("denoiser channels, groups and heads must be positive"));
        }
        for c in [c0, c1, 2 * c1, c0 + c1] {
            if c % self.groups != 0 {
                return Err(Error::config(format!("denoiser.groups {} does not divide {c} channels", self.groups)));
            }
        }
        if c1 % self.heads != 0 {
            return Err(Error::config(format!("denoiser.heads {} does not divide {c1}", self.heads)));
        }
        if !(1..=5).contains(&self.num_refs) {
            return Err(Error::config("denoiser.num_refs must be in 1..=5"));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.num_refs + 1
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// Normal with variance `1 / fan_in`.
    Fan(usize),
    Zeros,
    Ones,
}

/// Fixed x/y coordinate planes in `[-1, 1]`, appended to every frame so the
/// convolutions can place content absolutely.
pub const COORD_CHANNELS: usize = 2;

fn coord_channels(frames: usize, h: usize, w: usize) -> Tensor {
    let mut plane = Vec::with_capacity(COORD_CHANNELS * h * w);
    plane.extend((0..h * w).map(|i| 2.0 * ((i % w) as f64 + 0.5) / w as f64 - 1.0));
    plane.extend((0..h * w).map(|i| 2.0 * ((i / w) as f64 + 0.5) / h as f64 - 1.0));
    Tensor::new(vec![frames, COORD_CHANNELS, h, w], plane.repeat(frames))
}

/// Network inputs for one frame stack. The last frame is the ground frame.
#[derive(Debug, Clone)]
pub struct DenoiseInput<'a> {
    /// `[frames, 4, h, w]`, channel-major per frame.
    pub stack: &'a [f64],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Diffusion timestep of the ground frame; aerial frames are clean (t = 0).
    pub t: usize,
    pub cam_features: &'a [[f64; CAMERA_FEATURES]],
    /// `NUM_TOKENS × TOKEN_DIM`; `None` means the unconditioned branch (zeros).
    pub tokens: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder {
    fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Fan(fan) => {
                let s = 1.0 / (fan as f64).sqrt();
                (0..n)
                    .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng))
                    .collect()
            }
        };
        self.names.push(name.to_string());
        self.params.push(Tensor::new(shape, data));
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, zero: bool) {
        self.add(&format!("{name}.w"), vec![dout, din], if zero { Init::Zeros } else { Init::Fan(din) });
        self.add(&format!("{name}.b"), vec![dout], Init::Zeros);
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let fan = cin * k * k;
        self.add(&format!("{name}.w"), vec![cout, cin, k, k], if zero { Init::Zeros } else { Init::Fan(fan) });
        self.add(&format!("{name}.b"), vec![cout], Init::Zeros);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.add(&format!("{name}.g"), vec![c], Init::Ones);
        self.add(&format!("{name}.b"), vec![c], Init::Zeros);
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize) {
        self.norm(&format!("{name}.gn1"), cin);
        self.conv(&format!("{name}.conv1"), cin, cout, 3, false);
        self.linear(&format!("{name}.emb"), EMBED_DIM, cout, false);
        self.norm(&format!("{name}.gn2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, true);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, false);
        }
    }

    fn attention(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.ln"), c);
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.{p}"), c, c, false);
        }
        self.linear(&format!("{name}.o"), c, c, true);
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [c0, c1] = config.channels;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            params: Vec::new(),
        };
        b.linear("time.l1", EMBED_DIM, EMBED_DIM, false);
        b.linear("time.l2", EMBED_DIM, EMBED_DIM, false);
        b.linear("cam", CAMERA_FEATURES, EMBED_DIM, false);
        b.add("frame_type.w", vec![EMBED_DIM, 2], Init::Fan(1));
        b.conv("stem", LATENT_CHANNELS + COORD_CHANNELS, c0, 3, false);
        b.resblock("enc1", c0, c0);
        b.conv("down1", c0, c0, 3, false);
        b.resblock("enc2", c0, c1);
        b.conv("down2", c1, c1, 3, false);
        b.resblock("mid1", c1, c1);
        b.attention("frame_attn", c1);
        b.attention("spatial_attn", c1);
        b.linear("adapter.l1", TOKEN_DIM, c1, false);
        b.linear("adapter.l2", c1, c1, false);
        b.add("adapter.pos", vec![1, NUM_TOKENS, c1], Init::Fan(c1));
        b.attention("cross_attn", c1);
        b.resblock("mid2", c1, c1);
        b.resblock("up2", 2 * c1, c1);
        b.resblock("up1", c1 + c0, c0);
        b.norm("out.gn", c0);
        b.conv("out.conv", c0, LATENT_CHANNELS, 3, true);
        Ok(Self::from_parts(config, b.names, b.params))
    }

    pub fn from_parts(config: DenoiserConfig, names: Vec<String>, params: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            params,
            index,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.params.iter_mut().for_each(|p| p.data.fill(0.0));
        z
    }

    /// Learned camera embedding (before adding the time and frame-type terms).
    pub fn camera_embed(&self, features: &[f64; CAMERA_FEATURES]) -> Vec<f64> {
        let (w, b) = (self.param("cam.w").unwrap(), self.param("cam.b").unwrap());
        (0..EMBED_DIM)
            .map(|o| b.data[o] + (0..CAMERA_FEATURES).map(|i| w.data[o * CAMERA_FEATURES + i] * features[i]).sum::<f64>())
            .collect()
    }

    fn check_input(&self, inp: &DenoiseInput) -> Result<()> {
        let expect = inp.frames * LATENT_CHANNELS * inp.height * inp.width;
        if inp.frames != self.config.frames() {
            return Err(Error::Shape(format!(
                "stack has {} frames, network expects {}",
                inp.frames,
                self.config.frames()
            )));
        }
        if inp.stack.len() != expect {
            return Err(Error::Shape(format!("stack has {} values, expected {expect}", inp.stack.len())));
        }
        if !inp.height.is_multiple_of(4) || !inp.width.is_multiple_of(4) || inp.height == 0 || inp.width == 0 {
            return Err(Error::Shape(format!("latent size {}x{} must be a positive multiple of 4", inp.width, inp.height)));
        }
        if inp.cam_features.len() != inp.frames {
            return Err(Error::Shape(format!(
                "{} camera feature vectors for {} frames",
                inp.cam_features.len(),
                inp.frames
            )));
        }
        if inp.t >= TRAIN_STEPS {
            return Err(Error::Shape(format!("timestep {} outside 0..{TRAIN_STEPS}", inp.t)));
        }
        if let Some(t) = inp.tokens {
            if t.len() != NUM_TOKENS * TOKEN_DIM {
                return Err(Error::Shape(format!("point tokens have {} values", t.len())));
            }
        }
        Ok(())
    }

    /// Record the forward pass; returns the output node. Parameter `i` is `Var(i)`.
    pub fn forward(&self, tape: &mut Tape, inp: &DenoiseInput) -> Result<Var> {
        self.check_input(inp)?;
        for p in &self.params {
            tape.leaf(p.clone());
        }
        let p = |name: &str| Var(self.index[name]);
        let f = inp.frames;
        let groups = self.config.groups;
        let heads = self.config.heads;

        // Per-frame embedding: time MLP + camera projection + frame type.
        let mut sin = Vec::with_capacity(f * EMBED_DIM);
        let mut onehot = vec![0.0; f * 2];
        for i in 0..f {
            let ground = i == f - 1;
            sin.extend(timestep_sinusoid(if ground { inp.t as f64 } else { 0.0 }, EMBED_DIM));
            onehot[i * 2 + usize::from(ground)] = 1.0;
        }
        let sin = tape.leaf(Tensor::new(vec![f, EMBED_DIM], sin));
        let t1 = tape.linear(sin, p("time.l1.w"), Some(p("time.l1.b")))?;
        let t1 = tape.silu(t1);
        let temb = tape.linear(t1, p("time.l2.w"), Some(p("time.l2.b")))?;
        let feats = tape.leaf(Tensor::new(vec![f, CAMERA_FEATURES], inp.cam_features.concat()));
        let cemb = tape.linear(feats, p("cam.w"), Some(p("cam.b")))?;
        let onehot = tape.leaf(Tensor::new(vec![f, 2], onehot));
        let femb = tape.linear(onehot, p("frame_type.w"), None)?;
        let emb = tape.add(temb, cemb)?;
        let emb = tape.add(emb, femb)?;
        let semb = tape.silu(emb);

        let x = tape.leaf(Tensor::new(vec![f, LATENT_CHANNELS, inp.height, inp.width], inp.stack.to_vec()));
        let coords = tape.leaf(coord_channels(f, inp.height, inp.width));
        let x = tape.concat_channels(x, coords)?;
        let h = tape.conv2d(x, p("stem.w"), p("stem.b"), 1)?;
        let s1 = self.resblock(tape, "enc1", h, semb, groups)?;
        let h = tape.conv2d(s1, p("down1.w"), p("down1.b"), 2)?;
        let s2 = self.resblock(tape, "enc2", h, semb, groups)?;
        let h = tape.conv2d(s2, p("down2.w"), p("down2.b"), 2)?;
        let h = self.resblock(tape, "mid1", h, semb, groups)?;

        let [_, c1] = self.config.channels;
        let (mh, mw) = (inp.height / 4, inp.width / 4);
        let hw = mh * mw;
        let flat = tape.reshape(h, vec![f, c1, hw])?;
        // Frame axis: one sequence of `f` tokens per spatial location.
        let seq = tape.permute3(flat, [2, 0, 1])?;
        let seq = self.self_attention(tape, "frame_attn", seq, heads)?;
        let flat = tape.permute3(seq, [1, 2, 0])?;
        // Spatial: one sequence of `hw` tokens per frame.
        let seq = tape.permute3(flat, [0, 2, 1])?;
        let seq = self.self_attention(tape, "spatial_attn", seq, heads)?;
        // Cross-attention to adapted point-render tokens, shared by all frames.
        let zeros;
        let tok_data = match inp.tokens {
            Some(t) => t,
            None => {
                zeros = vec![0.0; NUM_TOKENS * TOKEN_DIM];
                &zeros
            }
        };
        let tok = tape.leaf(Tensor::new(vec![1, NUM_TOKENS, TOKEN_DIM], tok_data.to_vec()));
        let a = tape.linear(tok, p("adapter.l1.w"), Some(p("adapter.l1.b")))?;
        let a = tape.silu(a);
        let ctx = tape.linear(a, p("adapter.l2.w"), Some(p("adapter.l2.b")))?;
        // Patch position, so cross-attention can tell where a token came from.
        let ctx = tape.add(ctx, p("adapter.pos"))?;
        let seq = self.cross_attention(tape, "cross_attn", seq, ctx, heads)?;
        let flat = tape.permute3(seq, [0, 2, 1])?;
        let h = tape.reshape(flat, vec![f, c1, mh, mw])?;
        let h = self.resblock(tape, "mid2", h, semb, groups)?;

        let h = tape.upsample2(h)?;
        let h = tape.concat_channels(h, s2)?;
        let h = self.resblock(tape, "up2", h, semb, groups)?;
        let h = tape.upsample2(h)?;
        let h = tape.concat_channels(h, s1)?;
        let h = self.resblock(tape, "up1", h, semb, groups)?;
        let h = tape.group_norm(h, p("out.gn.g"), p("out.gn.b"), groups)?;
        let h = tape.silu(h);
        let out = tape.conv2d(h, p("out.conv.w"), p("out.conv.b"), 1)?;
        // The network predicts the residual over sqrt(1 − ᾱ_t)·x_t, the noise
        // estimate that is exact in the high-noise limit.
        let alpha_bar = &NoiseSchedule::default().alpha_bar;
        let flen = LATENT_CHANNELS * inp.height * inp.width;
        let skip: Vec<f64> = inp
            .stack
            .chunks(flen)
            .enumerate()
            .flat_map(|(i, frame)| {
                let sn = (1.0 - alpha_bar[if i == f - 1 { inp.t } else { 0 }]).sqrt();
                frame.iter().map(move |v| sn * v)
            })
            .collect();
        let skip = tape.leaf(Tensor::new(vec![f, LATENT_CHANNELS, inp.height, inp.width], skip));
        tape.add(out, skip)
    }

    fn resblock(&self, tape: &mut Tape, name: &str, x: Var, semb: Var, groups: usize) -> Result<Var> {
        let p = |s: &str| Var(self.index[&format!("{name}.{s}")]);
        let h = tape.group_norm(x, p("gn1.g"), p("gn1.b"), groups)?;
        let h = tape.silu(h);
        let h = tape.conv2d(h, p("conv1.w"), p("conv1.b"), 1)?;
        let e = tape.linear(semb, p("emb.w"), Some(p("emb.b")))?;
        let h = tape.channel_bias(h, e)?;
        let h = tape.group_norm(h, p("gn2.g"), p("gn2.b"), groups)?;
        let h = tape.silu(h);
        let h = tape.conv2d(h, p("conv2.w"), p("conv2.b"), 1)?;
        let skip = if self.index.contains_key(&format!("{name}.skip.w")) {
            tape.conv2d(x, p("skip.w"), p("skip.b"), 1)?
        } else {
            x
        };
        tape.add(h, skip)
    }

    fn self_attention(&self, tape: &mut Tape, name: &str, x: Var, heads: usize) -> Result<Var> {
        let p = |s: &str| Var(self.index[&format!("{name}.{s}")]);
        let n = tape.layer_norm(x, p("ln.g"), p("ln.b"))?;
        let q = tape.linear(n, p("q.w"), Some(p("q.b")))?;
        let k = tape.linear(n, p("k.w"), Some(p("k.b")))?;
        let v = tape.linear(n, p("v.w"), Some(p("v.b")))?;
        let a = tape.attention(q, k, v, heads)?;
        let o = tape.linear(a, p("o.w"), Some(p("o.b")))?;
        tape.add(x, o)
    }

    fn cross_attention(&self, tape: &mut Tape, name: &str, x: Var, ctx: Var, heads: usize) -> Result<Var> {
        let p = |s: &str| Var(self.index[&format!("{name}.{s}")]);
        let n = tape.layer_norm(x, p("ln.g"), p("ln.b"))?;
        let q = tape.linear(n, p("q.w"), Some(p("q.b")))?;
        let k = tape.linear(ctx, p("k.w"), Some(p("k.b")))?;
        let v = tape.linear(ctx, p("v.w"), Some(p("v.b")))?;
        let a = tape.attention(q, k, v, heads)?;
        let o = tape.linear(a, p("o.w"), Some(p("o.b")))?;
        tape.add(x, o)
    }

    /// Pack parameters into a checkpoint (`kind = "denoiser"`).
    pub fn to_checkpoint(&self, seeds: serde_json::Value, iteration: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).map_err(|e| Error::data(e.to_string()))?,
            seeds,
            iteration,
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| NamedTensor { name: n.clone(), shape: p.shape.clone(), data: p.data.clone() })
                .collect(),
        })
    }

    /// Rebuild a network, checking every tensor against the architecture.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: DenoiserConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
        let mut net = Self::new(config, 0)?;
        for (name, p) in net.names.iter().zip(net.params.iter_mut()) {
            let t = ck.tensor(name)?;
            if t.shape != p.shape {
                return Err(Error::data(format!("tensor {name} has shape {:?}, expected {:?}", t.shape, p.shape)));
            }
            p.data.copy_from_slice(&t.data);
        }
        if ck.tensors.len() != net.params.len() {
            return Err(Error::data("checkpoint holds tensors the denoiser does not use"));
        }
        Ok(net)
    }

    /// Noise prediction for the whole stack, same layout as the input.
    pub fn denoise(&self, inp: &DenoiseInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inp)?;
        Ok(tape.value(out).data.clone())
    }

    /// Mean squared error of the ground frame's prediction against `target`
    /// and the gradient for every parameter.
    pub fn loss_and_grad(&self, inp: &DenoiseInput, target: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inp)?;
        let frame_len = LATENT_CHANNELS * inp.height * inp.width;
        if target.len() != frame_len {
            return Err(Error::Shape(format!("target has {} values, frame has {frame_len}", target.len())));
        }
        let loss = tape.mse_slice(out, (inp.frames - 1) * frame_len, target.to_vec())?;
        let value = tape.value(loss).data[0];
        let mut grads = tape.backward(loss, vec![1.0]);
        let g = (0..self.params.len())
            .map(|i| grads[i].take().unwrap_or_else(|| vec![0.0; self.params[i].len()]))
            .collect();
        Ok((value, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randomized(config: DenoiserConfig, seed: u64) -> Denoiser {
        let mut net = Denoiser::new(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (name, p) in net.names.iter().zip(net.params.iter_mut()) {
            let base = if name.ends_with(".g") { 1.0 } else { 0.0 };
            let scale = if p.shape.len() > 1 { 1.0 / (p.shape[1..].iter().product::<usize>() as f64).sqrt() } else { 0.2 };
            p.data.iter_mut().for_each(|v| *v = base + scale * rng.random_range(-1.0..1.0));
        }
        net
    }

    struct Case {
        stack: Vec<f64>,
        cams: Vec<[f64; CAMERA_FEATURES]>,
        tokens: Vec<f64>,
    }

    fn case(frames: usize, side: usize, seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let stack = r(frames * LATENT_CHANNELS * side * side);
        let cams = (0..frames)
            .map(|_| {
                let mut c = [0.0; CAMERA_FEATURES];
                c.copy_from_slice(&r(CAMERA_FEATURES));
                c
            })
            .collect();
        let tokens = r(NUM_TOKENS * TOKEN_DIM);
        Case { stack, cams, tokens }
    }

    fn input<'a>(c: &'a Case, frames: usize, side: usize, t: usize, cond: bool) -> DenoiseInput<'a> {
        DenoiseInput {
            stack: &c.stack,
            frames,
            height: side,
            width: side,
            t,
            cam_features: &c.cams,
            tokens: cond.then_some(c.tokens.as_slice()),
        }
    }

    #[test]
    fn fresh_network_predicts_the_scaled_input() {
        let net = Denoiser::new(DenoiserConfig::miniature(), 1).unwrap();
        let c = case(4, 8, 2);
        let out = net.denoise(&input(&c, 4, 8, 500, true)).unwrap();
        assert_eq!(out.len(), c.stack.len());
        let ab = NoiseSchedule::default().alpha_bar;
        let flen = LATENT_CHANNELS * 64;
        for (i, (o, x)) in out.iter().zip(&c.stack).enumerate() {
            let t = if i >= 3 * flen { 500 } else { 0 };
            assert_eq!(*o, (1.0 - ab[t]).sqrt() * x);
        }
        assert!(net.denoise(&input(&c, 4, 8, 1000, true)).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = Denoiser::new(DenoiserConfig::miniature(), 1).unwrap();
        let c = case(3, 8, 2);
        assert!(matches!(net.denoise(&input(&c, 3, 8, 5, true)), Err(Error::Shape(_))));
        assert!(DenoiserConfig { heads: 3, ..DenoiserConfig::miniature() }.validate().is_err());
    }

    #[test]
    fn aerial_permutation_is_equivariant() {
        let net = randomized(DenoiserConfig::miniature(), 3);
        let (f, side) = (4, 8);
        let c = case(f, side, 4);
        let flen = LATENT_CHANNELS * side * side;
        let out = net.denoise(&input(&c, f, side, 321, true)).unwrap();
        let perm = [2, 0, 1];
        let mut p = Case { stack: Vec::new(), cams: Vec::new(), tokens: c.tokens.clone() };
        for &i in &perm {
            p.stack.extend_from_slice(&c.stack[i * flen..(i + 1) * flen]);
            p.cams.push(c.cams[i]);
        }
        p.stack.extend_from_slice(&c.stack[3 * flen..]);
        p.cams.push(c.cams[3]);
        let pout = net.denoise(&input(&p, f, side, 321, true)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..flen {
                assert!((pout[k * flen + j] - out[i * flen + j]).abs() < 1e-9);
            }
        }
        for j in 0..flen {
            assert!((pout[3 * flen + j] - out[3 * flen + j]).abs() < 1e-9);
        }
    }

    #[test]
    fn tokens_and_timestep_change_the_prediction() {
        let net = randomized(DenoiserConfig::miniature(), 5);
        let c = case(4, 8, 6);
        let a = net.denoise(&input(&c, 4, 8, 100, true)).unwrap();
        let b = net.denoise(&input(&c, 4, 8, 100, false)).unwrap();
        let d = net.denoise(&input(&c, 4, 8, 900, true)).unwrap();
        let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff(&a, &b) > 1e-6);
        assert!(diff(&a, &d) > 1e-6);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let net = randomized(DenoiserConfig::miniature(), 7);
        let (f, side) = (4, 8);
        let c = case(f, side, 8);
        let target: Vec<f64> = c.stack[..LATENT_CHANNELS * side * side].iter().map(|v| 0.5 * v).collect();
        let inp = input(&c, f, side, 250, true);
        let (_, grads) = net.loss_and_grad(&inp, &target).unwrap();
        let names = [
            "time.l1.w", "cam.w", "frame_type.w", "stem.w", "enc1.gn1.g", "enc2.skip.w", "down2.b",
            "mid1.emb.w", "frame_attn.q.w", "spatial_attn.k.w", "adapter.l1.w", "adapter.pos", "cross_attn.v.w",
            "up2.conv2.w", "up1.gn2.b", "out.conv.w",
        ];
        let h = 1e-5;
        for name in names {
            let pi = net.index[name];
            for k in [0, net.params[pi].len() / 2, net.params[pi].len() - 1] {
                let mut plus = net.clone();
                plus.params[pi].data[k] += h;
                let mut minus = net.clone();
                minus.params[pi].data[k] -= h;
                let lp = plus.loss_and_grad(&inp, &target).unwrap().0;
                let lm = minus.loss_and_grad(&inp, &target).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[pi][k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{k}]: analytic {an} vs numeric {fd}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let net = randomized(DenoiserConfig::miniature(), 9);
        let ck = net.to_checkpoint(serde_json::json!({"init": 9}), 3).unwrap();
        let back = Denoiser::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.param_count(), net.param_count());
        for (a, b) in back.params.iter().zip(&net.params) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| *x == (*y as f32) as f64));
        }
    }

    #[test]
    fn parameter_count_is_stable() {
        let a = Denoiser::new(DenoiserConfig::default(), 0).unwrap().param_count();
        let b = Denoiser::new(DenoiserConfig::default(), 1).unwrap().param_count();
        assert_eq!(a, b);
        assert_eq!(Denoiser::new(DenoiserConfig::tiny(), 0).unwrap().param_count(), 192_532);
    }
}
