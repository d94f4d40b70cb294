//! Gaussian-splat scene reconstruction with a frozen-geometry skybox.

pub mod gaussian;
pub mod loss;
pub mod raster;
pub mod skybox;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Error, Result};
use crate::geom::Camera;
use crate::imaging::RgbImage;

pub use gaussian::{init_from_cloud, Gaussian, Group, PARAMS};
pub use loss::{reconstruction_loss, reconstruction_loss_with_grad, LossTerms, LossWeights};
pub use raster::{render_backward, render_detail, render_gaussians, RenderDetail};
pub use skybox::{make_skybox, DEFAULT_SKYBOX_COUNT};

pub const CHECKPOINT_KIND: &str = "splat";

/// Which parameter groups of a set of Gaussians receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupMask {
    pub position: bool,
    pub scale: bool,
    pub rotation: bool,
    pub opacity: bool,
    pub sh: bool,
}

impl GroupMask {
    pub fn all() -> Self {
        Self { position: true, scale: true, rotation: true, opacity: true, sh: true }
    }

    /// Opacity and color only; geometry frozen.
    pub fn appearance() -> Self {
        Self { position: false, scale: false, rotation: false, opacity: true, sh: true }
    }

    pub fn sh_only() -> Self {
        Self { opacity: false, ..Self::appearance() }
    }

    pub fn trains(&self, g: Group) -> bool {
        match g {
            Group::Position => self.position,
            Group::Scale => self.scale,
            Group::Rotation => self.rotation,
            Group::Opacity => self.opacity,
            Group::Sh => self.sh,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub scene: Vec<Gaussian>,
    pub skybox: Vec<Gaussian>,
    pub scene_mask: GroupMask,
    pub skybox_mask: GroupMask,
}

impl GaussianModel {
    pub fn new(scene: Vec<Gaussian>, skybox: Vec<Gaussian>) -> Self {
        Self {
            scene,
            skybox,
            scene_mask: GroupMask::all(),
            skybox_mask: GroupMask::appearance(),
        }
    }

    pub fn len(&self) -> usize {
        self.scene.len() + self.skybox.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn parts(&self) -> [&[Gaussian]; 2] {
        [&self.scene, &self.skybox]
    }

    pub fn render(&self, camera: &Camera, background: [f64; 3]) -> RgbImage {
        render_gaussians(&self.parts(), camera, background)
    }

    pub fn render_detail(&self, camera: &Camera, background: [f64; 3]) -> RenderDetail {
        render_detail(&self.parts(), camera, background)
    }

    /// Per-Gaussian gradients; rows cover the scene then the skybox.
    pub fn backward(&self, camera: &Camera, background: [f64; 3], grad_image: &[[f64; 3]]) -> Result<Vec<[f64; PARAMS]>> {
        render_backward(&self.parts(), camera, background, grad_image)
    }

    pub fn to_checkpoint(&self, seeds: serde_json::Value, iteration: u64) -> Result<Checkpoint> {
        let pack = |name: &str, gs: &[Gaussian]| NamedTensor {
            name: name.into(),
            shape: vec![gs.len(), PARAMS],
            data: gs.iter().flat_map(|g| g.to_array()).collect(),
        };
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::json!({
                "version": 1,
                "sh_degree": 1,
                "layout": "position[3] log_scale[3] rotation_wxyz[4] opacity_logit[1] sh[12]",
                "scene_mask": self.scene_mask,
                "skybox_mask": self.skybox_mask,
            }),
            seeds,
            iteration,
            tensors: vec![pack("scene", &self.scene), pack("skybox", &self.skybox)],
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let unpack = |name: &str| -> Result<Vec<Gaussian>> {
            let t = ck.tensor(name)?;
            if t.shape.len() != 2 || t.shape[1] != PARAMS {
                return Err(Error::data(format!("tensor {name} must be [n, {PARAMS}], got {:?}", t.shape)));
            }
            Ok(t.data.chunks_exact(PARAMS).map(Gaussian::from_array).collect())
        };
        let mask = |key: &str| -> Result<GroupMask> {
            serde_json::from_value(ck.config[key].clone()).map_err(|e| Error::data(format!("checkpoint {key}: {e}")))
        };
        Ok(Self {
            scene: unpack("scene")?,
            skybox: unpack("skybox")?,
            scene_mask: mask("scene_mask")?,
            skybox_mask: mask("skybox_mask")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupLr {
    /// Multiplied by the scene extent passed to [`optimize`].
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

impl Default for GroupLr {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sh_dc: 2.5e-3,
            sh_rest: 1.25e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplatTrainConfig {
    pub version: u32,
    pub iterations: usize,
    pub lr: GroupLr,
    pub loss: LossWeights,
    pub background: [f64; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for SplatTrainConfig {
    fn default() -> Self {
        Self {
            version: 1,
            iterations: 3000,
            lr: GroupLr::default(),
            loss: LossWeights::default(),
            background: [0.0; 3],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-15,
            seed: 0,
        }
    }
}

impl SplatTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config("splat.version must be 1"));
        }
        self.loss.validate()?;
        let l = &self.lr;
        if [l.position, l.scale, l.rotation, l.opacity, l.sh_dc, l.sh_rest].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("splat learning rates must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("splat beta1/beta2 must be in [0, 1)"));
        }
        Ok(())
    }

    fn lr_of(&self, k: usize, extent: f64) -> f64 {
        let l = &self.lr;
        match k {
            0..3 => l.position * extent,
            3..6 => l.scale,
            6..10 => l.rotation,
            10 => l.opacity,
            11..14 => l.sh_dc,
            _ => l.sh_rest,
        }
    }
}

/// One supervision target.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub target: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatAdam {
    m: Vec<[f64; PARAMS]>,
    v: Vec<[f64; PARAMS]>,
    steps: u64,
}

impl SplatAdam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![[0.0; PARAMS]; n], v: vec![[0.0; PARAMS]; n], steps: 0 }
    }
}

fn trainable(mask: &GroupMask) -> [bool; PARAMS] {
    let mut on = [false; PARAMS];
    for g in Group::ALL {
        if mask.trains(g) {
            on[g.range()].iter_mut().for_each(|v| *v = true);
        }
    }
    on
}

/// Apply one Adam step to every trainable parameter and renormalize the
/// quaternions that moved.
pub fn adam_step(
    model: &mut GaussianModel,
    adam: &mut SplatAdam,
    grads: &[[f64; PARAMS]],
    cfg: &SplatTrainConfig,
    extent: f64,
) {
    adam.steps += 1;
    let bc1 = 1.0 - cfg.beta1.powi(adam.steps as i32);
    let bc2 = 1.0 - cfg.beta2.powi(adam.steps as i32);
    let lrs: [f64; PARAMS] = std::array::from_fn(|k| cfg.lr_of(k, extent));
    let n_scene = model.scene.len();
    let masks = [trainable(&model.scene_mask), trainable(&model.skybox_mask)];
    let step_one = |g: &mut Gaussian, m: &mut [f64; PARAMS], v: &mut [f64; PARAMS], gr: &[f64; PARAMS], on: &[bool; PARAMS]| {
        let mut p = g.to_array();
        for k in 0..PARAMS {
            if !on[k] {
                continue;
            }
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gr[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gr[k] * gr[k];
            p[k] -= lrs[k] * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.adam_eps);
        }
        let mut updated = Gaussian::from_array(&p);
        if on[6] {
            updated.renormalize();
        }
        *g = updated;
    };
    use rayon::prelude::*;
    let (ms, mk) = adam.m.split_at_mut(n_scene);
    let (vs, vk) = adam.v.split_at_mut(n_scene);
    let (gs, gk) = grads.split_at(n_scene);
    if masks[0].iter().any(|&b| b) {
        model
            .scene
            .par_iter_mut()
            .zip(ms.par_iter_mut().zip(vs.par_iter_mut()))
            .zip(gs.par_iter())
            .for_each(|((g, (m, v)), gr)| step_one(g, m, v, gr, &masks[0]));
    }
    if masks[1].iter().any(|&b| b) {
        model
            .skybox
            .par_iter_mut()
            .zip(mk.par_iter_mut().zip(vk.par_iter_mut()))
            .zip(gk.par_iter())
            .for_each(|((g, (m, v)), gr)| step_one(g, m, v, gr, &masks[1]));
    }
}

/// Seeded view order: a fresh shuffle of all views every epoch.
pub fn view_schedule(n_views: usize, iterations: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(iterations);
    let mut epoch: Vec<usize> = (0..n_views).collect();
    while order.len() < iterations {
        epoch.shuffle(&mut rng);
        order.extend(epoch.iter().copied().take(iterations - order.len()));
    }
    order
}

/// Fit `model` to `views`. `extent` scales the position learning rate.
/// Returns the per-iteration loss.
pub fn optimize(
    model: &mut GaussianModel,
    views: &[TrainView],
    cfg: &SplatTrainConfig,
    extent: f64,
    mut progress: impl FnMut(usize, &LossTerms),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::Empty("no training views for reconstruction".into()));
    }
    for v in views {
        if v.target.width != v.camera.width() as usize || v.target.height != v.camera.height() as usize {
            return Err(Error::Shape(format!(
                "target {}x{} does not match its camera {}x{}",
                v.target.width,
                v.target.height,
                v.camera.width(),
                v.camera.height()
            )));
        }
    }
    let mut adam = SplatAdam::new(model.len());
    let mut history = Vec::with_capacity(cfg.iterations);
    for (it, vi) in view_schedule(views.len(), cfg.iterations, cfg.seed).into_iter().enumerate() {
        let view = &views[vi];
        let render = model.render(&view.camera, cfg.background);
        let (terms, grad_img) = reconstruction_loss_with_grad(&render, &view.target, &cfg.loss)?;
        if !terms.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite reconstruction loss at iteration {it}")));
        }
        let grads = model.backward(&view.camera, cfg.background, &grad_img)?;
        adam_step(model, &mut adam, &grads, cfg, extent);
        history.push(terms.total);
        progress(it, &terms);
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
