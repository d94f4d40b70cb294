//! Pipeline stages over on-disk artifacts, and the end-to-end demo.
//!
//! Every stage reads files, writes files atomically and is a pure function of
//! its inputs and configuration. Directory layout under a work root:
//!
//! ```text
//! scene.json, trajectories/, views/, manifest.json   capture (see `dataset`)
//! cloud.ply                                          fused aerial points
//! bundles/index.json, bundles/{view}.json|.points.png
//! priors/{arm}/index.json, priors/{arm}/{view}.png
//! recon/{arm}/model.gvck, recon/{arm}/renders/{split}/{view}.png
//! reports/{arm}.json, reports/summary.json
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::city::{generate_city, scene_diameter, CityConfig, CityScene, EnvironmentCondition};
use crate::cloud::{fuse_depth, save_ply, FuseParams, PointCloud, PointRenderSettings};
use crate::condition::{build_bundle, BundleManifest, BundleRef, ConditioningBundle, DEFAULT_NUM_REFS};
use crate::dataset::{capture, CaptureConfig, Dataset, LensConfig, Split, ViewEntry};
use crate::diffusion::codec::encode;
use crate::diffusion::net::{Denoiser, DenoiserConfig};
use crate::diffusion::sampler::SampleConfig;
use crate::diffusion::train::{TrainConfig, TrainSample, Trainer};
use crate::diffusion::{ddim_sample, decode_latent, latent_psnr, to_model_space, StackContext};
use crate::error::{Error, Result};
use crate::fsio::{ensure_dir, read_artifact, read_json, write_json};
use crate::geom::Camera;
use crate::imaging::RgbImage;
use crate::metrics::{build_report, evaluate_set, format_table, EvalReport};
use crate::splat::{init_from_cloud, make_skybox, optimize, GaussianModel, SplatTrainConfig, TrainView};
use crate::trajectory::{
    plan_aerial, plan_ground, road_spans, AerialConfig, AerialTrajectory, GroundConfig, GroundRoute, GroundTrajectory,
};

pub const INDEX_FILE: &str = "index.json";

/// Which ground views of each path a stage covers, by index along the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundSubset {
    All,
    Even,
    Odd,
}

impl GroundSubset {
    pub fn contains(&self, view_id: &str) -> bool {
        match (self, ground_index(view_id)) {
            (GroundSubset::All, _) => true,
            (GroundSubset::Even, Some(i)) => i % 2 == 0,
            (GroundSubset::Odd, Some(i)) => i % 2 == 1,
            (_, None) => false,
        }
    }
}

impl FromStr for GroundSubset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "even" => Ok(Self::Even),
            "odd" => Ok(Self::Odd),
            _ => Err(Error::config(format!("ground subset must be all, even or odd; got {s}"))),
        }
    }
}

/// Position of a ground view along its path (`{path}_{index}`).
pub fn ground_index(view_id: &str) -> Option<usize> {
    view_id.rsplit_once('_')?.1.parse().ok()
}

// ---------------------------------------------------------------------------
// generate-city / plan / capture / fuse

pub fn city_stage(seed: u64, cfg: &CityConfig, out: &Path) -> Result<CityScene> {
    let scene = generate_city(seed, cfg)?;
    write_json(out, &scene)?;
    Ok(scene)
}

/// Aerial sweep plus one ground route along every road.
pub fn plan_trajectories(
    scene: &CityScene,
    aerial: &AerialConfig,
    ground: &GroundConfig,
) -> Result<(AerialTrajectory, GroundTrajectory)> {
    let rigs = plan_aerial(scene, aerial)?;
    let mut routes = Vec::new();
    for (i, (start, end)) in road_spans(scene).into_iter().enumerate() {
        routes.push(GroundRoute {
            path_id: format!("p{i:02}"),
            start,
            end,
            path: plan_ground(scene, (start, end), ground)?,
        });
    }
    if routes.is_empty() {
        return Err(Error::PathPlanning("scene has no roads to drive along".into()));
    }
    Ok((
        AerialTrajectory { version: 1, config: aerial.clone(), rigs },
        GroundTrajectory { version: 1, config: ground.clone(), routes },
    ))
}

pub fn plan_stage(scene: &CityScene, aerial: &AerialConfig, ground: &GroundConfig, out_dir: &Path) -> Result<()> {
    let (a, g) = plan_trajectories(scene, aerial, ground)?;
    write_json(&out_dir.join("aerial.json"), &a)?;
    write_json(&out_dir.join("ground.json"), &g)
}

/// Fuse the aerial views of a dataset into a point cloud.
pub fn fuse_stage(dataset: &Dataset, params: &FuseParams, out: &Path) -> Result<PointCloud> {
    let cloud = fuse_depth(&dataset.fuse_views(Split::Aerial)?, params)?;
    save_ply(&cloud, out)?;
    Ok(cloud)
}

// ---------------------------------------------------------------------------
// Bundles

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleIndex {
    pub version: u32,
    /// Dataset root the references and targets live in.
    pub dataset: String,
    pub num_refs: usize,
    pub scene_diameter: f64,
    /// Manifest file names, relative to the bundle directory.
    pub bundles: Vec<String>,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

/// Build one conditioning bundle per selected ground view.
pub fn prep_bundles(
    dataset: &Dataset,
    cloud: &PointCloud,
    out: &Path,
    num_refs: usize,
    subset: GroundSubset,
    settings: &PointRenderSettings,
) -> Result<BundleIndex> {
    ensure_dir(out)?;
    let rigs = dataset.rigs()?;
    let diameter = scene_diameter(&dataset.scene()?)?;
    let mut names = Vec::new();
    let views: Vec<&ViewEntry> = dataset.views(Split::Ground).filter(|v| subset.contains(&v.view_id)).collect();
    if views.is_empty() {
        return Err(Error::Empty("no ground views selected for bundles".into()));
    }
    for v in views {
        let b = build_bundle(dataset, &rigs, &v.camera, cloud, settings, num_refs)?;
        let points = format!("{}.points.png", v.view_id);
        b.point_render.save_png(&out.join(&points))?;
        let manifest = BundleManifest {
            version: 1,
            ground_view_id: v.view_id.clone(),
            rig_id: b.rig_id,
            refs: (0..b.num_refs())
                .map(|i| {
                    Ok(BundleRef {
                        view_id: b.ref_view_ids[i].clone(),
                        role: b.ref_roles[i],
                        angle: b.ref_angles[i],
                        path: dataset.entry(&b.ref_view_ids[i])?.rgb.clone(),
                        camera: b.ref_cameras[i],
                    })
                })
                .collect::<Result<_>>()?,
            ground_camera: b.ground_camera,
            point_render: points,
            target: Some(v.rgb.clone()),
        };
        let name = format!("{}.json", v.view_id);
        write_json(&out.join(&name), &manifest)?;
        names.push(name);
    }
    let index = BundleIndex {
        version: 1,
        dataset: absolute(&dataset.root)?.display().to_string(),
        num_refs,
        scene_diameter: diameter,
        bundles: names,
    };
    write_json(&out.join(INDEX_FILE), &index)?;
    Ok(index)
}

/// A bundle directory opened for reading.
pub struct BundleSet {
    pub dir: PathBuf,
    pub index: BundleIndex,
    pub dataset: Dataset,
}

impl BundleSet {
    pub fn open(dir: &Path) -> Result<Self> {
        let index: BundleIndex = read_artifact(&dir.join(INDEX_FILE))?;
        if index.version != 1 {
            return Err(Error::data(format!("unsupported bundle index version {}", index.version)));
        }
        let dataset = Dataset::open(Path::new(&index.dataset))?;
        Ok(Self { dir: dir.to_path_buf(), index, dataset })
    }

    pub fn manifests(&self) -> Result<Vec<BundleManifest>> {
        self.index.bundles.iter().map(|n| read_artifact(&self.dir.join(n))).collect()
    }

    pub fn load(&self, m: &BundleManifest) -> Result<ConditioningBundle> {
        let side = crate::condition::BUNDLE_SIZE;
        let mut b = ConditioningBundle {
            ref_view_ids: Vec::new(),
            ref_roles: Vec::new(),
            ref_angles: Vec::new(),
            ref_images: Vec::new(),
            ref_cameras: Vec::new(),
            ground_camera: m.ground_camera,
            point_render: RgbImage::load_png(&self.dir.join(&m.point_render))?,
            rig_id: m.rig_id,
        };
        for r in &m.refs {
            b.ref_view_ids.push(r.view_id.clone());
            b.ref_roles.push(r.role);
            b.ref_angles.push(r.angle);
            b.ref_images.push(RgbImage::load_png(&self.dataset.path(&r.path))?.resized(side, side));
            b.ref_cameras.push(r.camera);
        }
        b.check()?;
        Ok(b)
    }

    pub fn context(&self, m: &BundleManifest) -> Result<StackContext> {
        StackContext::from_bundle(&self.load(m)?, self.index.scene_diameter)
    }

    /// Ground-truth ground view at bundle resolution, if the bundle has one.
    pub fn target(&self, m: &BundleManifest) -> Result<Option<RgbImage>> {
        let side = crate::condition::BUNDLE_SIZE;
        m.target
            .as_ref()
            .map(|t| Ok(RgbImage::load_png(&self.dataset.path(t))?.resized(side, side)))
            .transpose()
    }

    /// Training samples for every bundle with a target, in index order.
    pub fn training_samples(&self, subset: GroundSubset) -> Result<Vec<(String, TrainSample)>> {
        let mut out = Vec::new();
        for m in self.manifests()? {
            if !subset.contains(&m.ground_view_id) {
                continue;
            }
            let Some(target) = self.target(&m)? else { continue };
            out.push((
                m.ground_view_id.clone(),
                TrainSample { ctx: self.context(&m)?, target: to_model_space(&encode(&target)?) },
            ));
        }
        if out.is_empty() {
            return Err(Error::Empty("no bundles with ground-truth targets".into()));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// train-diffusion / generate-ground

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub version: u32,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    /// Ground views (by path index) whose bundles are used for training.
    pub subset: GroundSubset,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            version: 1,
            model: DenoiserConfig::tiny(),
            train: TrainConfig {
                iterations: 2000,
                lr_max: 1e-3,
                lr_min: 1e-5,
                lr_cycle: 2000,
                grad_clip: Some(1.0),
                ..TrainConfig::default()
            },
            init_seed: 0,
            subset: GroundSubset::All,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config("diffusion config version must be 1"));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

pub fn train_diffusion(
    samples: &[TrainSample],
    cfg: &DiffusionTrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<Trainer> {
    cfg.validate()?;
    if let Some(s) = samples.first() {
        if s.ctx.num_refs() != cfg.model.num_refs {
            return Err(Error::config(format!(
                "bundles hold {} references but the model expects {}",
                s.ctx.num_refs(),
                cfg.model.num_refs
            )));
        }
    }
    let mut trainer = Trainer::new(Denoiser::new(cfg.model.clone(), cfg.init_seed)?, cfg.train.clone())?;
    trainer.run(samples, progress)?;
    Ok(trainer)
}

pub fn train_diffusion_stage(bundles: &Path, cfg: &DiffusionTrainConfig, out: &Path, progress: impl FnMut(usize, f64)) -> Result<Trainer> {
    let set = BundleSet::open(bundles)?;
    let samples: Vec<TrainSample> = set.training_samples(cfg.subset)?.into_iter().map(|(_, s)| s).collect();
    let trainer = train_diffusion(&samples, cfg, progress)?;
    let seeds = serde_json::json!({ "init": cfg.init_seed, "train": cfg.train.seed });
    trainer.sampling_net().to_checkpoint(seeds, trainer.iteration as u64)?.save(out)?;
    write_json(&out.with_extension("losses.json"), &trainer.losses)?;
    Ok(trainer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorView {
    pub view_id: String,
    /// Image path relative to the prior directory.
    pub path: String,
    /// Dataset camera the prior stands in for.
    pub camera: Camera,
    /// Latent PSNR against the ground-truth view, when known.
    #[serde(default)]
    pub latent_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorIndex {
    pub version: u32,
    pub source: String,
    pub views: Vec<PriorView>,
}

impl PriorIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let idx: PriorIndex = read_artifact(&dir.join(INDEX_FILE))?;
        if idx.version != 1 {
            return Err(Error::data(format!("unsupported prior index version {}", idx.version)));
        }
        Ok(idx)
    }

    pub fn mean_latent_psnr(&self) -> Option<f64> {
        let v: Vec<f64> = self.views.iter().filter_map(|p| p.latent_psnr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Sample one ground view per selected bundle; seeds are `cfg.seed + i`.
pub fn generate_ground(
    net: &Denoiser,
    bundles: &Path,
    subset: GroundSubset,
    cfg: &SampleConfig,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<PriorIndex> {
    let set = BundleSet::open(bundles)?;
    ensure_dir(out)?;
    let mut views = Vec::new();
    for (i, m) in set.manifests()?.into_iter().filter(|m| subset.contains(&m.ground_view_id)).enumerate() {
        let ctx = set.context(&m)?;
        let latent = ddim_sample(net, &ctx, &SampleConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() })?;
        let psnr = set.target(&m)?.map(|t| encode(&t).map(|z| latent_psnr(&latent, &z))).transpose()?;
        let path = format!("{}.png", m.ground_view_id);
        decode_latent(&latent)?.save_png(&out.join(&path))?;
        views.push(PriorView {
            view_id: m.ground_view_id.clone(),
            path,
            camera: set.dataset.entry(&m.ground_view_id)?.camera,
            latent_psnr: psnr,
        });
        progress(&m.ground_view_id);
    }
    let index = PriorIndex { version: 1, source: "diffusion".into(), views };
    write_json(&out.join(INDEX_FILE), &index)?;
    Ok(index)
}

/// Copy ground-truth ground views into a prior directory (upper-bound arm).
pub fn ground_truth_priors(dataset: &Dataset, subset: GroundSubset, out: &Path) -> Result<PriorIndex> {
    ensure_dir(out)?;
    let mut views = Vec::new();
    for v in dataset.views(Split::Ground).filter(|v| subset.contains(&v.view_id)) {
        let path = format!("{}.png", v.view_id);
        dataset.load_rgb(&v.view_id)?.save_png(&out.join(&path))?;
        views.push(PriorView { view_id: v.view_id.clone(), path, camera: v.camera, latent_psnr: None });
    }
    let index = PriorIndex { version: 1, source: "ground-truth".into(), views };
    write_json(&out.join(INDEX_FILE), &index)?;
    Ok(index)
}

// ---------------------------------------------------------------------------
// reconstruct / evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub version: u32,
    pub splat: SplatTrainConfig,
    /// Scene Gaussians initialized from at most this many cloud points.
    pub max_points: usize,
    pub skybox_count: usize,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            version: 1,
            splat: SplatTrainConfig::default(),
            max_points: 30_000,
            skybox_count: crate::splat::DEFAULT_SKYBOX_COUNT,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config("recon.version must be 1"));
        }
        if self.max_points == 0 {
            return Err(Error::config("recon.max_points must be >= 1"));
        }
        self.splat.validate()
    }
}

/// Training views: every aerial view plus every prior, resized to its camera.
pub fn recon_views(dataset: &Dataset, priors: Option<(&Path, &PriorIndex)>) -> Result<Vec<TrainView>> {
    let mut views: Vec<TrainView> = dataset
        .views(Split::Aerial)
        .map(|v| Ok(TrainView { camera: v.camera, target: dataset.load_rgb(&v.view_id)? }))
        .collect::<Result<_>>()?;
    if let Some((dir, index)) = priors {
        for p in &index.views {
            let img = RgbImage::load_png(&dir.join(&p.path))?;
            let (w, h) = (p.camera.width() as usize, p.camera.height() as usize);
            views.push(TrainView { camera: p.camera, target: img.resized(w, h) });
        }
    }
    Ok(views)
}

pub fn initial_model(cloud: &PointCloud, scene: &CityScene, cfg: &ReconConfig) -> Result<GaussianModel> {
    let cloud = if cloud.len() > cfg.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut keep = rand::seq::index::sample(&mut rng, cloud.len(), cfg.max_points).into_vec();
        keep.sort_unstable();
        PointCloud {
            positions: keep.iter().map(|&i| cloud.positions[i]).collect(),
            colors: keep.iter().map(|&i| cloud.colors[i]).collect(),
            provenance: None,
        }
    } else {
        cloud.clone()
    };
    let scene_g = init_from_cloud(&cloud)?;
    let sky = if cfg.skybox_count > 0 {
        make_skybox(scene.aabb.center(), scene_diameter(scene)?, cfg.skybox_count, cfg.seed)?
    } else {
        Vec::new()
    };
    Ok(GaussianModel::new(scene_g, sky))
}

pub struct ReconOutput {
    pub model: GaussianModel,
    pub losses: Vec<f64>,
}

/// Reconstruct from aerial views (and priors when given), then render every
/// dataset view into `out/renders/{split}/`.
pub fn reconstruct(
    dataset: &Dataset,
    cloud: &PointCloud,
    priors: Option<&Path>,
    cfg: &ReconConfig,
    out: &Path,
    progress: impl FnMut(usize, f64),
) -> Result<ReconOutput> {
    cfg.validate()?;
    let scene = dataset.scene()?;
    let prior_index = priors.map(PriorIndex::load).transpose()?;
    let views = recon_views(dataset, priors.zip(prior_index.as_ref()))?;
    let mut model = initial_model(cloud, &scene, cfg)?;
    let mut progress = progress;
    let losses = optimize(&mut model, &views, &cfg.splat, scene_diameter(&scene)?, |i, t| progress(i, t.total))?;
    ensure_dir(out)?;
    let seeds = serde_json::json!({ "recon": cfg.seed, "views": cfg.splat.seed });
    model.to_checkpoint(seeds, cfg.splat.iterations as u64)?.save(&out.join("model.gvck"))?;
    write_json(&out.join("losses.json"), &losses)?;
    render_all(&model, dataset, cfg.splat.background, &out.join("renders"))?;
    Ok(ReconOutput { model, losses })
}

pub fn load_model(path: &Path) -> Result<GaussianModel> {
    GaussianModel::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn render_all(model: &GaussianModel, dataset: &Dataset, background: [f64; 3], out: &Path) -> Result<()> {
    for split in [Split::Aerial, Split::Ground] {
        ensure_dir(&out.join(split.as_str()))?;
    }
    for v in &dataset.manifest.views {
        let img = model.render(&v.camera, background);
        img.save_png(&out.join(v.split.as_str()).join(format!("{}.png", v.view_id)))?;
    }
    Ok(())
}

/// Compare renders under `renders/{split}/{view}.png` against the dataset.
/// Aerial views are all evaluated; ground views are restricted to `subset`.
pub fn evaluate_renders(renders: &Path, dataset: &Dataset, method: &str, subset: GroundSubset) -> Result<EvalReport> {
    let mut views = Vec::new();
    for split in [Split::Aerial, Split::Ground] {
        let mut set = Vec::new();
        for v in dataset.views(split) {
            if split == Split::Ground && !subset.contains(&v.view_id) {
                continue;
            }
            let p = renders.join(split.as_str()).join(format!("{}.png", v.view_id));
            if !p.exists() {
                continue;
            }
            set.push((v.view_id.clone(), RgbImage::load_png(&p)?, dataset.load_rgb(&v.view_id)?));
        }
        if !set.is_empty() {
            views.extend(evaluate_set(&set, split)?);
        }
    }
    if views.is_empty() {
        return Err(Error::Empty(format!("no renders found under {}", renders.display())));
    }
    build_report(method, views)
}

// ---------------------------------------------------------------------------
// Demo

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub version: u32,
    pub city_seed: u64,
    pub city: CityConfig,
    pub aerial: AerialConfig,
    pub ground: GroundConfig,
    pub capture: CaptureConfig,
    pub fuse: FuseParams,
    pub num_refs: usize,
    pub point_render: PointRenderSettings,
    pub diffusion: DiffusionTrainConfig,
    pub sample: SampleConfig,
    pub recon: ReconConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        let lens = |hfov_deg| LensConfig { width: 128, height: 128, hfov_deg };
        Self {
            version: 1,
            city_seed: 7,
            city: CityConfig::default(),
            aerial: AerialConfig::default(),
            ground: GroundConfig::default(),
            capture: CaptureConfig { version: 1, aerial: lens(60.0), ground: lens(75.0) },
            fuse: FuseParams { dedup_cell: 0.5, ..FuseParams::default() },
            num_refs: DEFAULT_NUM_REFS,
            point_render: PointRenderSettings::default(),
            diffusion: DiffusionTrainConfig { subset: GroundSubset::Even, ..DiffusionTrainConfig::default() },
            sample: SampleConfig::default(),
            recon: ReconConfig { splat: SplatTrainConfig { iterations: 1000, ..Default::default() }, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub aerial_psnr: f64,
    pub ground_psnr: f64,
    pub aerial_ssim: f64,
    pub ground_ssim: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub version: u32,
    pub config: DemoConfig,
    pub prior_subset: GroundSubset,
    pub eval_subset: GroundSubset,
    pub diffusion_final_loss: f64,
    pub prior_latent_psnr: Option<f64>,
    pub arms: Vec<ArmSummary>,
    pub table: String,
}

impl DemoReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }
}

pub const ARM_AERIAL_ONLY: &str = "recon-w/o-priors";
pub const ARM_GT_PRIORS: &str = "recon-w/-gt-priors";
pub const ARM_DIFFUSION_PRIORS: &str = "recon-w/-generated-priors";

/// Full chain on a micro-city: priors at even ground views, evaluation on the
/// odd (held-out) ones.
pub fn demo(workdir: &Path, cfg: &DemoConfig, mut log: impl FnMut(&str)) -> Result<DemoReport> {
    if cfg.version != 1 {
        return Err(Error::config("demo.version must be 1"));
    }
    let (prior_subset, eval_subset) = (GroundSubset::Even, GroundSubset::Odd);
    ensure_dir(workdir)?;
    write_json(&workdir.join("demo_config.json"), cfg)?;

    log("generate-city");
    let scene = generate_city(cfg.city_seed, &cfg.city)?;
    log("plan");
    let (aerial, ground) = plan_trajectories(&scene, &cfg.aerial, &cfg.ground)?;
    log("capture");
    let dataset = capture(&scene, &aerial, &ground, &EnvironmentCondition::noon(), &cfg.capture, workdir)?;
    log("fuse");
    let cloud = fuse_stage(&dataset, &cfg.fuse, &workdir.join("cloud.ply"))?;
    log("prep-bundles");
    let bundle_dir = workdir.join("bundles");
    prep_bundles(&dataset, &cloud, &bundle_dir, cfg.num_refs, prior_subset, &cfg.point_render)?;

    log("train-diffusion");
    let diff_cfg = DiffusionTrainConfig { subset: prior_subset, ..cfg.diffusion.clone() };
    let ckpt = workdir.join("diffusion.gvck");
    let every = (diff_cfg.train.iterations / 10).max(1);
    let trainer = train_diffusion_stage(&bundle_dir, &diff_cfg, &ckpt, |i, l| {
        if i % every == 0 {
            log(&format!("  diffusion step {i} loss {l:.4}"));
        }
    })?;
    let diffusion_final_loss = tail_mean(&trainer.losses, 100);

    log("generate-ground");
    let net = Denoiser::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
    let gen_dir = workdir.join("priors/generated");
    let gen = generate_ground(&net, &bundle_dir, prior_subset, &cfg.sample, &gen_dir, |_| {})?;
    let gt_dir = workdir.join("priors/ground-truth");
    ground_truth_priors(&dataset, prior_subset, &gt_dir)?;

    let mut reports = Vec::new();
    let mut arms = Vec::new();
    for (name, priors) in [
        (ARM_AERIAL_ONLY, None),
        (ARM_GT_PRIORS, Some(gt_dir.as_path())),
        (ARM_DIFFUSION_PRIORS, Some(gen_dir.as_path())),
    ] {
        log(&format!("reconstruct {name}"));
        let out = workdir.join("recon").join(name.replace('/', "_"));
        let every = (cfg.recon.splat.iterations / 10).max(1);
        let r = reconstruct(&dataset, &cloud, priors, &cfg.recon, &out, |i, l| {
            if i % every == 0 {
                log(&format!("  splat step {i} loss {l:.4}"));
            }
        })?;
        let report = evaluate_renders(&out.join("renders"), &dataset, name, eval_subset)?;
        write_json(&workdir.join("reports").join(format!("{}.json", name.replace('/', "_"))), &report)?;
        let split = |s: Split| report.split(s).map(|x| x.mean);
        let (a, g) = (split(Split::Aerial), split(Split::Ground));
        arms.push(ArmSummary {
            name: name.into(),
            aerial_psnr: a.as_ref().map_or(f64::NAN, |m| m.psnr),
            ground_psnr: g.as_ref().map_or(f64::NAN, |m| m.psnr),
            aerial_ssim: a.as_ref().map_or(f64::NAN, |m| m.ssim),
            ground_ssim: g.as_ref().map_or(f64::NAN, |m| m.ssim),
            final_loss: tail_mean(&r.losses, 100),
        });
        reports.push(report);
    }
    let table = format_table(&reports);
    log(&table);
    let report = DemoReport {
        version: 1,
        config: cfg.clone(),
        prior_subset,
        eval_subset,
        diffusion_final_loss,
        prior_latent_psnr: gen.mean_latent_psnr(),
        arms,
        table,
    };
    write_json(&workdir.join("reports/summary.json"), &report)?;
    Ok(report)
}

fn tail_mean(v: &[f64], n: usize) -> f64 {
    let tail = &v[v.len().saturating_sub(n)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Read a JSON config file, or fall back to defaults when no path is given.
pub fn config_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}
