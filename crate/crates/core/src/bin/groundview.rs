use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use groundview::checkpoint::Checkpoint;
use groundview::city::{CityConfig, CityScene, EnvironmentCondition};
use groundview::cloud::{load_ply, FuseParams, PointRenderSettings};
use groundview::condition::DEFAULT_NUM_REFS;
use groundview::dataset::{capture, CaptureConfig, Dataset};
use groundview::diffusion::net::Denoiser;
use groundview::diffusion::sampler::SampleConfig;
use groundview::fsio::{read_artifact, read_json, write_json};
use groundview::metrics::format_table;
use groundview::pipeline::{self, config_or_default, DemoConfig, DiffusionTrainConfig, GroundSubset, ReconConfig};
use groundview::trajectory::{AerialConfig, AerialTrajectory, GroundConfig, GroundTrajectory};
use groundview::{Error, Result};

#[derive(Parser)]
#[command(name = "groundview", version, about = "Aerial-to-ground view synthesis and reconstruction pipeline")]
struct Cli {
    /// Worker threads; 1 selects the deterministic reference path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural city and write its scene JSON.
    GenerateCity {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan the aerial sweep and ground routes for a scene.
    Plan {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        aerial_cfg: Option<PathBuf>,
        #[arg(long)]
        ground_cfg: Option<PathBuf>,
        /// Directory receiving aerial.json and ground.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every planned view into a dataset directory.
    Capture {
        #[arg(long)]
        scene: PathBuf,
        /// Directory holding aerial.json and ground.json.
        #[arg(long)]
        trajectories: PathBuf,
        /// `noon`, `sunset` or a JSON file.
        #[arg(long, default_value = "noon")]
        env: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse aerial depth maps into a point cloud.
    Fuse {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select references and render point clouds for every ground view.
    PrepBundles {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_NUM_REFS)]
        num_refs: usize,
        #[arg(long, default_value = "all")]
        subset: GroundSubset,
    },
    /// Train the conditional denoiser on prepared bundles.
    TrainDiffusion {
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample ground views for prepared bundles.
    GenerateGround {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 5.0)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 1.1)]
        noise_gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "all")]
        subset: GroundSubset,
    },
    /// Fit a splat model to aerial views and optional ground priors.
    Reconstruct {
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to `<dataset>/cloud.ply`.
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score renders against dataset views.
    Evaluate {
        /// Directory holding `aerial/` and `ground/` renders.
        #[arg(long)]
        renders: PathBuf,
        /// Dataset directory with the reference views.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "method")]
        method: String,
        #[arg(long, default_value = "all")]
        subset: GroundSubset,
    },
    /// Run the whole chain on a micro-city with pinned seeds.
    Demo {
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn env_condition(arg: &str) -> Result<EnvironmentCondition> {
    match arg {
        "noon" => Ok(EnvironmentCondition::noon()),
        "sunset" => Ok(EnvironmentCondition::sunset()),
        path => read_json(Path::new(path)),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("--threads: {e}")))?;
    }
    match cli.cmd {
        Cmd::GenerateCity { seed, config, out } => {
            let cfg: CityConfig = config_or_default(config.as_deref())?;
            let scene = pipeline::city_stage(seed, &cfg, &out)?;
            println!("{} buildings written to {}", scene.buildings.len(), out.display());
        }
        Cmd::Plan { scene, aerial_cfg, ground_cfg, out } => {
            let scene: CityScene = read_artifact(&scene)?;
            let aerial: AerialConfig = config_or_default(aerial_cfg.as_deref())?;
            let ground: GroundConfig = config_or_default(ground_cfg.as_deref())?;
            pipeline::plan_stage(&scene, &aerial, &ground, &out)?;
            println!("trajectories written to {}", out.display());
        }
        Cmd::Capture { scene, trajectories, env, config, out } => {
            let scene: CityScene = read_artifact(&scene)?;
            let aerial: AerialTrajectory = read_artifact(&trajectories.join("aerial.json"))?;
            let ground: GroundTrajectory = read_artifact(&trajectories.join("ground.json"))?;
            let cfg: CaptureConfig = config_or_default(config.as_deref())?;
            let ds = capture(&scene, &aerial, &ground, &env_condition(&env)?, &cfg, &out)?;
            println!("{} views captured into {}", ds.manifest.views.len(), out.display());
        }
        Cmd::Fuse { dataset, config, out } => {
            let params: FuseParams = config_or_default(config.as_deref())?;
            let cloud = pipeline::fuse_stage(&Dataset::open(&dataset)?, &params, &out)?;
            println!("{} points written to {}", cloud.len(), out.display());
        }
        Cmd::PrepBundles { dataset, cloud, out, num_refs, subset } => {
            let ds = Dataset::open(&dataset)?;
            let cloud = load_ply(&cloud)?;
            let idx = pipeline::prep_bundles(&ds, &cloud, &out, num_refs, subset, &PointRenderSettings::default())?;
            println!("{} bundles written to {}", idx.bundles.len(), out.display());
        }
        Cmd::TrainDiffusion { bundles, config, out } => {
            let cfg: DiffusionTrainConfig = config_or_default(config.as_deref())?;
            cfg.validate()?;
            let every = (cfg.train.iterations / 20).max(1);
            let t = pipeline::train_diffusion_stage(&bundles, &cfg, &out, |i, l| {
                if i % every == 0 {
                    eprintln!("step {i:>6}  loss {l:.5}");
                }
            })?;
            println!("{} steps, checkpoint written to {}", t.iteration, out.display());
        }
        Cmd::GenerateGround { ckpt, bundles, out, steps, cfg_scale, noise_gamma, eta, seed, subset } => {
            let cfg = SampleConfig { steps, eta, cfg_scale, noise_gamma, seed, ..SampleConfig::default() };
            cfg.validate()?;
            let net = Denoiser::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let idx = pipeline::generate_ground(&net, &bundles, subset, &cfg, &out, |id| eprintln!("sampled {id}"))?;
            if let Some(p) = idx.mean_latent_psnr() {
                println!("mean latent PSNR vs targets: {p:.2} dB");
            }
            println!("{} ground views written to {}", idx.views.len(), out.display());
        }
        Cmd::Reconstruct { dataset, cloud, priors, config, out } => {
            let cfg: ReconConfig = config_or_default(config.as_deref())?;
            cfg.validate()?;
            let ds = Dataset::open(&dataset)?;
            let cloud = load_ply(&cloud.unwrap_or_else(|| dataset.join("cloud.ply")))?;
            let every = (cfg.splat.iterations / 20).max(1);
            let r = pipeline::reconstruct(&ds, &cloud, priors.as_deref(), &cfg, &out, |i, l| {
                if i % every == 0 {
                    eprintln!("step {i:>6}  loss {l:.5}");
                }
            })?;
            println!("{} Gaussians, model and renders written to {}", r.model.len(), out.display());
        }
        Cmd::Evaluate { renders, targets, out, method, subset } => {
            let report = pipeline::evaluate_renders(&renders, &Dataset::open(&targets)?, &method, subset)?;
            write_json(&out, &report)?;
            println!("{}", format_table(std::slice::from_ref(&report)));
        }
        Cmd::Demo { workdir, config } => {
            let cfg: DemoConfig = config_or_default(config.as_deref())?;
            let report = pipeline::demo(&workdir, &cfg, |m| eprintln!("{m}"))?;
            for a in &report.arms {
                println!(
                    "{:<28} aerial {:>7.3} dB   ground {:>7.3} dB",
                    a.name, a.aerial_psnr, a.ground_psnr
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
