//! Train a tiny conditional denoiser on a few bundles, then sample ground views.
//!
//! Pass the number of training steps as the first argument (default 300).

use groundview::city::{generate_city, CityConfig, EnvironmentCondition};
use groundview::cloud::{FuseParams, PointRenderSettings};
use groundview::dataset::{capture, CaptureConfig, LensConfig};
use groundview::diffusion::sampler::SampleConfig;
use groundview::diffusion::{ddim_sample, decode_latent, from_model_space, latent_psnr};
use groundview::pipeline::{fuse_stage, plan_trajectories, prep_bundles, train_diffusion, BundleSet, DiffusionTrainConfig, GroundSubset};
use groundview::trajectory::{AerialConfig, GroundConfig};

fn main() -> groundview::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = std::env::temp_dir().join("groundview-examples/ground_view_diffusion");
    let scene = generate_city(7, &CityConfig::default())?;
    let (aerial, ground) = plan_trajectories(&scene, &AerialConfig::default(), &GroundConfig::default())?;
    let lens = |hfov_deg| LensConfig { width: 128, height: 128, hfov_deg };
    let cfg = CaptureConfig { version: 1, aerial: lens(60.0), ground: lens(75.0) };
    let ds = capture(&scene, &aerial, &ground, &EnvironmentCondition::noon(), &cfg, &out)?;
    let cloud = fuse_stage(&ds, &FuseParams::default(), &out.join("cloud.ply"))?;
    prep_bundles(&ds, &cloud, &out.join("bundles"), 3, GroundSubset::Even, &PointRenderSettings::default())?;

    let set = BundleSet::open(&out.join("bundles"))?;
    let samples: Vec<_> = set.training_samples(GroundSubset::All)?.into_iter().take(4).collect();
    let train: Vec<_> = samples.iter().map(|(_, s)| s.clone()).collect();
    let mut tcfg = DiffusionTrainConfig::default();
    tcfg.train.iterations = steps;
    let trainer = train_diffusion(&train, &tcfg, |i, l| {
        if i % 50 == 0 {
            println!("step {i:>5}  loss {l:.4}");
        }
    })?;

    for (i, (id, s)) in samples.iter().enumerate() {
        let z = ddim_sample(&trainer.net, &s.ctx, &SampleConfig { seed: i as u64, ..Default::default() })?;
        let psnr = latent_psnr(&z, &from_model_space(&s.target)?);
        decode_latent(&z)?.save_png(&out.join(format!("{id}_sample.png")))?;
        println!("{id}: latent PSNR {psnr:.2} dB");
    }
    println!("samples written to {}", out.display());
    Ok(())
}
