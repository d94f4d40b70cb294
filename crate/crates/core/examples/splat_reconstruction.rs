//! Fit a Gaussian splat model to aerial views, with and without ground-view
//! priors, and compare the held-out street-level renders.
//!
//! Pass the number of optimizer steps as the first argument (default 400).

use groundview::city::{generate_city, CityConfig, EnvironmentCondition};
use groundview::cloud::FuseParams;
use groundview::dataset::{capture, CaptureConfig, LensConfig};
use groundview::metrics::format_table;
use groundview::pipeline::{evaluate_renders, fuse_stage, ground_truth_priors, plan_trajectories, reconstruct, GroundSubset, ReconConfig};
use groundview::trajectory::{AerialConfig, GroundConfig};

fn main() -> groundview::Result<()> {
    let iterations: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let out = std::env::temp_dir().join("groundview-examples/splat_reconstruction");
    let scene = generate_city(7, &CityConfig::default())?;
    let (aerial, ground) = plan_trajectories(&scene, &AerialConfig::default(), &GroundConfig::default())?;
    let lens = |hfov_deg| LensConfig { width: 96, height: 96, hfov_deg };
    let cfg = CaptureConfig { version: 1, aerial: lens(60.0), ground: lens(75.0) };
    let ds = capture(&scene, &aerial, &ground, &EnvironmentCondition::noon(), &cfg, &out)?;
    let cloud = fuse_stage(&ds, &FuseParams { dedup_cell: 0.5, ..FuseParams::default() }, &out.join("cloud.ply"))?;
    let priors = out.join("priors");
    ground_truth_priors(&ds, GroundSubset::Even, &priors)?;

    let mut rc = ReconConfig::default();
    rc.splat.iterations = iterations;
    rc.skybox_count = 20_000;
    let mut reports = Vec::new();
    for (name, p) in [("aerial-only", None), ("with-priors", Some(priors.as_path()))] {
        let dir = out.join(name);
        let r = reconstruct(&ds, &cloud, p, &rc, &dir, |i, l| {
            if i % 100 == 0 {
                println!("{name} step {i:>5}  loss {l:.4}");
            }
        })?;
        println!("{name}: {} Gaussians", r.model.len());
        reports.push(evaluate_renders(&dir.join("renders"), &ds, name, GroundSubset::Odd)?);
    }
    println!("{}", format_table(&reports));
    Ok(())
}
