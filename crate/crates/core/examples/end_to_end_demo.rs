//! The full chain on a micro-city: capture, fusion, bundles, diffusion priors,
//! three reconstructions and the comparison table.
//!
//! Usage: `end_to_end_demo [WORKDIR] [--quick]`. The full run takes tens of
//! minutes on one core; `--quick` shrinks every stage to a smoke test.

use std::path::PathBuf;

use groundview::pipeline::{demo, DemoConfig};

fn main() -> groundview::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let workdir = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("groundview-examples/demo"));
    let mut cfg = DemoConfig::default();
    if quick {
        cfg.capture.aerial.width = 64;
        cfg.capture.aerial.height = 64;
        cfg.capture.ground.width = 64;
        cfg.capture.ground.height = 64;
        cfg.diffusion.train.iterations = 20;
        cfg.sample.steps = 5;
        cfg.recon.splat.iterations = 50;
        cfg.recon.skybox_count = 5_000;
    }
    let report = demo(&workdir, &cfg, |m| println!("{m}"))?;
    if let Some(p) = report.prior_latent_psnr {
        println!("generated priors: mean latent PSNR {p:.2} dB");
    }
    println!("summary written to {}", workdir.join("reports/summary.json").display());
    Ok(())
}
