//! Render every planned view of a micro-city into a self-describing dataset.

use groundview::city::{generate_city, CityConfig, EnvironmentCondition};
use groundview::dataset::{capture, CaptureConfig, LensConfig, Split};
use groundview::pipeline::plan_trajectories;
use groundview::trajectory::{AerialConfig, GroundConfig};

fn main() -> groundview::Result<()> {
    let out = std::env::temp_dir().join("groundview-examples/capture_dataset");
    let scene = generate_city(7, &CityConfig::default())?;
    let (aerial, ground) = plan_trajectories(&scene, &AerialConfig::default(), &GroundConfig::default())?;
    let cfg = CaptureConfig {
        version: 1,
        aerial: LensConfig { width: 96, height: 96, hfov_deg: 60.0 },
        ground: LensConfig { width: 96, height: 96, hfov_deg: 75.0 },
    };
    let ds = capture(&scene, &aerial, &ground, &EnvironmentCondition::noon(), &cfg, &out)?;
    for split in [Split::Aerial, Split::Ground] {
        println!("{:<6} {} views", split.as_str(), ds.views(split).count());
    }
    let v = ds.views(Split::Ground).next().expect("ground views");
    let depth = ds.load_depth(&v.view_id)?;
    let finite = depth.values.iter().filter(|d| d.is_finite()).count();
    println!("{}: {} of {} pixels hit geometry", v.view_id, finite, depth.values.len());
    println!("dataset written to {}", out.display());
    Ok(())
}
