//! Fuse aerial depth maps into a point cloud and splat it into a street view.

use groundview::city::{generate_city, CityConfig, EnvironmentCondition};
use groundview::cloud::{render_points, FuseParams, PointRenderSettings};
use groundview::dataset::{capture, CaptureConfig, LensConfig, Split};
use groundview::pipeline::{fuse_stage, plan_trajectories};
use groundview::trajectory::{AerialConfig, GroundConfig};

fn main() -> groundview::Result<()> {
    let out = std::env::temp_dir().join("groundview-examples/point_cloud_fusion");
    let scene = generate_city(7, &CityConfig::default())?;
    let (aerial, ground) = plan_trajectories(&scene, &AerialConfig::default(), &GroundConfig::default())?;
    let lens = |hfov_deg| LensConfig { width: 128, height: 128, hfov_deg };
    let cfg = CaptureConfig { version: 1, aerial: lens(60.0), ground: lens(75.0) };
    let ds = capture(&scene, &aerial, &ground, &EnvironmentCondition::noon(), &cfg, &out)?;

    let cloud = fuse_stage(&ds, &FuseParams::default(), &out.join("cloud.ply"))?;
    let (lo, hi) = cloud.bounds().expect("non-empty cloud");
    println!("{} points, bounds {:?} .. {:?}", cloud.len(), lo.as_slice(), hi.as_slice());

    let worst = cloud
        .positions
        .iter()
        .map(|p| groundview::city::distance_to_surface(&scene, p))
        .fold(0.0, f64::max);
    println!("largest point-to-surface distance {worst:.2e} m");

    let v = ds.views(Split::Ground).nth(3).expect("ground views");
    let img = render_points(&cloud, &v.camera, &PointRenderSettings::default())?;
    img.save_png(&out.join("points_from_ground.png"))?;
    ds.load_rgb(&v.view_id)?.save_png(&out.join("ground_truth.png"))?;
    println!("point render of {} written to {}", v.view_id, out.display());
    Ok(())
}
