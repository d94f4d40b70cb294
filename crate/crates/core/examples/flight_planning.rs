//! Plan the aerial sweep and the street-level routes for a city.

use groundview::city::{generate_city, CityConfig};
use groundview::geom::Intrinsics;
use groundview::pipeline::plan_trajectories;
use groundview::trajectory::{rig_cameras, AerialConfig, GroundConfig};
use nalgebra::Vector3;

fn main() -> groundview::Result<()> {
    let scene = generate_city(7, &CityConfig::default())?;
    let (aerial, ground) = plan_trajectories(&scene, &AerialConfig::default(), &GroundConfig::default())?;
    println!("{} rig positions", aerial.rigs.len());

    let intr = Intrinsics::from_hfov(128, 128, 60f64.to_radians())?;
    for (role, cam) in rig_cameras(&aerial.rigs[0], &intr) {
        let axis = cam.optical_axis();
        let below = (-axis.dot(&Vector3::z())).asin().to_degrees();
        println!("  {:<6} {below:>7.3} deg below horizontal", role.as_str());
    }

    for route in &ground.routes {
        let w = &route.path.waypoints;
        let len: f64 = w.windows(2).map(|p| Vector3::from(p[1]).metric_distance(&Vector3::from(p[0]))).sum();
        println!(
            "route {}: {} waypoints, {:.1} m, {} turn keypoints",
            route.path_id,
            w.len(),
            len,
            route.path.turn_keypoints.len()
        );
    }
    Ok(())
}
