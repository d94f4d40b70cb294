//! Generate a small city, save it as JSON and render a street-level view.

use groundview::city::{generate_city, scene_diameter, CityConfig, EnvironmentCondition};
use groundview::geom::{look_at, Camera, Intrinsics};
use groundview::render::{render, ExposureMode};
use nalgebra::Vector3;

fn main() -> groundview::Result<()> {
    let out = std::env::temp_dir().join("groundview-examples/procedural_city");
    std::fs::create_dir_all(&out).map_err(|e| groundview::Error::io(&out, e))?;

    let scene = generate_city(42, &CityConfig::default())?;
    println!(
        "{} buildings on {} roads, tallest {:.1} m, diameter {:.1} m",
        scene.buildings.len(),
        scene.roads.len(),
        scene.max_building_height(),
        scene_diameter(&scene)?
    );
    groundview::fsio::write_json(&out.join("scene.json"), &scene)?;

    // Stand near one end of the first road and look down its length.
    let spine = &scene.roads[0].spine;
    let (a, b) = (spine[0], spine[spine.len() - 1]);
    let at = |f: f64, z: f64| Vector3::new(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), z);
    let pose = look_at(at(0.15, 1.7), at(0.85, 4.0), Vector3::z())?;
    let cam = Camera::new(Intrinsics::from_hfov(320, 240, 75f64.to_radians())?, pose);
    for (name, env) in [("noon", EnvironmentCondition::noon()), ("sunset", EnvironmentCondition::sunset())] {
        let r = render(&scene, &cam, &env);
        let path = out.join(format!("street_{name}.png"));
        groundview::fsio::write_png(&path, &r.exposed(ExposureMode::Ground))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
