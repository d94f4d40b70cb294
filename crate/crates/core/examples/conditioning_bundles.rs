//! Select aerial references for ground views and build conditioning bundles.

use groundview::city::{generate_city, CityConfig, EnvironmentCondition};
use groundview::cloud::{FuseParams, PointRenderSettings};
use groundview::condition::{select_references, DEFAULT_NUM_REFS};
use groundview::dataset::{capture, CaptureConfig, LensConfig, Split};
use groundview::pipeline::{fuse_stage, plan_trajectories, prep_bundles, BundleSet, GroundSubset};
use groundview::trajectory::{AerialConfig, GroundConfig};

fn main() -> groundview::Result<()> {
    let out = std::env::temp_dir().join("groundview-examples/conditioning_bundles");
    let scene = generate_city(7, &CityConfig::default())?;
    let (aerial, ground) = plan_trajectories(&scene, &AerialConfig::default(), &GroundConfig::default())?;
    let lens = |hfov_deg| LensConfig { width: 128, height: 128, hfov_deg };
    let cfg = CaptureConfig { version: 1, aerial: lens(60.0), ground: lens(75.0) };
    let ds = capture(&scene, &aerial, &ground, &EnvironmentCondition::noon(), &cfg, &out)?;
    let cloud = fuse_stage(&ds, &FuseParams::default(), &out.join("cloud.ply"))?;

    let rigs = ds.rigs()?;
    for v in ds.views(Split::Ground).step_by(20) {
        let sel = select_references(&rigs, &v.camera, DEFAULT_NUM_REFS)?;
        let picks: Vec<String> = sel
            .refs
            .iter()
            .map(|r| format!("{} {:.1}°", r.role.as_str(), r.angle.to_degrees()))
            .collect();
        println!("{}: rig {} -> {}", v.view_id, rigs[sel.rig].rig_id, picks.join(", "));
    }

    let index = prep_bundles(&ds, &cloud, &out.join("bundles"), DEFAULT_NUM_REFS, GroundSubset::All, &PointRenderSettings::default())?;
    let set = BundleSet::open(&out.join("bundles"))?;
    let first = &set.manifests()?[0];
    let bundle = set.load(first)?;
    println!(
        "{} bundles; {} uses {} references and a {}x{} point render",
        index.bundles.len(),
        first.ground_view_id,
        bundle.num_refs(),
        bundle.point_render.width,
        bundle.point_render.height
    );
    Ok(())
}
