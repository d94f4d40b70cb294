use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gaussian::{logit, rgb_to_dc, SH_LEN};
use super::*;
use crate::cloud::PointCloud;
use crate::geom::{look_at, Intrinsics, Pose};
use crate::metrics::psnr;

fn axis_camera(w: u32, h: u32, f: f64) -> Camera {
    Camera::new(Intrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(), Pose::identity())
}

fn random_scene(seed: u64, n: usize) -> Vec<Gaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut sh = [0.0; SH_LEN];
            sh.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
            Gaussian {
                position: [rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), rng.random_range(4.0..7.0)],
                log_scale: [0, 1, 2].map(|_| rng.random_range(-1.6..-0.6)),
                rotation: [0, 1, 2, 3].map(|_| rng.random_range(-1.0..1.0)),
                opacity_logit: rng.random_range(-1.0..2.0),
                sh,
            }
        })
        .collect()
}

#[test]
fn isotropic_footprint_matches_closed_form() {
    let cam = axis_camera(64, 64, 100.0);
    let mut g = Gaussian::new([0.0, 0.0, 10.0], 0.5, [1.0; 3], 0.5);
    g.opacity_logit = 40.0;
    let img = render_gaussians(&[&[g]], &cam, [0.0; 3]);
    let var = (100.0 * 0.5 / 10.0f64).powi(2) + raster::DILATION;
    let mut worst: f64 = 0.0;
    for y in 0..64 {
        for x in 0..64 {
            let (dx, dy) = (x as f64 + 0.5 - 32.0, y as f64 + 0.5 - 32.0);
            let expect = (-0.5 * (dx * dx + dy * dy) / var).exp();
            worst = worst.max((img.get(x, y)[0] - expect).abs());
        }
    }
    assert!(worst < 1e-3, "max error {worst}");
}

#[test]
fn empty_model_and_opaque_front() {
    let cam = axis_camera(16, 16, 20.0);
    let img = render_gaussians(&[&[]], &cam, [0.2, 0.4, 0.6]);
    assert!(img.pixels.iter().all(|p| *p == [0.2, 0.4, 0.6]));
    let mut front = Gaussian::new([0.0, 0.0, 2.0], 3.0, [1.0, 0.0, 0.0], 0.5);
    front.opacity_logit = 60.0;
    let back = Gaussian::new([0.0, 0.0, 5.0], 3.0, [0.0, 1.0, 0.0], 0.99);
    let odd = axis_camera(17, 17, 20.0);
    let img = render_gaussians(&[&[back, front]], &odd, [0.0; 3]);
    let c = img.get(8, 8);
    assert!((c[0] - 1.0).abs() < 1e-12 && c[1] == 0.0);
}

#[test]
fn compositing_weights_conserve() {
    let cam = axis_camera(40, 32, 40.0);
    let scene = random_scene(4, 60);
    let d = render_detail(&[&scene], &cam, [0.0; 3]);
    for (t, w) in d.transmittance.iter().zip(&d.weight_sum) {
        assert!((t + w - 1.0).abs() < 1e-6);
    }
    assert!(d.weight_sum.iter().any(|&w| w > 0.5));
}

#[test]
fn render_is_thread_count_independent() {
    let cam = axis_camera(48, 40, 40.0);
    let scene = random_scene(5, 80);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let w: Vec<[f64; 3]> = (0..48 * 40).map(|i| [(i % 7) as f64 * 0.1, 0.3, -0.2]).collect();
    let a = one.install(|| (render_gaussians(&[&scene], &cam, [0.1; 3]), render_backward(&[&scene], &cam, [0.1; 3], &w).unwrap()));
    let b = four.install(|| (render_gaussians(&[&scene], &cam, [0.1; 3]), render_backward(&[&scene], &cam, [0.1; 3], &w).unwrap()));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn gradients_match_finite_differences() {
    let (w, h) = (24u32, 20u32);
    let cam = Camera::new(
        Intrinsics::new(22.0, 21.0, 11.7, 10.2, w, h).unwrap(),
        look_at(Vector3::new(0.3, -0.2, -0.5), Vector3::new(0.0, 0.0, 5.5), Vector3::new(0.05, -1.0, 0.0)).unwrap(),
    );
    let scene = random_scene(7, 6);
    let bg = [0.1, 0.2, 0.3];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let weights: Vec<[f64; 3]> = (0..w * h).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
    let loss = |gs: &[Gaussian]| -> f64 {
        let img = render_gaussians(&[gs], &cam, bg);
        img.pixels.iter().zip(&weights).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum()
    };
    let grads = render_backward(&[&scene], &cam, bg, &weights).unwrap();
    let eps = 1e-6;
    for group in Group::ALL {
        let scale = scene
            .iter()
            .enumerate()
            .flat_map(|(i, _)| group.range().map(move |k| (i, k)))
            .map(|(i, k)| grads[i][k].abs())
            .fold(0.0, f64::max);
        assert!(scale > 0.0, "{group:?} has no gradient");
        for (i, g) in scene.iter().enumerate() {
            for k in group.range() {
                let mut p = scene.clone();
                let mut a = g.to_array();
                a[k] += eps;
                p[i] = Gaussian::from_array(&a);
                let mut m = scene.clone();
                a[k] -= 2.0 * eps;
                m[i] = Gaussian::from_array(&a);
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                let an = grads[i][k];
                let denom = fd.abs().max(an.abs()).max(1e-2 * scale);
                assert!((fd - an).abs() / denom < 1e-3, "{group:?} gaussian {i} slot {k}: analytic {an} numeric {fd}");
            }
        }
    }
}

#[test]
fn init_from_cloud_uses_neighbour_spacing() {
    let h = 0.25;
    let mut positions = Vec::new();
    for i in 0..9 {
        for j in 0..9 {
            positions.push(Vector3::new(i as f64 * h, j as f64 * h, 1.0));
        }
    }
    let n = positions.len();
    let cloud = PointCloud { positions, colors: vec![[0.2, 0.5, 0.9]; n], provenance: None };
    let gs = init_from_cloud(&cloud).unwrap();
    let centre = &gs[4 * 9 + 4];
    assert!((centre.log_scale[0].exp() - h).abs() < 1e-12);
    assert!((centre.opacity() - 0.1).abs() < 1e-12);
    assert_eq!(centre.rotation, [1.0, 0.0, 0.0, 0.0]);
    let col = centre.color(&Vector3::new(0.3, 0.1, 0.9).normalize());
    assert!((col[2] - 0.9).abs() < 1e-12);

    let one = PointCloud { positions: vec![Vector3::new(1.0, 2.0, 3.0)], colors: vec![[0.5; 3]], provenance: None };
    let gs = init_from_cloud(&one).unwrap();
    assert_eq!(gs.len(), 1);
    assert_eq!(gs[0].position, [1.0, 2.0, 3.0]);
    let empty = PointCloud { positions: vec![], colors: vec![], provenance: None };
    assert!(init_from_cloud(&empty).is_err());
}

#[test]
fn decoded_color_at_view_matches_point_color() {
    let cam = axis_camera(32, 32, 30.0);
    let mut g = Gaussian::new([0.0, 0.0, 4.0], 0.6, [0.25, 0.5, 0.75], 0.5);
    g.opacity_logit = 50.0;
    let img = render_gaussians(&[&[g]], &cam, [0.0; 3]);
    let c = img.get(16, 16);
    let a = (-0.5 * 0.5 / ((30.0 * 0.6 / 4.0f64).powi(2) + raster::DILATION)).exp();
    for k in 0..3 {
        assert!((c[k] - a * [0.25, 0.5, 0.75][k]).abs() < 1e-9);
    }
}

fn fit_fixture() -> (GaussianModel, Vec<TrainView>) {
    let cam = axis_camera(32, 32, 30.0);
    let truth = random_scene(11, 25);
    let target = render_gaussians(&[&truth], &cam, [0.0; 3]);
    let mut start = truth.clone();
    for g in &mut start {
        g.sh = [0.0; SH_LEN];
        for c in 0..3 {
            g.sh[c] = rgb_to_dc(0.5);
        }
    }
    let mut model = GaussianModel::new(start, Vec::new());
    model.scene_mask = GroupMask::sh_only();
    (model, vec![TrainView { camera: cam, target }])
}

#[test]
fn sh_only_fit_reaches_30_db() {
    let (mut model, views) = fit_fixture();
    let cfg = SplatTrainConfig {
        iterations: 500,
        lr: GroupLr { sh_dc: 0.02, sh_rest: 0.02, ..GroupLr::default() },
        loss: LossWeights { ssim: 0.0, perc: 0.0 },
        ..SplatTrainConfig::default()
    };
    let before: Vec<_> = model.scene.iter().map(|g| (g.position, g.log_scale, g.rotation, g.opacity_logit)).collect();
    optimize(&mut model, &views, &cfg, 1.0, |_, _| {}).unwrap();
    let after: Vec<_> = model.scene.iter().map(|g| (g.position, g.log_scale, g.rotation, g.opacity_logit)).collect();
    assert_eq!(before, after);
    let p = psnr(&model.render(&views[0].camera, [0.0; 3]), &views[0].target).unwrap();
    assert!(p >= 30.0, "psnr {p}");
}

#[test]
fn skybox_geometry_is_frozen_and_zero_iterations_is_identity() {
    let cam = axis_camera(24, 24, 12.0);
    let scene = random_scene(12, 10);
    let sky = make_skybox(Vector3::new(0.0, 0.0, 5.0), 4.0, 400, 2).unwrap();
    let mut model = GaussianModel::new(scene, sky);
    let target = RgbImage::filled(24, 24, [0.3, 0.6, 0.2]);
    let views = vec![TrainView { camera: cam, target }];
    let snapshot = model.clone();
    optimize(&mut model, &views, &SplatTrainConfig { iterations: 0, ..Default::default() }, 1.0, |_, _| {}).unwrap();
    assert_eq!(model, snapshot);
    optimize(&mut model, &views, &SplatTrainConfig { iterations: 20, ..Default::default() }, 5.0, |_, _| {}).unwrap();
    let bits = |gs: &[Gaussian]| -> Vec<u64> {
        gs.iter().flat_map(|g| g.position.iter().chain(&g.log_scale).chain(&g.rotation).map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    assert_eq!(bits(&model.skybox), bits(&snapshot.skybox));
    assert_ne!(model.skybox, snapshot.skybox);
    assert_ne!(bits(&model.scene), bits(&snapshot.scene));
    for g in &model.scene {
        let n: f64 = g.rotation.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = GaussianModel::new(random_scene(1, 3), make_skybox(Vector3::zeros(), 1.0, 5, 0).unwrap());
    let ck = model.to_checkpoint(serde_json::json!({"init": 0}), 7).unwrap();
    let back = GaussianModel::from_checkpoint(&crate::checkpoint::Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.scene.len(), 3);
    assert_eq!(back.skybox_mask, GroupMask::appearance());
    assert_eq!(back.scene[1].opacity_logit, model.scene[1].opacity_logit as f32 as f64);
    let _ = logit(0.5);
}
