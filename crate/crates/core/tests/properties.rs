//! Property tests over randomized inputs.

use groundview::checkpoint::{Checkpoint, NamedTensor};
use groundview::diffusion::codec::{decode, encode, Latent, LATENT_LEN, LATENT_SIZE};
use groundview::diffusion::sampler::guide;
use groundview::diffusion::schedule::NoiseSchedule;
use groundview::geom::{look_at, Camera, Intrinsics, Pose};
use groundview::imaging::RgbImage;
use groundview::metrics::{psnr, ssim};
use groundview::pipeline::GroundSubset;
use groundview::splat::{render_detail, Gaussian};
use nalgebra::{Point2, Rotation3, Vector3};
use proptest::prelude::*;

fn camera(yaw: f64, pitch: f64) -> Camera {
    let pos = Vector3::new(3.0, -2.0, 10.0);
    let dir = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
    let pose = look_at(pos, pos + dir, Vector3::z()).unwrap();
    Camera::new(Intrinsics::from_hfov(48, 40, 1.1).unwrap(), pose)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_round_trip(yaw in -3.1f64..3.1, pitch in -1.2f64..1.2, u in 0.0f64..48.0, v in 0.0f64..40.0, d in 0.1f64..500.0) {
        let cam = camera(yaw, pitch);
        let p = cam.backproject(&Point2::new(u, v), d).unwrap();
        let (px, depth) = cam.project(&p).unwrap();
        prop_assert!((px.x - u).abs() < 1e-6 && (px.y - v).abs() < 1e-6);
        prop_assert!((depth - d).abs() < 1e-9 * d.max(1.0));
    }

    #[test]
    fn pose_inverse_composes_to_identity(r in -3.0f64..3.0, p in -1.5f64..1.5, y in -3.0f64..3.0, t in prop::array::uniform3(-50.0f64..50.0)) {
        let pose = Pose::new(*Rotation3::from_euler_angles(r, p, y).matrix(), Vector3::from(t)).unwrap();
        let id = pose.compose(&pose.inverse());
        prop_assert!((id.rotation - nalgebra::Matrix3::identity()).norm() < 1e-12);
        prop_assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn q_sample_without_noise_scales_x0(t in 0usize..1000, x0 in prop::collection::vec(-1.0f64..1.0, 16)) {
        let s = NoiseSchedule::default();
        let out = s.q_sample(&x0, t, &[0.0; 16]).unwrap();
        let a = s.alpha_bar[t].sqrt();
        for (o, x) in out.iter().zip(&x0) {
            prop_assert_eq!(*o, a * x);
        }
    }

    #[test]
    fn guidance_identities(c in prop::collection::vec(-3.0f64..3.0, 8), u in prop::collection::vec(-3.0f64..3.0, 8)) {
        prop_assert_eq!(guide(&c, &u, 1.0), c.clone());
        prop_assert_eq!(guide(&c, &u, 0.0), u);
    }

    #[test]
    fn compositing_conserves_weight(
        specs in prop::collection::vec((prop::array::uniform3(-4.0f64..4.0), 0.05f64..1.5, 0.01f64..0.99), 1..12)
    ) {
        let cam = Camera::new(Intrinsics::from_hfov(24, 24, 1.2).unwrap(), look_at(Vector3::new(0.0, -12.0, 0.0), Vector3::zeros(), Vector3::z()).unwrap());
        let gs: Vec<Gaussian> = specs.iter().map(|(p, s, o)| Gaussian::new(*p, *s, [0.4, 0.5, 0.6], *o)).collect();
        let d = render_detail(&[&gs], &cam, [0.0; 3]);
        for (t, w) in d.transmittance.iter().zip(&d.weight_sum) {
            prop_assert!((t + w - 1.0).abs() < 1e-9);
            prop_assert!(*t >= 0.0 && *t <= 1.0);
        }
    }

    #[test]
    fn ssim_and_psnr_basics(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut img = || RgbImage::from_pixels(16, 16, (0..256).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..1.0))).collect()).unwrap();
        let (a, b) = (img(), img());
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(psnr(&a, &b).unwrap() < psnr(&a, &a).unwrap());
    }

    #[test]
    fn checkpoint_round_trip(data in prop::collection::vec(-1e3f64..1e3, 1..40), iteration in 0u64..1_000_000) {
        let ck = Checkpoint {
            kind: "test".into(),
            config: serde_json::json!({ "k": 1 }),
            seeds: serde_json::json!([iteration]),
            iteration,
            tensors: vec![NamedTensor { name: "w".into(), shape: vec![data.len()], data: data.clone() }],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.iteration, iteration);
        for (a, b) in back.tensors[0].data.iter().zip(&data) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn subset_partition(path in "[a-z][0-9]{2}", i in 0usize..10_000) {
        let id = format!("{path}_{i:04}");
        prop_assert!(GroundSubset::All.contains(&id));
        prop_assert_ne!(GroundSubset::Even.contains(&id), GroundSubset::Odd.contains(&id));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn codec_decode_is_a_right_inverse(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // Smooth latents keep the decoded image inside [0, 1].
        let (fx, fy) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
        let mut data = vec![0.0; LATENT_LEN];
        for c in 0..3 {
            for y in 0..LATENT_SIZE {
                for x in 0..LATENT_SIZE {
                    data[(c * LATENT_SIZE + y) * LATENT_SIZE + x] = 0.5 + 0.2 * ((x as f64 * fx + c as f64).sin() * (y as f64 * fy).cos());
                }
            }
        }
        let z = Latent::from_vec(data).unwrap();
        let back = encode(&decode(&z).unwrap()).unwrap();
        for c in 0..3 {
            for y in 0..LATENT_SIZE {
                for x in 0..LATENT_SIZE {
                    prop_assert!((back.get(c, y, x) - z.get(c, y, x)).abs() < 1e-9);
                }
            }
        }
    }
}
