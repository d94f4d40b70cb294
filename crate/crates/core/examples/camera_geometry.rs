//! Pinhole projection, back-projection and pose composition.

use groundview::geom::{look_at, Camera, Intrinsics, Pose};
use nalgebra::{Point2, Vector3};

fn main() -> groundview::Result<()> {
    let intr = Intrinsics::from_hfov(640, 480, 70f64.to_radians())?;
    let pose = look_at(Vector3::new(-20.0, -5.0, 1.7), Vector3::new(10.0, 0.0, 4.0), Vector3::z())?;
    let cam = Camera::new(intr, pose);
    println!("camera at {:?}, looking along {:?}", cam.center().as_slice(), cam.optical_axis().as_slice());

    let p = Vector3::new(12.0, 3.5, 6.0);
    let (px, depth) = cam.project(&p)?;
    let back = cam.backproject(&px, depth)?;
    println!("world {:?} -> pixel ({:.2}, {:.2}) at depth {depth:.3} m", p.as_slice(), px.x, px.y);
    println!("back-projection error {:.2e} m", (back - p).norm());

    let corner = cam.world_ray(&Point2::new(0.0, 0.0));
    println!("ray through the top-left corner: {:?}", corner.as_slice());

    let step = Pose::new(
        *nalgebra::Rotation3::from_euler_angles(0.0, 0.0, 0.01).matrix(),
        Vector3::new(0.1, 0.0, 0.0),
    )?;
    let mut acc = Pose::identity();
    for _ in 0..10_000 {
        acc = acc.compose(&step);
    }
    let r = acc.rotation;
    println!("after 10k compositions |RᵀR − I| = {:.2e}", (r.transpose() * r - nalgebra::Matrix3::identity()).norm());
    Ok(())
}
