//! PSNR, SSIM and the perceptual proxy on progressively degraded images.

use groundview::imaging::RgbImage;
use groundview::metrics::{perceptual_proxy, psnr, ssim};
use rand::{Rng, SeedableRng};

fn box_blur(img: &RgbImage, r: usize) -> RgbImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for yy in y.saturating_sub(r)..(y + r + 1).min(img.height) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(img.width) {
                    let p = img.pixels[yy * img.width + xx];
                    (0..3).for_each(|c| acc[c] += p[c]);
                    n += 1.0;
                }
            }
            out.pixels[y * img.width + x] = acc.map(|v| v / n);
        }
    }
    out
}

fn main() -> groundview::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let (w, h) = (96, 96);
    let px = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let base = 0.5 + 0.3 * ((x / 7.0).sin() * (y / 11.0).cos());
            [base, 0.6 * base + 0.2, 1.0 - base].map(|v: f64| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
        })
        .collect();
    let reference = RgbImage::from_pixels(w, h, px)?;
    println!("identical: PSNR {:.1} dB (capped), SSIM {:.4}", psnr(&reference, &reference)?, ssim(&reference, &reference)?);
    println!("{:>6} {:>9} {:>8} {:>11}", "blur", "PSNR", "SSIM", "proxy");
    for r in 1..=4 {
        let b = box_blur(&reference, r);
        println!("{r:>6} {:>9.3} {:>8.4} {:>11.5}", psnr(&b, &reference)?, ssim(&b, &reference)?, perceptual_proxy(&b, &reference)?);
    }
    Ok(())
}
