//! Fixed image codec between 256×256 RGB images and 4×32×32 latents.
//!
//! Channels 0–2 of a latent are 8×8 block means of the RGB channels; channel 3
//! is the luminance standard deviation inside each block. Decoding bilinearly
//! upsamples a prefiltered copy of channels 0–2, where the prefilter inverts the
//! block-averaging of bilinear interpolation so that re-encoding a decoded
//! latent gives back the same block means.

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub const IMAGE_SIZE: usize = 256;
pub const LATENT_SIZE: usize = 32;
pub const LATENT_CHANNELS: usize = 4;
pub const BLOCK: usize = IMAGE_SIZE / LATENT_SIZE;
/// Elements in one latent frame.
pub const LATENT_LEN: usize = LATENT_CHANNELS * LATENT_SIZE * LATENT_SIZE;

/// One latent frame, channel-major `[4, 32, 32]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros() -> Self {
        Self { data: vec![0.0; LATENT_LEN] }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.len() != LATENT_LEN {
            return Err(Error::Shape(format!("latent has {} values, expected {LATENT_LEN}", data.len())));
        }
        Ok(Self { data })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * LATENT_SIZE + y) * LATENT_SIZE + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * LATENT_SIZE * LATENT_SIZE..(c + 1) * LATENT_SIZE * LATENT_SIZE]
    }
}

fn luminance(p: &[f64; 3]) -> f64 {
    0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]
}

pub fn encode(img: &RgbImage) -> Result<Latent> {
    if img.width != IMAGE_SIZE || img.height != IMAGE_SIZE {
        return Err(Error::Shape(format!(
            "codec expects {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}",
            img.width, img.height
        )));
    }
    let mut z = Latent::zeros();
    let n = (BLOCK * BLOCK) as f64;
    let plane = LATENT_SIZE * LATENT_SIZE;
    for by in 0..LATENT_SIZE {
        for bx in 0..LATENT_SIZE {
            let mut sum = [0.0; 3];
            let mut lsum = 0.0;
            let mut lsq = 0.0;
            for y in by * BLOCK..(by + 1) * BLOCK {
                for x in bx * BLOCK..(bx + 1) * BLOCK {
                    let p = img.get(x, y);
                    for c in 0..3 {
                        sum[c] += p[c];
                    }
                    let l = luminance(&p);
                    lsum += l;
                    lsq += l * l;
                }
            }
            let i = by * LATENT_SIZE + bx;
            for c in 0..3 {
                z.data[c * plane + i] = sum[c] / n;
            }
            let mean = lsum / n;
            z.data[3 * plane + i] = (lsq / n - mean * mean).max(0.0).sqrt();
        }
    }
    Ok(z)
}

/// Solve `(0.125, 0.75, 0.125)` tridiagonal systems with clamped ends in place.
/// That matrix maps bilinear control values to their 8-pixel block means.
fn deblur_1d(v: &mut [f64]) {
    let n = v.len();
    if n == 1 {
        return;
    }
    let (a, b) = (0.125, 0.75);
    let mut diag = vec![b; n];
    diag[0] = b + a;
    diag[n - 1] = b + a;
    // Thomas algorithm on the symmetric tridiagonal system.
    let mut c = vec![0.0; n];
    let mut d = v.to_vec();
    c[0] = a / diag[0];
    d[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - a * c[i - 1];
        c[i] = a / m;
        d[i] = (d[i] - a * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    v.copy_from_slice(&d);
}

fn prefilter(plane: &[f64]) -> Vec<f64> {
    let n = LATENT_SIZE;
    let mut p = plane.to_vec();
    for row in p.chunks_mut(n) {
        deblur_1d(row);
    }
    let mut col = vec![0.0; n];
    for x in 0..n {
        for y in 0..n {
            col[y] = p[y * n + x];
        }
        deblur_1d(&mut col);
        for y in 0..n {
            p[y * n + x] = col[y];
        }
    }
    p
}

pub fn decode(z: &Latent) -> Result<RgbImage> {
    if z.data.len() != LATENT_LEN {
        return Err(Error::Shape(format!("latent has {} values, expected {LATENT_LEN}", z.data.len())));
    }
    let ctrl: Vec<Vec<f64>> = (0..3).map(|c| prefilter(z.channel(c))).collect();
    let n = LATENT_SIZE;
    let src = |u: f64| {
        let u = u.clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut img = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        let (y0, y1, wy) = src((y as f64 + 0.5) / BLOCK as f64 - 0.5);
        for x in 0..IMAGE_SIZE {
            let (x0, x1, wx) = src((x as f64 + 0.5) / BLOCK as f64 - 0.5);
            let mut p = [0.0; 3];
            for c in 0..3 {
                let k = &ctrl[c];
                let top = k[y0 * n + x0] * (1.0 - wx) + k[y0 * n + x1] * wx;
                let bot = k[y1 * n + x0] * (1.0 - wx) + k[y1 * n + x1] * wx;
                p[c] = top * (1.0 - wy) + bot * wy;
            }
            img.set(x, y, p);
        }
    }
    Ok(img)
}
