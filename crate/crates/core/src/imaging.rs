//! Floating-point RGB images and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with `f64` channels (nominally in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &RgbImage) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let pixels = img
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels,
        }
    }

    /// Quantize to 8 bits after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.pixels_mut().zip(&self.pixels) {
            for c in 0..3 {
                dst[c] = quantize(src[c]);
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_rgb8(&self.to_rgb8(), path)
    }

    /// Resample to a new size. Integer downscale factors use box averaging;
    /// everything else uses bilinear interpolation with pixel-center alignment.
    pub fn resized(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        if self.width.is_multiple_of(width) && self.height.is_multiple_of(height) {
            let (fx, fy) = (self.width / width, self.height / height);
            if fx == fy {
                return self.box_downsample(fx);
            }
        }
        let mut out = RgbImage::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                let mut v = [0.0; 3];
                for k in 0..3 {
                    let top = a[k] * (1.0 - wx) + b[k] * wx;
                    let bot = c[k] * (1.0 - wx) + d[k] * wx;
                    v[k] = top * (1.0 - wy) + bot * wy;
                }
                out.set(x, y, v);
            }
        }
        out
    }

    fn box_downsample(&self, f: usize) -> RgbImage {
        let (w, h) = (self.width / f, self.height / f);
        let inv = 1.0 / (f * f) as f64;
        let mut out = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..f {
                    for dx in 0..f {
                        let p = self.get(x * f + dx, y * f + dy);
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                    }
                }
                out.set(x, y, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            }
        }
        out
    }

    /// Flat view of all channel values, row-major, channel-interleaved.
    pub fn as_flat(&self) -> &[f64] {
        self.pixels.as_flattened()
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an 8-bit RGB PNG.
pub fn save_rgb8(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn save_gray8(img: &image::GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn load_rgb8(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .to_rgb8())
}

pub fn load_gray8(path: &Path) -> Result<image::GrayImage> {
    Ok(image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .to_luma8())
}
