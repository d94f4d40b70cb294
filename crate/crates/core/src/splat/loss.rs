//! Photometric reconstruction loss: L1, SSIM and the perceptual proxy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::metrics::{perceptual_proxy_with_grad, ssim_with_grad, SSIM_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ssim: f64,
    pub perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ssim: 0.2, perc: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.ssim >= 0.0 && self.ssim <= 1.0 && self.perc >= 0.0) {
            return Err(Error::config("loss weights must satisfy 0 <= ssim <= 1 and perc >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub perc: f64,
}

/// SSIM window for an image, shrunk on images smaller than the standard one.
pub fn loss_window(img: &RgbImage) -> usize {
    SSIM_WINDOW.min(img.width).min(img.height)
}

/// `(1 − λs)·L1 + λs·(1 − SSIM) + λp·proxy`, with the gradient w.r.t. `render`.
pub fn reconstruction_loss_with_grad(
    render: &RgbImage,
    target: &RgbImage,
    w: &LossWeights,
) -> Result<(LossTerms, Vec<[f64; 3]>)> {
    render.check_same_shape(target)?;
    let n = (render.pixels.len() * 3) as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<[f64; 3]> = render
        .pixels
        .iter()
        .zip(&target.pixels)
        .map(|(r, t)| {
            [0, 1, 2].map(|c| {
                let d = r[c] - t[c];
                l1 += d.abs();
                (1.0 - w.ssim) * d.signum() * f64::from(d != 0.0) / n
            })
        })
        .collect();
    l1 /= n;
    let mut total = (1.0 - w.ssim) * l1;
    let mut ssim = 1.0;
    if w.ssim > 0.0 {
        let (s, g) = ssim_with_grad(render, target, loss_window(render))?;
        ssim = s;
        total += w.ssim * (1.0 - s);
        grad.iter_mut().zip(g).for_each(|(a, b)| (0..3).for_each(|c| a[c] -= w.ssim * b[c]));
    }
    let mut perc = 0.0;
    if w.perc > 0.0 {
        let (p, g) = perceptual_proxy_with_grad(render, target)?;
        perc = p;
        total += w.perc * p;
        grad.iter_mut().zip(g).for_each(|(a, b)| (0..3).for_each(|c| a[c] += w.perc * b[c]));
    }
    Ok((LossTerms { total, l1, ssim, perc }, grad))
}

pub fn reconstruction_loss(render: &RgbImage, target: &RgbImage, w: &LossWeights) -> Result<f64> {
    Ok(reconstruction_loss_with_grad(render, target, w)?.0.total)
}
