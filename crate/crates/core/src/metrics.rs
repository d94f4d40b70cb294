//! Image quality metrics (PSNR, SSIM, a fixed random-feature perceptual proxy)
//! and the per-split evaluation report.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

/// Reported in place of +infinity for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    a.check_same_shape(b)?;
    let (fa, fb) = (a.as_flat(), b.as_flat());
    if fa.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / fa.len() as f64)
}

/// Peak signal-to-noise ratio for a peak value of 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut t: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable "valid" correlation of a `w×h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let src = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatter an output-sized plane back to `w×h`.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let dst = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn planes(img: &RgbImage) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|c| img.pixels.iter().map(|p| p[c]).collect())
}

/// Mean SSIM of one channel plane and, optionally, its gradient w.r.t. `a`.
fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, k: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let ma = filter_valid(a, w, h, k);
    let mb = filter_valid(b, w, h, k);
    let maa = filter_valid(&aa, w, h, k);
    let mbb = filter_valid(&bb, w, h, k);
    let mab = filter_valid(&ab, w, h, k);
    let np = ma.len();
    let inv = 1.0 / np as f64;
    let mut total = 0.0;
    let (mut ga, mut gaa, mut gab) = if want_grad {
        (vec![0.0; np], vec![0.0; np], vec![0.0; np])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..np {
        let (mua, mub) = (ma[i], mb[i]);
        let a1 = 2.0 * mua * mub + C1;
        let a2 = 2.0 * (mab[i] - mua * mub) + C2;
        let b1 = mua * mua + mub * mub + C1;
        let b2 = (maa[i] - mua * mua) + (mbb[i] - mub * mub) + C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let bb12 = b1 * b2;
            ga[i] = inv * ((2.0 * mub * a2 - 2.0 * mub * a1) / bb12 - s * (2.0 * mua / b1 - 2.0 * mua / b2));
            gaa[i] = -inv * s / b2;
            gab[i] = inv * 2.0 * a1 / bb12;
        }
    }
    let grad = want_grad.then(|| {
        let da = filter_valid_adjoint(&ga, w, h, k);
        let daa = filter_valid_adjoint(&gaa, w, h, k);
        let dab = filter_valid_adjoint(&gab, w, h, k);
        (0..w * h).map(|i| da[i] + 2.0 * a[i] * daa[i] + b[i] * dab[i]).collect()
    });
    (total * inv, grad)
}

fn ssim_impl(a: &RgbImage, b: &RgbImage, window: usize, want_grad: bool) -> Result<(f64, Option<Vec<[f64; 3]>>)> {
    a.check_same_shape(b)?;
    if window == 0 || a.width < window || a.height < window {
        return Err(Error::Shape(format!(
            "SSIM window {window} does not fit a {}x{} image",
            a.width, a.height
        )));
    }
    let k = gaussian_taps(window, SSIM_SIGMA);
    let (pa, pb) = (planes(a), planes(b));
    let per: Vec<(f64, Option<Vec<f64>>)> = (0..3)
        .into_par_iter()
        .map(|c| ssim_plane(&pa[c], &pb[c], a.width, a.height, &k, want_grad))
        .collect();
    let value = per.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let grad = want_grad.then(|| {
        (0..a.width * a.height)
            .map(|i| [0, 1, 2].map(|c| per[c].1.as_ref().unwrap()[i] / 3.0))
            .collect()
    });
    Ok((value, grad))
}

/// Single-scale SSIM: 11×11 Gaussian window (σ 1.5), valid positions only,
/// dynamic range 1, averaged over channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(ssim_impl(a, b, SSIM_WINDOW, false)?.0)
}

/// SSIM with a custom (square) window size.
pub fn ssim_window(a: &RgbImage, b: &RgbImage, window: usize) -> Result<f64> {
    Ok(ssim_impl(a, b, window, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &RgbImage, b: &RgbImage, window: usize) -> Result<(f64, Vec<[f64; 3]>)> {
    let (v, g) = ssim_impl(a, b, window, true)?;
    Ok((v, g.unwrap()))
}

// ---------------------------------------------------------------------------
// Perceptual proxy

pub const PROXY_LEVELS: usize = 3;
pub const PROXY_FILTERS: usize = 16;
const PROXY_SEED: u64 = 0x1f2e_3d4c;
const PROXY_EPS: f64 = 1e-10;
const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Filter bank `[filter][in_channel][dy][dx]`, flattened.
fn proxy_bank() -> &'static [f64] {
    static BANK: OnceLock<Vec<f64>> = OnceLock::new();
    BANK.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PROXY_SEED);
        let scale = 1.0 / 27f64.sqrt();
        (0..PROXY_FILTERS * 27)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    })
}

/// Planar multi-channel image.
#[derive(Clone)]
struct Planes {
    w: usize,
    h: usize,
    c: Vec<Vec<f64>>,
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Binomial blur (edge clamped) then keep even pixels.
fn pyr_down(p: &Planes) -> Planes {
    let (w, h) = (p.w, p.h);
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let c = p
        .c
        .iter()
        .map(|src| {
            let mut out = vec![0.0; ow * oh];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (cx, cy) = (2 * ox as isize, 2 * oy as isize);
                    let mut acc = 0.0;
                    for (j, wy) in BINOMIAL.iter().enumerate() {
                        let y = clamp_idx(cy + j as isize - 2, h);
                        for (i, wx) in BINOMIAL.iter().enumerate() {
                            let x = clamp_idx(cx + i as isize - 2, w);
                            acc += wy * wx * src[y * w + x];
                        }
                    }
                    out[oy * ow + ox] = acc;
                }
            }
            out
        })
        .collect();
    Planes { w: ow, h: oh, c }
}

fn pyr_down_adjoint(g: &Planes, w: usize, h: usize) -> Planes {
    let c = g
        .c
        .iter()
        .map(|gs| {
            let mut out = vec![0.0; w * h];
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let v = gs[oy * g.w + ox];
                    let (cx, cy) = (2 * ox as isize, 2 * oy as isize);
                    for (j, wy) in BINOMIAL.iter().enumerate() {
                        let y = clamp_idx(cy + j as isize - 2, h);
                        for (i, wx) in BINOMIAL.iter().enumerate() {
                            let x = clamp_idx(cx + i as isize - 2, w);
                            out[y * w + x] += wy * wx * v;
                        }
                    }
                }
            }
            out
        })
        .collect();
    Planes { w, h, c }
}

/// 3×3 "same" convolution with zero padding through the fixed bank.
fn bank_conv(p: &Planes) -> Planes {
    let bank = proxy_bank();
    let (w, h) = (p.w, p.h);
    let c = (0..PROXY_FILTERS)
        .map(|f| {
            let mut out = vec![0.0; w * h];
            for ci in 0..3 {
                let src = &p.c[ci];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wv = bank[f * 27 + ci * 9 + dy * 3 + dx];
                        for y in 0..h {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for x in 0..w {
                                let sx = x as isize + dx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                out[y * w + x] += wv * src[sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    Planes { w, h, c }
}

fn bank_conv_adjoint(g: &Planes) -> Planes {
    let bank = proxy_bank();
    let (w, h) = (g.w, g.h);
    let mut c = vec![vec![0.0; w * h]; 3];
    for (f, gs) in g.c.iter().enumerate() {
        for (ci, dst) in c.iter_mut().enumerate() {
            for dy in 0..3 {
                for dx in 0..3 {
                    let wv = bank[f * 27 + ci * 9 + dy * 3 + dx];
                    for y in 0..h {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + dx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dst[sy as usize * w + sx as usize] += wv * gs[y * w + x];
                        }
                    }
                }
            }
        }
    }
    Planes { w, h, c }
}

fn to_planes(img: &RgbImage) -> Planes {
    let [r, g, b] = planes(img);
    Planes {
        w: img.width,
        h: img.height,
        c: vec![r, g, b],
    }
}

fn pyramid(img: &RgbImage) -> Vec<Planes> {
    let mut levels = vec![to_planes(img)];
    for _ in 1..PROXY_LEVELS {
        let next = pyr_down(levels.last().unwrap());
        levels.push(next);
    }
    levels
}

/// Per-pixel unit-normalized features.
fn normalize(f: &Planes) -> (Planes, Vec<f64>) {
    let n = f.w * f.h;
    let norms: Vec<f64> = (0..n)
        .map(|i| f.c.iter().map(|ch| ch[i] * ch[i]).sum::<f64>().sqrt())
        .collect();
    let c = f
        .c
        .iter()
        .map(|ch| ch.iter().zip(&norms).map(|(v, nv)| v / (nv + PROXY_EPS)).collect())
        .collect();
    (Planes { w: f.w, h: f.h, c }, norms)
}

fn proxy_impl(a: &RgbImage, b: &RgbImage, want_grad: bool) -> Result<(f64, Option<Vec<[f64; 3]>>)> {
    a.check_same_shape(b)?;
    if a.width == 0 || a.height == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let (pa, pb) = (pyramid(a), pyramid(b));
    let mut total = 0.0;
    let mut level_grads = Vec::new();
    for l in 0..PROXY_LEVELS {
        let fa = bank_conv(&pa[l]);
        let (ua, na) = normalize(&fa);
        let (ub, _) = normalize(&bank_conv(&pb[l]));
        let np = fa.w * fa.h;
        let mut sum = 0.0;
        for ch in 0..PROXY_FILTERS {
            for i in 0..np {
                let d = ua.c[ch][i] - ub.c[ch][i];
                sum += d * d;
            }
        }
        total += sum / np as f64 / PROXY_LEVELS as f64;
        if want_grad {
            let scale = 2.0 / (np as f64 * PROXY_LEVELS as f64);
            let mut g = Planes {
                w: fa.w,
                h: fa.h,
                c: vec![vec![0.0; np]; PROXY_FILTERS],
            };
            for i in 0..np {
                let n = na[i];
                let denom = n + PROXY_EPS;
                let mut dot = 0.0;
                for ch in 0..PROXY_FILTERS {
                    let gu = scale * (ua.c[ch][i] - ub.c[ch][i]);
                    g.c[ch][i] = gu;
                    dot += fa.c[ch][i] * gu;
                }
                let k = if n > 0.0 { dot / (n * denom * denom) } else { 0.0 };
                for ch in 0..PROXY_FILTERS {
                    g.c[ch][i] = g.c[ch][i] / denom - fa.c[ch][i] * k;
                }
            }
            level_grads.push(bank_conv_adjoint(&g));
        }
    }
    if !want_grad {
        return Ok((total, None));
    }
    // Fold the per-level image gradients back down the pyramid.
    let mut acc = level_grads.pop().unwrap();
    for l in (0..PROXY_LEVELS - 1).rev() {
        let mut up = pyr_down_adjoint(&acc, pa[l].w, pa[l].h);
        for (dst, src) in up.c.iter_mut().zip(&level_grads[l].c) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        acc = up;
    }
    let grad = (0..a.width * a.height)
        .map(|i| [acc.c[0][i], acc.c[1][i], acc.c[2][i]])
        .collect();
    Ok((total, Some(grad)))
}

/// Feature-space distance: a 3-level Gaussian pyramid, a fixed seeded bank of
/// 16 random 3×3 filters per level, per-pixel unit-normalized features, mean
/// squared difference averaged over levels.
pub fn perceptual_proxy(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(proxy_impl(a, b, false)?.0)
}

pub fn perceptual_proxy_with_grad(a: &RgbImage, b: &RgbImage) -> Result<(f64, Vec<[f64; 3]>)> {
    let (v, g) = proxy_impl(a, b, true)?;
    Ok((v, g.unwrap()))
}

// ---------------------------------------------------------------------------
// Evaluation reports

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricValues {
    pub psnr: f64,
    pub ssim: f64,
    pub perc_proxy: f64,
}

impl MetricValues {
    fn mean(values: &[MetricValues]) -> MetricValues {
        let n = values.len() as f64;
        MetricValues {
            psnr: values.iter().map(|v| v.psnr).sum::<f64>() / n,
            ssim: values.iter().map(|v| v.ssim).sum::<f64>() / n,
            perc_proxy: values.iter().map(|v| v.perc_proxy).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewMetrics {
    pub view_id: String,
    pub split: Split,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSummary {
    pub split: Split,
    pub count: usize,
    pub mean: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub version: u32,
    pub method: String,
    pub views: Vec<ViewMetrics>,
    pub splits: Vec<SplitSummary>,
    /// Mean over all views (split means weighted by view count).
    pub overall: MetricValues,
}

pub fn image_metrics(render: &RgbImage, target: &RgbImage) -> Result<MetricValues> {
    Ok(MetricValues {
        psnr: psnr(render, target)?,
        ssim: ssim(render, target)?,
        perc_proxy: perceptual_proxy(render, target)?,
    })
}

/// Metrics for aligned `(view id, render, target)` triples of one split.
pub fn evaluate_set(
    views: &[(String, RgbImage, RgbImage)],
    split: Split,
) -> Result<Vec<ViewMetrics>> {
    views
        .par_iter()
        .map(|(id, r, t)| {
            Ok(ViewMetrics {
                view_id: id.clone(),
                split,
                values: image_metrics(r, t)?,
            })
        })
        .collect()
}

/// Combine per-view metrics (any splits) into a report.
pub fn build_report(method: &str, views: Vec<ViewMetrics>) -> Result<EvalReport> {
    if views.is_empty() {
        return Err(Error::Empty("no views to report".into()));
    }
    let mut splits = Vec::new();
    for split in [Split::Aerial, Split::Ground] {
        let vals: Vec<MetricValues> = views.iter().filter(|v| v.split == split).map(|v| v.values).collect();
        if !vals.is_empty() {
            splits.push(SplitSummary {
                split,
                count: vals.len(),
                mean: MetricValues::mean(&vals),
            });
        }
    }
    let all: Vec<MetricValues> = views.iter().map(|v| v.values).collect();
    Ok(EvalReport {
        version: 1,
        method: method.into(),
        overall: MetricValues::mean(&all),
        views,
        splits,
    })
}

impl EvalReport {
    pub fn split(&self, split: Split) -> Option<&SplitSummary> {
        self.splits.iter().find(|s| s.split == split)
    }
}

/// Aligned text table: one row per (method, split) plus an overall row.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mw = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max(24);
    let mut out = format!(
        "{:<mw$} {:<8} {:>6} {:>8} {:>8} {:>11}\n",
        "METHOD", "SPLIT", "VIEWS", "PSNR", "SSIM", "PERC-PROXY"
    );
    out.push_str(&"-".repeat(mw + 46));
    out.push('\n');
    for r in reports {
        let rows = r
            .splits
            .iter()
            .map(|s| (s.split.as_str(), s.count, s.mean))
            .chain([("overall", r.views.len(), r.overall)]);
        for (name, count, m) in rows {
            out.push_str(&format!(
                "{:<mw$} {:<8} {:>6} {:>8.3} {:>8.4} {:>11.5}\n",
                r.method, name, count, m.psnr, m.ssim, m.perc_proxy
            ));
        }
    }
    out
}
