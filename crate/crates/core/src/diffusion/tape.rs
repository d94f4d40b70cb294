//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns gradients for every recorded node. Feature
//! maps use `[frames, channels, height, width]` layout; token sequences use
//! `[batch, length, dim]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, k: usize, stride: usize },
    GroupNorm { x: Var, g: Var, b: Var, groups: usize, rstd: Vec<f64>, xhat: Vec<f64> },
    LayerNorm { x: Var, g: Var, b: Var, rstd: Vec<f64>, xhat: Vec<f64> },
    Silu(Var),
    Add(Var, Var),
    ChannelBias { x: Var, v: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Permute3 { x: Var, perm: [usize; 3] },
    Upsample2(Var),
    ConcatChannels(Var, Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    MseSlice { x: Var, offset: usize, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = alpha·op(a)·op(b) + beta·c` for row-major operands.
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the debug assertions above pin every operand's length to the
    // dimensions and strides handed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, cols: &mut [f64]) -> (usize, usize) {
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let n = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
    (ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    let pad = k / 2;
    let n = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Square-kernel convolution with `k/2` zero padding. `w`: `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return Err(shape_err(format!("conv2d: x {xs:?}, w {ws:?}")));
        }
        let (f, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let kk = cin * k * k;
        let mut cols = vec![0.0; kk * ho * wo];
        let mut out = vec![0.0; f * cout * ho * wo];
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        for fi in 0..f {
            im2col(&xv[fi * cin * h * wd..(fi + 1) * cin * h * wd], cin, h, wd, k, stride, &mut cols);
            let o = &mut out[fi * cout * ho * wo..(fi + 1) * cout * ho * wo];
            for (co, chunk) in o.chunks_mut(ho * wo).enumerate() {
                chunk.fill(bv[co]);
            }
            gemm(cout, kk, ho * wo, wv, false, &cols, false, o, 1.0);
        }
        Ok(self.push(Tensor::new(vec![f, cout, ho, wo], out), Op::Conv2d { x, w, b, k, stride }))
    }

    pub fn group_norm(&mut self, x: Var, g: Var, b: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || !xs[1].is_multiple_of(groups) || self.shape(g) != [xs[1]] || self.shape(b) != [xs[1]] {
            return Err(shape_err(format!("group_norm: x {xs:?}, groups {groups}")));
        }
        let (f, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let cg = c / groups;
        let n = cg * hw;
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(g).data, &self.value(b).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; f * groups];
        for fi in 0..f {
            for gi in 0..groups {
                let start = (fi * c + gi * cg) * hw;
                let seg = &xv[start..start + n];
                let mean = seg.iter().sum::<f64>() / n as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + 1e-5).sqrt();
                rstd[fi * groups + gi] = r;
                for (i, v) in seg.iter().enumerate() {
                    let ch = gi * cg + i / hw;
                    let xh = (v - mean) * r;
                    xhat[start + i] = xh;
                    out[start + i] = xh * gv[ch] + bv[ch];
                }
            }
        }
        Ok(self.push(Tensor::new(xs, out), Op::GroupNorm { x, g, b, groups, rstd, xhat }))
    }

    /// Normalize over the last dimension.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(g) != [d] || self.shape(b) != [d] {
            return Err(shape_err(format!("layer_norm: x {xs:?}")));
        }
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(g).data, &self.value(b).data);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let seg = &xv[r * d..(r + 1) * d];
            let mean = seg.iter().sum::<f64>() / d as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + 1e-5).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (seg[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        Ok(self.push(Tensor::new(xs, out), Op::LayerNorm { x, g, b, rstd, xhat }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data), Op::Add(a, b)))
    }

    /// `x[f, c, :, :] + v[f, c]`.
    pub fn channel_bias(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(v) != [xs[0], xs[1]] {
            return Err(shape_err(format!("channel_bias: x {xs:?}, v {:?}", self.shape(v))));
        }
        let hw = xs[2] * xs[3];
        let vv = &self.value(v).data;
        let data = self.value(x).data.iter().enumerate().map(|(i, xv)| xv + vv[i / hw]).collect();
        Ok(self.push(Tensor::new(xs, data), Op::ChannelBias { x, v }))
    }

    /// `x[.., din] · wᵀ + b` with `w: [dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != din || b.is_some_and(|b| self.shape(b) != [ws[0]]) {
            return Err(shape_err(format!("linear: x {xs:?}, w {ws:?}")));
        }
        let dout = ws[0];
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bv);
            }
        }
        gemm(rows, din, dout, &self.value(x).data, false, &self.value(w).data, true, &mut out, 1.0);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(Tensor::new(shape, out), Op::Linear { x, w, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).data.clone();
        Ok(self.push(Tensor::new(shape, data), Op::Reshape(x)))
    }

    /// Permute a 3D tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err(format!("permute3 on {s:?}")));
        }
        let os = [s[perm[0]], s[perm[1]], s[perm[2]]];
        let strides = [s[1] * s[2], s[2], 1];
        let ostr = [strides[perm[0]], strides[perm[1]], strides[perm[2]]];
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..os[0] {
            for j in 0..os[1] {
                for k in 0..os[2] {
                    out.push(xv[i * ostr[0] + j * ostr[1] + k * ostr[2]]);
                }
            }
        }
        Ok(self.push(Tensor::new(os.to_vec(), out), Op::Permute3 { x, perm }))
    }

    /// Nearest-neighbour 2× upsampling of `[f, c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(format!("upsample2 on {s:?}")));
        }
        let (fc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; fc * 4 * h * w];
        for p in 0..fc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2(x)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err(format!("concat: {sa:?} vs {sb:?}")));
        }
        let (f, hw) = (sa[0], sa[2] * sa[3]);
        let (ca, cb) = (sa[1] * hw, sb[1] * hw);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = Vec::with_capacity(f * (ca + cb));
        for fi in 0..f {
            out.extend_from_slice(&av[fi * ca..(fi + 1) * ca]);
            out.extend_from_slice(&bv[fi * cb..(fi + 1) * cb]);
        }
        Ok(self.push(Tensor::new(vec![f, sa[1] + sb[1], sa[2], sa[3]], out), Op::ConcatChannels(a, b)))
    }

    /// Multi-head scaled dot-product attention. `q: [b, lq, d]`; `k`, `v`:
    /// `[b or 1, lk, d]` (a leading 1 is shared by every batch entry).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 3
            || ks != vs
            || ks.len() != 3
            || ks[2] != qs[2]
            || !(ks[0] == qs[0] || ks[0] == 1)
            || qs[2] % heads != 0
        {
            return Err(shape_err(format!("attention: q {qs:?}, k {ks:?}, v {vs:?}, heads {heads}")));
        }
        let (b, lq, d, lk) = (qs[0], qs[1], qs[2], ks[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut probs = vec![0.0; b * heads * lq * lk];
        let mut out = vec![0.0; b * lq * d];
        for bi in 0..b {
            let kb = if ks[0] == 1 { 0 } else { bi };
            for h in 0..heads {
                for i in 0..lq {
                    let qrow = &qv[(bi * lq + i) * d + h * dh..(bi * lq + i) * d + (h + 1) * dh];
                    let p = &mut probs[((bi * heads + h) * lq + i) * lk..((bi * heads + h) * lq + i + 1) * lk];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..lk {
                        let krow = &kv[(kb * lk + j) * d + h * dh..(kb * lk + j) * d + (h + 1) * dh];
                        let s = scale * qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>();
                        p[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for pj in p.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    let o = &mut out[(bi * lq + i) * d + h * dh..(bi * lq + i) * d + (h + 1) * dh];
                    for j in 0..lk {
                        p[j] /= z;
                        let vrow = &vv[(kb * lk + j) * d + h * dh..(kb * lk + j) * d + (h + 1) * dh];
                        for (oe, ve) in o.iter_mut().zip(vrow) {
                            *oe += p[j] * ve;
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(qs, out), Op::Attention { q, k, v, heads, probs }))
    }

    /// Mean squared error between `x.data[offset..offset + target.len()]` and `target`.
    pub fn mse_slice(&mut self, x: Var, offset: usize, target: Vec<f64>) -> Result<Var> {
        let xv = &self.value(x).data;
        if offset + target.len() > xv.len() || target.is_empty() {
            return Err(shape_err(format!("mse_slice: {} + {} > {}", offset, target.len(), xv.len())));
        }
        let loss = xv[offset..offset + target.len()]
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64;
        Ok(self.push(Tensor::new(vec![1], vec![loss]), Op::MseSlice { x, offset, target }))
    }

    /// Back-propagate from `root` seeded with `seed` (same shape as the root).
    /// Returns one gradient per node; nodes the root does not depend on get `None`.
    pub fn backward(&self, root: Var, seed: Vec<f64>) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.len(), self.value(root).len(), "seed shape");
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, k, stride } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (f, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k, stride) = (ws[0], *k, *stride);
                let (ho, wo) = (node.value.shape[2], node.value.shape[3]);
                let kk = cin * k * k;
                let n = ho * wo;
                {
                    let gb = self.acc(grads, *b);
                    for fi in 0..f {
                        for co in 0..cout {
                            gb[co] += g[(fi * cout + co) * n..(fi * cout + co + 1) * n].iter().sum::<f64>();
                        }
                    }
                }
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                let mut cols = vec![0.0; kk * n];
                let mut dcols = vec![0.0; kk * n];
                let mut gw = vec![0.0; cout * kk];
                let mut gx = vec![0.0; xv.len()];
                for fi in 0..f {
                    let gf = &g[fi * cout * n..(fi + 1) * cout * n];
                    im2col(&xv[fi * cin * h * wd..(fi + 1) * cin * h * wd], cin, h, wd, k, stride, &mut cols);
                    gemm(cout, n, kk, gf, false, &cols, true, &mut gw, 1.0);
                    gemm(kk, cout, n, wv, true, gf, false, &mut dcols, 0.0);
                    col2im(&dcols, cin, h, wd, k, stride, ho, wo, &mut gx[fi * cin * h * wd..(fi + 1) * cin * h * wd]);
                }
                add_into(self.acc(grads, *w), &gw);
                add_into(self.acc(grads, *x), &gx);
            }
            Op::GroupNorm { x, g: gam, b, groups, rstd, xhat } => {
                let xs = self.shape(*x);
                let (f, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let cg = c / groups;
                let n = cg * hw;
                let gv = &self.value(*gam).data;
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for fi in 0..f {
                    for gi in 0..*groups {
                        let start = (fi * c + gi * cg) * hw;
                        let r = rstd[fi * groups + gi];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for i in 0..n {
                            let ch = gi * cg + i / hw;
                            let dxh = g[start + i] * gv[ch];
                            s1 += dxh;
                            s2 += dxh * xhat[start + i];
                            dg[ch] += g[start + i] * xhat[start + i];
                            db[ch] += g[start + i];
                        }
                        let nf = n as f64;
                        for i in 0..n {
                            let ch = gi * cg + i / hw;
                            let dxh = g[start + i] * gv[ch];
                            dx[start + i] = r / nf * (nf * dxh - s1 - xhat[start + i] * s2);
                        }
                    }
                }
                add_into(self.acc(grads, *gam), &dg);
                add_into(self.acc(grads, *b), &db);
                add_into(self.acc(grads, *x), &dx);
            }
            Op::LayerNorm { x, g: gam, b, rstd, xhat } => {
                let d = *self.shape(*x).last().unwrap();
                let gv = &self.value(*gam).data;
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                let nf = d as f64;
                for (r, &rs) in rstd.iter().enumerate() {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let i = r * d + j;
                        let dxh = g[i] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i];
                        dg[j] += g[i] * xhat[i];
                        db[j] += g[i];
                    }
                    for j in 0..d {
                        let i = r * d + j;
                        dx[i] = rs / nf * (nf * g[i] * gv[j] - s1 - xhat[i] * s2);
                    }
                }
                add_into(self.acc(grads, *gam), &dg);
                add_into(self.acc(grads, *b), &db);
                add_into(self.acc(grads, *x), &dx);
            }
            Op::Silu(x) => {
                let xv = &self.value(*x).data;
                let gx = self.acc(grads, *x);
                for i in 0..g.len() {
                    let s = 1.0 / (1.0 + (-xv[i]).exp());
                    gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
                }
            }
            Op::Add(a, b) => {
                add_into(self.acc(grads, *a), g);
                add_into(self.acc(grads, *b), g);
            }
            Op::ChannelBias { x, v } => {
                let hw = node.value.shape[2] * node.value.shape[3];
                add_into(self.acc(grads, *x), g);
                let gv = self.acc(grads, *v);
                for (i, gi) in g.iter().enumerate() {
                    gv[i / hw] += gi;
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let rows = g.len() / dout;
                if let Some(b) = b {
                    let gb = self.acc(grads, *b);
                    for r in g.chunks(dout) {
                        add_into(gb, r);
                    }
                }
                let mut gw = vec![0.0; dout * din];
                gemm(dout, rows, din, g, true, &self.value(*x).data, false, &mut gw, 0.0);
                add_into(self.acc(grads, *w), &gw);
                let mut gx = vec![0.0; rows * din];
                gemm(rows, dout, din, g, false, &self.value(*w).data, false, &mut gx, 0.0);
                add_into(self.acc(grads, *x), &gx);
            }
            Op::Reshape(x) => add_into(self.acc(grads, *x), g),
            Op::Permute3 { x, perm } => {
                let s = self.shape(*x).to_vec();
                let os = [s[perm[0]], s[perm[1]], s[perm[2]]];
                let strides = [s[1] * s[2], s[2], 1];
                let ostr = [strides[perm[0]], strides[perm[1]], strides[perm[2]]];
                let gx = self.acc(grads, *x);
                let mut t = 0;
                for i in 0..os[0] {
                    for j in 0..os[1] {
                        for k in 0..os[2] {
                            gx[i * ostr[0] + j * ostr[1] + k * ostr[2]] += g[t];
                            t += 1;
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (fc, h, w) = (s[0] * s[1], s[2], s[3]);
                let gx = self.acc(grads, *x);
                for p in 0..fc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (f, hw) = (sa[0], sa[2] * sa[3]);
                let (ca, cb) = (sa[1] * hw, sb[1] * hw);
                {
                    let ga = self.acc(grads, *a);
                    for fi in 0..f {
                        add_into(&mut ga[fi * ca..(fi + 1) * ca], &g[fi * (ca + cb)..fi * (ca + cb) + ca]);
                    }
                }
                let gb = self.acc(grads, *b);
                for fi in 0..f {
                    add_into(&mut gb[fi * cb..(fi + 1) * cb], &g[fi * (ca + cb) + ca..(fi + 1) * (ca + cb)]);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let qs = self.shape(*q).to_vec();
                let ks = self.shape(*k).to_vec();
                let (b, lq, d, lk) = (qs[0], qs[1], qs[2], ks[1]);
                let heads = *heads;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (&self.value(*q).data, &self.value(*k).data, &self.value(*v).data);
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gvv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; lk];
                for bi in 0..b {
                    let kb = if ks[0] == 1 { 0 } else { bi };
                    for h in 0..heads {
                        for i in 0..lq {
                            let p = &probs[((bi * heads + h) * lq + i) * lk..((bi * heads + h) * lq + i + 1) * lk];
                            let go = &g[(bi * lq + i) * d + h * dh..(bi * lq + i) * d + (h + 1) * dh];
                            let mut dot = 0.0;
                            for j in 0..lk {
                                let vo = (kb * lk + j) * d + h * dh;
                                let vrow = &vv[vo..vo + dh];
                                dp[j] = go.iter().zip(vrow).map(|(a, c)| a * c).sum();
                                dot += dp[j] * p[j];
                                for e in 0..dh {
                                    gvv[vo + e] += p[j] * go[e];
                                }
                            }
                            let qo = (bi * lq + i) * d + h * dh;
                            for j in 0..lk {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ko = (kb * lk + j) * d + h * dh;
                                for e in 0..dh {
                                    gq[qo + e] += ds * kv[ko + e];
                                    gk[ko + e] += ds * qv[qo + e];
                                }
                            }
                        }
                    }
                }
                add_into(self.acc(grads, *q), &gq);
                add_into(self.acc(grads, *k), &gk);
                add_into(self.acc(grads, *v), &gvv);
            }
            Op::MseSlice { x, offset, target } => {
                let xv = &self.value(*x).data;
                let scale = 2.0 * g[0] / target.len() as f64;
                let gx = self.acc(grads, *x);
                for (i, t) in target.iter().enumerate() {
                    gx[offset + i] += scale * (xv[offset + i] - t);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
