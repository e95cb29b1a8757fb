//! CPU kernels for the segmentation network: 3D convolutions (same-padded
//! 3×3×3, strided 2×2×2 down, 2×2×2 transposed up, pointwise), instance
//! normalisation and leaky ReLU, each with its backward pass.
//!
//! Activations are channel-major `f32` buffers. Convolutions are evaluated
//! tap by tap: every input channel is gathered once per kernel offset into a
//! contiguous scratch buffer, which turns the inner loops into long axpy and
//! dot products over whole volumes.

use alloc::vec;
use alloc::vec::Vec;

use crate::volume::Dims;

pub const LEAKY_SLOPE: f32 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[inline]
pub fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with a fixed 16-lane accumulation order (vectorisable and
/// deterministic).
#[inline]
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f32; 16];
    let cx = x.chunks_exact(16);
    let cy = y.chunks_exact(16);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        for k in 0..16 {
            acc[k] += a[k] * b[k];
        }
    }
    let mut s = 0.0f32;
    for (a, b) in rx.iter().zip(ry) {
        s += a * b;
    }
    for v in acc {
        s += v;
    }
    s
}

#[inline]
pub fn sum(x: &[f32]) -> f32 {
    let mut acc = [0.0f32; 16];
    let c = x.chunks_exact(16);
    let r = c.remainder();
    for a in c {
        for k in 0..16 {
            acc[k] += a[k];
        }
    }
    r.iter().sum::<f32>() + acc.iter().sum::<f32>()
}

/// Kernel footprint of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Taps {
    /// 3×3×3, zero padded, stride 1.
    Same3,
    /// 1×1×1.
    Point,
    /// 2×2×2, stride 2 (output dims halve).
    Down2,
}

impl Taps {
    pub const fn count(self) -> usize {
        match self {
            Taps::Same3 => 27,
            Taps::Point => 1,
            Taps::Down2 => 8,
        }
    }

    pub fn out_dims(self, input: Dims) -> Dims {
        match self {
            Taps::Same3 | Taps::Point => input,
            Taps::Down2 => input.div(2),
        }
    }

    fn offset(self, t: usize) -> [isize; 3] {
        match self {
            Taps::Same3 => [(t % 3) as isize - 1, ((t / 3) % 3) as isize - 1, (t / 9) as isize - 1],
            Taps::Point => [0, 0, 0],
            Taps::Down2 => [(t & 1) as isize, ((t >> 1) & 1) as isize, ((t >> 2) & 1) as isize],
        }
    }
}

/// `dst[z,y,x] = src[z+s.z, y+s.y, x+s.x]`, zero outside. `|s| ≤ 1`.
fn gather_shift(src: &[f32], d: Dims, s: [isize; 3], dst: &mut [f32]) {
    let (w, h, l) = (d.w, d.h, d.l);
    for z in 0..l {
        let sz = z as isize + s[2];
        for y in 0..h {
            let sy = y as isize + s[1];
            let row = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
            if sz < 0 || sz >= l as isize || sy < 0 || sy >= h as isize {
                row.fill(0.0);
                continue;
            }
            let base = (sz as usize * h + sy as usize) * w;
            let srow = &src[base..base + w];
            match s[0] {
                0 => row.copy_from_slice(srow),
                1 => {
                    row[..w - 1].copy_from_slice(&srow[1..]);
                    row[w - 1] = 0.0;
                }
                _ => {
                    row[1..].copy_from_slice(&srow[..w - 1]);
                    row[0] = 0.0;
                }
            }
        }
    }
}

/// Adjoint of [`gather_shift`]: `dst[z+s.z, y+s.y, x+s.x] += t[z,y,x]`.
fn scatter_add_shift(t: &[f32], d: Dims, s: [isize; 3], dst: &mut [f32]) {
    let (w, h, l) = (d.w, d.h, d.l);
    for z in 0..l {
        let tz = z as isize + s[2];
        if tz < 0 || tz >= l as isize {
            continue;
        }
        for y in 0..h {
            let ty = y as isize + s[1];
            if ty < 0 || ty >= h as isize {
                continue;
            }
            let trow = &t[(z * h + y) * w..(z * h + y + 1) * w];
            let base = (tz as usize * h + ty as usize) * w;
            let drow = &mut dst[base..base + w];
            match s[0] {
                0 => axpy(1.0, trow, drow),
                1 => axpy(1.0, &trow[..w - 1], &mut drow[1..]),
                _ => axpy(1.0, &trow[1..], &mut drow[..w - 1]),
            }
        }
    }
}

/// `dst[z,y,x] = src[2z+s.z, 2y+s.y, 2x+s.x]` where `src` has dims `fine`.
fn gather_s2(src: &[f32], fine: Dims, s: [isize; 3], dst: &mut [f32]) {
    let c = fine.div(2);
    let (sx, sy, sz) = (s[0] as usize, s[1] as usize, s[2] as usize);
    for z in 0..c.l {
        for y in 0..c.h {
            let base = fine.index(sx, 2 * y + sy, 2 * z + sz);
            let row = &mut dst[(z * c.h + y) * c.w..(z * c.h + y + 1) * c.w];
            for (x, v) in row.iter_mut().enumerate() {
                *v = src[base + 2 * x];
            }
        }
    }
}

/// Adjoint of [`gather_s2`].
fn scatter_add_s2(t: &[f32], fine: Dims, s: [isize; 3], dst: &mut [f32]) {
    let c = fine.div(2);
    let (sx, sy, sz) = (s[0] as usize, s[1] as usize, s[2] as usize);
    for z in 0..c.l {
        for y in 0..c.h {
            let base = fine.index(sx, 2 * y + sy, 2 * z + sz);
            let row = &t[(z * c.h + y) * c.w..(z * c.h + y + 1) * c.w];
            for (x, &v) in row.iter().enumerate() {
                dst[base + 2 * x] += v;
            }
        }
    }
}

fn gather(taps: Taps, t: usize, src: &[f32], in_dims: Dims, dst: &mut [f32]) {
    match taps {
        Taps::Point => dst.copy_from_slice(src),
        Taps::Same3 => gather_shift(src, in_dims, taps.offset(t), dst),
        Taps::Down2 => gather_s2(src, in_dims, taps.offset(t), dst),
    }
}

fn scatter_add(taps: Taps, t: usize, src: &[f32], in_dims: Dims, dst: &mut [f32]) {
    match taps {
        Taps::Point => axpy(1.0, src, dst),
        Taps::Same3 => scatter_add_shift(src, in_dims, taps.offset(t), dst),
        Taps::Down2 => scatter_add_s2(src, in_dims, taps.offset(t), dst),
    }
}

/// Convolution forward. `weight` is laid out `[co][ci][tap]`; `bias` may be
/// empty.
pub fn conv_forward(
    input: &[f32],
    in_ch: usize,
    in_dims: Dims,
    weight: &[f32],
    bias: &[f32],
    out_ch: usize,
    taps: Taps,
) -> (Vec<f32>, Dims) {
    let od = taps.out_dims(in_dims);
    let (pi, po, nt) = (in_dims.len(), od.len(), taps.count());
    debug_assert_eq!(weight.len(), out_ch * in_ch * nt);
    let mut out = vec![0.0f32; out_ch * po];
    if !bias.is_empty() {
        for (co, &b) in bias.iter().enumerate() {
            out[co * po..(co + 1) * po].fill(b);
        }
    }
    let mut g = vec![0.0f32; po];
    for ci in 0..in_ch {
        let src = &input[ci * pi..(ci + 1) * pi];
        for t in 0..nt {
            gather(taps, t, src, in_dims, &mut g);
            for co in 0..out_ch {
                let wv = weight[(co * in_ch + ci) * nt + t];
                axpy(wv, &g, &mut out[co * po..(co + 1) * po]);
            }
        }
    }
    (out, od)
}

/// Convolution backward. Accumulates into `gw`, `gb` (if non-empty) and
/// `gin` (if `Some`).
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f32],
    in_ch: usize,
    in_dims: Dims,
    weight: &[f32],
    out_ch: usize,
    taps: Taps,
    gout: &[f32],
    gw: &mut [f32],
    gb: &mut [f32],
    mut gin: Option<&mut [f32]>,
) {
    let od = taps.out_dims(in_dims);
    let (pi, po, nt) = (in_dims.len(), od.len(), taps.count());
    if !gb.is_empty() {
        for co in 0..out_ch {
            gb[co] += sum(&gout[co * po..(co + 1) * po]);
        }
    }
    let mut g = vec![0.0f32; po];
    let mut tmp = vec![0.0f32; po];
    for ci in 0..in_ch {
        let src = &input[ci * pi..(ci + 1) * pi];
        for t in 0..nt {
            gather(taps, t, src, in_dims, &mut g);
            for co in 0..out_ch {
                gw[(co * in_ch + ci) * nt + t] += dot(&gout[co * po..(co + 1) * po], &g);
            }
            if let Some(gin) = gin.as_deref_mut() {
                tmp.fill(0.0);
                for co in 0..out_ch {
                    axpy(weight[(co * in_ch + ci) * nt + t], &gout[co * po..(co + 1) * po], &mut tmp);
                }
                scatter_add(taps, t, &tmp, in_dims, &mut gin[ci * pi..(ci + 1) * pi]);
            }
        }
    }
}

/// 2×2×2 stride-2 transposed convolution. `weight` is laid out
/// `[ci][co][tap]`. Output dims double.
pub fn up_forward(
    input: &[f32],
    in_ch: usize,
    in_dims: Dims,
    weight: &[f32],
    bias: &[f32],
    out_ch: usize,
) -> (Vec<f32>, Dims) {
    let od = Dims::new(in_dims.w * 2, in_dims.h * 2, in_dims.l * 2);
    let (pi, po) = (in_dims.len(), od.len());
    let mut out = vec![0.0f32; out_ch * po];
    for (co, &b) in bias.iter().enumerate() {
        out[co * po..(co + 1) * po].fill(b);
    }
    let mut tmp = vec![0.0f32; pi];
    for co in 0..out_ch {
        for t in 0..8 {
            tmp.fill(0.0);
            for ci in 0..in_ch {
                axpy(weight[(ci * out_ch + co) * 8 + t], &input[ci * pi..(ci + 1) * pi], &mut tmp);
            }
            scatter_add(Taps::Down2, t, &tmp, od, &mut out[co * po..(co + 1) * po]);
        }
    }
    (out, od)
}

#[allow(clippy::too_many_arguments)]
pub fn up_backward(
    input: &[f32],
    in_ch: usize,
    in_dims: Dims,
    weight: &[f32],
    out_ch: usize,
    gout: &[f32],
    gw: &mut [f32],
    gb: &mut [f32],
    gin: &mut [f32],
) {
    let od = Dims::new(in_dims.w * 2, in_dims.h * 2, in_dims.l * 2);
    let (pi, po) = (in_dims.len(), od.len());
    let mut g = vec![0.0f32; pi];
    for co in 0..out_ch {
        let go = &gout[co * po..(co + 1) * po];
        gb[co] += sum(go);
        for t in 0..8 {
            gather(Taps::Down2, t, go, od, &mut g);
            for ci in 0..in_ch {
                let k = (ci * out_ch + co) * 8 + t;
                gw[k] += dot(&input[ci * pi..(ci + 1) * pi], &g);
                axpy(weight[k], &g, &mut gin[ci * pi..(ci + 1) * pi]);
            }
        }
    }
}

/// Saved state of a fused instance-norm + leaky-ReLU.
#[derive(Debug, Clone)]
pub struct NormActCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub out: Vec<f32>,
}

/// Per-channel instance normalisation with affine `(gamma, beta)` followed by
/// leaky ReLU. With `normalize = false` only the affine map and activation
/// are applied.
pub fn norm_act_forward(x: &[f32], ch: usize, n: usize, gamma: &[f32], beta: &[f32], normalize: bool) -> NormActCache {
    let mut xhat = vec![0.0f32; ch * n];
    let mut out = vec![0.0f32; ch * n];
    let mut inv_std = vec![0.0f32; ch];
    for c in 0..ch {
        let xc = &x[c * n..(c + 1) * n];
        let (mean, is) = if normalize {
            let mean = xc.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = xc
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            (mean, (1.0 / libm::sqrt(var + NORM_EPS)) as f32)
        } else {
            (0.0, 1.0)
        };
        inv_std[c] = is;
        let m = mean as f32;
        let (g, b) = (gamma[c], beta[c]);
        for ((xh, o), &v) in xhat[c * n..(c + 1) * n].iter_mut().zip(&mut out[c * n..(c + 1) * n]).zip(xc) {
            *xh = (v - m) * is;
            let y = g * *xh + b;
            *o = if y > 0.0 { y } else { LEAKY_SLOPE * y };
        }
    }
    NormActCache { xhat, inv_std, out }
}

/// Backward of [`norm_act_forward`]; overwrites `gx`.
#[allow(clippy::too_many_arguments)]
pub fn norm_act_backward(
    cache: &NormActCache,
    ch: usize,
    n: usize,
    gamma: &[f32],
    gout: &[f32],
    ggamma: &mut [f32],
    gbeta: &mut [f32],
    gx: &mut [f32],
    normalize: bool,
) {
    let mut gy = vec![0.0f32; n];
    for c in 0..ch {
        let r = c * n..(c + 1) * n;
        for ((g, &go), &o) in gy.iter_mut().zip(&gout[r.clone()]).zip(&cache.out[r.clone()]) {
            *g = if o > 0.0 { go } else { LEAKY_SLOPE * go };
        }
        let xh = &cache.xhat[r.clone()];
        let sg = gy.iter().map(|&v| v as f64).sum::<f64>();
        let sgx = gy.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
        ggamma[c] += sgx as f32;
        gbeta[c] += sg as f32;
        let k = gamma[c] * cache.inv_std[c];
        let (mg, mgx) = if normalize { ((sg / n as f64) as f32, (sgx / n as f64) as f32) } else { (0.0, 0.0) };
        for ((o, &g), &h) in gx[r].iter_mut().zip(&gy).zip(xh) {
            *o = k * (g - mg - h * mgx);
        }
    }
}
