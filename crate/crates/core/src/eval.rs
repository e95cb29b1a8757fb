//! Sliding-window inference and overlap / surface metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::model::{forward_seg, NetworkParams};
use crate::volume::{normalize, softmax_channels, Block, Dims, LabelMap, ProbKind, ProbMap, Volume};

/// Anything that maps a volume to per-voxel class logits.
pub trait Segmenter {
    fn logits(&self, v: &Volume) -> Result<ProbMap>;
}

impl Segmenter for NetworkParams {
    fn logits(&self, v: &Volume) -> Result<ProbMap> {
        Ok(forward_seg(self, v)?.0)
    }
}

/// Window start positions along one axis; the last window is clamped to
/// end at the boundary.
pub fn window_starts(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + window >= dim {
            let last = dim - window;
            if starts.last() != Some(&last) {
                starts.push(last);
            }
            return starts;
        }
        starts.push(s);
        s += stride;
    }
}

/// Softmax probabilities averaged over all windows covering each voxel.
pub fn sliding_window_infer(seg: &impl Segmenter, v: &Volume, window: Dims, stride: Dims) -> Result<ProbMap> {
    let dims = v.dims();
    if !window.fits_within(dims) || window.is_empty() {
        bail!(Dimension, "window {window} does not fit volume {dims}");
    }
    if stride.is_empty() {
        bail!(Config, "stride {stride} must be positive on every axis");
    }
    let xs = window_starts(dims.w, window.w, stride.w);
    let ys = window_starts(dims.h, window.h, stride.h);
    let zs = window_starts(dims.l, window.l, stride.l);
    let mut acc: Option<ProbMap> = None;
    let mut cover = Volume::zeros(dims);
    let ones = Volume::new(window, vec![1.0; window.len()])?;
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let off = [x, y, z];
                let p = softmax_channels(&seg.logits(&v.extract(off, window))?)?;
                let sum = acc.get_or_insert_with(|| ProbMap::zeros(p.channels(), dims, ProbKind::Probabilities));
                let mut region = sum.extract(off, window);
                for (a, b) in region.data_mut().iter_mut().zip(p.data()) {
                    *a += b;
                }
                sum.paste(off, &region);
                let mut c = cover.extract(off, window);
                for (a, b) in c.data_mut().iter_mut().zip(ones.data()) {
                    *a += b;
                }
                cover.paste(off, &c);
            }
        }
    }
    let mut out = acc.expect("at least one window");
    let n = dims.len();
    for c in 0..out.channels() {
        for (o, &k) in out.channel_mut(c).iter_mut().zip(cover.data()) {
            *o /= k;
        }
    }
    debug_assert_eq!(out.data().len(), out.channels() * n);
    Ok(out)
}

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        bail!(Dimension, "prediction {} and ground truth {} differ", pred.dims(), gt.dims());
    }
    Ok(())
}

/// Dice of two boolean masks; 1 when both are empty.
pub fn dsc_masks(a: &[bool], b: &[bool]) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += usize::from(x);
        nb += usize::from(y);
        both += usize::from(x && y);
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Dice-Sørensen coefficient of class `c`.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, c: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    let a: Vec<bool> = pred.data().iter().map(|&v| v == c).collect();
    let b: Vec<bool> = gt.data().iter().map(|&v| v == c).collect();
    Ok(dsc_masks(&a, &b))
}

/// Mask voxels with at least one 6-neighbour outside the mask (or outside
/// the volume).
pub fn boundary(mask: &[bool], dims: Dims) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for z in 0..dims.l {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let i = dims.index(x, y, z);
                if !mask[i] {
                    continue;
                }
                let inside = |dx: isize, dy: isize, dz: isize| {
                    let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    nx >= 0
                        && ny >= 0
                        && nz >= 0
                        && (nx as usize) < dims.w
                        && (ny as usize) < dims.h
                        && (nz as usize) < dims.l
                        && mask[dims.index(nx as usize, ny as usize, nz as usize)]
                };
                out[i] = !(inside(-1, 0, 0)
                    && inside(1, 0, 0)
                    && inside(0, -1, 0)
                    && inside(0, 1, 0)
                    && inside(0, 0, -1)
                    && inside(0, 0, 1));
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_line(f: &mut [f64], v: &mut [usize], zb: &mut [f64], d: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    zb[0] = f64::NEG_INFINITY;
    zb[1] = f64::INFINITY;
    let mut first = 0;
    while first < n && f[first] == f64::INFINITY {
        first += 1;
    }
    if first == n {
        return;
    }
    v[0] = first;
    for q in first + 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= zb[k] {
                if k == 0 {
                    v[0] = q;
                    zb[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                zb[k] = s;
                zb[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while zb[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
    f.copy_from_slice(&d[..n]);
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `seeds` (infinite when there are none).
pub fn squared_distance_transform(seeds: &[bool], dims: Dims) -> Vec<f64> {
    let mut f: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let m = dims.w.max(dims.h).max(dims.l);
    let (mut line, mut v, mut zb, mut d) = (vec![0.0; m], vec![0usize; m], vec![0.0; m + 1], vec![0.0; m]);
    let axes = [(dims.w, 1usize), (dims.h, dims.w), (dims.l, dims.w * dims.h)];
    for &(len, step) in &axes {
        let bases: Vec<usize> = (0..dims.len()).filter(|&i| (i / step) % len == 0).collect();
        for base in bases {
            for (t, lv) in line[..len].iter_mut().enumerate() {
                *lv = f[base + t * step];
            }
            edt_line(&mut line[..len], &mut v, &mut zb, &mut d);
            for (t, &lv) in line[..len].iter().enumerate() {
                f[base + t * step] = lv;
            }
        }
    }
    f
}

/// Normalized surface dice of two masks at tolerance `tau` voxels.
pub fn nsd_masks(a: &[bool], b: &[bool], dims: Dims, tau: f64) -> f64 {
    let sa = boundary(a, dims);
    let sb = boundary(b, dims);
    let na = sa.iter().filter(|&&s| s).count();
    let nb = sb.iter().filter(|&&s| s).count();
    if na + nb == 0 {
        return 1.0;
    }
    if na == 0 || nb == 0 {
        return 0.0;
    }
    let da = squared_distance_transform(&sa, dims);
    let db = squared_distance_transform(&sb, dims);
    let t2 = tau * tau;
    let near_a = sa.iter().zip(&db).filter(|(&s, &d)| s && d <= t2).count();
    let near_b = sb.iter().zip(&da).filter(|(&s, &d)| s && d <= t2).count();
    (near_a + near_b) as f64 / (na + nb) as f64
}

/// Normalized surface dice of class `c`.
pub fn nsd(pred: &LabelMap, gt: &LabelMap, c: u8, tau: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if !(tau >= 0.0) {
        bail!(Config, "surface tolerance {tau} must be non-negative");
    }
    let a: Vec<bool> = pred.data().iter().map(|&v| v == c).collect();
    let b: Vec<bool> = gt.data().iter().map(|&v| v == c).collect();
    Ok(nsd_masks(&a, &b, pred.dims(), tau))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EvalConfig {
    pub window: Dims,
    pub stride: Dims,
    /// Surface tolerance in voxels.
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { window: Dims::cube(24), stride: Dims::cube(8), tau: 1.0 }
    }
}

/// Per-organ scores (percent) of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case: String,
    /// Index `c−1` holds organ class `c`.
    pub dsc: Vec<f64>,
    pub nsd: Vec<f64>,
}

impl CaseMetrics {
    pub fn compute(case: String, pred: &LabelMap, gt: &LabelMap, tau: f64) -> Result<Self> {
        let c = gt.num_classes();
        let mut d = Vec::with_capacity(c);
        let mut s = Vec::with_capacity(c);
        for k in 1..=c as u8 {
            d.push(100.0 * dsc(pred, gt, k)?);
            s.push(100.0 * nsd(pred, gt, k, tau)?);
        }
        Ok(Self { case, dsc: d, nsd: s })
    }

    pub fn mean_dsc(&self) -> f64 {
        mean(&self.dsc)
    }

    pub fn mean_nsd(&self) -> f64 {
        mean(&self.nsd)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    libm::sqrt(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64)
}

/// Per-case, per-organ results of one evaluated model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub label: String,
    pub num_classes: usize,
    pub cases: Vec<CaseMetrics>,
}

impl MetricsTable {
    fn column(&self, c: usize, nsd: bool) -> Vec<f64> {
        self.cases.iter().map(|k| if nsd { k.nsd[c - 1] } else { k.dsc[c - 1] }).collect()
    }

    /// Mean and standard deviation of organ `c` DSC over cases.
    pub fn class_dsc(&self, c: usize) -> (f64, f64) {
        let col = self.column(c, false);
        (mean(&col), std(&col))
    }

    pub fn class_nsd(&self, c: usize) -> (f64, f64) {
        let col = self.column(c, true);
        (mean(&col), std(&col))
    }

    /// Average over organs of the per-organ mean DSC.
    pub fn mean_dsc(&self) -> f64 {
        mean(&(1..=self.num_classes).map(|c| self.class_dsc(c).0).collect::<Vec<_>>())
    }

    pub fn mean_nsd(&self) -> f64 {
        mean(&(1..=self.num_classes).map(|c| self.class_nsd(c).0).collect::<Vec<_>>())
    }

    /// Spread of the per-case average DSC.
    pub fn mean_dsc_std(&self) -> f64 {
        std(&self.cases.iter().map(CaseMetrics::mean_dsc).collect::<Vec<_>>())
    }
}

/// Normalizes each case, runs sliding-window inference and scores the
/// argmax against ground truth.
pub fn evaluate(seg: &impl Segmenter, cases: &[(String, Volume, LabelMap)], cfg: &EvalConfig) -> Result<MetricsTable> {
    let Some(first) = cases.first() else {
        bail!(Config, "evaluation needs at least one case");
    };
    let num_classes = first.2.num_classes();
    let mut rows = Vec::with_capacity(cases.len());
    for (name, v, gt) in cases {
        if gt.num_classes() != num_classes {
            bail!(Consistency, "case {name} has {} classes, expected {num_classes}", gt.num_classes());
        }
        let p = sliding_window_infer(seg, &normalize(v)?, cfg.window, cfg.stride)?;
        if p.channels() != num_classes + 1 {
            bail!(Dimension, "model predicts {} channels for {num_classes} classes", p.channels());
        }
        let pred = p.argmax().with_num_classes(num_classes)?;
        rows.push(CaseMetrics::compute(name.clone(), &pred, gt, cfg.tau)?);
    }
    Ok(MetricsTable { label: String::new(), num_classes, cases: rows })
}
