//! Dense 3D grids: intensity volumes, label maps and channel-major
//! probability maps, plus the small set of operations every other module
//! builds on.
//!
//! Layout is fixed crate-wide: voxel `(x, y, z)` of a `W×H×L` grid lives at
//! `x + W·(y + H·z)` (x fastest), and multi-channel maps store whole channels
//! back to back (`channel·W·H·L + voxel`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub l: usize,
}

impl Dims {
    pub const fn new(w: usize, h: usize, l: usize) -> Self {
        Self { w, h, l }
    }

    pub const fn cube(n: usize) -> Self {
        Self { w: n, h: n, l: n }
    }

    pub const fn len(&self) -> usize {
        self.w * self.h * self.l
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub const fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        [x, y, z]
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.w, self.h, self.l]
    }

    pub fn fits_within(&self, outer: Dims) -> bool {
        self.w <= outer.w && self.h <= outer.h && self.l <= outer.l
    }

    pub fn divisible_by(&self, n: usize) -> bool {
        n > 0 && self.w.is_multiple_of(n) && self.h.is_multiple_of(n) && self.l.is_multiple_of(n)
    }

    pub fn div(&self, n: usize) -> Dims {
        Dims::new(self.w / n, self.h / n, self.l / n)
    }
}

impl core::fmt::Display for Dims {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}x{}", self.w, self.h, self.l)
    }
}

/// Copies a `size` block of every channel from `src` (at `src_off`) into
/// `dst` (at `dst_off`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn copy_block<T: Copy>(
    src: &[T],
    src_dims: Dims,
    src_off: [usize; 3],
    dst: &mut [T],
    dst_dims: Dims,
    dst_off: [usize; 3],
    size: Dims,
    channels: usize,
) {
    let (sv, dv) = (src_dims.len(), dst_dims.len());
    for c in 0..channels {
        let s = &src[c * sv..(c + 1) * sv];
        let d = &mut dst[c * dv..(c + 1) * dv];
        for z in 0..size.l {
            for y in 0..size.h {
                let si = src_dims.index(src_off[0], src_off[1] + y, src_off[2] + z);
                let di = dst_dims.index(dst_off[0], dst_off[1] + y, dst_off[2] + z);
                d[di..di + size.w].copy_from_slice(&s[si..si + size.w]);
            }
        }
    }
}

/// Anything that can be cut into axis-aligned blocks and reassembled.
///
/// Implemented by [`Volume`], [`LabelMap`] and [`ProbMap`] so the magic-cube
/// operators work identically on images, labels and predictions.
pub trait Block: Clone {
    fn dims(&self) -> Dims;
    /// Copy of the block starting at `offset` with extent `size`.
    fn extract(&self, offset: [usize; 3], size: Dims) -> Self;
    /// Writes `block` into `self` starting at `offset`.
    fn paste(&mut self, offset: [usize; 3], block: &Self);
    /// Zero-filled grid with the same channel metadata and the given dims.
    fn blank(&self, dims: Dims) -> Self;
    /// True when both grids carry the same per-voxel payload type (channel
    /// count, class count, kind).
    fn same_kind(&self, other: &Self) -> bool;
}

fn check_block(outer: Dims, offset: [usize; 3], size: Dims) {
    assert!(
        offset[0] + size.w <= outer.w && offset[1] + size.h <= outer.h && offset[2] + size.l <= outer.l,
        "block {size} at {offset:?} exceeds {outer}"
    );
}

/// Dense intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            bail!(Dimension, "volume dims must be positive, got {dims}");
        }
        if data.len() != dims.len() {
            bail!(Dimension, "volume {dims} needs {} values, got {}", dims.len(), data.len());
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0.0; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.l {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Mean and population standard deviation, accumulated in f64.
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.data)
    }
}

pub(crate) fn mean_std(data: &[f32]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, libm::sqrt(var))
}

impl Block for Volume {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn extract(&self, offset: [usize; 3], size: Dims) -> Self {
        check_block(self.dims, offset, size);
        let mut out = Volume::zeros(size);
        copy_block(&self.data, self.dims, offset, &mut out.data, size, [0; 3], size, 1);
        out
    }

    fn paste(&mut self, offset: [usize; 3], block: &Self) {
        check_block(self.dims, offset, block.dims);
        copy_block(&block.data, block.dims, [0; 3], &mut self.data, self.dims, offset, block.dims, 1);
    }

    fn blank(&self, dims: Dims) -> Self {
        Volume::zeros(dims)
    }

    fn same_kind(&self, _other: &Self) -> bool {
        true
    }
}

/// Dense class-index grid. `0` is background, organs are `1..=num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if dims.is_empty() {
            bail!(Dimension, "label map dims must be positive, got {dims}");
        }
        if data.len() != dims.len() {
            bail!(Dimension, "label map {dims} needs {} values, got {}", dims.len(), data.len());
        }
        if num_classes > u8::MAX as usize - 1 {
            bail!(Consistency, "at most 254 organ classes are supported, got {num_classes}");
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize > num_classes) {
            bail!(Consistency, "label {bad} outside 0..={num_classes}");
        }
        Ok(Self { dims, num_classes, data })
    }

    pub fn zeros(dims: Dims, num_classes: usize) -> Self {
        Self { dims, num_classes, data: vec![0; dims.len()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Organ class count `C` (background excluded).
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Sets a voxel. Panics if `label > num_classes`.
    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        assert!(label as usize <= self.num_classes);
        let i = self.dims.index(x, y, z);
        self.data[i] = label;
    }

    /// Voxel count per label `0..=C`.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes + 1];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if let Some(bad) = self.data.iter().find(|&&v| v as usize > num_classes) {
            bail!(Consistency, "label {bad} outside 0..={num_classes}");
        }
        self.num_classes = num_classes;
        Ok(self)
    }
}

impl Block for LabelMap {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn extract(&self, offset: [usize; 3], size: Dims) -> Self {
        check_block(self.dims, offset, size);
        let mut out = LabelMap::zeros(size, self.num_classes);
        copy_block(&self.data, self.dims, offset, &mut out.data, size, [0; 3], size, 1);
        out
    }

    fn paste(&mut self, offset: [usize; 3], block: &Self) {
        check_block(self.dims, offset, block.dims);
        copy_block(&block.data, block.dims, [0; 3], &mut self.data, self.dims, offset, block.dims, 1);
    }

    fn blank(&self, dims: Dims) -> Self {
        LabelMap::zeros(dims, self.num_classes)
    }

    fn same_kind(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbKind {
    Logits,
    Probabilities,
}

/// Channel-major `(C+1, W, H, L)` map of logits or probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    channels: usize,
    dims: Dims,
    kind: ProbKind,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn new(channels: usize, dims: Dims, kind: ProbKind, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.is_empty() {
            bail!(Dimension, "prob map needs positive channels and dims, got {channels} x {dims}");
        }
        if data.len() != channels * dims.len() {
            bail!(Dimension, "prob map {channels}x{dims} needs {} values, got {}", channels * dims.len(), data.len());
        }
        Ok(Self { channels, dims, kind, data })
    }

    pub fn zeros(channels: usize, dims: Dims, kind: ProbKind) -> Self {
        Self { channels, dims, kind, data: vec![0.0; channels * dims.len()] }
    }

    /// One-hot probabilities of a label map (`C+1` channels).
    pub fn one_hot(labels: &LabelMap) -> Self {
        let channels = labels.num_classes + 1;
        let n = labels.dims.len();
        let mut data = vec![0.0; channels * n];
        for (i, &v) in labels.data.iter().enumerate() {
            data[v as usize * n + i] = 1.0;
        }
        Self { channels, dims: labels.dims, kind: ProbKind::Probabilities, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> ProbKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.dims.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Value of channel `c` at voxel index `i`.
    #[inline]
    pub fn at(&self, c: usize, i: usize) -> f32 {
        self.data[c * self.dims.len() + i]
    }

    /// Relabels the payload kind without touching values.
    pub fn with_kind(mut self, kind: ProbKind) -> Self {
        self.kind = kind;
        self
    }

    /// Per-voxel argmax over channels; ties go to the smallest index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.dims.len();
        let mut best = self.channel(0).to_vec();
        let mut label = vec![0u8; n];
        for c in 1..self.channels {
            let ch = self.channel(c);
            for i in 0..n {
                if ch[i] > best[i] {
                    best[i] = ch[i];
                    label[i] = c as u8;
                }
            }
        }
        LabelMap { dims: self.dims, num_classes: self.channels - 1, data: label }
    }
}

impl Block for ProbMap {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn extract(&self, offset: [usize; 3], size: Dims) -> Self {
        check_block(self.dims, offset, size);
        let mut out = ProbMap::zeros(self.channels, size, self.kind);
        copy_block(&self.data, self.dims, offset, &mut out.data, size, [0; 3], size, self.channels);
        out
    }

    fn paste(&mut self, offset: [usize; 3], block: &Self) {
        check_block(self.dims, offset, block.dims);
        assert_eq!(self.channels, block.channels);
        copy_block(&block.data, block.dims, [0; 3], &mut self.data, self.dims, offset, block.dims, self.channels);
    }

    fn blank(&self, dims: Dims) -> Self {
        ProbMap::zeros(self.channels, dims, self.kind)
    }

    fn same_kind(&self, other: &Self) -> bool {
        self.channels == other.channels && self.kind == other.kind
    }
}

/// Zero-mean, unit-variance rescaling. A constant volume maps to zeros.
pub fn normalize(v: &Volume) -> Result<Volume> {
    if v.data.is_empty() {
        bail!(Dimension, "cannot normalize an empty volume");
    }
    let (mean, std) = v.mean_std();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Ok(Volume::zeros(v.dims));
    }
    let data = v.data.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect();
    Ok(Volume { dims: v.dims, data })
}

/// Draws a uniformly placed crop of `size` and applies the same offset to
/// the optional label map. Returns the offset used.
pub fn random_crop(
    v: &Volume,
    y: Option<&LabelMap>,
    size: Dims,
    rng: &mut impl rand::Rng,
) -> Result<(Volume, Option<LabelMap>, [usize; 3])> {
    if !size.fits_within(v.dims) || size.is_empty() {
        bail!(Dimension, "crop {size} does not fit in volume {}", v.dims);
    }
    if let Some(y) = y {
        if y.dims != v.dims {
            bail!(Dimension, "label map {} does not match volume {}", y.dims, v.dims);
        }
    }
    let offset = [
        rng.random_range(0..=v.dims.w - size.w),
        rng.random_range(0..=v.dims.h - size.h),
        rng.random_range(0..=v.dims.l - size.l),
    ];
    Ok((v.extract(offset, size), y.map(|y| y.extract(offset, size)), offset))
}

/// Max-subtracted softmax over the channel axis.
pub fn softmax_channels(p: &ProbMap) -> Result<ProbMap> {
    if p.kind != ProbKind::Logits {
        bail!(Consistency, "softmax expects logits");
    }
    if let Some(i) = p.data.iter().position(|v| !v.is_finite()) {
        bail!(Numeric, "non-finite logit at flat index {i}");
    }
    let mut out = p.clone().with_kind(ProbKind::Probabilities);
    softmax_in_place(out.channels, out.dims.len(), &mut out.data);
    Ok(out)
}

pub(crate) fn softmax_in_place(channels: usize, n: usize, data: &mut [f32]) {
    let mut max = data[..n].to_vec();
    for c in 1..channels {
        for (m, &v) in max.iter_mut().zip(&data[c * n..(c + 1) * n]) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sum = vec![0.0f32; n];
    for c in 0..channels {
        for ((v, &m), s) in data[c * n..(c + 1) * n].iter_mut().zip(&max).zip(sum.iter_mut()) {
            *v = libm::expf(*v - m);
            *s += *v;
        }
    }
    for c in 0..channels {
        for (v, &s) in data[c * n..(c + 1) * n].iter_mut().zip(&sum) {
            *v /= s;
        }
    }
}

/// Checks that every voxel's channel vector is a distribution within `tol`.
pub fn check_distribution(p: &ProbMap, tol: f32) -> Result<()> {
    let n = p.dims.len();
    for i in 0..n {
        let mut s = 0.0f64;
        for c in 0..p.channels {
            let v = p.at(c, i);
            if !(v >= 0.0) {
                bail!(Numeric, "negative or NaN probability {v} at voxel {i}");
            }
            s += v as f64;
        }
        if (s - 1.0).abs() > tol as f64 {
            bail!(Numeric, "{}", format!("channel sum {s} at voxel {i}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn normalize_constant_is_zero() {
        let v = Volume::new(Dims::cube(4), vec![7.0; 64]).unwrap();
        let n = normalize(&v).unwrap();
        assert!(n.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_two_values() {
        let data = (0..64).map(|i| if i % 2 == 0 { 0.0 } else { 2.0 }).collect();
        let v = Volume::new(Dims::cube(4), data).unwrap();
        let n = normalize(&v).unwrap();
        for (i, &x) in n.data().iter().enumerate() {
            assert_eq!(x, if i % 2 == 0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn normalize_random_moments() {
        let mut r = rng::from_seed(3);
        let v = Volume::from_fn(Dims::cube(8), |_, _, _| r.random_range(-5.0..20.0));
        let (m, s) = normalize(&v).unwrap().mean_std();
        assert!(m.abs() < 1e-3);
        assert!((s - 1.0).abs() < 1e-3);
    }

    #[test]
    fn empty_volume_is_rejected() {
        assert!(matches!(Volume::new(Dims::new(0, 4, 4), vec![]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn full_size_crop_is_identity() {
        let mut r = rng::from_seed(1);
        let v = Volume::from_fn(Dims::cube(96), |x, y, z| (x + 3 * y + 7 * z) as f32);
        let (c, _, off) = random_crop(&v, None, Dims::cube(96), &mut r).unwrap();
        assert_eq!(off, [0, 0, 0]);
        assert_eq!(c, v);
    }

    #[test]
    fn crop_matches_index_loop() {
        let mut r = rng::from_seed(11);
        let d = Dims::cube(8);
        let v = Volume::from_fn(d, |x, y, z| (x + 8 * y + 64 * z) as f32);
        let lab = LabelMap::new(d, 3, (0..512).map(|i| (i % 4) as u8).collect()).unwrap();
        let (c, cl, off) = random_crop(&v, Some(&lab), Dims::cube(4), &mut r).unwrap();
        let cl = cl.unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(c.get(x, y, z), v.get(x + off[0], y + off[1], z + off[2]));
                    assert_eq!(cl.get(x, y, z), lab.get(x + off[0], y + off[1], z + off[2]));
                }
            }
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let mut r = rng::from_seed(1);
        let v = Volume::zeros(Dims::cube(4));
        assert!(matches!(random_crop(&v, None, Dims::cube(6), &mut r), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let p = ProbMap::zeros(3, Dims::cube(2), ProbKind::Logits);
        let s = softmax_channels(&p).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));

        let ln2 = core::f32::consts::LN_2;
        let p = ProbMap::new(3, Dims::cube(1), ProbKind::Logits, vec![0.0, ln2, 2.0 * ln2]).unwrap();
        let s = softmax_channels(&p).unwrap();
        for (v, e) in s.data().iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((v - e).abs() < 1e-6, "{v} vs {e}");
        }
    }

    #[test]
    fn softmax_shift_invariant_and_large_logits() {
        let base = vec![0.3, -1.2, 2.5, 80.0, -80.0, 79.5];
        let p = ProbMap::new(2, Dims::new(3, 1, 1), ProbKind::Logits, base.clone()).unwrap();
        let shifted =
            ProbMap::new(2, Dims::new(3, 1, 1), ProbKind::Logits, base.iter().map(|v| v + 10.0).collect()).unwrap();
        let a = softmax_channels(&p).unwrap();
        let b = softmax_channels(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        check_distribution(&a, 1e-5).unwrap();
    }

    #[test]
    fn softmax_rejects_nan() {
        let p = ProbMap::new(2, Dims::cube(1), ProbKind::Logits, vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_channels(&p), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = ProbMap::new(2, Dims::cube(1), ProbKind::Probabilities, vec![0.5, 0.5]).unwrap();
        assert_eq!(p.argmax().data(), &[0]);
    }
}
