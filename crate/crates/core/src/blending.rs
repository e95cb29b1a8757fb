//! Distribution-aware blending of teacher pseudo-labels with cube-wise
//! predictions.
//!
//! A sliding window of pseudo-label class counts `v` gives every organ
//! voxel the weight `Ω_m = v[c−1] / max v`; frequent (head) classes lean on
//! the cube-wise prediction, rare (tail) classes keep the teacher's.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::model::{forward_seg, NetworkParams};
use crate::volume::{softmax_channels, Dims, LabelMap, ProbKind, ProbMap, Volume};

/// Default number of iterations kept in the count window.
pub const DEFAULT_WINDOW: usize = 40;

/// Per-organ voxel counts of recent pseudo-labels (background excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHistogram {
    num_classes: usize,
    capacity: usize,
    window: VecDeque<Vec<u64>>,
    counts: Vec<u64>,
}

impl ClassHistogram {
    pub fn new(num_classes: usize, capacity: usize) -> Result<Self> {
        if num_classes == 0 || capacity == 0 {
            bail!(Config, "histogram needs classes and a positive window, got {num_classes} and {capacity}");
        }
        Ok(Self { num_classes, capacity, window: VecDeque::with_capacity(capacity), counts: vec![0; num_classes] })
    }

    /// Rebuilds a histogram from a saved window (oldest first).
    pub fn from_window(num_classes: usize, capacity: usize, window: Vec<Vec<u64>>) -> Result<Self> {
        let mut h = Self::new(num_classes, capacity)?;
        if window.len() > capacity {
            bail!(Consistency, "window holds {} entries, capacity {capacity}", window.len());
        }
        for entry in window {
            h.push(entry)?;
        }
        Ok(h)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sum of the retained window, one entry per organ class.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn window(&self) -> impl Iterator<Item = &[u64]> {
        self.window.iter().map(Vec::as_slice)
    }

    pub fn push(&mut self, entry: Vec<u64>) -> Result<()> {
        if entry.len() != self.num_classes {
            bail!(Consistency, "count entry has {} classes, histogram has {}", entry.len(), self.num_classes);
        }
        if self.window.len() == self.capacity {
            let old = self.window.pop_front().expect("full window");
            for (c, o) in self.counts.iter_mut().zip(old) {
                *c -= o;
            }
        }
        for (c, &e) in self.counts.iter_mut().zip(&entry) {
            *c += e;
        }
        self.window.push_back(entry);
        Ok(())
    }
}

/// Pushes the organ voxel counts of one pseudo-label map into the window.
pub fn update_histogram(h: &mut ClassHistogram, pseudo: &LabelMap) -> Result<()> {
    if pseudo.num_classes() != h.num_classes {
        bail!(Consistency, "pseudo-label has {} classes, histogram has {}", pseudo.num_classes(), h.num_classes);
    }
    h.push(pseudo.class_counts()[1..].to_vec())
}

/// Per-voxel blending weight in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    dims: Dims,
    data: Vec<f32>,
}

impl WeightMap {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            bail!(Dimension, "weight map of {dims} needs {} values, got {}", dims.len(), data.len());
        }
        if data.iter().any(|w| !(0.0..=1.0).contains(w)) {
            bail!(Consistency, "weight map value outside [0, 1]");
        }
        Ok(Self { dims, data })
    }

    pub fn constant(dims: Dims, w: f32) -> Result<Self> {
        Self::new(dims, vec![w; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&w| w as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// `Ω_m = counts[c−1] / max(counts)` for organ label `c`; background voxels
/// get 0 (or 1 with `background_as_head`). Before any organ has been
/// counted the map is all zeros.
pub fn weight_map(pseudo: &LabelMap, h: &ClassHistogram, background_as_head: bool) -> Result<WeightMap> {
    if pseudo.num_classes() != h.num_classes {
        bail!(Consistency, "pseudo-label has {} classes, histogram has {}", pseudo.num_classes(), h.num_classes);
    }
    let max = h.counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return WeightMap::constant(pseudo.dims(), 0.0);
    }
    let bg = if background_as_head { 1.0 } else { 0.0 };
    let table: Vec<f32> =
        core::iter::once(bg).chain(h.counts.iter().map(|&c| (c as f64 / max as f64) as f32)).collect();
    WeightMap::new(pseudo.dims(), pseudo.data().iter().map(|&l| table[l as usize]).collect())
}

/// `(1 − Ω) ⊙ P_T + Ω ⊙ P_in`, with `Ω` broadcast over channels.
pub fn blend(p_teacher: &ProbMap, p_in: &ProbMap, w: &WeightMap) -> Result<ProbMap> {
    if p_teacher.kind() != ProbKind::Probabilities || p_in.kind() != ProbKind::Probabilities {
        bail!(Consistency, "blending expects probabilities");
    }
    if p_teacher.dims() != p_in.dims() || p_teacher.dims() != w.dims || p_teacher.channels() != p_in.channels() {
        bail!(
            Dimension,
            "blend inputs differ: {}×{}, {}×{}, weights {}",
            p_teacher.channels(),
            p_teacher.dims(),
            p_in.channels(),
            p_in.dims(),
            w.dims
        );
    }
    let n = w.dims.len();
    let mut out = p_teacher.clone();
    for c in 0..out.channels() {
        let src = p_in.channel(c);
        for ((o, &s), &wm) in out.channel_mut(c).iter_mut().zip(src).zip(&w.data) {
            *o = (1.0 - wm) * *o + wm * s;
        }
        debug_assert_eq!(src.len(), n);
    }
    Ok(out)
}

/// Per-voxel argmax of blended probabilities, ties toward the lower class.
pub fn refined_label(p_blend: &ProbMap) -> Result<LabelMap> {
    if p_blend.kind() != ProbKind::Probabilities {
        bail!(Consistency, "refined labels need probabilities");
    }
    Ok(p_blend.argmax())
}

/// Teacher probabilities and their argmax (the raw pseudo-label).
pub fn teacher_pseudo(params: &NetworkParams, v: &Volume) -> Result<(ProbMap, LabelMap)> {
    let (logits, _) = forward_seg(params, v)?;
    let p = softmax_channels(&logits)?;
    let y = p.argmax();
    Ok((p, y))
}
