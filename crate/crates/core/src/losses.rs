//! Multi-class Dice loss, location cross-entropy, loss weighting schedules
//! and assembly of the total objective.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::volume::{LabelMap, ProbKind, ProbMap};

/// Dice smoothing, added to both numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

/// Multi-class soft Dice on raw slices, channel-major `p` of `channels`
/// maps over `y.len()` voxels. Returns the loss and its gradient w.r.t. `p`.
pub fn dice_loss_slice(p: &[f64], channels: usize, y: &[u8], include_background: bool) -> Result<(f64, Vec<f64>)> {
    let n = y.len();
    if p.len() != channels * n {
        bail!(Dimension, "dice input has {} values, expected {channels}×{n}", p.len());
    }
    let first = usize::from(!include_background);
    if channels <= first {
        bail!(Dimension, "dice needs at least one scored class");
    }
    let k = (channels - first) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for c in first..channels {
        let pc = &p[c * n..(c + 1) * n];
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for (&pv, &yv) in pc.iter().zip(y) {
            sp += pv;
            if yv as usize == c {
                inter += pv;
                sy += 1.0;
            }
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sp + sy + DICE_EPS;
        loss += 1.0 - num / den;
        let gc = &mut grad[c * n..(c + 1) * n];
        for (g, &yv) in gc.iter_mut().zip(y) {
            let yi = if yv as usize == c { 1.0 } else { 0.0 };
            *g = -(2.0 * yi * den - num) / (den * den) / k;
        }
    }
    Ok((loss / k, grad))
}

fn check_dice_inputs(p: &ProbMap, y: &LabelMap) -> Result<()> {
    if p.kind() != ProbKind::Probabilities {
        bail!(Consistency, "dice loss expects probabilities, got logits");
    }
    if p.dims() != y.dims() {
        bail!(Dimension, "prediction {} and labels {} differ", p.dims(), y.dims());
    }
    if p.channels() != y.num_classes() + 1 {
        bail!(Dimension, "prediction has {} channels, labels have {} classes", p.channels(), y.num_classes());
    }
    Ok(())
}

/// `1 − mean_c (2·Σ p_c y_c + ε)/(Σ p_c + Σ y_c + ε)` over classes `0..=C`.
pub fn dice_loss(p: &ProbMap, y: &LabelMap) -> Result<f64> {
    Ok(dice_loss_and_grad(p, y, true)?.0)
}

/// Dice loss and gradient w.r.t. the probabilities, optionally skipping
/// the background class.
pub fn dice_loss_and_grad(p: &ProbMap, y: &LabelMap, include_background: bool) -> Result<(f64, Vec<f32>)> {
    check_dice_inputs(p, y)?;
    let pd: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
    let (loss, g) = dice_loss_slice(&pd, p.channels(), y.data(), include_background)?;
    Ok((loss, g.into_iter().map(|v| v as f32).collect()))
}

/// Mean over rows of `−log softmax(row)[target]` with its gradient
/// `(softmax − onehot) / rows`. `logits` is row-major with `width` columns.
pub fn ce_slice(logits: &[f64], width: usize, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    if width == 0 || logits.len() != width * targets.len() {
        bail!(Dimension, "logit matrix has {} values, expected {}×{width}", logits.len(), targets.len());
    }
    if targets.is_empty() {
        bail!(Dimension, "cross-entropy over zero rows");
    }
    let m = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (r, &t) in targets.iter().enumerate() {
        if t >= width {
            bail!(Dimension, "target {t} outside {width} classes");
        }
        let row = &logits[r * width..(r + 1) * width];
        if row.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite location logit in row {r}");
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| libm::exp(v - mx)).sum();
        let lse = mx + libm::log(z);
        loss += lse - row[t];
        let g = &mut grad[r * width..(r + 1) * width];
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = (libm::exp(row[j] - lse) - f64::from(u8::from(j == t))) / m;
        }
    }
    Ok((loss / m, grad))
}

/// Location cross-entropy over cube rows of width `N³`.
pub fn ce_location_loss(logits: &[f32], width: usize, targets: &[usize]) -> Result<f64> {
    Ok(ce_location_loss_and_grad(logits, width, targets)?.0)
}

pub fn ce_location_loss_and_grad(logits: &[f32], width: usize, targets: &[usize]) -> Result<(f64, Vec<f32>)> {
    let l: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let (loss, g) = ce_slice(&l, width, targets)?;
    Ok((loss, g.into_iter().map(|v| v as f32).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    /// Unsupervised consistency weight at the current iteration.
    pub alpha: f64,
    /// Location-reasoning weight.
    pub beta: f64,
    pub alpha_max: f64,
    pub ramp_iters: u64,
}

impl LossWeights {
    /// Weights with `alpha` set from the ramp-up at iteration `t`.
    pub fn at(self, t: u64) -> Self {
        Self { alpha: alpha_schedule(t, &self), ..self }
    }
}

/// Gaussian warm-up `α(t) = α_max · exp(−5 (1 − min(t/ramp, 1))²)`.
pub fn alpha_schedule(t: u64, w: &LossWeights) -> f64 {
    if w.ramp_iters == 0 {
        return w.alpha_max;
    }
    let phase = 1.0 - (t as f64 / w.ramp_iters as f64).min(1.0);
    w.alpha_max * libm::exp(-5.0 * phase * phase)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum LrSchedule {
    /// `base · (1 − t/T)^power`.
    Poly { power: f64 },
    /// `base · gamma^⌊t/step_len⌋`.
    Step { step_len: u64, gamma: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Poly { power: 0.9 }
    }
}

pub fn lr_schedule(kind: LrSchedule, t: u64, base_lr: f64, max_iter: u64) -> f64 {
    match kind {
        LrSchedule::Poly { power } => {
            if max_iter == 0 || t >= max_iter {
                return 0.0;
            }
            base_lr * libm::pow(1.0 - t as f64 / max_iter as f64, power)
        }
        LrSchedule::Step { step_len, gamma } => {
            let k = if step_len == 0 { 0 } else { t / step_len };
            base_lr * libm::pow(gamma, k as f64)
        }
    }
}

/// Loss parts of one iteration plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    /// Labeled images, cross-image branch vs. ground truth.
    pub l_cross_sup: f64,
    /// Labeled images, within-image branch vs. ground truth.
    pub l_in_sup: f64,
    /// Unlabeled images, cross-image branch vs. refined pseudo-labels.
    pub l_cross_in_unsup: f64,
    pub l_cls_sup: f64,
    pub l_cls_unsup: f64,
    pub total: f64,
}

impl LossReport {
    pub fn supervised(&self, w: &LossWeights) -> f64 {
        self.l_cross_sup + self.l_in_sup + w.beta * self.l_cls_sup
    }

    pub fn unsupervised(&self, w: &LossWeights) -> f64 {
        w.alpha * self.l_cross_in_unsup + w.beta * self.l_cls_unsup
    }

    /// Location loss over both splits.
    pub fn l_cls(&self) -> f64 {
        self.l_cls_sup + self.l_cls_unsup
    }
}

/// Fills `total = (ℓ_cross + ℓ_in + β ℓ_cls) + (α ℓ_u + β ℓ^u_cls)`.
pub fn assemble_total(parts: LossReport, w: &LossWeights) -> Result<LossReport> {
    let named = [
        ("l_cross_sup", parts.l_cross_sup),
        ("l_in_sup", parts.l_in_sup),
        ("l_cross_in_unsup", parts.l_cross_in_unsup),
        ("l_cls_sup", parts.l_cls_sup),
        ("l_cls_unsup", parts.l_cls_unsup),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            bail!(Numeric, "loss part {name} is {v}");
        }
    }
    Ok(LossReport { total: parts.supervised(w) + parts.unsupervised(w), ..parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn weights(alpha: f64, beta: f64) -> LossWeights {
        LossWeights { alpha, beta, alpha_max: 1.0, ramp_iters: 100 }
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = LabelMap::new(Dims::new(3, 1, 1), 2, vec![0, 1, 2]).unwrap();
        let p = ProbMap::one_hot(&y);
        assert!(dice_loss(&p, &y).unwrap() <= 1e-4);
    }

    #[test]
    fn two_voxel_hand_example() {
        let y = LabelMap::new(Dims::new(2, 1, 1), 1, vec![0, 1]).unwrap();
        let p = ProbMap::new(2, Dims::new(2, 1, 1), ProbKind::Probabilities, vec![0.8, 0.4, 0.2, 0.6]).unwrap();
        let e = DICE_EPS;
        let d0 = (2.0 * 0.8 + e) / (1.2 + 1.0 + e);
        let d1 = (2.0 * 0.6 + e) / (0.8 + 1.0 + e);
        let expect = 1.0 - (d0 + d1) / 2.0;
        assert!((dice_loss(&p, &y).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn uniform_prediction_closed_form() {
        let y = LabelMap::new(Dims::new(4, 1, 1), 1, vec![1, 1, 1, 0]).unwrap();
        let p = ProbMap::new(2, Dims::new(4, 1, 1), ProbKind::Probabilities, vec![0.5; 8]).unwrap();
        let e = DICE_EPS;
        let term = |ny: f64| (2.0 * 0.5 * ny + e) / (2.0 + ny + e);
        let expect = 1.0 - (term(1.0) + term(3.0)) / 2.0;
        assert!((dice_loss(&p, &y).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn dice_rejects_mismatch() {
        let y = LabelMap::zeros(Dims::cube(2), 1);
        let p = ProbMap::zeros(2, Dims::cube(3), ProbKind::Probabilities);
        assert!(matches!(dice_loss(&p, &y), Err(crate::Error::Dimension(_))));
        let p = ProbMap::zeros(3, Dims::cube(2), ProbKind::Probabilities);
        assert!(matches!(dice_loss(&p, &y), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn ce_examples() {
        let mut l = vec![0.0; 8];
        l[3] = 80.0;
        assert!(ce_location_loss(&l, 8, &[3]).unwrap() < 1e-30);
        let z = vec![0.0f32; 64];
        let t: Vec<usize> = (0..8).collect();
        assert!((ce_location_loss(&z, 8, &t).unwrap() - libm::log(8.0)).abs() < 1e-12);
        assert!(matches!(ce_location_loss(&z, 7, &t), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn ce_permutation_invariance() {
        let logits: Vec<f32> = (0..16).map(|i| ((i * 7) % 5) as f32 * 0.3).collect();
        let targets = [1, 3, 0, 2];
        let a = ce_location_loss(&logits, 4, &targets).unwrap();
        let order = [2, 0, 3, 1];
        let mut pl = Vec::new();
        let mut pt = Vec::new();
        for &r in &order {
            pl.extend_from_slice(&logits[r * 4..(r + 1) * 4]);
            pt.push(targets[r]);
        }
        let b = ce_location_loss(&pl, 4, &pt).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn alpha_examples() {
        let w = weights(0.0, 0.1);
        assert_eq!(alpha_schedule(100, &w), 1.0);
        assert_eq!(alpha_schedule(200, &w), 1.0);
        assert!((alpha_schedule(0, &w) - libm::exp(-5.0)).abs() < 1e-12);
        let mut prev = 0.0;
        for t in 0..150 {
            let a = alpha_schedule(t, &w);
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn lr_examples() {
        let poly = LrSchedule::Poly { power: 0.9 };
        assert_eq!(lr_schedule(poly, 0, 0.01, 2000), 0.01);
        assert_eq!(lr_schedule(poly, 2000, 0.01, 2000), 0.0);
        let step = LrSchedule::Step { step_len: 12000, gamma: 0.1 };
        assert!((lr_schedule(step, 24000, 0.01, 0) - 1e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(step, 11999, 0.01, 0), 0.01);
    }

    #[test]
    fn assembly_examples() {
        let ones = LossReport {
            l_cross_sup: 1.0,
            l_in_sup: 1.0,
            l_cross_in_unsup: 1.0,
            l_cls_sup: 1.0,
            l_cls_unsup: 1.0,
            total: 0.0,
        };
        assert!((assemble_total(ones, &weights(0.5, 0.1)).unwrap().total - 2.7).abs() < 1e-9);
        assert_eq!(assemble_total(LossReport::default(), &weights(0.5, 0.1)).unwrap().total, 0.0);
        let no_cls = assemble_total(ones, &weights(0.5, 0.0)).unwrap();
        assert!((no_cls.total - 2.5).abs() < 1e-12);
        let bad = LossReport { l_cls_unsup: f64::NAN, ..ones };
        assert!(
            matches!(assemble_total(bad, &weights(0.5, 0.1)), Err(crate::Error::Numeric(m)) if m.contains("l_cls_unsup"))
        );
    }
}
