//! Interpolation-style augmentations used as comparison baselines for
//! magic-cube mixing: CutMix, CutOut and MixUp on volumes.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::volume::{Block, Dims, Volume};

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub offset: [usize; 3],
    pub size: Dims,
}

impl Region {
    pub fn fits(&self, dims: Dims) -> bool {
        self.offset[0] + self.size.w <= dims.w
            && self.offset[1] + self.size.h <= dims.h
            && self.offset[2] + self.size.l <= dims.l
    }

    /// Uniformly placed box of `size` inside `dims`.
    pub fn draw(size: Dims, dims: Dims, rng: &mut impl rand::Rng) -> Result<Self> {
        if !size.fits_within(dims) {
            bail!(Dimension, "box {size} exceeds {dims}");
        }
        Ok(Region {
            offset: [
                rng.random_range(0..=dims.w - size.w),
                rng.random_range(0..=dims.h - size.h),
                rng.random_range(0..=dims.l - size.l),
            ],
            size,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum BaselineAug {
    /// Paste a box of the partner image.
    CutMix { size: Dims },
    /// Zero a box.
    CutOut { size: Dims },
    /// Convex combination; `lambda = None` draws it uniformly from `[0, 1]`.
    MixUp { lambda: Option<f32> },
}

/// Result of one baseline augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub volume: Volume,
    /// Box that was cut (CutMix / CutOut).
    pub region: Option<Region>,
    /// Weight of the first input (MixUp).
    pub lambda: Option<f32>,
}

/// `a` with `region` replaced by the same region of `b`.
pub fn cutmix<T: Block>(a: &T, b: &T, region: Region) -> Result<T> {
    if a.dims() != b.dims() {
        bail!(Dimension, "cutmix inputs differ: {} vs {}", a.dims(), b.dims());
    }
    if !region.fits(a.dims()) {
        bail!(Dimension, "cut box {:?} exceeds {}", region, a.dims());
    }
    let mut out = a.clone();
    out.paste(region.offset, &b.extract(region.offset, region.size));
    Ok(out)
}

/// `a` with `region` zeroed.
pub fn cutout(a: &Volume, region: Region) -> Result<Volume> {
    if !region.fits(a.dims()) {
        bail!(Dimension, "cut box {:?} exceeds {}", region, a.dims());
    }
    let mut out = a.clone();
    out.paste(region.offset, &Volume::zeros(region.size));
    Ok(out)
}

/// `λ·a + (1−λ)·b`.
pub fn mixup(a: &Volume, b: &Volume, lambda: f32) -> Result<Volume> {
    if a.dims() != b.dims() {
        bail!(Dimension, "mixup inputs differ: {} vs {}", a.dims(), b.dims());
    }
    if !(0.0..=1.0).contains(&lambda) {
        bail!(Config, "mixup ratio {lambda} outside [0, 1]");
    }
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(&x, &y)| lambda * x + (1.0 - lambda) * y).collect();
    Volume::new(a.dims(), data)
}

pub fn baseline_augment(kind: BaselineAug, a: &Volume, b: &Volume, rng: &mut impl rand::Rng) -> Result<Augmented> {
    if a.dims() != b.dims() {
        bail!(Dimension, "augmentation inputs differ: {} vs {}", a.dims(), b.dims());
    }
    match kind {
        BaselineAug::CutMix { size } => {
            let region = Region::draw(size, a.dims(), rng)?;
            Ok(Augmented { volume: cutmix(a, b, region)?, region: Some(region), lambda: None })
        }
        BaselineAug::CutOut { size } => {
            let region = Region::draw(size, a.dims(), rng)?;
            Ok(Augmented { volume: cutout(a, region)?, region: Some(region), lambda: None })
        }
        BaselineAug::MixUp { lambda } => {
            let lambda = lambda.unwrap_or_else(|| rng.random_range(0.0..=1.0));
            Ok(Augmented { volume: mixup(a, b, lambda)?, region: None, lambda: Some(lambda) })
        }
    }
}
