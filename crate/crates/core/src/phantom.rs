//! Procedural abdominal-like phantoms: ellipsoidal organs at fixed relative
//! positions inside a body outline, with jittered sizes and positions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::rng::{self, stream};
use crate::volume::{Dims, LabelMap, Volume};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct OrganSpec {
    pub class: u8,
    /// Canonical center in relative coordinates `[0, 1]³`.
    pub center: [f64; 3],
    /// Ellipsoid semi-axes in voxels.
    pub radii: [f64; 3],
    /// Each semi-axis is scaled by a factor in `1 ± radius_jitter`.
    pub radius_jitter: f64,
    pub intensity_mean: f64,
    pub intensity_std: f64,
}

/// Rounded box of soft tissue; everything outside is air.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BodySpec {
    /// Distance in voxels from each face of the volume to the body surface.
    pub margin: f64,
    /// Superellipsoid exponent; large values approach a box.
    pub exponent: f64,
    pub tissue_mean: f64,
    pub air_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Listed large to small; earlier organs win where they overlap.
    pub organs: Vec<OrganSpec>,
    pub body: Option<BodySpec>,
    /// Per-case shift shared by body and organs, uniform in `±global_shift`
    /// voxels per axis.
    pub global_shift: f64,
    /// Extra per-organ shift, uniform in `±organ_shift` voxels per axis.
    pub organ_shift: f64,
    /// Per-case additive offset of every organ mean, uniform in `±`.
    pub contrast_jitter: f64,
    pub noise_std: f64,
}

impl PhantomSpec {
    /// 24³ volumes with one large, two medium and two small organs.
    pub fn desk_default() -> Self {
        let organ = |class, center, radii, mean| OrganSpec {
            class,
            center,
            radii,
            radius_jitter: 0.15,
            intensity_mean: mean,
            intensity_std: 0.1,
        };
        Self {
            dims: Dims::cube(24),
            organs: vec![
                organ(1, [0.3542, 0.5, 0.5], [5.5, 5.0, 4.5], 1.0),
                organ(2, [0.7, 0.2917, 0.4375], [4.0, 4.0, 3.5], 1.8),
                organ(3, [0.7083, 0.7083, 0.5625], [3.0, 3.0, 3.0], 1.8),
                organ(4, [0.3542, 0.7917, 0.3542], [2.0, 2.0, 2.0], 2.6),
                organ(5, [0.4583, 0.1875, 0.6458], [2.0, 2.0, 2.0], 2.6),
            ],
            body: Some(BodySpec { margin: 2.5, exponent: 6.0, tissue_mean: 0.0, air_mean: -1.5 }),
            global_shift: 1.0,
            organ_shift: 1.0,
            contrast_jitter: 0.2,
            noise_std: 0.25,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.organs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            bail!(Spec, "phantom dims {} must be positive", self.dims);
        }
        let c = self.organs.len();
        if c == 0 || c > 253 {
            bail!(Spec, "phantom needs 1..=253 organs, got {c}");
        }
        let mut seen = vec![false; c + 1];
        for o in &self.organs {
            let k = o.class as usize;
            if k == 0 || k > c || seen[k] {
                bail!(Spec, "organ classes must cover 1..={c} exactly once (class {k})");
            }
            seen[k] = true;
            if o.radii.iter().any(|&r| !(r > 0.0)) || !(0.0..1.0).contains(&o.radius_jitter) || o.intensity_std < 0.0 {
                bail!(Spec, "organ {k} has invalid radii or jitter");
            }
        }
        for (i, a) in self.organs.iter().enumerate() {
            if self.organs[..i].iter().any(|b| b.center == a.center) {
                bail!(Spec, "organ {} shares its canonical center", a.class);
            }
        }
        if self.noise_std < 0.0 || self.global_shift < 0.0 || self.organ_shift < 0.0 || self.contrast_jitter < 0.0 {
            bail!(Spec, "jitter and noise must be non-negative");
        }
        let d = self.dims.as_array();
        if (0..3).any(|a| self.organ_shift > 0.1 * d[a] as f64) {
            bail!(Spec, "per-organ shift {} exceeds 10% of {}", self.organ_shift, self.dims);
        }
        let shift = self.global_shift + self.organ_shift;
        for o in &self.organs {
            for a in 0..3 {
                let c = o.center[a] * d[a] as f64;
                let r = o.radii[a] * (1.0 + o.radius_jitter);
                if c - r - shift < -0.5 || c + r + shift > d[a] as f64 - 0.5 {
                    bail!(Spec, "organ {} can leave the {} volume along axis {a}", o.class, self.dims);
                }
            }
        }
        Ok(())
    }

    /// Largest per-organ displacement relative to the other organs.
    pub fn relative_jitter_bound(&self) -> f64 {
        self.organ_shift
    }
}

fn normal(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn jitter(rng: &mut impl rand::Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Rasterized organ placement of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganPlacement {
    pub class: u8,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

fn inside(p: &OrganPlacement, x: usize, y: usize, z: usize) -> bool {
    let q = [x as f64, y as f64, z as f64];
    (0..3)
        .map(|a| {
            let t = (q[a] - p.center[a]) / p.radii[a];
            t * t
        })
        .sum::<f64>()
        <= 1.0
}

/// One phantom volume and its label map.
pub fn generate_case(spec: &PhantomSpec, rng: &mut impl rand::Rng) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let d = spec.dims;
    let (g, placements) = draw_layout(spec, rng);
    let mut labels = vec![0u8; d.len()];
    let mut image = vec![0f32; d.len()];
    for z in 0..d.l {
        for y in 0..d.h {
            for x in 0..d.w {
                let i = d.index(x, y, z);
                let organ = placements.iter().zip(&spec.organs).find(|(p, _)| inside(p, x, y, z));
                let base = match organ {
                    Some((p, o)) => {
                        labels[i] = p.class;
                        p.intensity + o.intensity_std * normal(rng)
                    }
                    None => match &spec.body {
                        Some(b) => {
                            if in_body(b, d, g, x, y, z) {
                                b.tissue_mean
                            } else {
                                b.air_mean
                            }
                        }
                        None => 0.0,
                    },
                };
                image[i] = (base + spec.noise_std * normal(rng)) as f32;
            }
        }
    }
    Ok((Volume::new(d, image)?, LabelMap::new(d, spec.num_classes(), labels)?))
}

fn in_body(b: &BodySpec, d: Dims, shift: [f64; 3], x: usize, y: usize, z: usize) -> bool {
    let q = [x as f64, y as f64, z as f64];
    let dd = d.as_array();
    let mut s = 0.0;
    for a in 0..3 {
        let center = (dd[a] as f64 - 1.0) / 2.0 + shift[a];
        let half = dd[a] as f64 / 2.0 - b.margin;
        s += libm::pow(libm::fabs(q[a] - center) / half, b.exponent);
    }
    s <= 1.0
}

/// Global shift and organ placements; the first draws of every case.
fn draw_layout(spec: &PhantomSpec, rng: &mut impl rand::Rng) -> ([f64; 3], Vec<OrganPlacement>) {
    let dd = spec.dims.as_array();
    let g = [jitter(rng, spec.global_shift), jitter(rng, spec.global_shift), jitter(rng, spec.global_shift)];
    let contrast = jitter(rng, spec.contrast_jitter);
    let placements = spec
        .organs
        .iter()
        .map(|o| {
            let mut center = [0.0; 3];
            let mut radii = [0.0; 3];
            for a in 0..3 {
                center[a] = o.center[a] * dd[a] as f64 + g[a] + jitter(rng, spec.organ_shift);
            }
            for a in 0..3 {
                radii[a] = o.radii[a] * (1.0 + jitter(rng, o.radius_jitter));
            }
            OrganPlacement { class: o.class, center, radii, intensity: o.intensity_mean + contrast }
        })
        .collect();
    (g, placements)
}

/// Organ placements a seeded case would use, for analysis and tests.
pub fn case_placements(spec: &PhantomSpec, rng: &mut impl rand::Rng) -> Vec<OrganPlacement> {
    draw_layout(spec, rng).1
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub name: String,
    pub volume: Volume,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledCase {
    pub name: String,
    pub volume: Volume,
}

/// Training data. Ground truth of unlabeled cases is not stored here; it
/// goes to the evaluation-only [`Sidecar`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub seed: u64,
    pub labeled_fraction: f64,
}

/// Ground truth of the unlabeled cases, for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub unlabeled_truth: Vec<LabeledCase>,
}

pub fn case_name(prefix: &str, i: usize) -> String {
    format!("{prefix}_{i:03}")
}

/// `n_cases` phantoms with `⌈fraction·n⌉` chosen at random as labeled.
pub fn make_dataset(
    spec: &PhantomSpec,
    n_cases: usize,
    labeled_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Sidecar)> {
    spec.validate()?;
    if n_cases == 0 {
        bail!(Spec, "dataset needs at least one case");
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        bail!(Spec, "labeled fraction {labeled_fraction} outside (0, 1]");
    }
    let n_labeled = labeled_count(n_cases, labeled_fraction);
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut rng::derive(seed, stream::SPLIT, 0));
    let mut is_labeled = vec![false; n_cases];
    for &i in &order[..n_labeled] {
        is_labeled[i] = true;
    }
    let mut ds =
        Dataset { num_classes: spec.num_classes(), labeled: Vec::new(), unlabeled: Vec::new(), seed, labeled_fraction };
    let mut sidecar = Sidecar { unlabeled_truth: Vec::new() };
    for (i, &lab) in is_labeled.iter().enumerate() {
        let (volume, labels) = generate_case(spec, &mut rng::derive(seed, stream::PHANTOM_CASE, i as u64))?;
        let name = case_name("case", i);
        if lab {
            ds.labeled.push(LabeledCase { name, volume, labels });
        } else {
            ds.unlabeled.push(UnlabeledCase { name: name.clone(), volume: volume.clone() });
            sidecar.unlabeled_truth.push(LabeledCase { name, volume, labels });
        }
    }
    Ok((ds, sidecar))
}

/// `⌈fraction·n⌉`, guarding against floating-point round-up.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let r = libm::round(exact);
    let k = if libm::fabs(exact - r) < 1e-9 { r } else { libm::ceil(exact) };
    (k as usize).clamp(1, n)
}

/// Held-out evaluation cases drawn from a stream disjoint from training.
pub fn make_test_set(spec: &PhantomSpec, n_cases: usize, seed: u64) -> Result<Vec<LabeledCase>> {
    (0..n_cases)
        .map(|i| {
            let (volume, labels) = generate_case(spec, &mut rng::derive(seed, stream::TEST_SET, i as u64))?;
            Ok(LabeledCase { name: case_name("test", i), volume, labels })
        })
        .collect()
}

/// Fraction of labeled voxels belonging to each organ class.
pub fn class_frequency_profile(ds: &Dataset) -> Result<Vec<f64>> {
    if ds.labeled.is_empty() {
        bail!(Spec, "frequency profile needs labeled cases");
    }
    let mut counts = vec![0u64; ds.num_classes];
    let mut total = 0u64;
    for case in &ds.labeled {
        let c = case.labels.class_counts();
        for (k, v) in counts.iter_mut().zip(&c[1..]) {
            *k += v;
        }
        total += case.labels.dims().len() as u64;
    }
    Ok(counts.into_iter().map(|k| k as f64 / total as f64).collect())
}
