//! Magic-cube partition, cross-image mixing, within-image shuffling and
//! recovery.
//!
//! A magic-cube is a volume viewed as an `N×N×N` arrangement of equal cubes.
//! Cube location `j` is linearised as `j = (jz·N + jy)·N + jx` and covers the
//! block starting at `(jx·W/N, jy·H/N, jz·L/N)`. The same convention is used
//! for the location-reasoning targets.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{bail, Result};
use crate::volume::{Block, Dims};

/// Which split an image was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Split {
    #[default]
    Labeled,
    Unlabeled,
}

/// Provenance of an image inside a mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SourceTag {
    pub split: Split,
    /// Position of the image in the batch list handed to the mixer.
    pub batch_index: usize,
}

impl SourceTag {
    pub fn labeled(batch_index: usize) -> Self {
        Self { split: Split::Labeled, batch_index }
    }

    pub fn unlabeled(batch_index: usize) -> Self {
        Self { split: Split::Unlabeled, batch_index }
    }
}

/// A cube identified by its source image (batch index) and its location in
/// that image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CubeRef {
    pub image: usize,
    pub location: usize,
}

/// Offset of location `j` for cubes of size `cube`.
pub fn location_offset(j: usize, n: usize, cube: Dims) -> [usize; 3] {
    let jx = j % n;
    let jy = (j / n) % n;
    let jz = j / (n * n);
    [jx * cube.w, jy * cube.h, jz * cube.l]
}

/// Location index of the cube at grid coordinates `(jx, jy, jz)`.
pub fn location_index(jx: usize, jy: usize, jz: usize, n: usize) -> usize {
    (jz * n + jy) * n + jx
}

/// `N³` cubes cut from one (original or mixed) image.
///
/// Slot `k` holds `cubes[k]`, which sits at `locations[k]` in the image this
/// grid describes, came from image `sources[k]`, and occupied location
/// `origins[k]` there. For a freshly partitioned image `locations` and
/// `origins` are both the identity; "keep"-mode mixing preserves
/// `locations[k] == origins[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeGrid<T> {
    cubes: Vec<T>,
    n: usize,
    source_dims: Dims,
    locations: Vec<usize>,
    sources: Vec<SourceTag>,
    origins: Vec<usize>,
}

impl<T: Block> CubeGrid<T> {
    /// Assembles a grid from parts, checking every invariant.
    pub fn from_parts(
        cubes: Vec<T>,
        n: usize,
        source_dims: Dims,
        locations: Vec<usize>,
        sources: Vec<SourceTag>,
        origins: Vec<usize>,
    ) -> Result<Self> {
        let g = Self { cubes, n, source_dims, locations, sources, origins };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let count = self.n * self.n * self.n;
        if self.n == 0 || !self.source_dims.divisible_by(self.n) {
            bail!(Dimension, "{} is not divisible into {} cubes per axis", self.source_dims, self.n);
        }
        if self.cubes.len() != count
            || self.locations.len() != count
            || self.sources.len() != count
            || self.origins.len() != count
        {
            bail!(Consistency, "grid with N={} must hold {count} cubes", self.n);
        }
        let cube_dims = self.cube_dims();
        if let Some(k) = self.cubes.iter().position(|c| c.dims() != cube_dims) {
            bail!(Dimension, "cube {k} has dims {} instead of {cube_dims}", self.cubes[k].dims());
        }
        if self.cubes.iter().any(|c| !c.same_kind(&self.cubes[0])) {
            bail!(Consistency, "cubes carry different payload kinds");
        }
        let mut seen = vec![false; count];
        for &j in &self.locations {
            if j >= count || seen[j] {
                bail!(Consistency, "location {j} is out of range or claimed twice");
            }
            seen[j] = true;
        }
        if let Some(&j) = self.origins.iter().find(|&&j| j >= count) {
            bail!(Consistency, "origin location {j} out of range");
        }
        Ok(())
    }

    pub fn n_per_axis(&self) -> usize {
        self.n
    }

    pub fn source_dims(&self) -> Dims {
        self.source_dims
    }

    pub fn cube_dims(&self) -> Dims {
        self.source_dims.div(self.n)
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn cubes(&self) -> &[T] {
        &self.cubes
    }

    pub fn into_cubes(self) -> Vec<T> {
        self.cubes
    }

    pub fn locations(&self) -> &[usize] {
        &self.locations
    }

    pub fn sources(&self) -> &[SourceTag] {
        &self.sources
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    /// Cube placed at `location` in this grid's image.
    pub fn cube_at(&self, location: usize) -> Option<&T> {
        self.locations.iter().position(|&j| j == location).map(|k| &self.cubes[k])
    }

    /// Retags every slot as coming from `tag`.
    pub fn with_source(mut self, tag: SourceTag) -> Self {
        self.sources.iter_mut().for_each(|s| *s = tag);
        self
    }

    /// Replaces cube payloads slot by slot (e.g. images by predictions),
    /// keeping all metadata.
    pub fn map_cubes<U: Block>(self, cubes: Vec<U>) -> Result<CubeGrid<U>> {
        CubeGrid::from_parts(cubes, self.n, self.source_dims, self.locations, self.sources, self.origins)
    }
}

/// Cuts `v` into `n³` cubes in location order.
pub fn partition<T: Block>(v: &T, n: usize) -> Result<CubeGrid<T>> {
    let dims = v.dims();
    if !dims.divisible_by(n) {
        bail!(Dimension, "{dims} is not divisible into {n} cubes per axis");
    }
    let cube = dims.div(n);
    let count = n * n * n;
    let cubes = (0..count).map(|j| v.extract(location_offset(j, n, cube), cube)).collect();
    Ok(CubeGrid {
        cubes,
        n,
        source_dims: dims,
        locations: (0..count).collect(),
        sources: vec![SourceTag::default(); count],
        origins: (0..count).collect(),
    })
}

/// Places every cube at its `locations` entry.
pub fn recover<T: Block>(g: &CubeGrid<T>) -> Result<T> {
    g.validate()?;
    let cube = g.cube_dims();
    let mut out = g.cubes[0].blank(g.source_dims);
    for (c, &j) in g.cubes.iter().zip(&g.locations) {
        out.paste(location_offset(j, g.n, cube), c);
    }
    Ok(out)
}

/// Cube-level assignment for a batch of mixed images.
///
/// `entries[i·N³ + d]` names the source cube placed at location `d` of mixed
/// image `i`. Valid masks are bijections between mixed slots and source
/// cubes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    n_images: usize,
    n_locations: usize,
    entries: Vec<CubeRef>,
}

impl MixMask {
    pub fn from_entries(n_images: usize, n_locations: usize, entries: Vec<CubeRef>) -> Result<Self> {
        let m = Self { n_images, n_locations, entries };
        m.validate()?;
        Ok(m)
    }

    /// Two-image keep-mode mask: `assignment[j]` names the source feeding
    /// location `j` of mixed image 0; mixed image 1 takes the other one.
    pub fn from_pair_assignment(assignment: &[usize]) -> Result<Self> {
        if let Some(&a) = assignment.iter().find(|&&a| a > 1) {
            bail!(Consistency, "pair assignment entries must be 0 or 1, got {a}");
        }
        let n_loc = assignment.len();
        let mut entries = Vec::with_capacity(2 * n_loc);
        for (j, &a) in assignment.iter().enumerate() {
            entries.push(CubeRef { image: a, location: j });
        }
        for (j, &a) in assignment.iter().enumerate() {
            entries.push(CubeRef { image: 1 - a, location: j });
        }
        Self::from_entries(2, n_loc, entries)
    }

    /// Keep-mode mask from one permutation of images per location:
    /// `perms[j][i]` is the source of location `j` in mixed image `i`.
    pub fn from_location_permutations(perms: &[Vec<usize>]) -> Result<Self> {
        let n_loc = perms.len();
        let n_img = perms.first().map_or(0, Vec::len);
        let mut entries = vec![CubeRef { image: 0, location: 0 }; n_img * n_loc];
        for (j, perm) in perms.iter().enumerate() {
            if perm.len() != n_img {
                bail!(Consistency, "location {j} permutes {} images, expected {n_img}", perm.len());
            }
            for (i, &s) in perm.iter().enumerate() {
                entries[i * n_loc + j] = CubeRef { image: s, location: j };
            }
        }
        Self::from_entries(n_img, n_loc, entries)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != self.n_images * self.n_locations {
            bail!(
                Consistency,
                "mask holds {} entries, expected {}",
                self.entries.len(),
                self.n_images * self.n_locations
            );
        }
        let mut seen = vec![false; self.entries.len()];
        for e in &self.entries {
            if e.image >= self.n_images || e.location >= self.n_locations {
                bail!(Consistency, "mask entry {e:?} out of range");
            }
            let k = e.image * self.n_locations + e.location;
            if seen[k] {
                bail!(Consistency, "source cube {e:?} used twice");
            }
            seen[k] = true;
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn entries(&self) -> &[CubeRef] {
        &self.entries
    }

    /// Source cube at destination `location` of mixed image `image`.
    pub fn entry(&self, image: usize, location: usize) -> CubeRef {
        self.entries[image * self.n_locations + location]
    }

    /// True when every cube stays at its original location.
    pub fn keeps_locations(&self) -> bool {
        self.entries.iter().enumerate().all(|(k, e)| e.location == k % self.n_locations)
    }

    /// Two-image view: source index feeding each location of mixed image 0.
    pub fn pair_assignment(&self) -> Option<Vec<usize>> {
        (self.n_images == 2 && self.keeps_locations())
            .then(|| (0..self.n_locations).map(|j| self.entry(0, j).image).collect())
    }

    /// Draws a keep-mode mask: every location independently permutes the
    /// images. When possible each mixed image ends up with at least one cube
    /// from a labeled source.
    pub fn draw_keep(tags: &[SourceTag], n_locations: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let n_img = tags.len();
        if n_img == 0 || n_locations == 0 {
            bail!(Consistency, "cannot mix an empty batch");
        }
        let mut perms: Vec<Vec<usize>> = (0..n_locations)
            .map(|_| {
                let mut p: Vec<usize> = (0..n_img).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        ensure_labeled_coverage(&mut perms, tags);
        Self::from_location_permutations(&perms)
    }

    /// Draws a scramble-mode mask: a keep-mode draw followed by an
    /// independent random permutation of destinations inside each mixed
    /// image.
    pub fn draw_scramble(tags: &[SourceTag], n_locations: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let keep = Self::draw_keep(tags, n_locations, rng)?;
        let perms: Vec<Vec<usize>> = (0..keep.n_images)
            .map(|_| {
                let mut p: Vec<usize> = (0..n_locations).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        keep.permute_destinations(&perms)
    }

    /// Moves the cube at destination `d` of mixed image `i` to `perms[i][d]`.
    pub fn permute_destinations(&self, perms: &[Vec<usize>]) -> Result<Self> {
        if perms.len() != self.n_images {
            bail!(Consistency, "need one destination permutation per mixed image");
        }
        let mut entries = self.entries.clone();
        for (i, perm) in perms.iter().enumerate() {
            if perm.len() != self.n_locations {
                bail!(Consistency, "destination permutation has wrong length");
            }
            for (d, &to) in perm.iter().enumerate() {
                entries[i * self.n_locations + to] = self.entries[i * self.n_locations + d];
            }
        }
        Self::from_entries(self.n_images, self.n_locations, entries)
    }
}

fn labeled_count(perms: &[Vec<usize>], tags: &[SourceTag], image: usize) -> usize {
    perms.iter().filter(|p| tags[p[image]].split == Split::Labeled).count()
}

fn ensure_labeled_coverage(perms: &mut [Vec<usize>], tags: &[SourceTag]) {
    let n_img = tags.len();
    let n_lab = tags.iter().filter(|t| t.split == Split::Labeled).count();
    if n_lab == 0 || n_lab * perms.len() < n_img {
        return;
    }
    for i in 0..n_img {
        if labeled_count(perms, tags, i) > 0 {
            continue;
        }
        // Take a labeled cube from an image that holds more than one.
        'search: for k in 0..n_img {
            if k == i || labeled_count(perms, tags, k) < 2 {
                continue;
            }
            for p in perms.iter_mut() {
                if tags[p[k]].split == Split::Labeled {
                    p.swap(i, k);
                    break 'search;
                }
            }
        }
    }
}

fn check_batch<T: Block>(grids: &[CubeGrid<T>]) -> Result<()> {
    let Some(first) = grids.first() else {
        bail!(Consistency, "empty batch");
    };
    for g in grids {
        g.validate()?;
        if g.n != first.n || g.source_dims != first.source_dims {
            bail!(
                Dimension,
                "batch grids disagree: N={} {} vs N={} {}",
                g.n,
                g.source_dims,
                first.n,
                first.source_dims
            );
        }
        if !g.cubes[0].same_kind(&first.cubes[0]) {
            bail!(Consistency, "batch grids carry different payload kinds");
        }
    }
    Ok(())
}

/// Mixes the cubes of a batch according to `mask`.
///
/// Source image `s` is `grids[s]`; the returned grids are in destination
/// location order and record each cube's source tag and origin.
pub fn apply_mix<T: Block>(grids: &[CubeGrid<T>], mask: &MixMask) -> Result<Vec<CubeGrid<T>>> {
    check_batch(grids)?;
    mask.validate()?;
    let n = grids[0].n;
    let n_loc = n * n * n;
    if mask.n_images != grids.len() || mask.n_locations != n_loc {
        bail!(
            Consistency,
            "mask for {} images x {} locations does not fit a batch of {} x {n_loc}",
            mask.n_images,
            mask.n_locations,
            grids.len()
        );
    }
    let mut out = Vec::with_capacity(grids.len());
    for i in 0..grids.len() {
        let mut cubes = Vec::with_capacity(n_loc);
        let mut sources = Vec::with_capacity(n_loc);
        let mut origins = Vec::with_capacity(n_loc);
        for d in 0..n_loc {
            let e = mask.entry(i, d);
            let src = &grids[e.image];
            let Some(k) = src.locations.iter().position(|&j| j == e.location) else {
                bail!(Consistency, "source image {} has no cube at {}", e.image, e.location);
            };
            cubes.push(src.cubes[k].clone());
            sources.push(src.sources[k]);
            origins.push(src.origins[k]);
        }
        out.push(CubeGrid {
            cubes,
            n,
            source_dims: grids[0].source_dims,
            locations: (0..n_loc).collect(),
            sources,
            origins,
        });
    }
    Ok(out)
}

/// Cross-image mixing that keeps every cube at its original location.
///
/// With `mask = None` a fresh keep-mode mask is drawn from `rng`; the mask
/// actually used is returned so predictions can be recovered.
pub fn cross_mix<T: Block>(
    grids: &[CubeGrid<T>],
    mask: Option<&MixMask>,
    rng: &mut impl rand::Rng,
) -> Result<(Vec<CubeGrid<T>>, MixMask)> {
    check_batch(grids)?;
    let mask = match mask {
        Some(m) => m.clone(),
        None => {
            let tags: Vec<SourceTag> = grids.iter().map(|g| g.sources[0]).collect();
            let n = grids[0].n;
            MixMask::draw_keep(&tags, n * n * n, rng)?
        }
    };
    let mixed = apply_mix(grids, &mask)?;
    Ok((mixed, mask))
}

/// Cross-image mixing that ignores original locations (ablation path).
pub fn scramble_mix<T: Block>(grids: &[CubeGrid<T>], rng: &mut impl rand::Rng) -> Result<(Vec<CubeGrid<T>>, MixMask)> {
    check_batch(grids)?;
    let tags: Vec<SourceTag> = grids.iter().map(|g| g.sources[0]).collect();
    let n = grids[0].n;
    let mask = MixMask::draw_scramble(&tags, n * n * n, rng)?;
    let mixed = apply_mix(grids, &mask)?;
    Ok((mixed, mask))
}

/// Mixes whole maps (images, labels or gradients) by `mask` and returns the
/// assembled mixed maps.
pub fn mix_maps<T: Block>(maps: &[T], mask: &MixMask, n: usize) -> Result<Vec<T>> {
    let grids = maps.iter().map(|m| partition(m, n)).collect::<Result<Vec<_>>>()?;
    apply_mix(&grids, mask)?.iter().map(recover).collect()
}

/// Routes mixed-image predictions back to their source images.
///
/// `pred_mixed[i]` is the prediction for mixed image `i`; output `s` is the
/// full-size map of source image `s` assembled from the prediction cubes that
/// originated there.
pub fn cross_recover<T: Block>(pred_mixed: &[T], mask: &MixMask, n: usize) -> Result<Vec<T>> {
    mask.validate()?;
    let n_loc = n * n * n;
    if pred_mixed.len() != mask.n_images || mask.n_locations != n_loc {
        bail!(
            Consistency,
            "mask for {} images x {} locations does not match {} predictions with N={n}",
            mask.n_images,
            mask.n_locations,
            pred_mixed.len()
        );
    }
    let dims = pred_mixed[0].dims();
    if pred_mixed.iter().any(|p| p.dims() != dims || !p.same_kind(&pred_mixed[0])) {
        bail!(Consistency, "mixed predictions disagree in shape");
    }
    let parts = pred_mixed.iter().map(|p| partition(p, n)).collect::<Result<Vec<_>>>()?;
    let cube = dims.div(n);
    let mut out: Vec<T> = (0..mask.n_images).map(|_| pred_mixed[0].blank(dims)).collect();
    for i in 0..mask.n_images {
        for d in 0..n_loc {
            let e = mask.entry(i, d);
            out[e.image].paste(location_offset(e.location, n, cube), &parts[i].cubes[d]);
        }
    }
    Ok(out)
}

/// Randomly permutes the processing order of the cubes. Location metadata
/// travels with each cube.
pub fn shuffle_within<T: Block>(g: &CubeGrid<T>, rng: &mut impl rand::Rng) -> CubeGrid<T> {
    let mut order: Vec<usize> = (0..g.cubes.len()).collect();
    order.shuffle(rng);
    reorder(g, &order)
}

/// Returns the grid with slots sorted by location.
pub fn unshuffle<T: Block>(g: &CubeGrid<T>) -> CubeGrid<T> {
    let mut order: Vec<usize> = (0..g.cubes.len()).collect();
    order.sort_by_key(|&k| g.locations[k]);
    reorder(g, &order)
}

/// New grid whose slot `k` is slot `order[k]` of `g`.
pub fn reorder<T: Block>(g: &CubeGrid<T>, order: &[usize]) -> CubeGrid<T> {
    CubeGrid {
        cubes: order.iter().map(|&k| g.cubes[k].clone()).collect(),
        n: g.n,
        source_dims: g.source_dims,
        locations: order.iter().map(|&k| g.locations[k]).collect(),
        sources: order.iter().map(|&k| g.sources[k]).collect(),
        origins: order.iter().map(|&k| g.origins[k]).collect(),
    }
}
