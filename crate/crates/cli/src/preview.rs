//! Writes magic-cube mixes of phantom cases for visual inspection.

use std::path::Path;

use magicnet_core::magic_cube::{location_offset, mix_maps, partition, shuffle_within, MixMask, SourceTag};
use magicnet_core::phantom::{generate_case, PhantomSpec};
use magicnet_core::rng::{self, stream};
use magicnet_core::volume::{Block, LabelMap, Volume};
use serde::Serialize;

use crate::error::{IoContext, Result};
use crate::mgv;

#[derive(Debug, Serialize)]
struct MaskEntry {
    mixed: usize,
    location: usize,
    source_image: usize,
    source_location: usize,
}

#[derive(Debug, Serialize)]
struct MaskSidecar {
    n: usize,
    images: usize,
    scramble: bool,
    seed: u64,
    entries: Vec<MaskEntry>,
}

/// Generates `images` phantoms, mixes them with an `n`-cube mask and writes
/// inputs, mixes, per-voxel source maps, within-image shuffles and a
/// `mask.toml` description into `out`.
pub fn write_preview(spec: &PhantomSpec, n: usize, images: usize, scramble: bool, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).at(out)?;
    let cases = (0..images)
        .map(|i| generate_case(spec, &mut rng::derive(seed, stream::PHANTOM_CASE, i as u64)))
        .collect::<magicnet_core::Result<Vec<_>>>()?;
    let mut r = rng::derive(seed, stream::TRAIN_STEP, 0);
    let tags: Vec<SourceTag> =
        (0..images).map(|i| if i % 2 == 0 { SourceTag::labeled(i) } else { SourceTag::unlabeled(i) }).collect();
    let n_loc = n * n * n;
    let mask = if scramble {
        MixMask::draw_scramble(&tags, n_loc, &mut r)?
    } else {
        MixMask::draw_keep(&tags, n_loc, &mut r)?
    };

    let vols: Vec<Volume> = cases.iter().map(|c| c.0.clone()).collect();
    let labels: Vec<LabelMap> = cases.iter().map(|c| c.1.clone()).collect();
    let dims = vols[0].dims();
    let sources: Vec<LabelMap> = (0..images)
        .map(|i| LabelMap::new(dims, images, vec![(i + 1) as u8; dims.len()]))
        .collect::<magicnet_core::Result<_>>()?;
    let mixed_v = mix_maps(&vols, &mask, n)?;
    let mixed_y = mix_maps(&labels, &mask, n)?;
    let mixed_s = mix_maps(&sources, &mask, n)?;
    for i in 0..images {
        mgv::write_volume(&out.join(format!("input_{i}.img.mgv")), &vols[i])?;
        mgv::write_labels(&out.join(format!("input_{i}.lbl.mgv")), &labels[i])?;
        mgv::write_volume(&out.join(format!("mixed_{i}.img.mgv")), &mixed_v[i])?;
        mgv::write_labels(&out.join(format!("mixed_{i}.lbl.mgv")), &mixed_y[i])?;
        mgv::write_labels(&out.join(format!("mixed_{i}.src.mgv")), &mixed_s[i])?;
        // Cubes laid out in their shuffled processing order.
        let g = shuffle_within(&partition(&vols[i], n)?, &mut r);
        let mut jig = vols[i].blank(dims);
        for (slot, cube) in g.cubes().iter().enumerate() {
            jig.paste(location_offset(slot, n, g.cube_dims()), cube);
        }
        mgv::write_volume(&out.join(format!("shuffled_{i}.img.mgv")), &jig)?;
    }
    let entries = (0..images)
        .flat_map(|m| (0..n_loc).map(move |j| (m, j)))
        .map(|(m, j)| {
            let e = mask.entry(m, j);
            MaskEntry { mixed: m, location: j, source_image: e.image, source_location: e.location }
        })
        .collect();
    let sidecar = MaskSidecar { n, images, scramble, seed, entries };
    let path = out.join("mask.toml");
    std::fs::write(&path, toml::to_string(&sidecar).expect("mask serializes")).at(&path)
}
