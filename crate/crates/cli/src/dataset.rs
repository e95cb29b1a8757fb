//! On-disk phantom datasets.
//!
//! ```text
//! <dir>/manifest.toml            case lists, split, phantom spec, seed
//! <dir>/labeled/<case>.img.mgv   intensities
//! <dir>/labeled/<case>.lbl.mgv   labels
//! <dir>/unlabeled/<case>.img.mgv
//! <dir>/sidecar/<case>.lbl.mgv   unlabeled ground truth, read only by eval
//! <dir>/test/<case>.{img,lbl}.mgv
//! ```

use std::path::{Path, PathBuf};

use magicnet_core::phantom::{Dataset, LabeledCase, PhantomSpec, Sidecar, UnlabeledCase};
use magicnet_core::volume::{LabelMap, Volume};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};
use crate::mgv;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub num_classes: usize,
    pub labeled_fraction: f64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
    pub spec: PhantomSpec,
    pub generator: String,
}

/// Which cases an evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Labeled,
    /// Unlabeled cases scored against the sidecar truth.
    Unlabeled,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "test" => Ok(Split::Test),
            _ => Err(CliError::Usage(format!("unknown split `{s}` (labeled, unlabeled, test)"))),
        }
    }
}

fn img(dir: &Path, sub: &str, name: &str) -> PathBuf {
    dir.join(sub).join(format!("{name}.img.mgv"))
}

fn lbl(dir: &Path, sub: &str, name: &str) -> PathBuf {
    dir.join(sub).join(format!("{name}.lbl.mgv"))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).at(p)
}

pub fn write(
    dir: &Path,
    spec: &PhantomSpec,
    ds: &Dataset,
    sidecar: &Sidecar,
    test: &[LabeledCase],
) -> Result<DatasetManifest> {
    for sub in ["labeled", "unlabeled", "sidecar", "test"] {
        mkdir(&dir.join(sub))?;
    }
    for c in &ds.labeled {
        mgv::write_volume(&img(dir, "labeled", &c.name), &c.volume)?;
        mgv::write_labels(&lbl(dir, "labeled", &c.name), &c.labels)?;
    }
    for c in &ds.unlabeled {
        mgv::write_volume(&img(dir, "unlabeled", &c.name), &c.volume)?;
    }
    for c in &sidecar.unlabeled_truth {
        mgv::write_labels(&lbl(dir, "sidecar", &c.name), &c.labels)?;
    }
    for c in test {
        mgv::write_volume(&img(dir, "test", &c.name), &c.volume)?;
        mgv::write_labels(&lbl(dir, "test", &c.name), &c.labels)?;
    }
    let manifest = DatasetManifest {
        version: 1,
        seed: ds.seed,
        num_classes: ds.num_classes,
        labeled_fraction: ds.labeled_fraction,
        labeled: ds.labeled.iter().map(|c| c.name.clone()).collect(),
        unlabeled: ds.unlabeled.iter().map(|c| c.name.clone()).collect(),
        test: test.iter().map(|c| c.name.clone()).collect(),
        spec: spec.clone(),
        generator: crate::version_string(),
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, toml::to_string(&manifest).expect("manifest serializes")).at(&path)?;
    Ok(manifest)
}

/// Reads a manifest given either the dataset directory or the file itself.
pub fn read_manifest(path: &Path) -> Result<(PathBuf, DatasetManifest)> {
    let file = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(&file).at(&file)?;
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| CliError::parse(&file, e))?;
    Ok((dir, m))
}

fn check_classes(path: &Path, y: &LabelMap, m: &DatasetManifest) -> Result<()> {
    if y.num_classes() != m.num_classes {
        return Err(CliError::parse(path, format!("{} classes, manifest says {}", y.num_classes(), m.num_classes)));
    }
    Ok(())
}

/// Training view of a dataset; the sidecar directory is never opened.
pub fn load_training(path: &Path) -> Result<Dataset> {
    let (dir, m) = read_manifest(path)?;
    let labeled = m
        .labeled
        .iter()
        .map(|name| {
            let lp = lbl(&dir, "labeled", name);
            let labels = mgv::read_labels(&lp)?;
            check_classes(&lp, &labels, &m)?;
            Ok(LabeledCase { name: name.clone(), volume: mgv::read_volume(&img(&dir, "labeled", name))?, labels })
        })
        .collect::<Result<_>>()?;
    let unlabeled = m
        .unlabeled
        .iter()
        .map(|name| Ok(UnlabeledCase { name: name.clone(), volume: mgv::read_volume(&img(&dir, "unlabeled", name))? }))
        .collect::<Result<_>>()?;
    Ok(Dataset { num_classes: m.num_classes, labeled, unlabeled, seed: m.seed, labeled_fraction: m.labeled_fraction })
}

/// Cases with ground truth for evaluation.
pub fn load_eval_cases(path: &Path, split: Split) -> Result<Vec<(String, Volume, LabelMap)>> {
    let (dir, m) = read_manifest(path)?;
    let (names, img_dir, lbl_dir) = match split {
        Split::Labeled => (&m.labeled, "labeled", "labeled"),
        Split::Unlabeled => (&m.unlabeled, "unlabeled", "sidecar"),
        Split::Test => (&m.test, "test", "test"),
    };
    names
        .iter()
        .map(|name| {
            let lp = lbl(&dir, lbl_dir, name);
            let labels = mgv::read_labels(&lp)?;
            check_classes(&lp, &labels, &m)?;
            Ok((name.clone(), mgv::read_volume(&img(&dir, img_dir, name))?, labels))
        })
        .collect()
}
