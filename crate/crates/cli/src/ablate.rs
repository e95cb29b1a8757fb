//! Ablation grids: named sets of config overrides run over several seeds.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::RunConfig;
use crate::error::{CliError, IoContext, Result};
use crate::run::{self, RunOptions};

/// One configuration of a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<String>,
}

fn variant(name: &str, overrides: &[&str]) -> Variant {
    Variant { name: name.to_string(), overrides: overrides.iter().map(|s| s.to_string()).collect() }
}

pub const GRIDS: [&str; 5] = ["table3", "cross-design", "blending", "augment", "n"];

/// Expands a named grid.
///
/// - `table3`: component rows from the mean-teacher baseline to the full model.
/// - `cross-design`: keep/scramble × U/LU mixing on the cross-only model.
/// - `blending`: teacher, mutual and blended supervision of the full model.
/// - `augment`: magic-cube mixing against CutMix, CutOut and MixUp.
/// - `n`: two and three cubes per axis on the full model.
pub fn expand_grid(name: &str) -> Result<Vec<Variant>> {
    Ok(match name {
        "table3" => vec![
            variant("mt", &["preset=mt"]),
            variant("cross", &["preset=cross"]),
            variant("cross-in", &["preset=cross-in"]),
            variant("cross-loc", &["preset=cross-loc"]),
            variant("cross-in-loc", &["preset=cross-in-loc"]),
            variant("full", &["preset=full"]),
        ],
        "cross-design" => vec![
            variant("keep-U", &["preset=cross", "mix_scope=U"]),
            variant("keep-LU", &["preset=cross", "mix_scope=LU"]),
            variant("scramble-U", &["preset=cross", "mix_scope=U", "scramble=on"]),
            variant("scramble-LU", &["preset=cross", "mix_scope=LU", "scramble=on"]),
        ],
        "blending" => vec![
            variant("teacher-sup", &["preset=full", "sup_mode=teacher"]),
            variant("mutual-sup", &["preset=full", "sup_mode=mutual"]),
            variant("blending", &["preset=full"]),
        ],
        "augment" => vec![
            variant("cutmix", &["preset=cross", "baseline=cutmix"]),
            variant("cutout", &["preset=cross", "baseline=cutout"]),
            variant("mixup", &["preset=cross", "baseline=mixup"]),
            variant("magic-cube", &["preset=cross"]),
        ],
        "n" => vec![variant("n2", &["preset=full", "n=2"]), variant("n3", &["preset=full", "n=3"])],
        _ => return Err(CliError::Usage(format!("unknown grid `{name}` (one of {})", GRIDS.join(", ")))),
    })
}

/// Student scores of one finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub avg_dsc: f64,
    pub avg_nsd: f64,
    pub class_dsc: Vec<f64>,
}

/// Runs every variant for every seed with up to `jobs` worker threads and
/// writes `<out>/ablation.csv`. Rows come back in grid order.
pub fn run_grid(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let mut tasks: Vec<(String, RunConfig, PathBuf)> = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            for kv in &v.overrides {
                cfg.ablate(kv)?;
            }
            cfg.seed = seed;
            cfg.validate()?;
            tasks.push((v.name.clone(), cfg, out.join(format!("{}-seed{seed}", v.name))));
        }
    }
    std::fs::create_dir_all(out).at(out)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new(tasks.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((name, cfg, dir)) = tasks.get(i) else { break };
                let res = run::train(cfg, dir, &RunOptions::default()).and_then(|o| {
                    let t = o.tables.iter().find(|t| t.label == "student").ok_or_else(|| {
                        CliError::Config(format!("run {name} produced no evaluation (no held-out cases?)"))
                    })?;
                    Ok(AblationRow {
                        variant: name.clone(),
                        seed: cfg.seed,
                        avg_dsc: t.mean_dsc(),
                        avg_nsd: t.mean_nsd(),
                        class_dsc: (1..=t.num_classes).map(|c| t.class_dsc(c).0).collect(),
                    })
                });
                results.lock().expect("result lock")[i] = Some(res);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect::<Result<Vec<_>>>()?;
    write_rows(&out.join("ablation.csv"), &rows)?;
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let c = rows.iter().map(|r| r.class_dsc.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::parse(path, e))?;
    let mut header = vec!["variant".to_string(), "seed".to_string(), "avg_dsc".to_string(), "avg_nsd".to_string()];
    header.extend((1..=c).map(|k| format!("dsc_{k}")));
    w.write_record(&header).map_err(|e| CliError::parse(path, e))?;
    for r in rows {
        let mut rec =
            vec![r.variant.clone(), r.seed.to_string(), format!("{:.4}", r.avg_dsc), format!("{:.4}", r.avg_nsd)];
        rec.extend(r.class_dsc.iter().map(|d| format!("{d:.4}")));
        w.write_record(&rec).map_err(|e| CliError::parse(path, e))?;
    }
    w.flush().at(path)
}
