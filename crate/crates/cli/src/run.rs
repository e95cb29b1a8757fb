//! Training runs on disk: manifest, metrics, checkpoints, validation and
//! the final held-out evaluation.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use magicnet_core::eval::{evaluate, MetricsTable};
use magicnet_core::phantom::{make_dataset, make_test_set, Dataset};
use magicnet_core::trainer::{run_until, TrainData, TrainState};
use magicnet_core::volume::{LabelMap, Volume};
use magicnet_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, Split};
use crate::error::{CliError, IoContext, Result};
use crate::metrics::{self, CsvLog};

pub const RUN_MANIFEST: &str = "manifest.toml";
pub const METRICS: &str = "metrics.csv";
pub const VALIDATION: &str = "validation.csv";
pub const CHECKPOINT: &str = "checkpoint.mgck";
pub const SUMMARY: &str = "summary.csv";
pub const PLOT_DATA: &str = "plot_data.csv";

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub generator: String,
    pub seed: u64,
    pub config: RunConfig,
}

pub type EvalCases = Vec<(String, Volume, LabelMap)>;

/// Training set and held-out cases for `cfg`.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, EvalCases)> {
    match &cfg.data.dir {
        Some(dir) => Ok((dataset::load_training(dir)?, dataset::load_eval_cases(dir, Split::Test)?)),
        None => {
            let spec = cfg.data.phantom_spec();
            let (ds, _) = make_dataset(&spec, cfg.data.cases, cfg.data.labeled_fraction, cfg.seed)?;
            let test = make_test_set(&spec, cfg.data.test_cases, cfg.seed)?
                .into_iter()
                .map(|c| (c.name, c.volume, c.labels))
                .collect();
            Ok((ds, test))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `<out>/checkpoint.mgck` when it exists.
    pub resume: bool,
    /// Stop (with a checkpoint) after this many iterations instead of
    /// `max_iter`; used to simulate interruptions.
    pub stop_after: Option<u64>,
    /// Skip the final held-out evaluation.
    pub skip_eval: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub state: TrainState,
    /// Teacher and student scores on the held-out cases.
    pub tables: Vec<MetricsTable>,
}

/// Number of leading rows whose iteration is below `iteration`.
fn rows_before(path: &Path, iteration: u64) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let mut rd = csv::Reader::from_path(path).map_err(|e| CliError::parse(path, e))?;
    let mut n = 0;
    for rec in rd.records() {
        let rec = rec.map_err(|e| CliError::parse(path, e))?;
        let it: u64 = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| CliError::parse(path, "bad iteration"))?;
        if it >= iteration {
            break;
        }
        n += 1;
    }
    Ok(n)
}

pub fn train(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out).at(out)?;
    let manifest = RunManifest { generator: crate::version_string(), seed: cfg.seed, config: cfg.clone() };
    let mpath = out.join(RUN_MANIFEST);
    std::fs::write(&mpath, toml::to_string(&manifest).expect("manifest serializes")).at(&mpath)?;

    let tcfg = cfg.resolved_train();
    let (ds, test) = prepare_data(cfg)?;
    let data = TrainData::from_dataset(&ds)?;
    let ckpt = out.join(CHECKPOINT);
    let state = if opts.resume && ckpt.exists() { Some(checkpoint::load(&ckpt)?) } else { None };
    let start = state.as_ref().map_or(0, |s| s.iteration);

    let c = tcfg.network.num_classes;
    let mheader = metrics::step_header(c);
    let mpath = out.join(METRICS);
    let keep = if start > 0 { Some(start as usize) } else { None };
    let mut mlog = CsvLog::open(&mpath, &mheader, keep)?;
    let vheader = metrics::validation_header(c);
    let vpath = out.join(VALIDATION);
    let vkeep = if start > 0 { Some(rows_before(&vpath, start + 1)?) } else { None };
    let mut vlog = CsvLog::open(&vpath, &vheader, vkeep)?;
    let val_cases: EvalCases = test.iter().take(cfg.schedule.validation_cases).cloned().collect();

    let failure: RefCell<Option<CliError>> = RefCell::new(None);
    let stop = opts.stop_after.unwrap_or(tcfg.max_iter).min(tcfg.max_iter);
    let result = run_until(&tcfg, &data, state, stop, |report, st| {
        let mut step = || -> Result<()> {
            mlog.write(&metrics::step_row(report))?;
            let done = report.iteration + 1;
            let every = |k: u64| k > 0 && done % k == 0;
            if every(cfg.schedule.checkpoint_every) {
                mlog.flush()?;
                checkpoint::save(&ckpt, st)?;
            }
            if every(cfg.schedule.validate_every) && !val_cases.is_empty() {
                for (name, p) in [("teacher", &st.teacher), ("student", &st.student)] {
                    let t = evaluate(p, &val_cases, &cfg.eval)?;
                    vlog.write(&metrics::validation_row(done, name, &t))?;
                }
                vlog.flush()?;
            }
            Ok(())
        };
        step().map_err(|e| {
            let msg = e.to_string();
            *failure.borrow_mut() = Some(e);
            CoreError::Consistency(msg)
        })
    });
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let state = result?;
    mlog.flush()?;
    vlog.flush()?;
    checkpoint::save(&ckpt, &state)?;

    let mut tables = Vec::new();
    if !opts.skip_eval && state.iteration == tcfg.max_iter && !test.is_empty() {
        for (name, p) in [("teacher", &state.teacher), ("student", &state.student)] {
            let mut t = evaluate(p, &test, &cfg.eval)?;
            t.label = name.to_string();
            tables.push(t);
        }
        metrics::write_summary(&out.join(SUMMARY), &tables)?;
        metrics::emit_plot_data(&tables, &out.join(PLOT_DATA))?;
    }
    Ok(RunOutput { dir: out.to_path_buf(), state, tables })
}
