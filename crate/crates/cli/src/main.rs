use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magicnet::ablate;
use magicnet::checkpoint;
use magicnet::config::RunConfig;
use magicnet::dataset::{self, Split};
use magicnet::error::{CliError, IoContext, Result};
use magicnet::metrics;
use magicnet::preview;
use magicnet::run::{self, RunOptions};
use magicnet::selftest;
use magicnet_core::eval::evaluate;
use magicnet_core::model::forward_seg;
use magicnet_core::phantom::{make_dataset, make_test_set, PhantomSpec};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "MAGICNET_OUT";

#[derive(Debug, Parser)]
#[command(name = "magicnet", version, about = "Magic-cube semi-supervised segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic dataset generation.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Train one configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a generated dataset.
    Eval(EvalArgs),
    /// Write magic-cube mixes of phantom cases for inspection.
    Preview(PreviewArgs),
    /// Run a named ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Run the built-in invariant suites.
    Selftest,
}

#[derive(Debug, Subcommand)]
enum PhantomCommand {
    /// Write a labeled/unlabeled/test split as MGV1 files plus a manifest.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    cases: usize,
    #[arg(long, default_value_t = 0.1)]
    labeled_fraction: f64,
    #[arg(long, default_value_t = 20)]
    test_cases: usize,
    /// Phantom spec as TOML; the desk default when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Config override `key=value`; repeatable.
    #[arg(long = "ablate", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop after this many iterations (a checkpoint is written).
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest written by `phantom generate`.
    #[arg(long)]
    cases: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Summary table CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-case, per-organ CSV for box plots.
    #[arg(long)]
    plot_data: Option<PathBuf>,
    /// Pooled student bottleneck features per case.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Optional run config supplying evaluation settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    images: usize,
    #[arg(long)]
    scramble: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    grid: String,
    /// Base config; the built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only list the runs the grid expands to.
    #[arg(long)]
    dry_run: bool,
}

fn out_dir(explicit: Option<PathBuf>, leaf: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(leaf)
    })
}

fn read_spec(path: &Path) -> Result<PhantomSpec> {
    let text = std::fs::read_to_string(path).at(path)?;
    let spec: PhantomSpec = toml::from_str(&text).map_err(|e| CliError::parse(path, e))?;
    spec.validate()?;
    Ok(spec)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => PhantomSpec::desk_default(),
    };
    let out = out_dir(a.out, "phantom");
    let (ds, sidecar) = make_dataset(&spec, a.cases, a.labeled_fraction, a.seed)?;
    let test = make_test_set(&spec, a.test_cases, a.seed)?;
    let m = dataset::write(&out, &spec, &ds, &sidecar, &test)?;
    println!(
        "wrote {} labeled, {} unlabeled and {} test cases to {}",
        m.labeled.len(),
        m.unlabeled.len(),
        m.test.len(),
        out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    for kv in &a.overrides {
        cfg.ablate(kv)?;
    }
    cfg.validate()?;
    let leaf = a.config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    let out = out_dir(a.out, &leaf);
    let opts = RunOptions { resume: a.resume, stop_after: a.stop_after, skip_eval: false };
    let res = run::train(&cfg, &out, &opts)?;
    println!("stopped at iteration {} in {}", res.state.iteration, out.display());
    for t in &res.tables {
        println!("{:8} avg DSC {:.2}  avg NSD {:.2}", t.label, t.mean_dsc(), t.mean_nsd());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let eval_cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.eval,
        None => Default::default(),
    };
    let state = checkpoint::load(&a.checkpoint)?;
    let cases = dataset::load_eval_cases(&a.cases, Split::parse(&a.split)?)?;
    if cases.is_empty() {
        return Err(CliError::Config(format!("split `{}` has no cases", a.split)));
    }
    let mut tables = Vec::new();
    for (name, p) in [("teacher", &state.teacher), ("student", &state.student)] {
        let mut t = evaluate(p, &cases, &eval_cfg)?;
        t.label = name.to_string();
        tables.push(t);
    }
    metrics::write_summary(&a.out, &tables)?;
    if let Some(p) = &a.plot_data {
        metrics::emit_plot_data(&tables, p)?;
    }
    if let Some(p) = &a.features {
        let rows = cases
            .iter()
            .map(|(name, v, _)| Ok((name.clone(), forward_seg(&state.student, v)?.1.pooled(1)?)))
            .collect::<magicnet_core::Result<Vec<_>>>()?;
        metrics::write_features(p, &rows)?;
    }
    for t in &tables {
        println!("{:8} avg DSC {:.2}  avg NSD {:.2}", t.label, t.mean_dsc(), t.mean_nsd());
    }
    Ok(())
}

fn preview(a: PreviewArgs) -> Result<()> {
    if a.n == 0 || a.images == 0 {
        return Err(CliError::Usage("--n and --images must be positive".into()));
    }
    let out = out_dir(a.out, "preview");
    preview::write_preview(&PhantomSpec::desk_default(), a.n, a.images, a.scramble, a.seed, &out)?;
    println!("wrote preview to {}", out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let variants = ablate::expand_grid(&a.grid)?;
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    if a.dry_run {
        for v in &variants {
            println!("{}: {}", v.name, v.overrides.join(" "));
        }
        return Ok(());
    }
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = out_dir(a.out, &format!("ablate-{}", a.grid));
    let rows = ablate::run_grid(&base, &variants, &a.seeds, &out, a.jobs)?;
    for r in &rows {
        println!("{:14} seed {:3}  avg DSC {:.2}  avg NSD {:.2}", r.variant, r.seed, r.avg_dsc, r.avg_nsd);
    }
    Ok(())
}

fn selftest() -> Result<()> {
    let checks = selftest::run_all();
    for c in &checks {
        println!("{} {:14} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Core(magicnet_core::Error::Numeric(format!("{failed} selftest suite(s) failed"))));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Phantom(PhantomCommand::Generate(a)) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Preview(a) => preview(a),
        Command::Ablate(a) => ablate(a),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("magicnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
