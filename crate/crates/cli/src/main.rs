use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mgdif::booklet::Booklet;
use mgdif::data::ResponseMatrix;
use mgdif::estimation::AnalysisSetup;
use mgdif::harness::acceptance::AcceptanceRun;
use mgdif::harness::{
    self, analyze, metrics, render_report, resolve_output_dir, store, Method, PlanConfig, Profile, ReportFormat,
    RunPlan, ENV_OUT, ENV_WORKERS,
};
use mgdif::irt::Model;
use mgdif::simgen::{generate, ConditionSpec, DEFAULT_SEED};

#[derive(Parser)]
#[command(name = "mgdif", version, about = "Multi-group DIF detection and simulation")]
struct Cli {
    /// Item parameter file (TOML); the built-in mathematics booklet by default.
    #[arg(long, global = true)]
    booklet: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one replication of a condition as a response CSV plus a truth JSON sidecar.
    Simulate {
        /// Condition fingerprint, e.g. `g5-small_high-dif_b-p20`; the seed suffix is optional.
        condition: String,
        #[arg(long, default_value_t = 0)]
        rep: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Output CSV; the truth sidecar is written next to it.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run DIF methods on a response CSV and write per-item results.
    Analyze {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Reference group name; the first group in the file by default.
        #[arg(long)]
        reference: Option<String>,
        /// Methods to run (comma separated); all by default.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Model for every item when the file's items are not in the booklet.
        #[arg(long)]
        model: Option<Model>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Run (or resume) a Monte Carlo plan.
    Run {
        /// TOML plan file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Plan profile when no config is given.
        #[arg(long, default_value = "desk")]
        profile: Profile,
        /// Output directory; overrides DIFMG_OUT and the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = ENV_WORKERS)]
        workers: Option<usize>,
    },
    /// Render tables and figures from a metrics file.
    Report {
        /// Run directory containing metrics.csv.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
    },
    /// Evaluate the acceptance criteria; exits nonzero when any fails.
    Verify {
        /// Criteria to evaluate (comma separated); all by default.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        replications: usize,
        #[arg(long, env = ENV_WORKERS)]
        workers: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_booklet(path: Option<&Path>) -> Result<Booklet> {
    match path {
        Some(p) => Booklet::from_path(p).with_context(|| format!("reading booklet {}", p.display())),
        None => Ok(Booklet::timss_2019()),
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let booklet = load_booklet(cli.booklet.as_deref())?;
    match cli.command {
        Command::Simulate { condition, rep, seed, out } => simulate(&booklet, &condition, rep, seed, &out),
        Command::Analyze { input, out, reference, methods, model, alpha } => {
            analyze_file(&booklet, &input, &out, reference.as_deref(), &methods, model, alpha)
        }
        Command::Run { config, profile, out, workers } => {
            let (mut plan, config_out) = match &config {
                Some(path) => {
                    let cfg = PlanConfig::from_path(path).with_context(|| format!("reading {}", path.display()))?;
                    let out = cfg.output.clone();
                    (cfg.into_plan()?, out)
                }
                None => (RunPlan::profile(profile, DEFAULT_SEED), None),
            };
            if let Some(w) = workers {
                plan.workers = w;
            }
            plan.validate()?;
            let dir = resolve_output_dir(out.as_deref(), config_out.as_deref());
            let summary = harness::run(&plan, &booklet, &dir)?;
            println!(
                "{} units computed, {} already complete; metrics in {}",
                summary.computed,
                summary.skipped,
                summary.metrics_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dir, format } => {
            let dir = resolve_output_dir(dir.as_deref(), None);
            let cells = metrics::read_metrics(dir.join(harness::METRICS_FILE))
                .with_context(|| format!("reading metrics in {}", dir.display()))?;
            for path in render_report(&cells, format, &dir.join("report"))? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { criteria, out, replications, workers } => {
            let dir = out
                .or_else(|| std::env::var_os(ENV_OUT).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("acceptance"));
            let mut run = AcceptanceRun::new(dir);
            run.replications = replications;
            if let Some(w) = workers {
                run.workers = w;
            }
            let ids: Vec<u8> = if criteria.is_empty() { (1..=9).collect() } else { criteria };
            if let Some(bad) = ids.iter().find(|id| !(1..=9).contains(*id)) {
                bail!("no criterion {bad}");
            }
            let metrics = if ids.iter().any(|id| *id <= 6) { run.simulate(&booklet)? } else { Vec::new() };
            let mut failed = 0;
            for id in ids {
                let outcome = run.criterion(id, &metrics, &booklet);
                failed += usize::from(!outcome.passed);
                println!("{outcome}");
            }
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn simulate(booklet: &Booklet, condition: &str, rep: usize, seed: u64, out: &Path) -> Result<ExitCode> {
    let spec: ConditionSpec = if condition.rsplit('-').next().is_some_and(|s| s.starts_with('s')) {
        condition.parse()?
    } else {
        format!("{condition}-s{seed}").parse()?
    };
    let ds = generate(&spec, rep, booklet)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ds.data.write_csv_path(out)?;
    let sidecar = out.with_extension("truth.json");
    std::fs::write(&sidecar, ds.truth_json()?)?;
    println!("{} ({} persons) and {}", out.display(), ds.data.n_persons(), sidecar.display());
    Ok(ExitCode::SUCCESS)
}

fn analyze_file(
    booklet: &Booklet,
    input: &Path,
    out: &Path,
    reference: Option<&str>,
    methods: &[Method],
    model: Option<Model>,
    alpha: f64,
) -> Result<ExitCode> {
    let mut data = ResponseMatrix::from_csv_path(input).with_context(|| format!("reading {}", input.display()))?;
    if let Some(r) = reference {
        data = data.with_reference(r)?;
    }
    let models = match model {
        Some(m) => vec![m; data.n_items()],
        None => {
            let ids = booklet.item_ids();
            let all = booklet.models();
            data.item_ids()
                .iter()
                .map(|id| ids.iter().position(|b| b == id).map(|j| all[j]))
                .collect::<Option<Vec<Model>>>()
                .context("items are not in the booklet; pass --model")?
        }
    };
    let methods = if methods.is_empty() { Method::ALL.to_vec() } else { methods.to_vec() };
    let setup = AnalysisSetup::new(models);
    let name = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut w = csv::Writer::from_path(out)?;
    let mut failures = 0;
    for outcome in analyze(&data, &setup, &methods, alpha) {
        if let Err(e) = &outcome.result {
            eprintln!("{}: {e}", outcome.method);
            failures += 1;
        }
        for row in store::outcome_rows(&name, 0, &outcome, data.item_ids(), data.group_names(), &[]) {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    println!("{}", out.display());
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
