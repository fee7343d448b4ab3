//! Monte Carlo runs over the simulation design.
//!
//! A [`RunPlan`] lists conditions, methods and the replication count. Each
//! `(condition, replication)` unit regenerates its dataset, runs the
//! requested methods and appends per-item rows to `results.csv`. Units whose
//! rows are already in the store are skipped, so an interrupted run resumes
//! where it stopped. Metrics are then aggregated from the store into
//! `metrics.csv`.

pub mod acceptance;
mod analysis;
pub mod metrics;
mod plan;
pub mod report;
pub mod store;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use analysis::{analyze, ItemOutcome, ItemStatus, MethodOutcome};
pub use metrics::{acceptance_band, aggregate, MetricsCell, RepScore, PRESENTED_BAND};
pub use plan::{
    design_conditions, resolve_output_dir, ConditionEntry, Family, Method, PlanConfig, Profile, RunPlan, ENV_OUT,
    ENV_WORKERS,
};
pub use report::{render_report, ReportFormat};
pub use store::{ResultRow, ResultStore};

use crate::booklet::Booklet;
use crate::error::{Error, Result};
use crate::estimation::AnalysisSetup;
use crate::simgen::generate;

pub const RESULTS_FILE: &str = "results.csv";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics: Vec<MetricsCell>,
    /// Units computed in this call.
    pub computed: usize,
    /// Units already complete in the store.
    pub skipped: usize,
    pub results_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Executes `plan`, resuming from `out_dir/results.csv` when present.
pub fn run(plan: &RunPlan, booklet: &Booklet, out_dir: &Path) -> Result<RunSummary> {
    plan.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let n_items = booklet.items.len();
    let results_path = out_dir.join(RESULTS_FILE);
    let (store, existing) = ResultStore::open(&results_path, n_items)?;
    let done = store::complete_cells(&existing, n_items);
    drop(existing);

    let mut units = Vec::new();
    let mut skipped = 0;
    for cond in &plan.conditions {
        let key = cond.fingerprint();
        for rep in 0..plan.replications {
            let missing: Vec<Method> = plan
                .methods
                .iter()
                .copied()
                .filter(|m| !done.contains(&(key.clone(), rep, *m)))
                .collect();
            if missing.is_empty() {
                skipped += 1;
            } else {
                units.push((*cond, rep, missing));
            }
        }
    }

    let setup = AnalysisSetup::for_booklet(booklet);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let total = units.len();
    pool.install(|| {
        units.par_iter().try_for_each(|(cond, rep, methods)| -> Result<()> {
            let ds = generate(cond, *rep, booklet)?;
            let key = cond.fingerprint();
            let rows: Vec<ResultRow> = analyze(&ds.data, &setup, methods, plan.alpha)
                .iter()
                .flat_map(|o| store::outcome_rows(&key, *rep, o, ds.data.item_ids(), ds.data.group_names(), &ds.truth))
                .collect();
            store.append(&rows)?;
            log::info!("{key} rep {rep} done");
            Ok(())
        })
    })?;
    drop(store);

    let metrics = plan_metrics(plan, &results_path)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    metrics::write_metrics(&metrics, &metrics_path)?;
    Ok(RunSummary {
        metrics,
        computed: total,
        skipped,
        results_path,
        metrics_path,
    })
}

/// Metrics for the plan's cells only, from the store at `results_path`.
pub fn plan_metrics(plan: &RunPlan, results_path: &Path) -> Result<Vec<MetricsCell>> {
    let conditions: BTreeSet<String> = plan.conditions.iter().map(|c| c.fingerprint()).collect();
    let rows: Vec<ResultRow> = store::read_rows(results_path)?
        .into_iter()
        .filter(|r| r.rep < plan.replications && plan.methods.contains(&r.method) && conditions.contains(&r.condition))
        .collect();
    aggregate(&rows)
}
