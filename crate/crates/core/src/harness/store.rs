use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::analysis::{ItemStatus, MethodOutcome};
use super::plan::Method;
use crate::error::Result;

/// One line of the result store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub condition: String,
    pub rep: usize,
    pub method: Method,
    /// Empty on a method-failure row.
    pub item: String,
    pub group: String,
    pub statistic: Option<f64>,
    pub cutoff: f64,
    pub flagged: bool,
    pub p_value: Option<f64>,
    pub truth: bool,
    pub status: ItemStatus,
}

/// `(condition, rep, method)`.
pub type CellKey = (String, usize, Method);

impl ResultRow {
    pub fn key(&self) -> CellKey {
        (self.condition.clone(), self.rep, self.method)
    }
}

/// Flattens one method's outcome on one replication into store rows.
pub fn outcome_rows(
    condition: &str,
    rep: usize,
    outcome: &MethodOutcome,
    item_ids: &[String],
    group_names: &[String],
    truth: &[usize],
) -> Vec<ResultRow> {
    let base = ResultRow {
        condition: condition.to_string(),
        rep,
        method: outcome.method,
        item: String::new(),
        group: String::new(),
        statistic: None,
        cutoff: outcome.cutoff,
        flagged: false,
        p_value: None,
        truth: false,
        status: ItemStatus::Failed,
    };
    match &outcome.result {
        Err(e) => {
            log::warn!("{condition} rep {rep} {}: {e}", outcome.method);
            vec![base]
        }
        Ok(items) => items
            .iter()
            .map(|o| ResultRow {
                item: item_ids[o.item].clone(),
                group: o.group.map(|g| group_names[g].clone()).unwrap_or_default(),
                statistic: o.statistic,
                flagged: o.flagged,
                p_value: o.p_value,
                truth: truth.contains(&o.item),
                status: o.status,
                ..base.clone()
            })
            .collect(),
    }
}

/// Append-only CSV of per-item results with a single serialized writer.
pub struct ResultStore {
    path: PathBuf,
    writer: Mutex<csv::Writer<File>>,
}

impl ResultStore {
    /// Opens or creates the store. Rows of incomplete cells (an interrupted
    /// write) are dropped and the file rewritten without them. Returns the
    /// store and its complete rows.
    pub fn open(path: impl AsRef<Path>, n_items: usize) -> Result<(Self, Vec<ResultRow>)> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let (rows, dirty) = if path.exists() { load(&path, n_items)? } else { (Vec::new(), true) };
        if dirty {
            let mut w = csv::Writer::from_path(&path)?;
            if rows.is_empty() {
                w.write_record(HEADER)?;
            }
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        let file = OpenOptions::new().append(true).open(&path)?;
        let writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok((
            ResultStore {
                path,
                writer: Mutex::new(writer),
            },
            rows,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends rows as one unit and flushes.
    pub fn append(&self, rows: &[ResultRow]) -> Result<()> {
        let mut w = self.writer.lock().expect("result writer poisoned");
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

const HEADER: [&str; 11] = [
    "condition", "rep", "method", "item", "group", "statistic", "cutoff", "flagged", "p_value", "truth", "status",
];

/// Reads every parseable row of a store.
pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut rows = Vec::new();
    for r in reader.deserialize() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => log::warn!("skipping unreadable result row: {e}"),
        }
    }
    Ok(rows)
}

/// Complete rows, plus whether anything was discarded.
fn load(path: &Path, n_items: usize) -> Result<(Vec<ResultRow>, bool)> {
    let rows = read_rows(path)?;
    let before = rows.len();
    let complete = complete_cells(&rows, n_items);
    let mut seen = BTreeSet::new();
    let kept: Vec<ResultRow> = rows
        .into_iter()
        .filter(|r| complete.contains(&r.key()))
        .filter(|r| seen.insert((r.key(), r.item.clone())))
        .collect();
    let text = std::fs::read(path)?;
    let dirty = kept.len() != before || text.last().is_some_and(|b| *b != b'\n');
    Ok((kept, dirty))
}

/// Cells holding either a failure row or one row per item.
pub fn complete_cells(rows: &[ResultRow], n_items: usize) -> BTreeSet<CellKey> {
    let mut items: BTreeMap<CellKey, BTreeSet<&str>> = BTreeMap::new();
    let mut failed = BTreeSet::new();
    for r in rows {
        if r.status == ItemStatus::Failed {
            failed.insert(r.key());
        } else {
            items.entry(r.key()).or_default().insert(r.item.as_str());
        }
    }
    items
        .into_iter()
        .filter(|(_, set)| set.len() == n_items)
        .map(|(k, _)| k)
        .chain(failed)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn row(rep: usize, item: &str) -> ResultRow {
        ResultRow {
            condition: "g2-small_low-dif_free-none-s1".into(),
            rep,
            method: Method::GmhUnadjusted,
            item: item.into(),
            group: String::new(),
            statistic: Some(0.5),
            cutoff: 0.05,
            flagged: false,
            p_value: Some(0.48),
            truth: false,
            status: ItemStatus::Tested,
        }
    }

    #[test]
    fn round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let (store, rows) = ResultStore::open(&path, 2).unwrap();
        assert!(rows.is_empty());
        store.append(&[row(0, "a"), row(0, "b")]).unwrap();
        store.append(&[row(1, "a")]).unwrap();
        drop(store);
        let (_, rows) = ResultStore::open(&path, 2).unwrap();
        assert_eq!(rows, [row(0, "a"), row(0, "b")]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("condition,rep,method,item,group,statistic,cutoff,flagged,p_value,truth,status\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn truncated_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let (store, _) = ResultStore::open(&path, 1).unwrap();
        store.append(&[row(0, "a")]).unwrap();
        drop(store);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "g2-small_low-dif_free-none-s1,1,gmh_unadj").unwrap();
        drop(f);
        let (store, rows) = ResultStore::open(&path, 1).unwrap();
        assert_eq!(rows, [row(0, "a")]);
        store.append(&[row(1, "a")]).unwrap();
        assert_eq!(read_rows(&path).unwrap(), [row(0, "a"), row(1, "a")]);
    }

    #[test]
    fn failure_rows_complete_a_cell() {
        let mut failed = row(3, "");
        failed.status = ItemStatus::Failed;
        let cells = complete_cells(&[failed.clone(), row(4, "a")], 29);
        assert!(cells.contains(&failed.key()));
        assert_eq!(cells.len(), 1);
    }
}
