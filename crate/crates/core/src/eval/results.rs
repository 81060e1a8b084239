//! Result rows, their aggregation over seeds, and the append-only results store.
//!
//! A results directory holds `results.csv` (one row per finished cell) and
//! `index.json` (cell key to metadata). Writers take an exclusive lock on `.lock`, append
//! the CSV row, then publish the index entry, so a cell counts as done only once both
//! exist. Opening a store drops malformed, duplicated or unindexed rows.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::Setup;

pub const CSV_FILE: &str = "results.csv";
pub const INDEX_FILE: &str = "index.json";
const LOCK_FILE: &str = ".lock";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub kernel: String,
    pub model: String,
    pub setup: Setup,
    pub noise_s: f64,
    pub noise_r: f64,
    pub seed: u64,
    pub target_ll: f64,
    pub n_tasks: usize,
    #[serde(rename = "K_eval")]
    pub k_eval: usize,
}

impl ResultRow {
    /// Identity of the cell this row belongs to.
    pub fn key(&self) -> String {
        cell_key(
            &self.dataset,
            &self.kernel,
            &self.model,
            self.setup,
            self.noise_s,
            self.noise_r,
            self.seed,
        )
    }

    fn group(&self) -> GroupKey {
        GroupKey {
            dataset: self.dataset.clone(),
            kernel: self.kernel.clone(),
            model: self.model.clone(),
            setup: self.setup,
            noise_s: OrderedF64(self.noise_s),
            noise_r: OrderedF64(self.noise_r),
        }
    }
}

pub fn cell_key(
    dataset: &str,
    kernel: &str,
    model: &str,
    setup: Setup,
    s: f64,
    r: f64,
    seed: u64,
) -> String {
    format!("{dataset}|{kernel}|{model}|{setup}|{s}|{r}|{seed}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedF64(f64);

impl Eq for OrderedF64 {}
impl PartialOrd for OrderedF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrderedF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    dataset: String,
    kernel: String,
    model: String,
    setup: Setup,
    noise_s: OrderedF64,
    noise_r: OrderedF64,
}

/// Mean and spread of one configuration across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub kernel: String,
    pub model: String,
    pub setup: Setup,
    pub noise_s: f64,
    pub noise_r: f64,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation; absent with a single seed.
    pub std: Option<f64>,
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.3} ± {:.3}", self.mean, s),
            None => write!(f, "{:.3}", self.mean),
        }
    }
}

/// Groups rows by everything but the seed, in a stable order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.group()).or_default().push(r.target_ll);
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = (n >= 2).then(|| {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            });
            Aggregate {
                dataset: k.dataset,
                kernel: k.kernel,
                model: k.model,
                setup: k.setup,
                noise_s: k.noise_s.0,
                noise_r: k.noise_r.0,
                seeds: n,
                mean,
                std,
            }
        })
        .collect()
}

/// Rows plus their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<Aggregate>,
}

impl EvalResult {
    pub fn new(rows: Vec<ResultRow>) -> Self {
        let aggregates = aggregate(&rows);
        EvalResult { rows, aggregates }
    }

    /// The aggregate for one configuration, matching noise by the std and rate.
    pub fn find(&self, model: &str, setup: Setup, s: f64, r: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.model == model && a.setup == setup && a.noise_s == s && a.noise_r == r)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Index {
    version: u32,
    cells: BTreeMap<String, serde_json::Value>,
}

/// Append-only results directory. See the module docs for the layout.
#[derive(Debug, Clone)]
pub struct ResultsStore {
    dir: PathBuf,
}

struct Lock(#[allow(dead_code)] File);

impl ResultsStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let store = ResultsStore { dir: dir.into() };
        fs::create_dir_all(&store.dir)?;
        let _lock = store.lock()?;
        store.reconcile()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> Result<Lock> {
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.dir.join(LOCK_FILE))?;
        f.lock()?;
        Ok(Lock(f))
    }

    fn read_index(&self) -> Result<Index> {
        let path = self.dir.join(INDEX_FILE);
        if !path.exists() {
            return Ok(Index {
                version: INDEX_VERSION,
                cells: BTreeMap::new(),
            });
        }
        let idx: Index = serde_json::from_str(&fs::read_to_string(path)?)?;
        if idx.version != INDEX_VERSION {
            return Err(Error::Format(format!(
                "results index version {} is not {INDEX_VERSION}",
                idx.version
            )));
        }
        Ok(idx)
    }

    fn write_index(&self, idx: &Index) -> Result<()> {
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(idx)?)?;
        fs::rename(tmp, self.dir.join(INDEX_FILE))?;
        Ok(())
    }

    /// Every parseable CSV row, in file order, plus whether anything failed to parse.
    fn read_csv(&self) -> Result<(Vec<ResultRow>, bool)> {
        let path = self.dir.join(CSV_FILE);
        if !path.exists() {
            return Ok((Vec::new(), false));
        }
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let mut rows = Vec::new();
        let mut damaged = false;
        for rec in reader.deserialize::<ResultRow>() {
            match rec {
                Ok(r) if r.target_ll.is_finite() => rows.push(r),
                _ => damaged = true,
            }
        }
        Ok((rows, damaged))
    }

    fn write_csv(&self, rows: &[ResultRow]) -> Result<()> {
        let tmp = self.dir.join(format!("{CSV_FILE}.tmp"));
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        fs::rename(tmp, self.dir.join(CSV_FILE))?;
        Ok(())
    }

    /// Keeps rows that are indexed and unique; drops index entries without a row.
    fn reconcile(&self) -> Result<()> {
        let mut idx = self.read_index()?;
        let (rows, damaged) = self.read_csv()?;
        let mut seen = HashSet::new();
        let kept: Vec<ResultRow> = rows
            .iter()
            .filter(|r| idx.cells.contains_key(&r.key()) && seen.insert(r.key()))
            .cloned()
            .collect();
        if damaged || kept.len() != rows.len() {
            log::warn!(
                "results: dropped {} incomplete or duplicate rows",
                rows.len() - kept.len()
            );
            self.write_csv(&kept)?;
        }
        let before = idx.cells.len();
        idx.cells.retain(|k, _| seen.contains(k));
        if idx.cells.len() != before {
            self.write_index(&idx)?;
        }
        Ok(())
    }

    pub fn rows(&self) -> Result<Vec<ResultRow>> {
        let idx = self.read_index()?;
        Ok(self
            .read_csv()?
            .0
            .into_iter()
            .filter(|r| idx.cells.contains_key(&r.key()))
            .collect())
    }

    pub fn contains(&self, key: &str) -> Result<bool> {
        Ok(self.read_index()?.cells.contains_key(key))
    }

    pub fn metadata(&self, key: &str) -> Result<Option<serde_json::Value>> {
        Ok(self.read_index()?.cells.get(key).cloned())
    }

    pub fn result(&self) -> Result<EvalResult> {
        Ok(EvalResult::new(self.rows()?))
    }

    /// Records a finished cell. Returns false, writing nothing, when the cell is
    /// already present.
    pub fn append(&self, row: &ResultRow, meta: serde_json::Value) -> Result<bool> {
        if !row.target_ll.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite target log-likelihood for {}",
                row.key()
            )));
        }
        let _lock = self.lock()?;
        let mut idx = self.read_index()?;
        let key = row.key();
        if idx.cells.contains_key(&key) {
            return Ok(false);
        }
        let path = self.dir.join(CSV_FILE);
        let fresh = !path.exists() || fs::metadata(&path)?.len() == 0;
        let mut w = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(Vec::new());
        w.serialize(row)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        f.write_all(&bytes)?;
        f.sync_data()?;
        idx.cells.insert(key, meta);
        self.write_index(&idx)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, s: f64, seed: u64, ll: f64) -> ResultRow {
        ResultRow {
            dataset: "gp".into(),
            kernel: "rbf".into(),
            model: model.into(),
            setup: Setup::Three,
            noise_s: s,
            noise_r: s,
            seed,
            target_ll: ll,
            n_tasks: 10,
            k_eval: 50,
        }
    }

    #[test]
    fn aggregate_matches_direct_statistics() {
        let v = [0.31, -0.2, 0.77, 0.05];
        let rows: Vec<_> = v
            .iter()
            .enumerate()
            .map(|(i, &x)| row("anp", 0.3, i as u64, x))
            .collect();
        let a = &aggregate(&rows)[0];
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        assert!((a.mean - mean).abs() < 1e-12);
        assert!((a.std.unwrap() - var.sqrt()).abs() < 1e-12);
        assert_eq!(a.seeds, 4);
    }

    #[test]
    fn single_seed_has_no_std() {
        let a = aggregate(&[row("np", 0.0, 0, -0.5)]);
        assert_eq!(a[0].std, None);
        assert_eq!(a[0].to_string(), "-0.500");
    }

    #[test]
    fn groups_are_separated_by_model_and_noise() {
        let rows = vec![
            row("np", 0.0, 0, 1.0),
            row("np", 0.3, 0, 2.0),
            row("anp", 0.0, 0, 3.0),
            row("np", 0.0, 1, 5.0),
        ];
        let a = aggregate(&rows);
        assert_eq!(a.len(), 3);
        let np0 = a
            .iter()
            .find(|x| x.model == "np" && x.noise_s == 0.0)
            .unwrap();
        assert_eq!((np0.seeds, np0.mean), (2, 3.0));
        assert_eq!(np0.to_string(), format!("3.000 ± {:.3}", 8f64.sqrt()));
    }

    #[test]
    fn store_roundtrip_and_no_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultsStore::open(dir.path()).unwrap();
        let r = row("anp", 0.6, 1, -0.25);
        assert!(store.append(&r, serde_json::json!({"w": 0})).unwrap());
        assert!(!store.append(&r, serde_json::json!({})).unwrap());
        let again = ResultsStore::open(dir.path()).unwrap();
        assert_eq!(again.rows().unwrap(), vec![r.clone()]);
        assert!(again.contains(&r.key()).unwrap());
        assert_eq!(again.metadata(&r.key()).unwrap().unwrap()["w"], 0);
    }

    #[test]
    fn truncated_and_unindexed_rows_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultsStore::open(dir.path()).unwrap();
        let good = row("np", 0.3, 0, -1.0);
        store.append(&good, serde_json::Value::Null).unwrap();
        // a crash after the CSV write but before the index update, then a torn line
        let mut f = OpenOptions::new()
            .append(true)
            .open(dir.path().join(CSV_FILE))
            .unwrap();
        f.write_all(b"gp,rbf,anp,3,0.3,0.3,0,-0.9,10,50\ngp,rbf,anp,3,0.")
            .unwrap();
        drop(f);
        let reopened = ResultsStore::open(dir.path()).unwrap();
        assert_eq!(reopened.rows().unwrap(), vec![good]);
        let text = fs::read_to_string(dir.path().join(CSV_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!reopened.contains(&row("anp", 0.3, 0, 0.0).key()).unwrap());
    }

    #[test]
    fn csv_header_matches_the_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultsStore::open(dir.path()).unwrap();
        store
            .append(&row("np", 0.0, 0, 0.1), serde_json::Value::Null)
            .unwrap();
        let text = fs::read_to_string(dir.path().join(CSV_FILE)).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "dataset,kernel,model,setup,noise_s,noise_r,seed,target_ll,n_tasks,K_eval"
        );
    }
}
