//! Ingestion, preprocessing and batching of irregularly sampled
//! multi-subject multi-task observations.
//!
//! Observations are kept as a flat set of `(subject, task, time, value)`
//! records; there is no grid and no imputation. The set is immutable after
//! construction and safe to share across parallel workers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// One observation: subject `i`, task `j`, time `t`, value `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub subject: usize,
    pub task: usize,
    pub time: f64,
    pub value: f64,
}

/// An immutable set of irregularly sampled observations over `r` subjects
/// and `k` tasks. Records are stored in canonical order
/// (subject, task, time) and indexed by subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    records: Vec<Record>,
    k: usize,
    r: usize,
    /// start offset of each subject's slice in `records`, length r+1
    offsets: Vec<usize>,
}

impl ObservationSet {
    /// Build a validated set. Records may arrive in any order; they are
    /// sorted into canonical order. Duplicate (subject, task, time) triples
    /// and out-of-range ids are rejected.
    pub fn new(mut records: Vec<Record>, k: usize, r: usize) -> Result<Self> {
        for rec in &records {
            if rec.task >= k {
                return Err(Error::Data(format!(
                    "task id {} out of range (k = {})",
                    rec.task, k
                )));
            }
            if rec.subject >= r {
                return Err(Error::Data(format!(
                    "subject id {} out of range (r = {})",
                    rec.subject, r
                )));
            }
            if !rec.time.is_finite() || !rec.value.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite time or value for (subject {}, task {})",
                    rec.subject, rec.task
                )));
            }
        }
        records.sort_by(|a, b| {
            (a.subject, a.task)
                .cmp(&(b.subject, b.task))
                .then(a.time.partial_cmp(&b.time).unwrap())
        });
        let mut seen: HashSet<(usize, usize, u64)> = HashSet::with_capacity(records.len());
        for rec in &records {
            if !seen.insert((rec.subject, rec.task, rec.time.to_bits())) {
                return Err(Error::Data(format!(
                    "duplicate observation (subject {}, task {}, time {})",
                    rec.subject, rec.task, rec.time
                )));
            }
        }
        let mut offsets = vec![0usize; r + 1];
        for rec in &records {
            offsets[rec.subject + 1] += 1;
        }
        for i in 0..r {
            offsets[i + 1] += offsets[i];
        }
        Ok(Self {
            records,
            k,
            r,
            offsets,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.k
    }

    pub fn subject_count(&self) -> usize {
        self.r
    }

    /// All records of one subject, in canonical order.
    pub fn subject_records(&self, subject: usize) -> &[Record] {
        &self.records[self.offsets[subject]..self.offsets[subject + 1]]
    }

    /// Write the set back out in the canonical CSV format.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "subject_id,task_id,time,value")?;
        for rec in &self.records {
            writeln!(w, "{},{},{},{}", rec.subject, rec.task, rec.time, rec.value)?;
        }
        Ok(())
    }
}

/// Derived pseudo-task kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DerivedKind {
    /// Constant intercept pseudo-task: value 1.0 at every distinct
    /// observation time of the subject.
    Constant,
    /// Copy of a source task shifted forward in time.
    Lag { lag: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivedTask {
    /// Source task id; ignored for `Constant`.
    pub source: usize,
    pub kind: DerivedKind,
}

/// Task labels plus the bookkeeping for derived pseudo-tasks. Derived task
/// ids are appended after raw ids, contiguously.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TaskCatalog {
    pub names: Vec<String>,
    pub derived: Vec<DerivedTask>,
    /// subject labels in index order, as they appeared in the source CSV
    #[serde(default)]
    pub subjects: Vec<String>,
}

impl TaskCatalog {
    pub fn raw_count(&self) -> usize {
        self.names.len()
    }

    pub fn total_count(&self) -> usize {
        self.names.len() + self.derived.len()
    }

    /// True if `task` is a derived pseudo-task (input only, never a
    /// forecast target).
    pub fn is_derived(&self, task: usize) -> bool {
        task >= self.names.len()
    }
}

/// Parse the canonical CSV (`subject_id,task_id,time,value`). String
/// subject and task ids are densified to `0..r-1` / `0..k-1` by first
/// appearance; purely numeric ids are used as-is.
pub fn ingest_csv<P: AsRef<Path>>(path: P) -> Result<(ObservationSet, TaskCatalog)> {
    let file = std::fs::File::open(path.as_ref())?;
    ingest_csv_reader(file)
}

pub fn ingest_csv_reader<R: std::io::Read>(reader: R) -> Result<(ObservationSet, TaskCatalog)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = rdr.headers()?;
        let expect = ["subject_id", "task_id", "time", "value"];
        for name in expect {
            if !headers.iter().any(|h| h == name) {
                return Err(Error::Data(format!("missing CSV column `{name}`")));
            }
        }
    }
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (ci, cj, ct, cv) = (col("subject_id"), col("task_id"), col("time"), col("value"));

    let mut subj_map: HashMap<String, usize> = HashMap::new();
    let mut task_map: HashMap<String, usize> = HashMap::new();
    let mut task_names: Vec<String> = Vec::new();
    let mut raw: Vec<(usize, usize, f64, f64, usize)> = Vec::new();

    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2; // 1-based, after header
        let row = row?;
        let get = |c: usize| -> Result<&str> {
            row.get(c)
                .ok_or_else(|| Error::MalformedRow {
                    line,
                    msg: "missing field".into(),
                })
        };
        let subj_tok = get(ci)?;
        let task_tok = get(cj)?;
        let time: f64 = get(ct)?.parse().map_err(|_| Error::MalformedRow {
            line,
            msg: format!("bad time `{}`", get(ct).unwrap_or("")),
        })?;
        let value: f64 = get(cv)?.parse().map_err(|_| Error::MalformedRow {
            line,
            msg: format!("bad value `{}`", get(cv).unwrap_or("")),
        })?;
        if !time.is_finite() || !value.is_finite() {
            return Err(Error::MalformedRow {
                line,
                msg: "non-finite time or value".into(),
            });
        }
        let next_subj = subj_map.len();
        let subject = *subj_map.entry(subj_tok.to_string()).or_insert(next_subj);
        let task = match task_map.get(task_tok) {
            Some(&t) => t,
            None => {
                let t = task_map.len();
                task_map.insert(task_tok.to_string(), t);
                task_names.push(task_tok.to_string());
                t
            }
        };
        raw.push((subject, task, time, value, line));
    }

    let mut seen: HashMap<(usize, usize, u64), usize> = HashMap::new();
    for &(subject, task, time, _, line) in &raw {
        if let Some(_first) = seen.insert((subject, task, time.to_bits()), line) {
            return Err(Error::DuplicateObservation {
                subject,
                task,
                time,
                line,
            });
        }
    }

    let k = task_names.len();
    let r = subj_map.len();
    let records = raw
        .into_iter()
        .map(|(subject, task, time, value, _)| Record {
            subject,
            task,
            time,
            value,
        })
        .collect();
    let obs = ObservationSet::new(records, k, r)?;
    let mut subjects = vec![String::new(); r];
    for (label, &idx) in &subj_map {
        subjects[idx] = label.clone();
    }
    let catalog = TaskCatalog {
        names: task_names,
        derived: Vec::new(),
        subjects,
    };
    Ok((obs, catalog))
}

/// Write an observation set in the canonical CSV layout, labeling rows
/// with the catalog's subject and task names (falling back to indices).
pub fn write_csv<W: std::io::Write>(
    obs: &ObservationSet,
    catalog: &TaskCatalog,
    w: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["subject_id", "task_id", "time", "value"])?;
    for rec in obs.records() {
        let subject = catalog
            .subjects
            .get(rec.subject)
            .cloned()
            .unwrap_or_else(|| rec.subject.to_string());
        let task = catalog
            .names
            .get(rec.task)
            .cloned()
            .unwrap_or_else(|| format!("task_{}", rec.task));
        wtr.write_record([subject, task, rec.time.to_string(), rec.value.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Fitted per-task quantile table for the rank-based normal-score map.
/// Values are distinct and strictly increasing; `probs` are the midpoint
/// plotting positions (averaged over ties).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileTable {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Per-task fitted quantile tables; serializes to JSON so the inverse map
/// can be applied to forecasts later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformState {
    pub tables: Vec<QuantileTable>,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

impl QuantileTable {
    fn fit(mut vals: Vec<f64>) -> Self {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len() as f64;
        // collapse ties to their average midpoint plotting position
        let mut values = Vec::new();
        let mut probs = Vec::new();
        let mut i = 0;
        while i < vals.len() {
            let mut j = i;
            while j < vals.len() && vals[j] == vals[i] {
                j += 1;
            }
            // ranks i+1..=j, midpoint positions (rank - 0.5)/n, averaged
            let avg_rank = (i + 1 + j) as f64 / 2.0;
            values.push(vals[i]);
            probs.push((avg_rank - 0.5) / n);
            i = j;
        }
        Self { values, probs }
    }

    /// Map a raw value to a standard-normal score. Out-of-range values
    /// clamp to the extreme fitted quantiles.
    pub fn forward(&self, x: f64) -> f64 {
        std_normal().inverse_cdf(self.prob_of(x))
    }

    /// Map a normal score back to the raw scale.
    pub fn inverse(&self, z: f64) -> f64 {
        let p = std_normal().cdf(z);
        self.value_of(p)
    }

    fn prob_of(&self, x: f64) -> f64 {
        let (v, p) = (&self.values, &self.probs);
        if x <= v[0] {
            return p[0];
        }
        if x >= v[v.len() - 1] {
            return p[p.len() - 1];
        }
        let hi = v.partition_point(|&u| u < x);
        if v[hi] == x {
            return p[hi];
        }
        let lo = hi - 1;
        let w = (x - v[lo]) / (v[hi] - v[lo]);
        p[lo] + w * (p[hi] - p[lo])
    }

    fn value_of(&self, p: f64) -> f64 {
        let (v, q) = (&self.values, &self.probs);
        if p <= q[0] {
            return v[0];
        }
        if p >= q[q.len() - 1] {
            return v[v.len() - 1];
        }
        let hi = q.partition_point(|&u| u < p);
        if q[hi] == p {
            return v[hi];
        }
        let lo = hi - 1;
        let w = (p - q[lo]) / (q[hi] - q[lo]);
        v[lo] + w * (v[hi] - v[lo])
    }
}

impl TransformState {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap()
    }

    pub fn forward(&self, task: usize, x: f64) -> f64 {
        self.tables[task].forward(x)
    }

    pub fn inverse(&self, task: usize, z: f64) -> f64 {
        self.tables[task].inverse(z)
    }
}

/// Per-task monotone rank-based map to standard-normal scores, fitted on a
/// subject subset and applied to the whole set.
pub fn normal_score_transform(
    obs: &ObservationSet,
    fit_on: &[usize],
) -> Result<(ObservationSet, TransformState)> {
    let fit: HashSet<usize> = fit_on.iter().copied().collect();
    let k = obs.task_count();
    let mut per_task: Vec<Vec<f64>> = vec![Vec::new(); k];
    for rec in obs.records() {
        if fit.contains(&rec.subject) {
            per_task[rec.task].push(rec.value);
        }
    }
    let mut tables = Vec::with_capacity(k);
    for (j, vals) in per_task.into_iter().enumerate() {
        if vals.is_empty() {
            return Err(Error::Data(format!(
                "task {j} has zero observations in the transform fit subset"
            )));
        }
        tables.push(QuantileTable::fit(vals));
    }
    let state = TransformState { tables };
    let records = obs
        .records()
        .iter()
        .map(|rec| Record {
            value: state.forward(rec.task, rec.value),
            ..*rec
        })
        .collect();
    let out = ObservationSet::new(records, k, obs.subject_count())?;
    Ok((out, state))
}

/// Append derived pseudo-task records per the catalog. Raw-task records are
/// never altered.
pub fn derive_pseudo_tasks(obs: &ObservationSet, catalog: &TaskCatalog) -> Result<ObservationSet> {
    let raw_k = obs.task_count();
    let mut records = obs.records().to_vec();
    for (d, spec) in catalog.derived.iter().enumerate() {
        let new_task = raw_k + d;
        match spec.kind {
            DerivedKind::Constant => {
                for subject in 0..obs.subject_count() {
                    let mut times: BTreeMap<u64, f64> = BTreeMap::new();
                    for rec in obs.subject_records(subject) {
                        times.insert(rec.time.to_bits(), rec.time);
                    }
                    for (_, time) in times {
                        records.push(Record {
                            subject,
                            task: new_task,
                            time,
                            value: 1.0,
                        });
                    }
                }
            }
            DerivedKind::Lag { lag } => {
                if spec.source >= raw_k {
                    return Err(Error::Data(format!(
                        "lag pseudo-task references nonexistent source task {}",
                        spec.source
                    )));
                }
                if lag < 0.0 {
                    return Err(Error::Data("negative lag".into()));
                }
                for rec in obs.records() {
                    if rec.task == spec.source {
                        records.push(Record {
                            subject: rec.subject,
                            task: new_task,
                            time: rec.time + lag,
                            value: rec.value,
                        });
                    }
                }
            }
        }
    }
    ObservationSet::new(records, raw_k + catalog.derived.len(), obs.subject_count())
}

/// A partition cell of subjects; batches never split a subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectBatch {
    pub subject_ids: Vec<usize>,
}

/// Deterministic shuffled partition of subjects into batches of
/// `batch_size` (last batch may be smaller).
pub fn make_batches(obs: &ObservationSet, batch_size: usize, seed: u64) -> Vec<SubjectBatch> {
    assert!(batch_size >= 1);
    let mut ids: Vec<usize> = (0..obs.subject_count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.chunks(batch_size)
        .map(|chunk| SubjectBatch {
            subject_ids: chunk.to_vec(),
        })
        .collect()
}
