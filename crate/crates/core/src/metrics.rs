//! Average accuracy and average forgetting over a per-client accuracy record,
//! plus the CSV files a run emits.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// `a[k][t][i]`: accuracy of client `k` on task `i` after training task `t`
/// (defined for `i ≤ t`), and `n[k][i]`: client `k`'s shard size on task `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    num_tasks: usize,
    acc: Vec<Vec<Vec<Option<f64>>>>,
    counts: Vec<Vec<f64>>,
}

impl AccuracyRecord {
    pub fn new(num_clients: usize, num_tasks: usize) -> Self {
        AccuracyRecord {
            num_tasks,
            acc: vec![(0..num_tasks).map(|t| vec![None; t + 1]).collect(); num_clients],
            counts: vec![vec![0.0; num_tasks]; num_clients],
        }
    }

    pub fn num_clients(&self) -> usize {
        self.acc.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn set(&mut self, client: usize, stage: usize, task: usize, accuracy: f64) -> Result<()> {
        if task > stage || stage >= self.num_tasks || client >= self.num_clients() {
            return Err(FedError::Invalid(format!(
                "no accuracy slot for client {client}, stage {stage}, task {task}"
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(FedError::Invalid(format!(
                "accuracy {accuracy} outside [0, 1]"
            )));
        }
        self.acc[client][stage][task] = Some(accuracy);
        Ok(())
    }

    pub fn set_count(&mut self, client: usize, task: usize, n: f64) -> Result<()> {
        if !(n > 0.0) {
            return Err(FedError::Invalid(format!(
                "shard size {n} must be positive"
            )));
        }
        *self
            .counts
            .get_mut(client)
            .and_then(|c| c.get_mut(task))
            .ok_or_else(|| FedError::Invalid(format!("no count slot ({client}, {task})")))? = n;
        Ok(())
    }

    pub fn get(&self, client: usize, stage: usize, task: usize) -> Option<f64> {
        self.acc
            .get(client)?
            .get(stage)?
            .get(task)
            .copied()
            .flatten()
    }

    pub fn count(&self, client: usize, task: usize) -> f64 {
        self.counts[client][task]
    }

    /// Builds a one-client record from rows `a[t] = [a^{t,0}, …, a^{t,t}]`.
    pub fn from_rows(rows: &[Vec<f64>], counts: &[f64]) -> Result<Self> {
        Self::from_clients(&[rows.to_vec()], &[counts.to_vec()])
    }

    pub fn from_clients(acc: &[Vec<Vec<f64>>], counts: &[Vec<f64>]) -> Result<Self> {
        let tasks = acc.first().map_or(0, Vec::len);
        let mut rec = AccuracyRecord::new(acc.len(), tasks);
        for (k, rows) in acc.iter().enumerate() {
            for (t, row) in rows.iter().enumerate() {
                for (i, &a) in row.iter().enumerate() {
                    rec.set(k, t, i, a)?;
                }
            }
            for (i, &n) in counts[k].iter().enumerate() {
                rec.set_count(k, i, n)?;
            }
        }
        Ok(rec)
    }

    /// Final-stage accuracies with their weights, checking completeness.
    fn final_row(&self, k: usize) -> Result<Vec<(f64, f64)>> {
        let last = self
            .num_tasks
            .checked_sub(1)
            .ok_or_else(|| FedError::Invalid("record has no tasks".into()))?;
        (0..self.num_tasks)
            .map(|i| {
                let a = self.get(k, last, i).ok_or_else(|| {
                    FedError::Invalid(format!("record incomplete: client {k}, task {i}"))
                })?;
                let n = self.counts[k][i];
                if !(n > 0.0) {
                    return Err(FedError::Invalid(format!(
                        "missing count: client {k}, task {i}"
                    )));
                }
                Ok((a, n))
            })
            .collect()
    }
}

/// `Σ_k Σ_i a_k^{T,i} n_k^i / Σ_k Σ_i n_k^i`.
pub fn average_accuracy(rec: &AccuracyRecord) -> Result<f64> {
    if rec.num_clients() == 0 {
        return Err(FedError::Invalid("record has no clients".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..rec.num_clients() {
        for (a, n) in rec.final_row(k)? {
            num += a * n;
            den += n;
        }
    }
    Ok(num / den)
}

/// Weighted mean over clients and tasks `i < T` of
/// `max_{i ≤ t < T} (a_k^{t,i} − a_k^{T,i})`; negative values are kept.
pub fn average_forgetting(rec: &AccuracyRecord) -> Result<f64> {
    let big_t = rec.num_tasks();
    if big_t < 2 {
        return Err(FedError::Invalid(
            "forgetting needs at least two tasks".into(),
        ));
    }
    if rec.num_clients() == 0 {
        return Err(FedError::Invalid("record has no clients".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..rec.num_clients() {
        let last = rec.final_row(k)?;
        for (i, &(a_final, n)) in last.iter().enumerate().take(big_t - 1) {
            let mut peak = f64::NEG_INFINITY;
            for t in i..big_t - 1 {
                let a = rec.get(k, t, i).ok_or_else(|| {
                    FedError::Invalid(format!(
                        "record incomplete: client {k}, stage {t}, task {i}"
                    ))
                })?;
                peak = peak.max(a - a_final);
            }
            num += peak * n;
            den += n;
        }
    }
    Ok(num / den)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const METRICS_SCHEMA: &str = "# schema: fedgtea-metrics v1";
pub const DUMP_SCHEMA: &str = "# schema: fedgtea-accuracy-dump v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub method: String,
    pub sequence: String,
    pub avg_accuracy: f64,
    /// Empty when the sequence has a single task.
    pub avg_forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub seed: u64,
    pub method: String,
    pub sequence: String,
    pub client: usize,
    pub stage: usize,
    pub task: usize,
    pub accuracy: f64,
    pub n: f64,
}

pub fn dump_rows(rec: &AccuracyRecord, seed: u64, method: &str, sequence: &str) -> Vec<DumpRow> {
    let mut out = Vec::new();
    for k in 0..rec.num_clients() {
        for t in 0..rec.num_tasks() {
            for i in 0..=t {
                if let Some(a) = rec.get(k, t, i) {
                    out.push(DumpRow {
                        seed,
                        method: method.to_string(),
                        sequence: sequence.to_string(),
                        client: k,
                        stage: t,
                        task: i,
                        accuracy: a,
                        n: rec.count(k, i),
                    });
                }
            }
        }
    }
    out
}

/// Writes a schema comment line followed by a headed CSV table.
pub fn write_csv<W: Write, T: Serialize>(mut w: W, schema: &str, rows: &[T]) -> Result<()> {
    writeln!(w, "{schema}")?;
    let mut cw = csv::Writer::from_writer(w);
    for r in rows {
        cw.serialize(r)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn read_csv<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    rd.deserialize()
        .map(|row| row.map_err(FedError::from))
        .collect()
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub sequence: String,
    pub seeds: usize,
    pub accuracy: (f64, f64),
    pub forgetting: Option<(f64, f64)>,
}

/// Mean ± sd per (method, sequence), sorted by method then sequence.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method.clone(), r.sequence.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, sequence), rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.avg_accuracy).collect();
            let fgt: Option<Vec<f64>> = rs.iter().map(|r| r.avg_forgetting).collect();
            SummaryRow {
                method,
                sequence,
                seeds: rs.len(),
                accuracy: mean_sd(&acc),
                forgetting: fgt.map(|f| mean_sd(&f)),
            }
        })
        .collect()
}
