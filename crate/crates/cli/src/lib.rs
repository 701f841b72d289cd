//! Commands behind the `fedgtea` binary: run experiments, summarize them,
//! and inspect stored task embeddings.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fedgtea::gaussian::{pairwise, Distance};
use fedgtea::metrics::{
    average_accuracy, average_forgetting, dump_rows, read_csv, summarize, write_csv, DumpRow,
    MetricsRow, DUMP_SCHEMA, METRICS_SCHEMA,
};
use fedgtea::models::checkpoint::Checkpoint;
use fedgtea::orchestrator::{
    build_model, make_task_sequence, run_experiment_from, Dataset, FederationConfig, SequenceId,
    TaskCheckpoint,
};
use fedgtea::FedError;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{Overrides, RunConfigFile, RunPlan};

/// Content hash of the simulator sources this binary was built from.
pub const CODE_HASH: &str = env!("FEDGTEA_CODE_HASH");
pub const MANIFEST_SCHEMA: &str = "fedgtea-manifest v1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Fed(FedError),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Fed(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Fed(FedError::Io(_) | FedError::Csv(_)) | CliError::Io(_) => EXIT_FAILURE,
            CliError::Fed(_) => EXIT_INVALID,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Io(m) => f.write_str(m),
            CliError::Fed(e) if e.is_numeric() => write!(f, "numeric abort: {e}"),
            CliError::Fed(e) => write!(f, "{e}"),
        }
    }
}

impl From<FedError> for CliError {
    fn from(e: FedError) -> Self {
        CliError::Fed(e)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Fingerprint stored in checkpoints so resumption refuses foreign state.
pub fn config_fingerprint(cfg: &FederationConfig) -> String {
    sha256_hex(
        serde_json::to_string(cfg)
            .expect("config serializes")
            .as_bytes(),
    )
}

#[derive(Debug, Serialize)]
struct SeedEntry {
    seed: u64,
    avg_accuracy: f64,
    avg_forgetting: Option<f64>,
    resumed_after_task: Option<usize>,
    checkpoints: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema: &'a str,
    code_hash: &'a str,
    version: &'a str,
    config: &'a FederationConfig,
    seeds: &'a [u64],
    effective_weights: fedgtea::server::ServerLossWeights,
    ablations: Vec<&'static str>,
    class_head_sees_embedding: bool,
    num_tasks: usize,
    tasks: &'a [Vec<usize>],
    data_dir: Option<&'a Path>,
    outputs: [&'a str; 3],
    runs: Vec<SeedEntry>,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("seed-{seed}"))
}

fn task_file(dir: &Path, task: usize) -> PathBuf {
    dir.join(format!("task-{task:03}.ckpt"))
}

fn latest_checkpoint(dir: &Path, num_tasks: usize) -> Option<PathBuf> {
    (0..num_tasks)
        .rev()
        .map(|t| task_file(dir, t))
        .find(|p| p.exists())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Runs every seed of `plan`, writing metrics, the accuracy dump, the
/// manifest, and one checkpoint per finished task under `plan.out_dir`.
pub fn cmd_run(plan: &RunPlan, log: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let out = &plan.out_dir;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let base = &plan.cfg;
    let seq = make_task_sequence(base.sequence, base.class_order_seed, &base.blobs);
    let model = build_model(base, &seq)?;
    let shared = match base.sequence {
        SequenceId::Toy => None,
        _ => Some(Dataset::load(base, plan.data_dir.as_deref())?),
    };

    let mut metrics = Vec::new();
    let mut dump: Vec<DumpRow> = Vec::new();
    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        let cfg = FederationConfig {
            seed,
            ..base.clone()
        };
        let fingerprint = config_fingerprint(&cfg);
        let dir = seed_dir(out, seed);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let owned;
        let data = match &shared {
            Some(d) => d,
            None => {
                owned = Dataset::load(&cfg, None)?;
                &owned
            }
        };

        let resume = match latest_checkpoint(&dir, seq.num_tasks()).filter(|_| plan.resume) {
            Some(path) => {
                let ck = Checkpoint::load(&path)?;
                if ck.header.get("config_sha256") != Some(&fingerprint) {
                    return Err(CliError::Invalid(format!(
                        "{} was written under a different configuration",
                        path.display()
                    )));
                }
                log(&format!("seed {seed}: resuming from {}", path.display()));
                Some(TaskCheckpoint::from_checkpoint(&ck, &model)?)
            }
            None => None,
        };
        let resumed_after_task = resume.as_ref().map(|c| c.task);

        let mut files = Vec::new();
        let result = run_experiment_from(&cfg, data, resume, |ck| {
            let mut c = ck.to_checkpoint(&model)?;
            c.header.insert("config_sha256".into(), fingerprint.clone());
            c.header.insert("seed".into(), seed.to_string());
            c.header.insert("code_hash".into(), CODE_HASH.into());
            let path = task_file(&dir, ck.task);
            c.save(&path)?;
            log(&format!(
                "seed {seed}: task {}/{} done after {} rounds",
                ck.task + 1,
                seq.num_tasks(),
                ck.rounds_done
            ));
            files.push(path);
            Ok(())
        })?;

        let acc = average_accuracy(&result.record)?;
        let fgt = (seq.num_tasks() >= 2)
            .then(|| average_forgetting(&result.record))
            .transpose()?;
        log(&format!(
            "seed {seed}: avg accuracy {acc:.4}, avg forgetting {}",
            fgt.map_or("n/a".into(), |f| format!("{f:.4}"))
        ));
        let method = cfg.method.to_string();
        let sequence = cfg.sequence.to_string();
        dump.extend(dump_rows(&result.record, seed, &method, &sequence));
        metrics.push(MetricsRow {
            seed,
            method,
            sequence,
            avg_accuracy: acc,
            avg_forgetting: fgt,
        });
        let all_files: Vec<String> = (0..seq.num_tasks())
            .map(|t| task_file(&dir, t))
            .filter(|p| p.exists())
            .map(|p| p.strip_prefix(out).unwrap_or(&p).display().to_string())
            .collect();
        runs.push(SeedEntry {
            seed,
            avg_accuracy: acc,
            avg_forgetting: fgt,
            resumed_after_task,
            checkpoints: all_files,
        });
    }

    let mut buf = Vec::new();
    write_csv(&mut buf, METRICS_SCHEMA, &metrics)?;
    fs::write(out.join("metrics.csv"), &buf).map_err(|e| io_err(out, e))?;
    let mut buf = Vec::new();
    write_csv(&mut buf, DUMP_SCHEMA, &dump)?;
    fs::write(out.join("accuracy_dump.csv"), &buf).map_err(|e| io_err(out, e))?;

    let manifest = Manifest {
        schema: MANIFEST_SCHEMA,
        code_hash: CODE_HASH,
        version: env!("CARGO_PKG_VERSION"),
        config: base,
        seeds: &plan.seeds,
        effective_weights: base.effective_weights(),
        ablations: base.ablations.names(),
        class_head_sees_embedding: !base.effective_no_cate(),
        num_tasks: seq.num_tasks(),
        tasks: &seq.tasks,
        data_dir: plan.data_dir.as_deref(),
        outputs: ["metrics.csv", "accuracy_dump.csv", "checkpoints"],
        runs,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&out.join("manifest.json"), &(text + "\n"))
}

/// Mean ± sd table (in percent) over every metrics.csv under `dirs`.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<String, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Invalid(
            "report needs at least one run directory".into(),
        ));
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for d in dirs {
        let path = if d.is_dir() {
            d.join("metrics.csv")
        } else {
            d.clone()
        };
        let f = fs::File::open(&path).map_err(|e| {
            CliError::Invalid(format!("missing metrics file {}: {e}", path.display()))
        })?;
        rows.extend(read_csv::<_, MetricsRow>(f)?);
    }
    if rows.is_empty() {
        return Err(CliError::Invalid("metrics files hold no rows".into()));
    }
    let mut out = String::new();
    writeln!(
        out,
        "{:<10} {:<16} {:>5}  {:>16}  {:>16}",
        "method", "sequence", "seeds", "accuracy (%)", "forgetting (%)"
    )
    .unwrap();
    for s in summarize(&rows) {
        let pm = |(m, sd): (f64, f64)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd);
        writeln!(
            out,
            "{:<10} {:<16} {:>5}  {:>16}  {:>16}",
            s.method,
            s.sequence,
            s.seeds,
            pm(s.accuracy),
            s.forgetting.map_or("n/a".into(), pm)
        )
        .unwrap();
    }
    Ok(out)
}

/// Pairwise distance matrix between the task Gaussians of a checkpoint.
pub fn distance_matrix(path: &Path, metric: Distance) -> Result<Vec<Vec<f64>>, CliError> {
    let ck = Checkpoint::load(path)?;
    let gs = ck.gaussians()?;
    if gs.len() < 2 {
        return Err(CliError::Invalid(format!(
            "{} holds {} task embedding(s); at least 2 are needed",
            path.display(),
            gs.len()
        )));
    }
    Ok(pairwise(&gs, metric)?)
}

pub fn cmd_distances(path: &Path, metric: Distance) -> Result<String, CliError> {
    let m = distance_matrix(path, metric)?;
    let mut out = String::new();
    write!(out, "{:>6}", "").unwrap();
    for j in 0..m.len() {
        write!(out, " {:>14}", format!("task {j}")).unwrap();
    }
    out.push('\n');
    for (i, row) in m.iter().enumerate() {
        write!(out, "{:>6}", format!("task {i}")).unwrap();
        for v in row {
            write!(out, " {v:>14.6e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
