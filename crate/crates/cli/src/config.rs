//! Run configuration: built-in defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use fedgtea::models::Scale;
use fedgtea::orchestrator::{FederationConfig, Method, SequenceId};
use serde::{Deserialize, Serialize};

/// Flat, human-editable TOML document. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub method: Option<Method>,
    pub sequence: Option<SequenceId>,
    pub scale: Option<Scale>,
    pub num_clients: Option<usize>,
    pub rounds_per_task: Option<usize>,
    pub local_iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub prox_mu: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub server_steps: Option<usize>,
    pub server_lr: Option<f64>,
    pub replay_per_class: Option<usize>,
    pub embed_dim: Option<usize>,
    pub ablations: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub class_order_seed: Option<u64>,
    pub blob_classes: Option<usize>,
    pub blob_classes_per_task: Option<usize>,
    pub blob_train_per_class: Option<usize>,
    pub blob_test_per_class: Option<usize>,
    pub blob_separation: Option<f64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_dir, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Command-line values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub sequence: Option<SequenceId>,
    pub scale: Option<Scale>,
    pub seeds: Option<Vec<u64>>,
    pub ablate: Vec<String>,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct RunPlan {
    pub cfg: FederationConfig,
    pub seeds: Vec<u64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: bool,
}

pub const DEFAULT_OUT: &str = "fedgtea-out";

pub fn parse_scale(s: &str) -> Result<Scale, String> {
    match s {
        "toy" => Ok(Scale::Toy),
        "full" => Ok(Scale::Full),
        other => Err(format!("unknown scale '{other}' (expected toy or full)")),
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let seeds = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| format!("bad seed '{p}'"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(seeds)
}

pub fn resolve(file: Option<RunConfigFile>, ov: &Overrides) -> Result<RunPlan, String> {
    let f = file.unwrap_or_default();
    let sequence = ov.sequence.or(f.sequence).unwrap_or(SequenceId::Toy);
    let mut c = FederationConfig::defaults(sequence);
    macro_rules! take {
        ($($field:ident),*) => { $( if let Some(v) = f.$field { c.$field = v; } )* };
    }
    take!(
        method,
        scale,
        num_clients,
        rounds_per_task,
        local_iterations,
        batch_size,
        lr,
        prox_mu,
        server_steps,
        server_lr,
        replay_per_class,
        embed_dim,
        class_order_seed
    );
    if let Some(v) = f.alpha {
        c.weights.alpha = v;
    }
    if let Some(v) = f.beta {
        c.weights.beta = v;
    }
    if let Some(v) = f.gamma {
        c.weights.gamma = v;
    }
    if let Some(v) = f.blob_classes {
        c.blobs.classes = v;
    }
    if let Some(v) = f.blob_classes_per_task {
        c.blobs.classes_per_task = v;
    }
    if let Some(v) = f.blob_train_per_class {
        c.blobs.train_per_class = v;
    }
    if let Some(v) = f.blob_test_per_class {
        c.blobs.test_per_class = v;
    }
    if let Some(v) = f.blob_separation {
        c.blobs.separation = v;
    }
    for a in f.ablations.iter().flatten().chain(&ov.ablate) {
        c.ablations.set(a).map_err(|e| e.to_string())?;
    }
    if let Some(m) = ov.method {
        c.method = m;
    }
    if let Some(s) = ov.scale {
        c.scale = s;
    }
    let seeds = ov.seeds.clone().or(f.seeds).unwrap_or_else(|| vec![1]);
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    c.seed = seeds[0];
    c.validate().map_err(|e| e.to_string())?;
    Ok(RunPlan {
        cfg: c,
        seeds,
        data_dir: ov.data_dir.clone().or(f.data_dir),
        out_dir: ov
            .out
            .clone()
            .or(f.out_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        resume: ov.resume,
    })
}
