//! Federation driver: task progression, rounds of client training,
//! aggregation, optional consolidation, and per-task evaluation.

use std::path::Path;
use std::str::FromStr;

use numkit::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{evaluate, local_train_round, ClientConfig, ClientState, ClientUpdate};
use crate::datakit::{self, names, LabeledImageSet, Split};
use crate::error::{FedError, Result};
use crate::gaussian::GaussianEmbedding;
use crate::metrics::AccuracyRecord;
use crate::models::checkpoint::Checkpoint;
use crate::models::{ArchConfig, ClientModel, ImageShape, Scale};
use crate::params::ParamVector;
use crate::seed::{self, stream};
use crate::server::{
    aggregate, consolidate, replay_budgets, synthesize_replay, task_gaussians, ServerConfig,
    ServerLossWeights,
};

/// Class-order seed of the standard incremental CIFAR-100 split.
pub const ICARL_SEED: u64 = 1993;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fedgtea,
    Fedavg,
    Fedprox,
}

impl FromStr for Method {
    type Err = FedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedgtea" => Ok(Method::Fedgtea),
            "fedavg" => Ok(Method::Fedavg),
            "fedprox" => Ok(Method::Fedprox),
            other => Err(FedError::Invalid(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Fedgtea => "fedgtea",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SequenceId {
    #[serde(rename = "cifar10")]
    Cifar10,
    #[serde(rename = "cifar100-icarl")]
    Cifar100Icarl,
    #[serde(rename = "cifar100-super")]
    Cifar100Super,
    #[serde(rename = "toy")]
    Toy,
}

impl FromStr for SequenceId {
    type Err = FedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(SequenceId::Cifar10),
            "cifar100-icarl" => Ok(SequenceId::Cifar100Icarl),
            "cifar100-super" => Ok(SequenceId::Cifar100Super),
            "toy" => Ok(SequenceId::Toy),
            other => Err(FedError::Invalid(format!("unknown sequence '{other}'"))),
        }
    }
}

impl std::fmt::Display for SequenceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SequenceId::Cifar10 => "cifar10",
            SequenceId::Cifar100Icarl => "cifar100-icarl",
            SequenceId::Cifar100Super => "cifar100-super",
            SequenceId::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_cate: bool,
    pub no_wasserstein: bool,
    pub no_anchor: bool,
    pub no_distillation: bool,
}

impl Ablations {
    pub const ALL: Ablations = Ablations {
        no_cate: true,
        no_wasserstein: true,
        no_anchor: true,
        no_distillation: true,
    };

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_cate" => self.no_cate = true,
            "no_wasserstein" => self.no_wasserstein = true,
            "no_anchor" => self.no_anchor = true,
            "no_distillation" => self.no_distillation = true,
            other => return Err(FedError::Invalid(format!("unknown ablation '{other}'"))),
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        [
            (self.no_cate, "no_cate"),
            (self.no_wasserstein, "no_wasserstein"),
            (self.no_anchor, "no_anchor"),
            (self.no_distillation, "no_distillation"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect()
    }
}

/// Synthetic blob data for the toy sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub classes: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            classes: 4,
            classes_per_task: 2,
            train_per_class: 100,
            test_per_class: 100,
            separation: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub method: Method,
    pub sequence: SequenceId,
    pub scale: Scale,
    pub num_clients: usize,
    pub rounds_per_task: usize,
    pub local_iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub prox_mu: f64,
    pub weights: ServerLossWeights,
    pub server_steps: usize,
    pub server_lr: f64,
    pub replay_per_class: usize,
    pub embed_dim: usize,
    pub ablations: Ablations,
    pub seed: u64,
    pub class_order_seed: u64,
    pub blobs: BlobConfig,
}

impl FederationConfig {
    /// Defaults for a sequence: the published hyperparameters for CIFAR
    /// sequences (global rounds spread evenly over tasks), desk-scale values
    /// for the toy sequence.
    pub fn defaults(sequence: SequenceId) -> Self {
        let base = FederationConfig {
            method: Method::Fedgtea,
            sequence,
            scale: Scale::Full,
            num_clients: 5,
            rounds_per_task: 12,
            local_iterations: 100,
            batch_size: 64,
            lr: 1e-4,
            prox_mu: 0.01,
            weights: ServerLossWeights::default(),
            server_steps: 50,
            server_lr: 1e-4,
            replay_per_class: 200,
            embed_dim: crate::models::DEFAULT_EMBED_DIM,
            ablations: Ablations::default(),
            seed: 0,
            class_order_seed: ICARL_SEED,
            blobs: BlobConfig::default(),
        };
        match sequence {
            SequenceId::Cifar10 => base,
            SequenceId::Cifar100Icarl => FederationConfig {
                num_clients: 10,
                rounds_per_task: 4,
                local_iterations: 400,
                lr: 1e-3,
                ..base
            },
            SequenceId::Cifar100Super => FederationConfig {
                num_clients: 10,
                rounds_per_task: 2,
                local_iterations: 400,
                lr: 1e-3,
                ..base
            },
            SequenceId::Toy => FederationConfig {
                scale: Scale::Toy,
                num_clients: 2,
                rounds_per_task: 2,
                local_iterations: 200,
                lr: 1e-3,
                server_lr: 1e-3,
                replay_per_class: 20,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FedError::Invalid(m.to_string()));
        if self.num_clients == 0 {
            return bad("num_clients must be positive");
        }
        if self.rounds_per_task == 0 {
            return bad("rounds_per_task must be positive");
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return bad("batch_size and embed_dim must be positive");
        }
        if !(self.lr > 0.0 && self.server_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.prox_mu >= 0.0) {
            return bad("prox_mu must be non-negative");
        }
        self.weights.validate()?;
        if self.sequence == SequenceId::Toy {
            let b = &self.blobs;
            if b.classes_per_task == 0
                || b.classes % b.classes_per_task != 0
                || !(b.separation > 0.0)
            {
                return bad(
                    "blob classes must split evenly into tasks and separation must be positive",
                );
            }
            if b.train_per_class == 0 || b.test_per_class == 0 {
                return bad("blob sets need examples");
            }
        }
        Ok(())
    }

    /// Class head consumes a zero embedding: baselines and the no-CATE ablation.
    pub fn effective_no_cate(&self) -> bool {
        self.method != Method::Fedgtea || self.ablations.no_cate
    }

    /// Loss weights after ablation switches.
    pub fn effective_weights(&self) -> ServerLossWeights {
        let mut w = self.weights;
        if self.ablations.no_distillation {
            w.alpha = 0.0;
        }
        if self.ablations.no_wasserstein {
            w.beta = 0.0;
        }
        if self.ablations.no_anchor {
            w.gamma = 0.0;
        }
        w
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            local_iterations: self.local_iterations,
            batch_size: self.batch_size,
            replay_batch: self.batch_size,
            lr: self.lr,
            prox_mu: if self.method == Method::Fedprox {
                self.prox_mu
            } else {
                0.0
            },
            no_cate: self.effective_no_cate(),
        }
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            weights: self.effective_weights(),
            steps: self.server_steps,
            lr: self.server_lr,
            batch_size: self.batch_size,
            replay_per_class: self.replay_per_class,
            no_cate: self.effective_no_cate(),
        }
    }

    pub fn image_shape(&self) -> ImageShape {
        match self.sequence {
            SequenceId::Toy => ImageShape::TOY_GRAY,
            _ => ImageShape::CIFAR,
        }
    }

    pub fn arch(&self, num_classes: usize) -> ArchConfig {
        ArchConfig {
            embed_dim: self.embed_dim,
            ..ArchConfig::for_scale(self.scale, self.image_shape(), num_classes)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub id: SequenceId,
    pub tasks: Vec<Vec<usize>>,
    pub num_classes: usize,
}

impl TaskSequence {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

fn shuffled_chunks(n: usize, chunk: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(chunk).map(<[usize]>::to_vec).collect()
}

/// Tasks of a sequence. CIFAR-10 (5 × 2) and the iCaRL-style CIFAR-100 split
/// (10 × 10) come from shuffling the class ids with `order_seed`; the
/// superclass split is the 20 superclasses in table order.
pub fn make_task_sequence(id: SequenceId, order_seed: u64, blobs: &BlobConfig) -> TaskSequence {
    let (tasks, num_classes) = match id {
        SequenceId::Cifar10 => (shuffled_chunks(10, 2, order_seed), 10),
        SequenceId::Cifar100Icarl => (shuffled_chunks(100, 10, order_seed), 100),
        SequenceId::Cifar100Super => (names::superclass_tasks(), 100),
        SequenceId::Toy => (
            (0..blobs.classes)
                .collect::<Vec<_>>()
                .chunks(blobs.classes_per_task.max(1))
                .map(<[usize]>::to_vec)
                .collect(),
            blobs.classes,
        ),
    };
    TaskSequence {
        id,
        tasks,
        num_classes,
    }
}

/// Random partition of `indices` into `clients` near-equal shards.
pub fn shard_indices(indices: &[usize], clients: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = order.len() / clients;
    let extra = order.len() % clients;
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let len = base + (k < extra) as usize;
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Train and test splits for a run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

impl Dataset {
    pub fn toy(blobs: &BlobConfig, data_seed: u64) -> Result<Self> {
        let mk = |per_class, stream_tag, split| -> Result<LabeledImageSet> {
            let mut set = datakit::make_blobs(
                blobs.classes,
                per_class,
                ImageShape::TOY_GRAY,
                blobs.separation,
                seed::derive(data_seed, &[stream::DATA, stream_tag]),
            )?;
            set.split = split;
            Ok(set)
        };
        Ok(Dataset {
            train: mk(blobs.train_per_class, 0, Split::Train)?,
            test: mk(blobs.test_per_class, 1, Split::Test)?,
        })
    }

    /// Loads the dataset a sequence needs; `dir` is ignored for `toy`.
    pub fn load(cfg: &FederationConfig, dir: Option<&Path>) -> Result<Self> {
        let need_dir = || {
            dir.ok_or_else(|| {
                FedError::Invalid(format!("sequence {} needs a data directory", cfg.sequence))
            })
        };
        match cfg.sequence {
            SequenceId::Toy => Self::toy(&cfg.blobs, cfg.seed),
            SequenceId::Cifar10 => {
                let d = need_dir()?;
                Ok(Dataset {
                    train: datakit::load_cifar10(d, Split::Train)?,
                    test: datakit::load_cifar10(d, Split::Test)?,
                })
            }
            SequenceId::Cifar100Icarl | SequenceId::Cifar100Super => {
                let d = need_dir()?;
                Ok(Dataset {
                    train: datakit::load_cifar100(d, Split::Train)?,
                    test: datakit::load_cifar100(d, Split::Test)?,
                })
            }
        }
    }
}

/// State at the end of a task, enough to resume from the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCheckpoint {
    pub task: usize,
    pub rounds_done: usize,
    pub global: ParamVector,
    pub gaussians: Vec<GaussianEmbedding>,
    pub record: AccuracyRecord,
}

impl TaskCheckpoint {
    pub fn to_checkpoint(&self, model: &ClientModel) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(model, &self.global)?;
        ck.header.insert("kind".into(), "server".into());
        ck.header.insert("task".into(), self.task.to_string());
        ck.header
            .insert("round".into(), self.rounds_done.to_string());
        ck.push_gaussians(&self.gaussians);
        let (k, t) = (self.record.num_clients(), self.record.num_tasks());
        let mut acc = vec![-1.0; k * t * t];
        let mut counts = vec![0.0; k * t];
        for c in 0..k {
            for s in 0..t {
                for i in 0..=s {
                    if let Some(a) = self.record.get(c, s, i) {
                        acc[(c * t + s) * t + i] = a;
                    }
                }
            }
            for i in 0..t {
                counts[c * t + i] = self.record.count(c, i);
            }
        }
        ck.tensors
            .push(("record.accuracy".into(), Tensor::new(vec![k, t, t], acc)?));
        ck.tensors
            .push(("record.counts".into(), Tensor::new(vec![k, t], counts)?));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, model: &ClientModel) -> Result<Self> {
        let acc = ck
            .tensor("record.accuracy")
            .ok_or_else(|| FedError::Format("checkpoint has no accuracy record".into()))?;
        let counts = ck
            .tensor("record.counts")
            .ok_or_else(|| FedError::Format("checkpoint has no shard counts".into()))?;
        let (k, t) = (acc.shape()[0], acc.shape()[1]);
        let mut record = AccuracyRecord::new(k, t);
        for c in 0..k {
            for s in 0..t {
                for i in 0..=s {
                    let a = acc.data()[(c * t + s) * t + i];
                    if a >= 0.0 {
                        record.set(c, s, i, a)?;
                    }
                }
            }
            for i in 0..t {
                let n = counts.data()[c * t + i];
                if n > 0.0 {
                    record.set_count(c, i, n)?;
                }
            }
        }
        Ok(TaskCheckpoint {
            task: ck.header_value("task")?,
            rounds_done: ck.header_value("round")?,
            global: ck.params_for(model)?,
            gaussians: ck.gaussians()?,
            record,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub record: AccuracyRecord,
    pub trail: Vec<TaskCheckpoint>,
    pub final_global: ParamVector,
}

/// Client shards of task `t`, derived from the master seed only.
pub fn task_shards(
    cfg: &FederationConfig,
    seq: &TaskSequence,
    data: &Dataset,
    t: usize,
) -> Vec<LabeledImageSet> {
    let idx = data.train.indices_of(&seq.tasks[t]);
    shard_indices(
        &idx,
        cfg.num_clients,
        seed::derive(cfg.seed, &[stream::SHARDS, t as u64]),
    )
    .iter()
    .map(|s| data.train.subset(s))
    .collect()
}

pub fn build_model(cfg: &FederationConfig, seq: &TaskSequence) -> Result<ClientModel> {
    ClientModel::new(cfg.arch(seq.num_classes))
}

/// Runs the whole federation.
pub fn run_experiment(cfg: &FederationConfig, data: &Dataset) -> Result<RunResult> {
    run_experiment_from(cfg, data, None, |_| Ok(()))
}

/// Runs from scratch or from a task-boundary checkpoint, calling `on_task`
/// after each completed task.
pub fn run_experiment_from(
    cfg: &FederationConfig,
    data: &Dataset,
    resume: Option<TaskCheckpoint>,
    mut on_task: impl FnMut(&TaskCheckpoint) -> Result<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    let seq = make_task_sequence(cfg.sequence, cfg.class_order_seed, &cfg.blobs);
    if data.train.num_classes() > seq.num_classes || data.test.num_classes() > seq.num_classes {
        return Err(FedError::Invalid(format!(
            "dataset has labels beyond the {} classes of sequence {}",
            seq.num_classes, cfg.sequence
        )));
    }
    let model = build_model(cfg, &seq)?;
    let big_t = seq.num_tasks();
    let client_cfg = cfg.client_config();
    let server_cfg = cfg.server_config();
    let consolidating = cfg.method == Method::Fedgtea;

    let mut clients: Vec<ClientState> = (0..cfg.num_clients).map(ClientState::new).collect();
    let (mut global, mut record, mut rounds_done, first_task, mut trail) = match resume {
        None => {
            let g = model.init_params(seed::derive(cfg.seed, &[stream::INIT]));
            model.check_generator(&g)?;
            (
                g,
                AccuracyRecord::new(cfg.num_clients, big_t),
                0usize,
                0usize,
                Vec::new(),
            )
        }
        Some(ck) => {
            if ck.record.num_clients() != cfg.num_clients || ck.record.num_tasks() != big_t {
                return Err(FedError::Invalid(
                    "checkpoint does not match this configuration".into(),
                ));
            }
            let next = ck.task + 1;
            (
                ck.global.clone(),
                ck.record.clone(),
                ck.rounds_done,
                next,
                vec![ck],
            )
        }
    };
    let mut prev_global = (first_task > 0).then(|| global.clone());

    for t in 0..big_t {
        let shards = task_shards(cfg, &seq, data, t);
        for (c, shard) in clients.iter_mut().zip(shards) {
            if shard.is_empty() {
                return Err(FedError::Invalid(format!(
                    "client {} receives no data for task {t}",
                    c.id
                )));
            }
            c.advance_task(&seq.tasks[t], shard)?;
        }
        if t < first_task {
            continue;
        }
        let prev_classes: Vec<usize> = seq.tasks[..t].concat();
        let mut last_synth = None;
        for _ in 0..cfg.rounds_per_task {
            let r = rounds_done as u64;
            let updates: Vec<ClientUpdate> = clients
                .par_iter()
                .map(|c| {
                    let s = seed::derive(cfg.seed, &[stream::CLIENT, r, c.id as u64]);
                    local_train_round(&model, c, &global, &client_cfg, s)
                })
                .collect::<Result<_>>()?;
            let anchor = aggregate(&updates)?;
            global = if consolidating {
                let sizes: Vec<usize> = clients.iter().map(ClientState::shard_len).collect();
                let seen = clients[0].seen_classes().len();
                let budgets = replay_budgets(cfg.replay_per_class * seen, &sizes)?;
                let gens: Vec<&ParamVector> = updates.iter().map(|u| &u.params).collect();
                let synth = synthesize_replay(
                    &model,
                    &gens,
                    &budgets,
                    &seq.tasks[..=t],
                    seed::derive(cfg.seed, &[stream::SYNTH, r]),
                )?;
                let (g, _) = consolidate(
                    &model,
                    &anchor,
                    prev_global.as_ref(),
                    &prev_classes,
                    &synth,
                    &server_cfg,
                    seed::derive(cfg.seed, &[stream::CONSOLIDATE, r]),
                )?;
                last_synth = Some(synth);
                g
            } else {
                anchor
            };
            rounds_done += 1;
        }

        let seen = clients[0].seen_classes().to_vec();
        let no_cate = cfg.effective_no_cate();
        for i in 0..=t {
            let test = data.test.subset(&data.test.indices_of(&seq.tasks[i]));
            let acc = evaluate(&model, &global, &test, &seen, no_cate)?;
            for k in 0..cfg.num_clients {
                record.set(k, t, i, acc)?;
            }
        }
        for c in &clients {
            record.set_count(c.id, t, c.shard_len() as f64)?;
        }
        let gaussians = match &last_synth {
            Some(s) => task_gaussians(&model, &global, s)?,
            None => Vec::new(),
        };
        let ck = TaskCheckpoint {
            task: t,
            rounds_done,
            global: global.clone(),
            gaussians,
            record: record.clone(),
        };
        on_task(&ck)?;
        trail.push(ck);
        prev_global = Some(global.clone());
    }
    Ok(RunResult {
        record,
        trail,
        final_global: global,
    })
}
