//! Local client training: AC-GAN + CATE updates on the current task shard,
//! generative replay of earlier classes, and the FedProx variant.

use numkit::{AdamState, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::LabeledImageSet;
use crate::error::{FedError, Result};
use crate::losses::{bce_const, masked_cross_entropy};
use crate::models::{ClientModel, Segment};
use crate::params::{BoundParams, ParamVector};

pub const DEFAULT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub local_iterations: usize,
    pub batch_size: usize,
    pub replay_batch: usize,
    pub lr: f64,
    /// Proximal weight; `0` disables the term.
    pub prox_mu: f64,
    /// Feed a zero embedding to the class head instead of ℰ.
    pub no_cate: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            local_iterations: 100,
            batch_size: DEFAULT_BATCH,
            replay_batch: DEFAULT_BATCH,
            lr: 1e-4,
            prox_mu: 0.0,
            no_cate: false,
        }
    }
}

/// What a client uploads: parameters and a count, never data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub num_examples: usize,
}

/// A client between rounds: its current shard and the classes seen so far.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    shard: Option<LabeledImageSet>,
    task_classes: Vec<usize>,
    seen: Vec<usize>,
    tasks_seen: usize,
}

impl ClientState {
    pub fn new(id: usize) -> Self {
        ClientState {
            id,
            shard: None,
            task_classes: Vec::new(),
            seen: Vec::new(),
            tasks_seen: 0,
        }
    }

    /// Moves to the next task: `classes` are appended to the seen set.
    pub fn advance_task(&mut self, classes: &[usize], shard: LabeledImageSet) -> Result<()> {
        if let Some(y) = shard.labels.iter().find(|y| !classes.contains(y)) {
            return Err(FedError::Invalid(format!(
                "client {}: shard label {y} is outside the task's classes",
                self.id
            )));
        }
        if let Some(c) = classes.iter().find(|c| self.seen.contains(c)) {
            return Err(FedError::Invalid(format!(
                "class {c} already belongs to an earlier task"
            )));
        }
        self.seen.extend_from_slice(classes);
        self.task_classes = classes.to_vec();
        self.shard = Some(shard);
        self.tasks_seen += 1;
        Ok(())
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen
    }

    pub fn task_classes(&self) -> &[usize] {
        &self.task_classes
    }

    pub fn tasks_seen(&self) -> usize {
        self.tasks_seen
    }

    pub fn shard(&self) -> Option<&LabeledImageSet> {
        self.shard.as_ref()
    }

    pub fn shard_len(&self) -> usize {
        self.shard.as_ref().map_or(0, LabeledImageSet::len)
    }
}

/// Labels drawn uniformly from `classes`.
pub fn uniform_labels<R: Rng>(rng: &mut R, classes: &[usize], n: usize) -> Vec<usize> {
    (0..n)
        .map(|_| classes[rng.random_range(0..classes.len())])
        .collect()
}

/// ℰ for a batch: CATE output, or a zero constant when CATE is ablated.
pub(crate) fn batch_embedding(
    model: &ClientModel,
    tape: &mut Tape,
    bound: &BoundParams,
    images: Var,
    no_cate: bool,
) -> Result<Var> {
    if no_cate {
        Ok(tape.constant(Tensor::zeros(vec![1, model.arch().embed_dim]))?)
    } else {
        model.cate.embed_batch(tape, bound, images)
    }
}

/// BCE on the real/fake head plus seen-class CE on the class head.
fn gan_terms(
    model: &ClientModel,
    tape: &mut Tape,
    bound: &BoundParams,
    images: Var,
    labels: &[usize],
    seen: &[usize],
    rf_target: Option<f64>,
    no_cate: bool,
) -> Result<Var> {
    let e = batch_embedding(model, tape, bound, images, no_cate)?;
    let f = model.discriminator.features(tape, bound, images)?;
    let cls = model.discriminator.classify(tape, bound, f, e)?;
    let ce = masked_cross_entropy(tape, cls, labels, seen)?;
    match rf_target {
        Some(target) => {
            let rf = model.discriminator.real_fake(tape, bound, f)?;
            let bce = bce_const(tape, rf, target)?;
            Ok(tape.add(bce, ce)?)
        }
        None => Ok(ce),
    }
}

struct Optimizers {
    states: [AdamState; 3],
}

impl Optimizers {
    fn new(model: &ClientModel, lr: f64) -> Self {
        let mk = |s| AdamState::new(model.segment_range(s).len(), lr);
        Optimizers {
            states: [
                mk(Segment::Cate),
                mk(Segment::Generator),
                mk(Segment::Discriminator),
            ],
        }
    }
}

struct Trainer<'a> {
    model: &'a ClientModel,
    cfg: &'a ClientConfig,
    global: &'a ParamVector,
    params: ParamVector,
    opt: Optimizers,
    client: usize,
}

impl Trainer<'_> {
    /// Backward from `loss` and one Adam update of the `segments`.
    fn apply(
        &mut self,
        mut tape: Tape,
        bound: &BoundParams,
        loss: Var,
        segments: &[Segment],
        phase: &str,
        iter: usize,
    ) -> Result<()> {
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(FedError::Diverged(format!(
                "client {} iteration {iter} {phase}: loss {value}",
                self.client
            )));
        }
        tape.backward(loss)?;
        let mut grads = self.model.layout().collect_grads(&tape, bound);
        if self.cfg.prox_mu > 0.0 {
            for &s in segments {
                for i in self.model.segment_range(s) {
                    grads.0[i] += self.cfg.prox_mu * (self.params.0[i] - self.global.0[i]);
                }
            }
        }
        for &s in segments {
            let r = self.model.segment_range(s);
            self.opt.states[s as usize].step(&mut self.params.0[r.clone()], &grads.0[r])?;
        }
        Ok(())
    }

    fn diverged(&self, iter: usize, phase: &str, e: FedError) -> FedError {
        if e.is_numeric() {
            FedError::Diverged(format!(
                "client {} iteration {iter} {phase}: {e}",
                self.client
            ))
        } else {
            e
        }
    }
}

/// One round of local training from `global`.
pub fn local_train_round(
    model: &ClientModel,
    state: &ClientState,
    global: &ParamVector,
    cfg: &ClientConfig,
    seed: u64,
) -> Result<ClientUpdate> {
    let shard = state
        .shard()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| FedError::Invalid(format!("client {} has an empty shard", state.id)))?;
    if global.len() != model.param_count() {
        return Err(FedError::Dimension(format!(
            "global model has {} parameters, architecture needs {}",
            global.len(),
            model.param_count()
        )));
    }
    if cfg.prox_mu < 0.0 || cfg.batch_size == 0 {
        return Err(FedError::Invalid(
            "prox_mu must be ≥ 0 and batch_size > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seen = state.seen_classes();
    let replay = state.tasks_seen() >= 2 && cfg.replay_batch > 0;
    let mut tr = Trainer {
        model,
        cfg,
        global,
        params: global.clone(),
        opt: Optimizers::new(model, cfg.lr),
        client: state.id,
    };
    let b = cfg.batch_size.min(shard.len());
    for iter in 0..cfg.local_iterations {
        let idx = sample(&mut rng, shard.len(), b).into_vec();
        let labels: Vec<usize> = idx.iter().map(|&i| shard.labels[i]).collect();
        let real = shard.batch(&idx);

        // discriminator + CATE on real (→ 1) and detached fakes (→ 0)
        let step = (|| {
            let mut tape = Tape::new();
            let bound = model.bind(
                &mut tape,
                &tr.params,
                &[Segment::Cate, Segment::Discriminator],
            )?;
            let x = tape.constant(real.clone())?;
            let real_loss = gan_terms(
                model,
                &mut tape,
                &bound,
                x,
                &labels,
                seen,
                Some(1.0),
                cfg.no_cate,
            )?;
            let fake = model.generate_on(&mut tape, &bound, &labels, &mut rng)?;
            let fake_loss = gan_terms(
                model,
                &mut tape,
                &bound,
                fake,
                &labels,
                seen,
                Some(0.0),
                cfg.no_cate,
            )?;
            let loss = tape.add(real_loss, fake_loss)?;
            Ok::<_, FedError>((tape, bound, loss))
        })();
        let (tape, bound, loss) = step.map_err(|e| tr.diverged(iter, "discriminator", e))?;
        tr.apply(
            tape,
            &bound,
            loss,
            &[Segment::Cate, Segment::Discriminator],
            "discriminator",
            iter,
        )?;

        // generator + CATE: fakes should pass as real and carry their labels
        let step = (|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &tr.params, &[Segment::Cate, Segment::Generator])?;
            let fake = model.generate_on(&mut tape, &bound, &labels, &mut rng)?;
            let loss = gan_terms(
                model,
                &mut tape,
                &bound,
                fake,
                &labels,
                seen,
                Some(1.0),
                cfg.no_cate,
            )?;
            Ok::<_, FedError>((tape, bound, loss))
        })();
        let (tape, bound, loss) = step.map_err(|e| tr.diverged(iter, "generator", e))?;
        tr.apply(
            tape,
            &bound,
            loss,
            &[Segment::Cate, Segment::Generator],
            "generator",
            iter,
        )?;

        if replay {
            let step = (|| {
                let mut tape = Tape::new();
                let bound = model.bind(
                    &mut tape,
                    &tr.params,
                    &[Segment::Cate, Segment::Discriminator],
                )?;
                let ys = uniform_labels(&mut rng, seen, cfg.replay_batch);
                let fake = model.generate_on(&mut tape, &bound, &ys, &mut rng)?;
                let fake = tape.detach(fake);
                let loss = gan_terms(model, &mut tape, &bound, fake, &ys, seen, None, cfg.no_cate)?;
                Ok::<_, FedError>((tape, bound, loss))
            })();
            let (tape, bound, loss) = step.map_err(|e| tr.diverged(iter, "replay", e))?;
            tr.apply(
                tape,
                &bound,
                loss,
                &[Segment::Cate, Segment::Discriminator],
                "replay",
                iter,
            )?;
        }
    }
    Ok(ClientUpdate {
        client_id: state.id,
        params: tr.params,
        num_examples: shard.len(),
    })
}

/// [`local_train_round`] with the proximal term `(mu/2)‖θ − θ_g‖²`.
pub fn local_train_round_prox(
    model: &ClientModel,
    state: &ClientState,
    global: &ParamVector,
    mu: f64,
    cfg: &ClientConfig,
    seed: u64,
) -> Result<ClientUpdate> {
    let cfg = ClientConfig {
        prox_mu: mu,
        ..cfg.clone()
    };
    local_train_round(model, state, global, &cfg, seed)
}

/// Index of the largest logit among `seen` columns.
pub fn masked_argmax(logits: &[f64], seen: &[usize]) -> usize {
    let mut best = seen[0];
    for &c in &seen[1..] {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

/// Class logits `[n, C]` for `idx`, with ℰ from that same batch.
pub fn class_logits(
    model: &ClientModel,
    params: &ParamVector,
    set: &LabeledImageSet,
    idx: &[usize],
    no_cate: bool,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params, &[])?;
    let x = tape.constant(set.batch(idx))?;
    let e = batch_embedding(model, &mut tape, &bound, x, no_cate)?;
    let f = model.discriminator.features(&mut tape, &bound, x)?;
    let cls = model.discriminator.classify(&mut tape, &bound, f, e)?;
    Ok(tape.value(cls).data().to_vec())
}

/// Fraction of `test` classified correctly over the `seen` classes, in
/// batches of 64 whose own embedding conditions the class head.
pub fn evaluate(
    model: &ClientModel,
    params: &ParamVector,
    test: &LabeledImageSet,
    seen: &[usize],
    no_cate: bool,
) -> Result<f64> {
    if test.is_empty() || seen.is_empty() {
        return Err(FedError::Invalid(
            "evaluation needs examples and seen classes".into(),
        ));
    }
    let c = model.arch().num_classes;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..test.len()).collect();
    for idx in all.chunks(DEFAULT_BATCH) {
        let logits = class_logits(model, params, test, idx, no_cate)?;
        for (row, &i) in logits.chunks(c).zip(idx) {
            correct += (masked_argmax(row, seen) == test.labels[i]) as usize;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
