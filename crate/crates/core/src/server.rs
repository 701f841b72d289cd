//! Server step: weighted aggregation, the synthesized replay set A_T, and the
//! consolidation `α·L_KD + β·L_Wasserstein + γ·L_anchor`.

use std::collections::HashMap;

use numkit::{AdamState, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{batch_embedding, uniform_labels, ClientUpdate};
use crate::error::{FedError, Result};
use crate::gaussian::{estimate_gaussian, w2_squared, GaussianEmbedding};
use crate::losses::{anchor_loss, kd_loss, softmax_rows, wasserstein_loss};
use crate::models::{ClientModel, ImageShape, Segment};
use crate::params::ParamVector;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerLossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ServerLossWeights {
    fn default() -> Self {
        ServerLossWeights {
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.4,
        }
    }
}

impl ServerLossWeights {
    pub const ZERO: ServerLossWeights = ServerLossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(FedError::Invalid(format!(
                "loss weights must be ≥ 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn all_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub weights: ServerLossWeights,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_per_class: usize,
    pub no_cate: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            weights: ServerLossWeights::default(),
            steps: 50,
            lr: 1e-4,
            batch_size: 64,
            replay_per_class: 20,
            no_cate: false,
        }
    }
}

/// `Σ_k (n_k / Σ n) θ_k`.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| FedError::Invalid("no client updates to aggregate".into()))?;
    let len = first.params.len();
    if let Some(u) = updates.iter().find(|u| u.params.len() != len) {
        return Err(FedError::Dimension(format!(
            "client {} sent {} parameters, expected {len}",
            u.client_id,
            u.params.len()
        )));
    }
    if updates.iter().any(|u| u.num_examples == 0) {
        return Err(FedError::Invalid("client update with zero examples".into()));
    }
    if updates.len() == 1 {
        return Ok(first.params.clone());
    }
    let total: f64 = updates.iter().map(|u| u.num_examples as f64).sum();
    let mut out = vec![0.0; len];
    for u in updates {
        let w = u.num_examples as f64 / total;
        for (o, p) in out.iter_mut().zip(&u.params.0) {
            *o += w * p;
        }
    }
    Ok(ParamVector(out))
}

/// Splits `total` across clients proportionally to `sizes`, rounding by
/// largest remainder (ties to the lower index).
pub fn replay_budgets(total: usize, sizes: &[usize]) -> Result<Vec<usize>> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return Err(FedError::Invalid(
            "budget split needs a positive total size".into(),
        ));
    }
    let exact: Vec<(usize, u128)> = sizes
        .iter()
        .map(|&n| {
            let num = total as u128 * n as u128;
            ((num / sum as u128) as usize, num % sum as u128)
        })
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.0).collect();
    let short = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
    for &k in order.iter().take(short) {
        out[k] += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Vec<f64>,
    pub label: usize,
    pub source_client: usize,
}

/// A_T: generated samples grouped into per-task subsets 𝒜_T^t.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedDataset {
    pub shape: ImageShape,
    pub samples: Vec<SynthSample>,
    /// Class ids of each task, in task order.
    pub tasks: Vec<Vec<usize>>,
    /// Sample indices of each task subset.
    pub subsets: Vec<Vec<usize>>,
}

impl SynthesizedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn task_of(&self, label: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains(&label))
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let [c, h, w] = self.shape.dims();
        let mut data = Vec::with_capacity(idx.len() * self.shape.numel());
        for &i in idx {
            data.extend_from_slice(&self.samples[i].image);
        }
        Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape")
    }

    /// Per-client sample counts.
    pub fn client_sizes(&self, clients: usize) -> Vec<usize> {
        let mut out = vec![0; clients];
        for s in &self.samples {
            out[s.source_client] += 1;
        }
        out
    }
}

/// Each client's generator draws its budget with labels uniform over the
/// classes of `tasks`.
pub fn synthesize_replay(
    model: &ClientModel,
    generators: &[&ParamVector],
    budgets: &[usize],
    tasks: &[Vec<usize>],
    rng_seed: u64,
) -> Result<SynthesizedDataset> {
    let seen: Vec<usize> = tasks.concat();
    if seen.is_empty() {
        return Err(FedError::Invalid(
            "replay needs at least one seen class".into(),
        ));
    }
    if generators.is_empty() || generators.len() != budgets.len() {
        return Err(FedError::Invalid(
            "one budget per generator is required".into(),
        ));
    }
    let per_client: Vec<Vec<SynthSample>> = generators
        .par_iter()
        .zip(budgets)
        .enumerate()
        .map(|(k, (params, &budget))| {
            if budget == 0 {
                return Ok(Vec::new());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(rng_seed, &[k as u64, 0]));
            let labels = uniform_labels(&mut rng, &seen, budget);
            let images = model.generate(params, &labels, seed::derive(rng_seed, &[k as u64, 1]))?;
            Ok(images
                .into_iter()
                .map(|(image, label)| SynthSample {
                    image,
                    label,
                    source_client: k,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let samples: Vec<SynthSample> = per_client.into_iter().flatten().collect();
    let mut subsets = vec![Vec::new(); tasks.len()];
    for (i, s) in samples.iter().enumerate() {
        let t = tasks
            .iter()
            .position(|t| t.contains(&s.label))
            .expect("label from a task");
        subsets[t].push(i);
    }
    Ok(SynthesizedDataset {
        shape: model.arch().image,
        samples,
        tasks: tasks.to_vec(),
        subsets,
    })
}

/// Per-task Gaussians of CATE outputs over every subset with ≥ 2 samples.
pub fn task_gaussians(
    model: &ClientModel,
    params: &ParamVector,
    data: &SynthesizedDataset,
) -> Result<Vec<GaussianEmbedding>> {
    data.subsets
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| estimate_gaussian(&model.embed_each(params, &data.batch(s))?))
        .collect()
}

/// `Σ_{i<j} W₂²` between the task Gaussians of `data` under `params`.
pub fn pairwise_w2_sum(
    model: &ClientModel,
    params: &ParamVector,
    data: &SynthesizedDataset,
) -> Result<f64> {
    let gs = task_gaussians(model, params, data)?;
    let mut total = 0.0;
    for i in 0..gs.len() {
        for j in i + 1..gs.len() {
            total += w2_squared(&gs[i], &gs[j])?;
        }
    }
    Ok(total)
}

/// Component values of the last consolidation step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub kd: f64,
    pub wasserstein: f64,
    pub anchor: f64,
    pub pairwise_w2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationReport {
    pub steps: usize,
    pub last: LossComponents,
}

/// Minimizes the server loss from `anchor` with Adam on A_T mini-batches.
/// Distillation compares teacher and student softmax over `prev_classes`,
/// the classes the previous global model was trained on. Only CATE and discriminator parameters move: no term depends on the
/// generator, and its anchor gradient is zero at the anchor.
#[allow(clippy::too_many_arguments)]
pub fn consolidate(
    model: &ClientModel,
    anchor: &ParamVector,
    prev_global: Option<&ParamVector>,
    prev_classes: &[usize],
    data: &SynthesizedDataset,
    cfg: &ServerConfig,
    rng_seed: u64,
) -> Result<(ParamVector, ConsolidationReport)> {
    cfg.weights.validate()?;
    let w = cfg.weights;
    let use_kd = w.alpha > 0.0 && prev_global.is_some() && !prev_classes.is_empty();
    let w_tasks: Vec<&Vec<usize>> = data.subsets.iter().filter(|s| !s.is_empty()).collect();
    let use_w = w.beta > 0.0 && w_tasks.len() >= 2;
    if let Some(s) = w_tasks.iter().find(|s| s.len() < 2).filter(|_| use_w) {
        return Err(FedError::Estimation(format!(
            "a replay task subset holds {} sample; two are needed",
            s.len()
        )));
    }
    let use_anchor = w.gamma > 0.0;
    let mut report = ConsolidationReport {
        steps: 0,
        last: LossComponents::default(),
    };
    if cfg.steps == 0 || !(use_kd || use_w || use_anchor) {
        return Ok((anchor.clone(), report));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut params = anchor.clone();
    let segs = [Segment::Cate, Segment::Discriminator];
    let mut opts: Vec<AdamState> = segs
        .iter()
        .map(|&s| AdamState::new(model.segment_range(s).len(), cfg.lr))
        .collect();
    let anchor_entries: Vec<usize> = (0..model.layout().entries().len())
        .filter(|&i| model.segment_of(crate::params::ParamId(i)) != Segment::Generator)
        .collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let kd_batches: Vec<Vec<usize>> = order
        .chunks(cfg.batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    let mut teacher_cache: HashMap<usize, Tensor> = HashMap::new();

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &params, &segs)?;
        let mut total: Option<Var> = None;
        let mut add = |tape: &mut Tape, term: Var, weight: f64| -> Result<()> {
            let t = tape.scale(term, weight)?;
            total = Some(match total {
                None => t,
                Some(acc) => tape.add(acc, t)?,
            });
            Ok(())
        };
        let mut comps = LossComponents::default();

        if use_kd {
            let bi = step % kd_batches.len();
            let idx = &kd_batches[bi];
            let teacher = match teacher_cache.get(&bi) {
                Some(t) => t.clone(),
                None => {
                    let t = teacher_probs(
                        model,
                        prev_global.unwrap(),
                        data,
                        idx,
                        prev_classes,
                        cfg.no_cate,
                    )?;
                    teacher_cache.insert(bi, t.clone());
                    t
                }
            };
            let x = tape.constant(data.batch(idx))?;
            let e = batch_embedding(model, &mut tape, &bound, x, cfg.no_cate)?;
            let f = model.discriminator.features(&mut tape, &bound, x)?;
            let logits = model.discriminator.classify(&mut tape, &bound, f, e)?;
            let logits = tape.gather_cols(logits, prev_classes)?;
            let kd = kd_loss(&mut tape, logits, &teacher)?;
            comps.kd = tape.value(kd).data()[0];
            add(&mut tape, kd, w.alpha)?;
        }
        if use_w {
            let per_task = w_tasks
                .iter()
                .map(|s| {
                    let pick: Vec<usize> = if s.len() > cfg.batch_size.max(2) {
                        sample(&mut rng, s.len(), cfg.batch_size.max(2))
                            .into_iter()
                            .map(|i| s[i])
                            .collect()
                    } else {
                        s.to_vec()
                    };
                    let x = tape.constant(data.batch(&pick))?;
                    model.cate.per_example(&mut tape, &bound, x)
                })
                .collect::<Result<Vec<_>>>()?;
            let term = wasserstein_loss(&mut tape, &per_task)?;
            comps.wasserstein = tape.value(term.loss).data()[0];
            comps.pairwise_w2 = term.pairwise_sum;
            add(&mut tape, term.loss, w.beta)?;
        }
        if use_anchor {
            let vars: Vec<Var> = anchor_entries
                .iter()
                .map(|&i| bound.var(crate::params::ParamId(i)))
                .collect();
            let blocks: Vec<&[f64]> = anchor_entries
                .iter()
                .map(|&i| &anchor.0[model.layout().entries()[i].range()])
                .collect();
            let a = anchor_loss(&mut tape, &vars, &blocks)?;
            comps.anchor = tape.value(a).data()[0];
            add(&mut tape, a, w.gamma)?;
        }

        let loss = total.expect("at least one active term");
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(FedError::Diverged(format!(
                "consolidation step {step}: loss {value} (kd {}, wasserstein {}, anchor {})",
                comps.kd, comps.wasserstein, comps.anchor
            )));
        }
        tape.backward(loss)?;
        let grads = model.layout().collect_grads(&tape, &bound);
        for (opt, &s) in opts.iter_mut().zip(&segs) {
            let r = model.segment_range(s);
            opt.step(&mut params.0[r.clone()], &grads.0[r])?;
        }
        report.steps = step + 1;
        report.last = comps;
    }
    Ok((params, report))
}

/// Softmax over `classes` of the frozen teacher's class head.
fn teacher_probs(
    model: &ClientModel,
    teacher: &ParamVector,
    data: &SynthesizedDataset,
    idx: &[usize],
    classes: &[usize],
    no_cate: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, teacher, &[])?;
    let x = tape.constant(data.batch(idx))?;
    let e = batch_embedding(model, &mut tape, &bound, x, no_cate)?;
    let f = model.discriminator.features(&mut tape, &bound, x)?;
    let logits = model.discriminator.classify(&mut tape, &bound, f, e)?;
    let logits = tape.gather_cols(logits, classes)?;
    let probs = softmax_rows(tape.value(logits).data(), classes.len());
    Ok(Tensor::new(vec![idx.len(), classes.len()], probs)?)
}
