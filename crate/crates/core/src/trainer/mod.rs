//! Multi-level cross-entropy training with Adam.

mod adam;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{sample_negatives, DatasetSplit, InteractionSequence};
use crate::error::{Error, Result};
use crate::evaluator::{self, EvalConfig, MetricsReport, Segment};
use crate::model::{Ablation, InitScheme, Model, ModelConfig, ModelParameters, Wiring};
use crate::numerics::{GradSink, ParamId, Tape, Tensor, Var};
use crate::seeding;

pub use adam::Adam;

/// Instances handled by one worker task. Fixed so the reduction order, and
/// therefore the result, does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_negatives: usize,
    pub embedding_dim: usize,
    pub interests: usize,
    pub layers: usize,
    pub tau: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub capacity: usize,
    pub epochs: usize,
    pub seed: u64,
    pub leaky_slope: f64,
    pub patience: usize,
    pub init: InitScheme,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            learning_rate: 1e-3,
            batch_size: 256,
            train_negatives: 5,
            embedding_dim: 16,
            interests: 4,
            layers: 3,
            tau: 3,
            theta1: 1e-6,
            theta2: 1e-5,
            capacity: 20,
            epochs: 50,
            seed: 0,
            leaky_slope: 0.01,
            patience: 5,
            init: InitScheme::default(),
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("train_negatives", self.train_negatives),
            ("embedding_dim", self.embedding_dim),
            ("interests", self.interests),
            ("tau", self.tau),
            ("capacity", self.capacity),
            ("patience", self.patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [("theta1", self.theta1), ("theta2", self.theta2), ("leaky_slope", self.leaky_slope)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, num_users: usize, num_items: usize, ablation: Ablation) -> ModelConfig {
        ModelConfig {
            num_users,
            num_items,
            dim: self.embedding_dim,
            capacity: self.capacity,
            interests: self.interests,
            layers: self.layers,
            tau: self.tau,
            leaky_slope: self.leaky_slope,
            ablation,
            init: self.init,
        }
    }
}

/// Model wiring for an ablation; the L1 weight is dropped by
/// [`effective_theta1`] when the wiring disables it.
pub fn apply_ablation(ablation: Ablation) -> Wiring {
    ablation.wiring()
}

pub fn effective_theta1(hp: &Hyperparameters, wiring: &Wiring) -> f64 {
    if wiring.l1 && wiring.graph {
        hp.theta1
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Cross-entropy per level, averaged over the batch.
    pub per_level: Vec<f64>,
    /// `θ1` times the batch mean of the mean absolute adjacency.
    pub l1_adjacency: f64,
    /// `θ2` times the squared norm of every parameter.
    pub l2_params: f64,
    pub total: f64,
}

/// Parameter gradients, sparse over rows for row-gathered tensors.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    dense: Vec<Option<Tensor>>,
    rows: Vec<BTreeMap<usize, Vec<f64>>>,
}

impl GradBuffer {
    pub fn new(params: &ModelParameters) -> Self {
        GradBuffer {
            dense: vec![None; params.len()],
            rows: vec![BTreeMap::new(); params.len()],
        }
    }

    pub fn merge(&mut self, other: GradBuffer) {
        for (mine, theirs) in self.dense.iter_mut().zip(other.dense) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, Some(b)) => *mine = Some(b),
                _ => {}
            }
        }
        for (mine, theirs) in self.rows.iter_mut().zip(other.rows) {
            for (r, g) in theirs {
                match mine.get_mut(&r) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        mine.insert(r, g);
                    }
                }
            }
        }
    }

    /// Dense gradients shaped like `params`.
    pub fn into_dense(self, params: &ModelParameters) -> Vec<Tensor> {
        params
            .tensors
            .iter()
            .zip(self.dense.into_iter().zip(self.rows))
            .map(|(p, (dense, rows))| {
                let mut g = dense.unwrap_or_else(|| Tensor::zeros(p.shape()));
                let w = if p.rank() == 0 { 1 } else { p.row_len() };
                for (r, vals) in rows {
                    g.data_mut()[r * w..(r + 1) * w].iter_mut().zip(&vals).for_each(|(a, b)| *a += b);
                }
                g
            })
            .collect()
    }
}

impl GradSink for GradBuffer {
    fn accumulate(&mut self, id: ParamId, rows: Option<&[usize]>, grad: &Tensor) {
        match rows {
            None => match &mut self.dense[id] {
                Some(g) => g.add_assign(grad),
                slot @ None => *slot = Some(grad.clone()),
            },
            Some(rows) => {
                let w = grad.len() / rows.len();
                for (k, &r) in rows.iter().enumerate() {
                    let slice = &grad.data()[k * w..(k + 1) * w];
                    match self.rows[id].get_mut(&r) {
                        Some(acc) => acc.iter_mut().zip(slice).for_each(|(a, b)| *a += b),
                        None => {
                            self.rows[id].insert(r, slice.to_vec());
                        }
                    }
                }
            }
        }
    }
}

/// One training instance: history, positive and sampled negatives.
#[derive(Clone, Debug)]
pub struct TrainingExample<'a> {
    pub sequence: &'a InteractionSequence,
    pub negatives: Vec<u32>,
    pub agreement_seed: u64,
}

struct InstanceLoss {
    total: Var,
    per_level: Vec<f64>,
    l1: f64,
}

fn record_instance(model: &Model, tape: &mut Tape, ex: &TrainingExample, theta1: f64) -> Result<InstanceLoss> {
    let s = ex.sequence;
    let user = model.record_user(
        tape,
        s.user_index as usize,
        &s.item_indices,
        s.valid_length as usize,
        ex.agreement_seed,
    )?;
    let levels = user.interests.len();
    let mut level_terms: Vec<Vec<Var>> = vec![Vec::new(); levels];
    for (item, label) in std::iter::once((s.target_item, 1.0)).chain(ex.negatives.iter().map(|&n| (n, 0.0))) {
        for (l, score) in model.record_scores(tape, &user, item)?.into_iter().enumerate() {
            level_terms[l].push(tape.bce_with_logits(score, label));
        }
    }
    let mut parts = Vec::with_capacity(levels + 1);
    let mut per_level = Vec::with_capacity(levels);
    for terms in &level_terms {
        let v = tape.sum(terms)?;
        per_level.push(tape.value(v).item());
        parts.push(v);
    }
    let mut l1 = 0.0;
    if let Some(a) = user.l1 {
        l1 = tape.value(a).item();
        if theta1 > 0.0 {
            parts.push(tape.scale(a, theta1));
        }
    }
    let total = tape.sum(&parts)?;
    Ok(InstanceLoss { total, per_level, l1 })
}

struct ChunkResult {
    grads: Option<GradBuffer>,
    per_level: Vec<f64>,
    l1: f64,
}

fn run_chunk(model: &Model, chunk: &[TrainingExample], theta1: f64, scale: f64, with_grad: bool) -> Result<ChunkResult> {
    let levels = model.config.layers + 1;
    let mut out = ChunkResult {
        grads: with_grad.then(|| GradBuffer::new(&model.params)),
        per_level: vec![0.0; levels],
        l1: 0.0,
    };
    for ex in chunk {
        let mut tape = Tape::new();
        let inst = record_instance(model, &mut tape, ex, theta1)?;
        for (acc, v) in out.per_level.iter_mut().zip(&inst.per_level) {
            *acc += v;
        }
        out.l1 += inst.l1;
        if let Some(buf) = out.grads.as_mut() {
            let g = tape.backward_seeded(inst.total, Tensor::scalar(scale));
            tape.param_grads(&g, buf);
        }
    }
    Ok(out)
}

/// Batch loss and, if requested, its gradient with respect to every
/// parameter (including the L2 term).
pub fn loss_and_grad(
    model: &Model,
    batch: &[TrainingExample],
    hp: &Hyperparameters,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let theta1 = effective_theta1(hp, &model.config.wiring());
    let n = batch.len() as f64;
    let chunks: Vec<ChunkResult> = batch
        .par_chunks(CHUNK)
        .map(|c| run_chunk(model, c, theta1, 1.0 / n, with_grad))
        .collect::<Result<_>>()?;
    let levels = model.config.layers + 1;
    let mut per_level = vec![0.0; levels];
    let mut l1 = 0.0;
    let mut grads = with_grad.then(|| GradBuffer::new(&model.params));
    for c in chunks {
        for (a, b) in per_level.iter_mut().zip(&c.per_level) {
            *a += b;
        }
        l1 += c.l1;
        if let (Some(acc), Some(g)) = (grads.as_mut(), c.grads) {
            acc.merge(g);
        }
    }
    per_level.iter_mut().for_each(|v| *v /= n);
    let l1_adjacency = theta1 * l1 / n;
    let l2_params = hp.theta2 * model.params.sum_squares();
    let total = per_level.iter().sum::<f64>() + l1_adjacency + l2_params;
    let grads = grads.map(|g| {
        let mut dense = g.into_dense(&model.params);
        if hp.theta2 > 0.0 {
            for (d, p) in dense.iter_mut().zip(&model.params.tensors) {
                d.data_mut().iter_mut().zip(p.data()).for_each(|(g, w)| *g += 2.0 * hp.theta2 * w);
            }
        }
        dense
    });
    Ok((
        LossBreakdown {
            per_level,
            l1_adjacency,
            l2_params,
            total,
        },
        grads,
    ))
}

/// Samples training negatives for `batch` and evaluates the loss.
pub fn compute_loss(batch: &[InteractionSequence], model: &Model, hp: &Hyperparameters, split: &DatasetSplit) -> Result<LossBreakdown> {
    let history = split.user_items();
    let examples = batch
        .iter()
        .enumerate()
        .map(|(i, s)| make_example(s, &history, split.vocab.num_items(), hp, 0, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(loss_and_grad(model, &examples, hp, false)?.0)
}

fn make_example<'a>(
    s: &'a InteractionSequence,
    history: &[Vec<u32>],
    num_items: usize,
    hp: &Hyperparameters,
    epoch: usize,
    index: usize,
) -> Result<TrainingExample<'a>> {
    let tag = [epoch as u64, index as u64];
    Ok(TrainingExample {
        sequence: s,
        negatives: sample_negatives(
            num_items,
            hp.train_negatives,
            &history[s.user_index as usize],
            seeding::derive(hp.seed, &[0x7e, tag[0], tag[1]]),
        )?,
        agreement_seed: seeding::derive(hp.seed, &[0xa6, tag[0], tag[1]]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricsReport>,
    pub wall_ms: u128,
}

pub struct TrainOptions<'a> {
    /// Validation protocol; `None` skips validation and keeps the final
    /// parameters.
    pub validation: Option<EvalConfig>,
    /// Receives one JSON object per epoch.
    pub log: Option<&'a mut dyn Write>,
    /// Stops once the training loss drops below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            validation: Some(EvalConfig {
                negatives: Some(100),
                ..EvalConfig::default()
            }),
            log: None,
            target_loss: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters, or the final ones without validation.
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Batch losses in update order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Trains a fresh model for `ablation` on `split`.
pub fn train(split: &DatasetSplit, ablation: Ablation, hp: &Hyperparameters, opts: TrainOptions) -> Result<TrainOutcome> {
    hp.validate()?;
    let cfg = hp.model_config(split.vocab.num_users(), split.vocab.num_items(), ablation);
    let model = Model::new(cfg, hp.seed)?;
    train_model(split, model, hp, opts)
}

/// Continues training `model`.
pub fn train_model(split: &DatasetSplit, mut model: Model, hp: &Hyperparameters, mut opts: TrainOptions) -> Result<TrainOutcome> {
    hp.validate()?;
    if split.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if split.capacity != model.config.capacity {
        return Err(Error::Config(format!(
            "split capacity {} differs from model capacity {}",
            split.capacity, model.config.capacity
        )));
    }
    let history = split.user_items();
    let num_items = split.vocab.num_items();
    let mut adam = Adam::new(&model.params, hp.learning_rate);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut records = Vec::with_capacity(hp.epochs);
    let mut step_losses = Vec::new();
    let validate = opts.validation.clone().filter(|_| !split.validation.is_empty());

    for epoch in 0..hp.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut seeding::rng(hp.seed, &[0x5f, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(hp.batch_size).enumerate() {
            let examples = idx
                .iter()
                .map(|&i| make_example(&split.train[i], &history, num_items, hp, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = match loss_and_grad(&model, &examples, hp, true) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, batch: b }),
                other => other?,
            };
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            adam.update(&mut model.params, &grads.expect("requested"));
            if !model.params.all_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            step_losses.push(loss.total);
            loss_sum += loss.total;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val = match &validate {
            Some(cfg) => Some(evaluator::evaluate(&model, split, Segment::Validation, cfg)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val,
            wall_ms: started.elapsed().as_millis(),
        };
        log::info!("epoch {epoch}: loss {train_loss:.5}");
        if let Some(w) = opts.log.as_mut() {
            let line = serde_json::to_string(&record).expect("record serialises");
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        let score = record.val.as_ref().map(|v| v.ndcg_at_k);
        records.push(record);
        if let Some(score) = score {
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= hp.patience {
                    break;
                }
            }
        }
        if opts.target_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model, None),
    };
    Ok(TrainOutcome {
        model,
        epochs: records,
        best_epoch,
        step_losses,
    })
}
