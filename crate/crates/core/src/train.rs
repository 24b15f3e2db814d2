//! Negative sampling, training instances, the regularized BCE loss, Adam, the
//! epoch loop with early stopping, and checkpoint files.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::conv::{Forward, Model};
use crate::error::{Error, Result};
use crate::eval::{self, ModelScorer, RankOptions};
use crate::graph::{
    build_node_flow, Interaction, InteractionLog, NodeFlow, NodeRef, TemporalBipartiteGraph, Timestamp,
};
use crate::par::Executor;
use crate::rng::{hash_words, purpose, SplitMix64};
use crate::tensor::{ParamGrads, ParamStore, Tape, Var};

/// Lower and upper clamp applied to sigmoid outputs before the log.
pub const PROB_CLAMP: (f64, f64) = (1e-12, 1.0 - 1e-12);

/// Uniform draw over items the user has no interaction with at or before `t`.
pub fn negative_sample(
    graph: &TemporalBipartiteGraph,
    user: usize,
    t: Timestamp,
    rng: &mut SplitMix64,
) -> Result<usize> {
    let mut seen: Vec<usize> = graph.items_up_to(user, t)?.iter().map(|&(i, _)| i).collect();
    seen.sort_unstable();
    seen.dedup();
    let free = graph.item_count() - seen.len();
    if free == 0 {
        return Err(Error::NoNegativeCandidate { user, time: t });
    }
    // The k-th unseen item: step over every seen id at or below the cursor.
    let mut item = rng.below(free);
    for &s in &seen {
        if s <= item {
            item += 1;
        } else {
            break;
        }
    }
    Ok(item)
}

/// Negative for one training interaction. When the user has already seen
/// every item the draw falls back to any item other than the positive one.
pub fn negative_for(graph: &TemporalBipartiteGraph, interaction: &Interaction, rng: &mut SplitMix64) -> Result<usize> {
    match negative_sample(graph, interaction.user, interaction.timestamp, rng) {
        Err(Error::NoNegativeCandidate { .. }) if graph.item_count() >= 2 => {
            let k = rng.below(graph.item_count() - 1);
            Ok(if k >= interaction.item { k + 1 } else { k })
        }
        other => other,
    }
}

fn negative_rng(seed: u64, epoch: usize, index: usize) -> SplitMix64 {
    SplitMix64::new(hash_words(&[seed, purpose::NEGATIVE, epoch as u64, index as u64]))
}

/// One labelled interaction with its sampled negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub interaction: Interaction,
    pub negative: usize,
}

/// Node flows of a user, its positive item and a negative item, all rooted at
/// the label time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub sample: Sample,
    pub user_flow: NodeFlow,
    pub pos_item_flow: NodeFlow,
    pub neg_item_flow: NodeFlow,
    pub label_time: Timestamp,
}

fn flow(graph: &TemporalBipartiteGraph, root: NodeRef, t: Timestamp, widths: &[usize]) -> Result<NodeFlow> {
    if widths.is_empty() {
        graph.adjacency(root)?;
        return Ok(NodeFlow {
            root,
            query_time: t,
            layers: Vec::new(),
        });
    }
    build_node_flow(graph, root, t, widths)
}

/// Draws the negatives the trainer would use in `epoch`.
pub fn samples_for_epoch(
    graph: &TemporalBipartiteGraph,
    log: &InteractionLog,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Sample>> {
    log.records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Sample {
                interaction: *r,
                negative: negative_for(graph, r, &mut negative_rng(seed, epoch, i))?,
            })
        })
        .collect()
}

/// One instance per interaction of `log`, with node flows built on `graph`.
pub fn build_instances(
    graph: &TemporalBipartiteGraph,
    log: &InteractionLog,
    widths: &[usize],
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    samples_for_epoch(graph, log, seed, 0)?
        .into_iter()
        .map(|sample| {
            let r = sample.interaction;
            Ok(TrainingInstance {
                user_flow: flow(graph, NodeRef::user(r.user), r.timestamp, widths)?,
                pos_item_flow: flow(graph, NodeRef::item(r.item), r.timestamp, widths)?,
                neg_item_flow: flow(graph, NodeRef::item(sample.negative), r.timestamp, widths)?,
                label_time: r.timestamp,
                sample,
            })
        })
        .collect()
}

/// Inner product of two embeddings.
pub fn score(zu: &[f64], zv: &[f64]) -> f64 {
    crate::tensor::dot(zu, zv)
}

/// `-(log s(pos) + log(1 - s(neg)))` on the tape, with clamped probabilities.
pub fn bce_pair(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    for (v, what) in [(pos, "positive score"), (neg, "negative score")] {
        if tape.value(v).iter().any(|x| x.is_nan()) {
            return Err(Error::NaN(what));
        }
    }
    let p = tape.sigmoid(pos);
    let p = tape.clamp(p, PROB_CLAMP.0, PROB_CLAMP.1);
    let lp = tape.log(p)?;
    let flipped = tape.scale(neg, -1.0);
    let q = tape.sigmoid(flipped);
    let q = tape.clamp(q, PROB_CLAMP.0, PROB_CLAMP.1);
    let lq = tape.log(q)?;
    let both = tape.add(lp, lq)?;
    Ok(tape.scale(both, -1.0))
}

/// Regularized loss of a batch of `(positive, negative)` scores.
pub fn loss(pairs: &[(f64, f64)], store: &ParamStore, lambda: f64) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let mut total = 0.0;
    for &(p, n) in pairs {
        let pv = tape.constant(1, 1, vec![p])?;
        let nv = tape.constant(1, 1, vec![n])?;
        let l = bce_pair(&mut tape, pv, nv)?;
        total += tape.scalar(l);
    }
    Ok(total + lambda * store.squared_norm())
}

fn chunk_loss_and_grads(
    model: &Model,
    graph: &TemporalBipartiteGraph,
    samples: &[Sample],
    dropout_seed: Option<u64>,
    with_grads: bool,
) -> Result<(f64, Option<ParamGrads>)> {
    let mut fwd = if with_grads {
        Forward::train(model, graph, dropout_seed)
    } else {
        Forward::train_no_grad(model, graph, dropout_seed)
    };
    let mut roots = Vec::with_capacity(samples.len() * 3);
    for s in samples {
        let t = s.interaction.timestamp;
        roots.push((NodeRef::user(s.interaction.user), t));
        roots.push((NodeRef::item(s.interaction.item), t));
        roots.push((NodeRef::item(s.negative), t));
    }
    let z = fwd.embed_batch(&roots)?;
    let mut total: Option<Var> = None;
    for triple in z.chunks(3) {
        let pos = fwd.score(triple[0], triple[1])?;
        let neg = fwd.score(triple[0], triple[2])?;
        let l = bce_pair(&mut fwd.tape, pos, neg)?;
        total = Some(match total {
            Some(acc) => fwd.tape.add(acc, l)?,
            None => l,
        });
    }
    let Some(total) = total else {
        return Ok((0.0, with_grads.then(|| ParamGrads::zeros_like(&model.store))));
    };
    let value = fwd.tape.scalar(total);
    let grads = if with_grads {
        Some(fwd.tape.backward(total, &model.store)?)
    } else {
        None
    };
    Ok((value, grads))
}

fn chunk_size(len: usize, executor: &Executor) -> usize {
    len.div_ceil(executor.workers()).max(1)
}

/// Regularized batch loss and its gradient with respect to every parameter.
///
/// The batch is split into one contiguous chunk per worker; chunk gradients
/// are summed in chunk order, so a fixed worker count gives a fixed result.
pub fn batch_loss_and_grads(
    model: &Model,
    graph: &TemporalBipartiteGraph,
    samples: &[Sample],
    lambda: f64,
    dropout_seed: Option<u64>,
    executor: &Executor,
) -> Result<(f64, ParamGrads)> {
    let parts = executor.map_chunks(samples, chunk_size(samples.len(), executor), |c| {
        chunk_loss_and_grads(model, graph, c, dropout_seed, true)
    });
    let mut loss = 0.0;
    let mut grads = ParamGrads::zeros_like(&model.store);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add(&g.expect("gradients requested"));
    }
    loss += lambda * model.store.squared_norm();
    grads.add_scaled_params(&model.store, 2.0 * lambda);
    Ok((loss, grads))
}

/// Regularized batch loss without gradients.
pub fn batch_loss(
    model: &Model,
    graph: &TemporalBipartiteGraph,
    samples: &[Sample],
    lambda: f64,
    dropout_seed: Option<u64>,
) -> Result<f64> {
    let (l, _) = chunk_loss_and_grads(model, graph, samples, dropout_seed, false)?;
    Ok(l + lambda * model.store.squared_norm())
}

/// Bias-corrected Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update. Parameters without a gradient are treated as having a
/// zero gradient, so their moments still decay.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("state for {} tensors, store has {}", state.m.len(), store.len()),
        });
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let theta = store.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for j in 0..theta.len() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            theta[j] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Per-epoch record of the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over batches of the regularized batch loss divided by batch size.
    pub loss: f64,
    pub valid_ndcg10: Option<f64>,
    pub valid_recall10: Option<f64>,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,valid_ndcg10,valid_recall10\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            h.epoch,
            h.loss,
            opt(h.valid_ndcg10),
            opt(h.valid_recall10)
        );
    }
    out
}

/// Validation queries: each user's last interaction in the validation log,
/// ranked on the union of training and validation interactions.
struct Validation {
    graph: TemporalBipartiteGraph,
    queries: Vec<Interaction>,
}

/// Stateful epoch-by-epoch trainer.
pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub adam: AdamState,
    pub history: Vec<EpochStats>,
    graph: TemporalBipartiteGraph,
    log: InteractionLog,
    validation: Option<Validation>,
    executor: Executor,
}

impl Trainer {
    pub fn new(config: Config, train: &InteractionLog, valid: Option<&InteractionLog>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::NoInteractions);
        }
        let (users, items) = match valid {
            Some(v) => (
                train.user_count().max(v.user_count()),
                train.item_count().max(v.item_count()),
            ),
            None => (train.user_count(), train.item_count()),
        };
        let log = InteractionLog::new(train.records().to_vec(), users, items)?;
        let model = Model::new(config.model.clone(), users, items, config.seed)?;
        let validation = match valid {
            Some(v) if !v.is_empty() => {
                let valid = InteractionLog::new(v.records().to_vec(), users, items)?;
                let union = InteractionLog::merged(&[&log, &valid])?;
                Some(Validation {
                    graph: TemporalBipartiteGraph::build(&union),
                    queries: valid.last_per_user(),
                })
            }
            _ => None,
        };
        Ok(Self {
            adam: AdamState::new(&model.store, config.lr),
            executor: Executor::new(config.workers),
            graph: TemporalBipartiteGraph::build(&log),
            config,
            model,
            history: Vec::new(),
            log,
            validation,
        })
    }

    pub fn graph(&self) -> &TemporalBipartiteGraph {
        &self.graph
    }

    pub fn log(&self) -> &InteractionLog {
        &self.log
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Runs one epoch: shuffle, fresh negatives, one Adam step per batch,
    /// then validation if a validation log was given.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.history.len() + 1;
        let seed = self.config.seed;
        let samples = samples_for_epoch(&self.graph, &self.log, seed, epoch)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        SplitMix64::new(hash_words(&[seed, purpose::SHUFFLE, epoch as u64])).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<Sample> = idx.iter().map(|&i| samples[i]).collect();
            let dropout_seed = (self.config.model.dropout > 0.0)
                .then(|| hash_words(&[seed, purpose::DROPOUT, epoch as u64, b as u64]));
            let (loss, grads) = batch_loss_and_grads(
                &self.model,
                &self.graph,
                &batch,
                self.config.lambda,
                dropout_seed,
                &self.executor,
            )?;
            if !loss.is_finite() {
                return Err(Error::NaN("training loss"));
            }
            adam_step(&mut self.model.store, &grads, &mut self.adam)?;
            loss_sum += loss / batch.len() as f64;
            batches += 1;
        }
        let (valid_ndcg10, valid_recall10) = match self.validate()? {
            Some((n, r)) => (Some(n), Some(r)),
            None => (None, None),
        };
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            valid_ndcg10,
            valid_recall10,
        };
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// `(NDCG@10, Recall@10)` on the validation queries.
    pub fn validate(&self) -> Result<Option<(f64, f64)>> {
        let Some(v) = &self.validation else {
            return Ok(None);
        };
        let scorer = ModelScorer::new(&self.model, &v.graph);
        let options = RankOptions {
            seed: self.config.seed,
            ..RankOptions::default()
        };
        let results = eval::rank_test_set(&scorer, &v.graph, &v.queries, &options, &self.executor)?;
        let table = eval::metrics(&results, &[10])?;
        Ok(Some((
            table.get("ndcg", 10, "all").unwrap_or(0.0),
            table.get("recall", 10, "all").unwrap_or(0.0),
        )))
    }
}

/// Result of [`train`]: the best-validation model (the last one without a
/// validation log) and the full history.
pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
}

/// Trains for up to `max_epochs`, stopping after `patience` epochs without a
/// validation NDCG@10 improvement.
pub fn train(config: &Config, train_log: &InteractionLog, valid: Option<&InteractionLog>) -> Result<TrainOutcome> {
    train_with(config, train_log, valid, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &Config,
    train_log: &InteractionLog,
    valid: Option<&InteractionLog>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), train_log, valid)?;
    let mut best: Option<(f64, usize, Model, AdamState)> = None;
    let mut stale = 0;
    for _ in 0..config.max_epochs {
        let stats = trainer.run_epoch()?;
        on_epoch(&stats);
        if let Some(metric) = stats.valid_ndcg10 {
            if best.as_ref().is_none_or(|b| metric > b.0) {
                best = Some((metric, stats.epoch, trainer.model.clone(), trainer.adam.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    let history = trainer.history;
    Ok(match best {
        Some((_, epoch, model, adam)) => TrainOutcome {
            model,
            adam,
            history,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            best_epoch: history.last().map(|h| h.epoch),
            model: trainer.model,
            adam: trainer.adam,
            history,
        },
    })
}

const MAGIC: &[u8; 4] = b"PTGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: Config,
    users: usize,
    items: usize,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Contents of a checkpoint file.
pub struct Checkpoint {
    pub config: Config,
    pub model: Model,
    pub adam: Option<AdamState>,
}

/// Writes `PTGC`, a little-endian u32 version, a u64 header length, the JSON
/// header and the little-endian f64 payload.
pub fn save_checkpoint(path: impl AsRef<Path>, config: &Config, model: &Model, adam: Option<&AdamState>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, data: &'_ [f64], tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
            len: data.len(),
        });
        offset += data.len();
    };
    for (name, t) in model.store.iter() {
        push(name.to_string(), t.shape().to_vec(), t.data(), &mut tensors);
        payload.push(t.data());
    }
    if let Some(a) = adam {
        for (moments, tag) in [(&a.m, "m"), (&a.v, "v")] {
            for ((name, t), data) in model.store.iter().zip(moments) {
                push(format!("adam.{tag}.{name}"), t.shape().to_vec(), data, &mut tensors);
                payload.push(data);
            }
        }
    }
    let mut cfg = config.clone();
    cfg.model = model.config.clone();
    if let Some(a) = adam {
        cfg.lr = a.lr;
    }
    let header = Header {
        config: cfg,
        users: model.user_count(),
        items: model.item_count(),
        adam_step: adam.map(|a| a.step),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + offset * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for data in payload {
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::CheckpointFormat("missing PTGC magic".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::CheckpointTruncated("file ends inside the preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err(Error::CheckpointTruncated("file ends inside the header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    let payload = &body[header_len..];
    let total: usize = header.tensors.iter().map(|t| t.offset + t.len).max().unwrap_or(0);
    if payload.len() < total * 8 {
        return Err(Error::CheckpointTruncated(format!(
            "payload has {} bytes, header describes {}",
            payload.len(),
            total * 8
        )));
    }
    let read = |e: &TensorEntry| -> Vec<f64> {
        payload[e.offset * 8..(e.offset + e.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let mut model = Model::new(
        header.config.model.clone(),
        header.users,
        header.items,
        header.config.seed,
    )
    .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    let n = model.store.len();
    let expected_entries = if header.adam_step.is_some() { 3 * n } else { n };
    if header.tensors.len() != expected_entries {
        return Err(Error::CheckpointMismatch(format!(
            "file holds {} tensors, the model registry needs {}",
            header.tensors.len(),
            expected_entries
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.iter().zip(&header.tensors) {
        let name = model.store.name(*id).to_string();
        let t = model.store.get_mut(*id);
        if entry.name != name || entry.shape != t.shape() || entry.len != t.numel() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {:?} {:?} does not match registry entry {:?} {:?}",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&read(entry));
    }
    let adam = match header.adam_step {
        Some(step) => {
            let mut state = AdamState::new(&model.store, header.config.lr);
            state.step = step;
            for (k, tag) in ["m", "v"].iter().enumerate() {
                for (j, id) in ids.iter().enumerate() {
                    let entry = &header.tensors[n * (k + 1) + j];
                    let name = format!("adam.{tag}.{}", model.store.name(*id));
                    if entry.name != name || entry.len != model.store.get(*id).numel() {
                        return Err(Error::CheckpointMismatch(format!(
                            "optimizer tensor {:?} does not match {:?}",
                            entry.name, name
                        )));
                    }
                    let target = if k == 0 { &mut state.m[j] } else { &mut state.v[j] };
                    *target = read(entry);
                }
            }
            Some(state)
        }
        None => None,
    };
    Ok(Checkpoint {
        config: header.config,
        model,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::ModelConfig;
    use crate::tensor::Tensor;

    fn small_log() -> InteractionLog {
        let rows = [
            (0, 0, 1),
            (1, 1, 2),
            (0, 1, 3),
            (2, 2, 4),
            (1, 0, 5),
            (2, 3, 6),
            (0, 3, 7),
            (1, 2, 8),
        ];
        InteractionLog::new(
            rows.iter()
                .map(|&(u, i, t)| Interaction::new(u, i, t * 86_400))
                .collect(),
            3,
            4,
        )
        .unwrap()
    }

    fn small_config() -> Config {
        Config {
            model: ModelConfig {
                dim: 4,
                depth: 1,
                widths: vec![3],
                agg_layers: 1,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            batch_size: 3,
            lr: 1e-2,
            max_epochs: 3,
            ..Config::default()
        }
    }

    #[test]
    fn negative_sample_examples() {
        let log = InteractionLog::new(vec![Interaction::new(0, 0, 5)], 1, 2).unwrap();
        let g = TemporalBipartiteGraph::build(&log);
        let mut rng = SplitMix64::new(1);
        for _ in 0..50 {
            assert_eq!(negative_sample(&g, 0, 5, &mut rng).unwrap(), 1);
        }
        // Before the interaction both items are candidates.
        let draws: Vec<usize> = (0..200).map(|_| negative_sample(&g, 0, 4, &mut rng).unwrap()).collect();
        assert!(draws.contains(&0) && draws.contains(&1));
        let full = InteractionLog::new(vec![Interaction::new(0, 0, 1), Interaction::new(0, 1, 2)], 1, 2).unwrap();
        let g = TemporalBipartiteGraph::build(&full);
        assert!(matches!(
            negative_sample(&g, 0, 2, &mut rng),
            Err(Error::NoNegativeCandidate { user: 0, time: 2 })
        ));
        let r = full.records()[1];
        for _ in 0..20 {
            assert_eq!(negative_for(&g, &r, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn negative_sample_is_uniform() {
        let log = InteractionLog::new(vec![Interaction::new(1, 0, 5)], 2, 10).unwrap();
        let g = TemporalBipartiteGraph::build(&log);
        let mut rng = SplitMix64::new(99);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[negative_sample(&g, 0, 100, &mut rng).unwrap()] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-squared with 9 degrees of freedom.
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn instances_one_per_interaction_and_deterministic() {
        let log = small_log();
        let g = TemporalBipartiteGraph::build(&log);
        let a = build_instances(&g, &log, &[3, 2], 7).unwrap();
        assert_eq!(a.len(), log.len());
        assert_eq!(a, build_instances(&g, &log, &[3, 2], 7).unwrap());
        for inst in &a {
            let r = inst.sample.interaction;
            assert_ne!(inst.sample.negative, r.item);
            for f in [&inst.user_flow, &inst.pos_item_flow, &inst.neg_item_flow] {
                assert_eq!(f.query_time, inst.label_time);
                assert!(f
                    .neighborhoods()
                    .flat_map(|n| n.real())
                    .all(|e| e.timestamp < r.timestamp));
            }
        }
    }

    #[test]
    fn score_and_loss_examples() {
        assert_eq!(score(&[1., 0.], &[1., 0.]), 1.0);
        assert_eq!(score(&[1., 0.], &[0., 1.]), 0.0);
        assert_eq!(score(&[1., 2.], &[3., -1.]), 1.0);
        let store = ParamStore::new();
        assert!((loss(&[(0., 0.)], &store, 0.0).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(loss(&[(800., -800.)], &store, 0.0).unwrap() < 1e-10);
        assert!(loss(&[(f64::NAN, 0.)], &store, 0.0).is_err());
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::new(vec![1, 2], vec![3., 4.]).unwrap())
            .unwrap();
        let l = loss(&[(0., 0.)], &store, 0.5).unwrap();
        assert!((l - (2.0 * 2f64.ln() + 12.5)).abs() < 1e-12);
    }

    #[test]
    fn adam_examples() {
        let mut store = ParamStore::new();
        let id = store.register("theta", Tensor::zeros(vec![1, 1])).unwrap();
        let mut state = AdamState::new(&store, 1e-4);
        let zero = ParamGrads::zeros_like(&store);
        adam_step(&mut store, &zero, &mut state).unwrap();
        assert_eq!(store.get(id).data(), &[0.0]);

        let mut state = AdamState::new(&store, 1e-4);
        let mut g = ParamGrads::zeros_like(&store);
        let mut unit = ParamStore::new();
        unit.register("theta", Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        g.add_scaled_params(&unit, 1.0);
        adam_step(&mut store, &g, &mut state).unwrap();
        let first = store.get(id).data()[0];
        assert!((first - (-1e-4 / (1.0 + 1e-8))).abs() < 1e-18);
        adam_step(&mut store, &g, &mut state).unwrap();
        let second = store.get(id).data()[0] - first;
        assert!(second.abs() <= first.abs() + 1e-18);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let log = small_log();
        let mut cfg = small_config();
        cfg.max_epochs = 0;
        let out = train(&cfg, &log, None).unwrap();
        assert!(out.history.is_empty());
        let fresh = Model::new(cfg.model.clone(), 3, 4, cfg.seed).unwrap();
        assert_eq!(out.model.store, fresh.store);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let log = small_log();
        let mut cfg = small_config();
        cfg.max_epochs = 15;
        let a = train(&cfg, &log, None).unwrap();
        let b = train(&cfg, &log, None).unwrap();
        let la: Vec<u64> = a.history.iter().map(|h| h.loss.to_bits()).collect();
        let lb: Vec<u64> = b.history.iter().map(|h| h.loss.to_bits()).collect();
        assert_eq!(la, lb);
        assert!(a.history.last().unwrap().loss < a.history[0].loss);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let log = small_log();
        let valid = InteractionLog::new(vec![Interaction::new(0, 2, 9 * 86_400)], 3, 4).unwrap();
        let mut cfg = small_config();
        cfg.max_epochs = 30;
        cfg.patience = 2;
        cfg.lr = 1e-9;
        let out = train(&cfg, &log, Some(&valid)).unwrap();
        assert!(out.history.iter().all(|h| h.valid_ndcg10.is_some()));
        assert!(out.history.len() < 30);
        assert_eq!(out.best_epoch, Some(1));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let log = small_log();
        let cfg = small_config();
        let mut trainer = Trainer::new(cfg.clone(), &log, None).unwrap();
        trainer.run_epoch().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ptgc");
        save_checkpoint(&path, &cfg, &trainer.model, Some(&trainer.adam)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model.store, trainer.model.store);
        assert_eq!(ck.adam.as_ref(), Some(&trainer.adam));
        assert_eq!(ck.config.model, cfg.model);

        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::CheckpointFormat(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::CheckpointFormat(_))));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::CheckpointTruncated(_))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..20]),
            Err(Error::CheckpointTruncated(_))
        ));
        // Same-length rename keeps every offset valid; only the name differs.
        let pos = bytes.windows(12).position(|w| w == b"conv.user_w1").unwrap();
        let mut bad = bytes.clone();
        bad[pos..pos + 12].copy_from_slice(b"conv.user_wX");
        assert!(matches!(decode_checkpoint(&bad), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn history_csv_format() {
        let h = vec![EpochStats {
            epoch: 1,
            loss: 0.5,
            valid_ndcg10: None,
            valid_recall10: Some(1.0),
        }];
        assert_eq!(history_csv(&h), "epoch,loss,valid_ndcg10,valid_recall10\n1,0.5,,1\n");
    }
}
