//! Position-enhanced, time-aware graph convolution and its stacking.
//!
//! The level-0 representation of a node is its table row. For `l >= 1` a
//! node's representation at time `t` aggregates its latest interactions before
//! `t`, each contributing the opposite endpoint's level-`(l-1)` representation
//! at that interaction's own time plus time and position encodings; the
//! aggregate is combined with the node's own level-`(l-1)` representation:
//!
//! ```text
//! x(l) = act( concat( x(l-1) * W1, h(l) ) * W2 )
//! ```
//!
//! with `W1: d x d` and `W2: 2d x d` specific to users or items and shared
//! across levels.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::aggregator::{self, AggregatorParams, DropoutCtx, LayerVars};
use crate::encoders::{self, EmbeddingTables};
use crate::error::{Error, Result};
use crate::graph::{Neighborhood, NodeKind, NodeRef, TemporalBipartiteGraph, Timestamp};
use crate::rng::{hash_words, purpose, SplitMix64};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "none" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

/// Model hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    /// Neighborhood widths, outermost convolution first; `len() == depth`.
    pub widths: Vec<usize>,
    pub agg_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub time_unit_seconds: f64,
    pub time_buckets: usize,
    pub activation: Activation,
    pub use_time: bool,
    pub use_position: bool,
    /// Items keep their static table row at every level.
    pub static_items: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 160,
            depth: 2,
            widths: vec![50, 20],
            agg_layers: 6,
            heads: 1,
            dropout: 0.1,
            time_unit_seconds: 86_400.0,
            time_buckets: 34,
            activation: Activation::Relu,
            use_time: true,
            use_position: true,
            static_items: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("d must be even and >= 2, got {}", self.dim)));
        }
        if self.widths.len() != self.depth {
            return Err(Error::Config(format!(
                "depth {} needs {} widths, got {:?}",
                self.depth, self.depth, self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("neighborhood widths must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} must divide d {}",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.time_unit_seconds > 0.0) {
            return Err(Error::Config("time_unit_seconds must be positive".into()));
        }
        if self.time_buckets < 2 {
            return Err(Error::Config("time_buckets must be at least 2".into()));
        }
        Ok(())
    }

    /// Width of the neighborhood used at convolution level `level` (1-based).
    pub fn width_at(&self, level: usize) -> usize {
        self.widths[self.depth - level]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub user_w1: ParamId,
    pub item_w1: ParamId,
    pub user_w2: ParamId,
    pub item_w2: ParamId,
}

/// Every trainable tensor of the model in one registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub conv: ConvParams,
    pub agg: AggregatorParams,
}

impl Model {
    pub fn new(config: ModelConfig, user_count: usize, item_count: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::derive(seed, purpose::INIT);
        let tables = encoders::init_tables(
            &mut store,
            user_count,
            item_count,
            config.time_buckets,
            config.dim,
            rng.next_u64(),
        )?;
        let d = config.dim;
        let conv = ConvParams {
            user_w1: store.register("conv.user_w1", aggregator::glorot(d, d, &mut rng))?,
            item_w1: store.register("conv.item_w1", aggregator::glorot(d, d, &mut rng))?,
            user_w2: store.register("conv.user_w2", aggregator::glorot(2 * d, d, &mut rng))?,
            item_w2: store.register("conv.item_w2", aggregator::glorot(2 * d, d, &mut rng))?,
        };
        let agg = aggregator::init_aggregator(&mut store, d, config.agg_layers, config.heads, &mut rng)?;
        Ok(Self {
            config,
            store,
            tables,
            conv,
            agg,
        })
    }

    pub fn user_count(&self) -> usize {
        self.store.get(self.tables.users).matrix_dims().0
    }

    pub fn item_count(&self) -> usize {
        self.store.get(self.tables.items).matrix_dims().0
    }

    fn table(&self, kind: NodeKind) -> ParamId {
        match kind {
            NodeKind::User => self.tables.users,
            NodeKind::Item => self.tables.items,
        }
    }
}

/// Memo key: one node's representation at one time and level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RepKey {
    pub node: NodeRef,
    pub time: Timestamp,
    pub level: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvVars {
    user_w1: Var,
    item_w1: Var,
    user_w2: Var,
    item_w2: Var,
}

/// Applies the convolution update for one node given its previous
/// representation and the aggregated neighborhood vector.
pub fn conv_update(tape: &mut Tape, w1: Var, w2: Var, prev_self: Var, h: Var, activation: Activation) -> Result<Var> {
    let projected = tape.matmul(prev_self, w1)?;
    let joined = tape.concat_last_dim(projected, h)?;
    let out = tape.matmul(joined, w2)?;
    Ok(match activation {
        Activation::Relu => tape.relu(out),
        Activation::Tanh => tape.tanh(out),
        Activation::Identity => out,
    })
}

/// One forward pass over a graph: a tape plus the memo of representations
/// computed on it. Training passes carry a dropout seed; dropout masks are a
/// pure function of that seed and the representation key, so memoization and
/// batching never change results.
pub struct Forward<'a> {
    model: &'a Model,
    graph: &'a TemporalBipartiteGraph,
    pub tape: Tape,
    cache: HashMap<RepKey, Var>,
    conv: Option<ConvVars>,
    agg: Option<Vec<LayerVars>>,
    dropout_seed: Option<u64>,
}

impl<'a> Forward<'a> {
    /// Inference pass: no gradients, no dropout.
    pub fn eval(model: &'a Model, graph: &'a TemporalBipartiteGraph) -> Self {
        Self::with_tape(model, graph, Tape::no_grad(), None)
    }

    /// Gradient-tracking pass; `dropout_seed` enables dropout.
    pub fn train(model: &'a Model, graph: &'a TemporalBipartiteGraph, dropout_seed: Option<u64>) -> Self {
        Self::with_tape(model, graph, Tape::new(), dropout_seed)
    }

    /// Dropout-enabled pass without gradient tracking.
    pub fn train_no_grad(model: &'a Model, graph: &'a TemporalBipartiteGraph, dropout_seed: Option<u64>) -> Self {
        Self::with_tape(model, graph, Tape::no_grad(), dropout_seed)
    }

    fn with_tape(model: &'a Model, graph: &'a TemporalBipartiteGraph, tape: Tape, dropout_seed: Option<u64>) -> Self {
        Self {
            model,
            graph,
            tape,
            cache: HashMap::new(),
            conv: None,
            agg: None,
            dropout_seed,
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Canonical key: static representations ignore time.
    fn key(&self, node: NodeRef, time: Timestamp, level: usize) -> RepKey {
        let level = if node.kind == NodeKind::Item && self.model.config.static_items {
            0
        } else {
            level
        };
        RepKey {
            node,
            time: if level == 0 { 0 } else { time },
            level,
        }
    }

    fn check_node(&self, node: NodeRef) -> Result<()> {
        let count = match node.kind {
            NodeKind::User => self.model.user_count(),
            NodeKind::Item => self.model.item_count(),
        };
        if node.id >= count || node.id >= self.graph.count(node.kind) {
            return Err(Error::UnknownNode {
                kind: node.kind.name(),
                id: node.id,
            });
        }
        Ok(())
    }

    /// Final embedding of `node` at `time`.
    pub fn embed(&mut self, node: NodeRef, time: Timestamp) -> Result<Var> {
        Ok(self.embed_batch(&[(node, time)])?[0])
    }

    /// Final embeddings of several roots. All neighborhoods the roots need are
    /// gathered first, then representations are computed level by level.
    pub fn embed_batch(&mut self, roots: &[(NodeRef, Timestamp)]) -> Result<Vec<Var>> {
        let depth = self.model.config.depth;
        for &(node, _) in roots {
            self.check_node(node)?;
        }
        let keys: Vec<RepKey> = roots.iter().map(|&(n, t)| self.key(n, t, depth)).collect();
        let plan = self.plan(&keys)?;
        for level_keys in &plan.levels {
            for key in level_keys {
                self.compute(key, &plan.neighborhoods)?;
            }
        }
        Ok(keys.iter().map(|k| self.cache[k]).collect())
    }

    /// Every neighborhood `embed_batch(roots)` would read, keyed by the
    /// representation that reads it, without computing anything.
    pub fn planned_neighborhoods(&self, roots: &[(NodeRef, Timestamp)]) -> Result<Vec<(RepKey, Neighborhood)>> {
        for &(node, _) in roots {
            self.check_node(node)?;
        }
        let depth = self.model.config.depth;
        let keys: Vec<RepKey> = roots.iter().map(|&(n, t)| self.key(n, t, depth)).collect();
        let mut out: Vec<(RepKey, Neighborhood)> = self.plan(&keys)?.neighborhoods.into_iter().collect();
        out.sort_by_key(|(k, _)| *k);
        Ok(out)
    }

    fn plan(&self, roots: &[RepKey]) -> Result<Plan> {
        let depth = self.model.config.depth;
        let mut levels = vec![Vec::new(); depth + 1];
        let mut neighborhoods = HashMap::new();
        let mut seen: HashSet<RepKey> = HashSet::new();
        let mut queue: VecDeque<RepKey> = VecDeque::new();
        for &k in roots {
            if !self.cache.contains_key(&k) && seen.insert(k) {
                queue.push_back(k);
            }
        }
        while let Some(key) = queue.pop_front() {
            levels[key.level].push(key);
            if key.level == 0 {
                continue;
            }
            let width = self.model.config.width_at(key.level);
            let nb = self.graph.neighborhood(key.node, key.time, width)?;
            let child_kind = key.node.kind.opposite();
            let mut children = vec![self.key(key.node, key.time, key.level - 1)];
            children.extend(nb.real().map(|e| {
                self.key(
                    NodeRef {
                        kind: child_kind,
                        id: e.endpoint(child_kind),
                    },
                    e.timestamp,
                    key.level - 1,
                )
            }));
            for child in children {
                if !self.cache.contains_key(&child) && seen.insert(child) {
                    queue.push_back(child);
                }
            }
            neighborhoods.insert(key, nb);
        }
        // Compute deepest (level 0) first.
        Ok(Plan { levels, neighborhoods })
    }

    fn bind(&mut self) {
        if self.conv.is_none() {
            let store = &self.model.store;
            let c = &self.model.conv;
            self.conv = Some(ConvVars {
                user_w1: self.tape.param(store, c.user_w1),
                item_w1: self.tape.param(store, c.item_w1),
                user_w2: self.tape.param(store, c.user_w2),
                item_w2: self.tape.param(store, c.item_w2),
            });
            self.agg = Some(self.model.agg.bind(&mut self.tape, store));
        }
    }

    fn compute(&mut self, key: &RepKey, neighborhoods: &HashMap<RepKey, Neighborhood>) -> Result<Var> {
        if let Some(&v) = self.cache.get(key) {
            return Ok(v);
        }
        let v = if key.level == 0 {
            let table = self.model.table(key.node.kind);
            self.tape.gather(&self.model.store, table, &[Some(key.node.id)])?
        } else {
            let nb = &neighborhoods[key];
            self.convolve(key, nb)?
        };
        self.cache.insert(*key, v);
        Ok(v)
    }

    fn convolve(&mut self, key: &RepKey, nb: &Neighborhood) -> Result<Var> {
        self.bind();
        let model = self.model;
        let cfg = &model.config;
        let d = cfg.dim;
        let n = nb.width();
        let child_kind = key.node.kind.opposite();
        let child_level = key.level - 1;

        let child_keys: Vec<Option<RepKey>> = nb
            .entries
            .iter()
            .map(|slot| {
                slot.map(|e| {
                    self.key(
                        NodeRef {
                            kind: child_kind,
                            id: e.endpoint(child_kind),
                        },
                        e.timestamp,
                        child_level,
                    )
                })
            })
            .collect();
        let entries = if child_keys.iter().flatten().all(|k| k.level == 0) {
            let rows: Vec<Option<usize>> = child_keys.iter().map(|k| k.map(|k| k.node.id)).collect();
            self.tape.gather(&model.store, model.table(child_kind), &rows)?
        } else {
            let mut parts = Vec::with_capacity(n);
            for k in &child_keys {
                parts.push(match k {
                    Some(k) => self
                        .cache
                        .get(k)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("representation {k:?} missing from the sweep")))?,
                    None => self.tape.zeros(1, d),
                });
            }
            self.tape.concat_rows(&parts)?
        };

        let times = if cfg.use_time {
            let rows: Vec<Option<usize>> = nb
                .entries
                .iter()
                .map(|slot| {
                    slot.map(|e| {
                        let delta = encoders::elapsed_units(key.time, e.timestamp, cfg.time_unit_seconds);
                        encoders::time_bucket(delta, cfg.time_buckets)
                    })
                })
                .collect();
            self.tape.gather(&model.store, model.tables.times, &rows)?
        } else {
            self.tape.zeros(n, d)
        };

        let positions = if cfg.use_position {
            let mut data = Vec::with_capacity(n * d);
            for slot in &nb.entries {
                match slot {
                    Some(e) => data.extend(encoders::positional_encoding(e.position, d)),
                    None => data.extend(std::iter::repeat_n(0.0, d)),
                }
            }
            self.tape.constant(n, d, data)?
        } else {
            self.tape.zeros(n, d)
        };

        let prev_key = self.key(key.node, key.time, child_level);
        let prev = match self.cache.get(&prev_key) {
            Some(&v) => v,
            None => {
                return Err(Error::invalid(format!(
                    "representation {prev_key:?} missing from the sweep"
                )))
            }
        };

        let mut rng = match self.dropout_seed {
            Some(seed) => SplitMix64::new(hash_words(&[
                seed,
                key.node.kind as u64,
                key.node.id as u64,
                key.time as u64,
                key.level as u64,
            ])),
            None => SplitMix64::new(0),
        };
        let mut dropout = DropoutCtx {
            rate: cfg.dropout,
            training: self.dropout_seed.is_some(),
            rng: &mut rng,
        };
        let layers = self.agg.clone().expect("bound");
        let h = aggregator::aggregate(
            &mut self.tape,
            entries,
            times,
            positions,
            &nb.mask(),
            prev,
            &layers,
            cfg.heads,
            &mut dropout,
        )?;
        let conv = self.conv.expect("bound");
        let (w1, w2) = match key.node.kind {
            NodeKind::User => (conv.user_w1, conv.user_w2),
            NodeKind::Item => (conv.item_w1, conv.item_w2),
        };
        conv_update(&mut self.tape, w1, w2, prev, h, cfg.activation)
    }

    /// Inner-product score of two `1 x d` embeddings as a `1 x 1` node.
    pub fn score(&mut self, user: Var, item: Var) -> Result<Var> {
        self.tape.matmul_nt(user, item)
    }
}

struct Plan {
    levels: Vec<Vec<RepKey>>,
    neighborhoods: HashMap<RepKey, Neighborhood>,
}

/// Final embedding of one node at one time (inference mode).
pub fn embed_node(model: &Model, graph: &TemporalBipartiteGraph, node: NodeRef, time: Timestamp) -> Result<Vec<f64>> {
    let mut fwd = Forward::eval(model, graph);
    let v = fwd.embed(node, time)?;
    Ok(fwd.tape.value(v).to_vec())
}

/// Final embeddings of several roots in one shared pass (inference mode).
pub fn embed_batch(
    model: &Model,
    graph: &TemporalBipartiteGraph,
    roots: &[(NodeRef, Timestamp)],
) -> Result<Vec<Vec<f64>>> {
    let mut fwd = Forward::eval(model, graph);
    let vars = fwd.embed_batch(roots)?;
    Ok(vars.iter().map(|&v| fwd.tape.value(v).to_vec()).collect())
}

/// Inner product of two embeddings.
pub fn score(user: &[f64], item: &[f64]) -> f64 {
    crate::tensor::dot(user, item)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Interaction, InteractionLog};
    use crate::tensor::Tensor;

    fn toy() -> (InteractionLog, TemporalBipartiteGraph) {
        let rows = [(0, 0, 10), (1, 0, 20), (0, 1, 30), (1, 2, 40), (2, 1, 50), (0, 2, 60)];
        let log = InteractionLog::new(
            rows.iter()
                .map(|&(u, v, t)| Interaction::new(u, v, t * 86_400))
                .collect(),
            3,
            3,
        )
        .unwrap();
        let g = TemporalBipartiteGraph::build(&log);
        (log, g)
    }

    fn small_config(depth: usize) -> ModelConfig {
        ModelConfig {
            dim: 4,
            depth,
            widths: vec![3; depth],
            agg_layers: 1,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn depth_zero_is_table_lookup() {
        let (_, g) = toy();
        let model = Model::new(small_config(0), 3, 3, 1).unwrap();
        let z = embed_node(&model, &g, NodeRef::user(1), 1_000_000_000).unwrap();
        assert_eq!(z, model.store.get(model.tables.users).row(1));
    }

    #[test]
    fn unknown_node_errors() {
        let (_, g) = toy();
        let model = Model::new(small_config(1), 3, 3, 1).unwrap();
        assert!(matches!(
            embed_node(&model, &g, NodeRef::item(9), 5),
            Err(Error::UnknownNode { kind: "item", id: 9 })
        ));
    }

    #[test]
    fn zero_params_give_zero_update() {
        let mut tape = Tape::new();
        let w1 = tape.zeros(4, 4);
        let w2 = tape.zeros(8, 4);
        let x = tape.leaf(&Tensor::new(vec![1, 4], vec![1., -2., 3., 0.5]).unwrap());
        let h = tape.leaf(&Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let z = conv_update(&mut tape, w1, w2, x, h, Activation::Relu).unwrap();
        assert_eq!(tape.value(z), &[0.; 4]);
    }

    #[test]
    fn projection_construction_gives_relu_of_input() {
        let mut tape = Tape::new();
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1. } else { 0. }).collect();
        let w1 = tape.leaf(&Tensor::new(vec![4, 4], eye.clone()).unwrap());
        // W2 = [I; 0] keeps the first d components of the concatenation.
        let mut top = eye;
        top.extend(vec![0.; 16]);
        let w2 = tape.leaf(&Tensor::new(vec![8, 4], top).unwrap());
        let x = tape.leaf(&Tensor::new(vec![1, 4], vec![1., -2., 3., -0.5]).unwrap());
        let h = tape.leaf(&Tensor::new(vec![1, 4], vec![9., 9., 9., 9.]).unwrap());
        let z = conv_update(&mut tape, w1, w2, x, h, Activation::Relu).unwrap();
        assert_eq!(tape.value(z), &[1., 0., 3., 0.]);
    }

    #[test]
    fn batch_matches_single_roots_bitwise() {
        let (_, g) = toy();
        let model = Model::new(small_config(2), 3, 3, 4).unwrap();
        let roots = [
            (NodeRef::user(0), 70 * 86_400),
            (NodeRef::item(1), 45 * 86_400),
            (NodeRef::user(0), 70 * 86_400),
            (NodeRef::item(2), 61 * 86_400),
        ];
        let batched = embed_batch(&model, &g, &roots).unwrap();
        for (root, z) in roots.iter().zip(&batched) {
            assert_eq!(&embed_node(&model, &g, root.0, root.1).unwrap(), z);
        }
        assert_eq!(batched[0], batched[2]);
    }

    #[test]
    fn no_history_path_is_finite() {
        let (_, g) = toy();
        let model = Model::new(small_config(2), 3, 3, 4).unwrap();
        let z = embed_node(&model, &g, NodeRef::user(2), 0).unwrap();
        assert_eq!(z.len(), 4);
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn plan_covers_root_and_self_chain() {
        let (_, g) = toy();
        let model = Model::new(small_config(2), 3, 3, 1).unwrap();
        let t = 70 * 86_400;
        let planned = Forward::eval(&model, &g)
            .planned_neighborhoods(&[(NodeRef::user(0), t)])
            .unwrap();
        let root = g.neighborhood(NodeRef::user(0), t, 3).unwrap();
        for level in [1, 2] {
            let key = RepKey {
                node: NodeRef::user(0),
                time: t,
                level,
            };
            assert!(planned.contains(&(key, root.clone())), "level {level}");
        }
        // Items 0, 1, 2 at their interaction times with user 0, at level 1.
        assert_eq!(planned.len(), 2 + 3);
        for (key, nb) in &planned {
            assert_eq!(nb.query_time, Some(key.time));
            assert!(nb.real().all(|e| e.timestamp < key.time));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(2);
        c.widths = vec![3];
        assert!(c.validate().is_err());
        let mut c = small_config(1);
        c.heads = 3;
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::default().width_at(2), 50);
        assert_eq!(ModelConfig::default().width_at(1), 20);
    }
}
