//! Temporal bipartite interaction graph.
//!
//! An [`InteractionLog`] is the chronologically sorted list of user-item events
//! with compact 0-based ids. [`TemporalBipartiteGraph`] indexes it per user and
//! per item so that the latest `n` interactions of any node strictly before a
//! query time can be read with one binary search.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    User,
    Item,
}

impl NodeKind {
    pub fn opposite(self) -> Self {
        match self {
            NodeKind::User => NodeKind::Item,
            NodeKind::Item => NodeKind::User,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::User => "user",
            NodeKind::Item => "item",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub id: usize,
}

impl NodeRef {
    pub fn user(id: usize) -> Self {
        Self {
            kind: NodeKind::User,
            id,
        }
    }

    pub fn item(id: usize) -> Self {
        Self {
            kind: NodeKind::Item,
            id,
        }
    }
}

/// One timestamped user-item event.
///
/// `position` is the 1-based rank of the event inside the neighborhood it was
/// sampled into; it is 0 for events stored in a log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: Timestamp,
    pub position: u32,
}

impl Interaction {
    pub fn new(user: usize, item: usize, timestamp: Timestamp) -> Self {
        Self {
            user,
            item,
            timestamp,
            position: 0,
        }
    }

    /// The endpoint of kind `kind`.
    pub fn endpoint(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::User => self.user,
            NodeKind::Item => self.item,
        }
    }

    fn sort_key(&self) -> (Timestamp, usize, usize) {
        (self.timestamp, self.user, self.item)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    records: Vec<Interaction>,
    user_count: usize,
    item_count: usize,
}

impl InteractionLog {
    /// Builds a log over fixed id universes, sorting by (timestamp, user, item).
    pub fn new(mut records: Vec<Interaction>, user_count: usize, item_count: usize) -> Result<Self> {
        for r in &records {
            if r.timestamp < 0 {
                return Err(Error::invalid(format!("negative timestamp {}", r.timestamp)));
            }
            if r.user >= user_count {
                return Err(Error::UnknownNode {
                    kind: "user",
                    id: r.user,
                });
            }
            if r.item >= item_count {
                return Err(Error::UnknownNode {
                    kind: "item",
                    id: r.item,
                });
            }
        }
        for r in records.iter_mut() {
            r.position = 0;
        }
        records.sort_by_key(Interaction::sort_key);
        Ok(Self {
            records,
            user_count,
            item_count,
        })
    }

    /// Builds a log whose universes are exactly the ids that occur, re-indexed
    /// densely in ascending order of the original ids.
    pub fn compacted(records: Vec<Interaction>) -> Result<Self> {
        compact(records).map(|(log, _, _)| log)
    }

    pub fn empty(user_count: usize, item_count: usize) -> Self {
        Self {
            records: Vec::new(),
            user_count,
            item_count,
        }
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    /// Merges logs over the same universes.
    pub fn merged(logs: &[&InteractionLog]) -> Result<Self> {
        let first = logs.first().ok_or_else(|| Error::invalid("merging zero logs"))?;
        let (users, items) = (first.user_count, first.item_count);
        let mut records = Vec::new();
        for log in logs {
            if log.user_count != users || log.item_count != items {
                return Err(Error::invalid("merging logs over different id universes"));
            }
            records.extend_from_slice(&log.records);
        }
        Self::new(records, users, items)
    }

    /// A copy of this log with extra records appended (same universes).
    pub fn with_records(&self, extra: &[Interaction]) -> Result<Self> {
        let mut records = self.records.clone();
        records.extend_from_slice(extra);
        Self::new(records, self.user_count, self.item_count)
    }

    /// Each user's chronologically last interaction (ties: largest item id).
    pub fn last_per_user(&self) -> Vec<Interaction> {
        let mut last: Vec<Option<Interaction>> = vec![None; self.user_count];
        for r in &self.records {
            last[r.user] = Some(*r);
        }
        let mut out: Vec<Interaction> = last.into_iter().flatten().collect();
        out.sort_by_key(Interaction::sort_key);
        out
    }
}

/// Re-indexes users and items to `0..n` in ascending order of original id.
/// Returns the compacted log and the old id of every new id.
pub(crate) fn compact(records: Vec<Interaction>) -> Result<(InteractionLog, Vec<usize>, Vec<usize>)> {
    let mut users: Vec<usize> = records.iter().map(|r| r.user).collect();
    let mut items: Vec<usize> = records.iter().map(|r| r.item).collect();
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    let user_index: HashMap<usize, usize> = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let item_index: HashMap<usize, usize> = items.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let records = records
        .into_iter()
        .map(|r| Interaction::new(user_index[&r.user], item_index[&r.item], r.timestamp))
        .collect();
    let log = InteractionLog::new(records, users.len(), items.len())?;
    Ok((log, users, items))
}

/// Iteratively drops users with fewer than `min_user` and items with fewer
/// than `min_item` interactions until nothing changes, then re-compacts ids.
pub fn k_core_filter(log: &InteractionLog, min_user: usize, min_item: usize) -> Result<InteractionLog> {
    k_core_filter_with_map(log, min_user, min_item).map(|(log, _, _)| log)
}

/// [`k_core_filter`] that also returns, for each surviving new id, its id in the input log.
pub fn k_core_filter_with_map(
    log: &InteractionLog,
    min_user: usize,
    min_item: usize,
) -> Result<(InteractionLog, Vec<usize>, Vec<usize>)> {
    if min_user == 0 || min_item == 0 {
        return Err(Error::invalid("k-core thresholds must be at least 1"));
    }
    let mut records = log.records.clone();
    loop {
        let mut user_deg = vec![0usize; log.user_count];
        let mut item_deg = vec![0usize; log.item_count];
        for r in &records {
            user_deg[r.user] += 1;
            item_deg[r.item] += 1;
        }
        let before = records.len();
        records.retain(|r| user_deg[r.user] >= min_user && item_deg[r.item] >= min_item);
        if records.len() == before {
            break;
        }
    }
    compact(records)
}

/// Splits the time-sorted log by record count into (train, valid, test).
pub fn chronological_split(
    log: &InteractionLog,
    train_frac: f64,
    valid_frac: f64,
) -> Result<(InteractionLog, InteractionLog, InteractionLog)> {
    if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
        return Err(Error::invalid(format!(
            "split fractions {train_frac}/{valid_frac} must be positive and sum below 1"
        )));
    }
    let n = log.len();
    if n < 3 {
        return Err(Error::invalid(format!("cannot split {n} records three ways")));
    }
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 2);
    let n_valid = ((valid_frac * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let part = |range: std::ops::Range<usize>| InteractionLog {
        records: log.records[range].to_vec(),
        user_count: log.user_count,
        item_count: log.item_count,
    };
    Ok((
        part(0..n_train),
        part(n_train..n_train + n_valid),
        part(n_train + n_valid..n),
    ))
}

/// Holds out each user's last interaction. Every user present must have at least two.
pub fn leave_last_out_split(log: &InteractionLog) -> Result<(InteractionLog, Vec<Interaction>)> {
    let mut counts = vec![0usize; log.user_count];
    for r in &log.records {
        counts[r.user] += 1;
    }
    if let Some(user) = counts.iter().position(|&c| c == 1) {
        return Err(Error::invalid(format!(
            "user {user} has a single interaction; leave-last-out needs at least two"
        )));
    }
    let mut last_index = vec![usize::MAX; log.user_count];
    for (i, r) in log.records.iter().enumerate() {
        last_index[r.user] = i;
    }
    let mut train = Vec::with_capacity(log.len());
    let mut test = Vec::new();
    for (i, r) in log.records.iter().enumerate() {
        if last_index[r.user] == i {
            test.push(*r);
        } else {
            train.push(*r);
        }
    }
    Ok((
        InteractionLog {
            records: train,
            user_count: log.user_count,
            item_count: log.item_count,
        },
        test,
    ))
}

/// Fixed-width window of a node's latest interactions strictly before `query_time`.
///
/// Padding slots (`None`) occupy the prefix; real entries run oldest to newest
/// with positions `1..=k`. A neighborhood expanded from a padding slot has no
/// owner and no query time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub node: Option<NodeRef>,
    pub query_time: Option<Timestamp>,
    pub entries: Vec<Option<Interaction>>,
}

impl Neighborhood {
    pub fn padding(width: usize) -> Self {
        Self {
            node: None,
            query_time: None,
            entries: vec![None; width],
        }
    }

    pub fn width(&self) -> usize {
        self.entries.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.entries.iter().map(Option::is_some).collect()
    }

    pub fn real(&self) -> impl Iterator<Item = &Interaction> {
        self.entries.iter().flatten()
    }

    pub fn real_count(&self) -> usize {
        self.real().count()
    }
}

/// Per-user and per-item chronological adjacency. Immutable once built.
#[derive(Debug, Clone)]
pub struct TemporalBipartiteGraph {
    per_user: Vec<Vec<(usize, Timestamp)>>,
    per_item: Vec<Vec<(usize, Timestamp)>>,
}

impl TemporalBipartiteGraph {
    pub fn build(log: &InteractionLog) -> Self {
        let mut per_user = vec![Vec::new(); log.user_count];
        let mut per_item = vec![Vec::new(); log.item_count];
        // Log order is (timestamp, user, item), so both lists come out sorted.
        for r in &log.records {
            per_user[r.user].push((r.item, r.timestamp));
            per_item[r.item].push((r.user, r.timestamp));
        }
        Self { per_user, per_item }
    }

    pub fn user_count(&self) -> usize {
        self.per_user.len()
    }

    pub fn item_count(&self) -> usize {
        self.per_item.len()
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::User => self.user_count(),
            NodeKind::Item => self.item_count(),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    /// Chronological (other endpoint, timestamp) list of a node.
    pub fn adjacency(&self, node: NodeRef) -> Result<&[(usize, Timestamp)]> {
        let lists = match node.kind {
            NodeKind::User => &self.per_user,
            NodeKind::Item => &self.per_item,
        };
        lists.get(node.id).map(Vec::as_slice).ok_or(Error::UnknownNode {
            kind: node.kind.name(),
            id: node.id,
        })
    }

    /// The part of a node's adjacency strictly before `t`.
    pub fn history_before(&self, node: NodeRef, t: Timestamp) -> Result<&[(usize, Timestamp)]> {
        let adj = self.adjacency(node)?;
        let end = adj.partition_point(|&(_, ts)| ts < t);
        Ok(&adj[..end])
    }

    /// Items the user interacted with at or before `t`.
    pub fn items_up_to(&self, user: usize, t: Timestamp) -> Result<&[(usize, Timestamp)]> {
        let adj = self.adjacency(NodeRef::user(user))?;
        let end = adj.partition_point(|&(_, ts)| ts <= t);
        Ok(&adj[..end])
    }

    pub fn neighborhood(&self, node: NodeRef, t_q: Timestamp, n: usize) -> Result<Neighborhood> {
        if n == 0 {
            return Err(Error::invalid("neighborhood width must be at least 1"));
        }
        let history = self.history_before(node, t_q)?;
        let real = &history[history.len().saturating_sub(n)..];
        let mut entries = vec![None; n - real.len()];
        entries.extend(real.iter().enumerate().map(|(i, &(other, ts))| {
            let (user, item) = match node.kind {
                NodeKind::User => (node.id, other),
                NodeKind::Item => (other, node.id),
            };
            Some(Interaction {
                user,
                item,
                timestamp: ts,
                position: i as u32 + 1,
            })
        }));
        Ok(Neighborhood {
            node: Some(node),
            query_time: Some(t_q),
            entries,
        })
    }

    pub fn user_neighborhood(&self, user: usize, t_q: Timestamp, n: usize) -> Result<Neighborhood> {
        self.neighborhood(NodeRef::user(user), t_q, n)
    }

    pub fn item_neighborhood(&self, item: usize, t_q: Timestamp, n: usize) -> Result<Neighborhood> {
        self.neighborhood(NodeRef::item(item), t_q, n)
    }
}

/// Tree of neighborhoods rooted at one node at one time.
///
/// `layers[0]` is the root's own neighborhood (the outermost convolution);
/// `layers[i + 1]` holds, for every slot of every neighborhood in `layers[i]`,
/// the neighborhood of that slot's opposite endpoint taken at the slot's own
/// timestamp, or an all-padding neighborhood for padding slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeFlow {
    pub root: NodeRef,
    pub query_time: Timestamp,
    pub layers: Vec<Vec<Neighborhood>>,
}

impl NodeFlow {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn neighborhoods(&self) -> impl Iterator<Item = &Neighborhood> {
        self.layers.iter().flatten()
    }
}

/// Builds a node flow; `widths` lists neighborhood widths outermost first and
/// its length is the depth.
pub fn build_node_flow(
    graph: &TemporalBipartiteGraph,
    root: NodeRef,
    t_q: Timestamp,
    widths: &[usize],
) -> Result<NodeFlow> {
    let (&root_width, rest) = widths
        .split_first()
        .ok_or_else(|| Error::invalid("node flow depth must be at least 1"))?;
    let mut layers = vec![vec![graph.neighborhood(root, t_q, root_width)?]];
    for &width in rest {
        let parent = layers.last().expect("non-empty");
        let mut next = Vec::with_capacity(parent.len() * width);
        for nb in parent {
            let child_kind = nb.node.map(|n| n.kind.opposite());
            for slot in &nb.entries {
                match (slot, child_kind) {
                    (Some(e), Some(kind)) => {
                        let child = NodeRef {
                            kind,
                            id: e.endpoint(kind),
                        };
                        next.push(graph.neighborhood(child, e.timestamp, width)?);
                    }
                    _ => next.push(Neighborhood::padding(width)),
                }
            }
        }
        layers.push(next);
    }
    Ok(NodeFlow {
        root,
        query_time: t_q,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(rows: &[(usize, usize, i64)]) -> InteractionLog {
        InteractionLog::compacted(rows.iter().map(|&(u, v, t)| Interaction::new(u, v, t)).collect()).unwrap()
    }

    #[test]
    fn k_core_drops_light_user() {
        // u0:[a,b], u1:[a]
        let l = log(&[(0, 0, 1), (0, 1, 2), (1, 0, 3)]);
        let f = k_core_filter(&l, 2, 1).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.user_count(), 1);
        assert_eq!(f.item_count(), 2);
    }

    #[test]
    fn k_core_identity_and_cascade() {
        let l = log(&[(0, 0, 1), (0, 1, 2), (1, 0, 3)]);
        assert_eq!(k_core_filter(&l, 1, 1).unwrap(), l);
        // u0:[a], u1:[a] with min_user=2 empties everything.
        let l = log(&[(0, 0, 1), (1, 0, 2)]);
        let f = k_core_filter(&l, 2, 1).unwrap();
        assert!(f.is_empty());
        assert_eq!((f.user_count(), f.item_count()), (0, 0));
    }

    #[test]
    fn k_core_rejects_zero_threshold() {
        let l = log(&[(0, 0, 1)]);
        assert!(k_core_filter(&l, 0, 1).is_err());
    }

    #[test]
    fn graph_counts() {
        let l = log(&[(1, 10, 100), (1, 11, 200), (2, 10, 150)]);
        let g = TemporalBipartiteGraph::build(&l);
        assert_eq!(g.adjacency(NodeRef::user(0)).unwrap().len(), 2);
        assert_eq!(g.adjacency(NodeRef::item(0)).unwrap().len(), 2);
        assert_eq!(g.edge_count(), 3);
        let empty = TemporalBipartiteGraph::build(&InteractionLog::empty(0, 0));
        assert_eq!(empty.edge_count(), 0);
    }

    #[test]
    fn strictly_before_and_padding() {
        let l = log(&[(0, 0, 1), (0, 1, 2), (0, 2, 3)]);
        let g = TemporalBipartiteGraph::build(&l);
        let nb = g.user_neighborhood(0, 3, 2).unwrap();
        let ts: Vec<i64> = nb.real().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![1, 2]);
        assert_eq!(nb.mask(), vec![true, true]);

        let nb = g.user_neighborhood(0, 1, 3).unwrap();
        assert_eq!(nb.mask(), vec![false; 3]);

        let nb = g.user_neighborhood(0, 3, 4).unwrap();
        assert_eq!(nb.mask(), vec![false, false, true, true]);
        let pos: Vec<u32> = nb.real().map(|e| e.position).collect();
        assert_eq!(pos, vec![1, 2]);
    }

    #[test]
    fn latest_n_in_ascending_order() {
        let l = log(&[(0, 0, 1), (0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5)]);
        let g = TemporalBipartiteGraph::build(&l);
        let nb = g.user_neighborhood(0, 100, 3).unwrap();
        let ts: Vec<i64> = nb.real().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![3, 4, 5]);
    }

    #[test]
    fn item_gains_edge_only_after_its_time() {
        // Item 1 gets a new interaction with user 0 at t5 = 5.
        let l = log(&[(0, 0, 1), (1, 1, 2), (1, 2, 3), (0, 2, 4), (0, 1, 5)]);
        let g = TemporalBipartiteGraph::build(&l);
        let at = g.item_neighborhood(1, 5, 4).unwrap();
        assert!(!at.real().any(|e| e.user == 0 && e.timestamp == 5));
        let after = g.item_neighborhood(1, 6, 4).unwrap();
        assert!(after.real().any(|e| e.user == 0 && e.timestamp == 5));
    }

    #[test]
    fn unknown_node_errors() {
        let l = log(&[(0, 0, 1)]);
        let g = TemporalBipartiteGraph::build(&l);
        assert!(matches!(
            g.user_neighborhood(5, 1, 1),
            Err(Error::UnknownNode { kind: "user", id: 5 })
        ));
    }

    #[test]
    fn node_flow_shapes() {
        // user 0 has items 0,1 at t=10,11; each item has two earlier users.
        let l = log(&[(1, 0, 1), (2, 0, 2), (1, 1, 3), (2, 1, 4), (0, 0, 10), (0, 1, 11)]);
        let g = TemporalBipartiteGraph::build(&l);
        let flow = build_node_flow(&g, NodeRef::user(0), 20, &[2]).unwrap();
        assert_eq!(flow.depth(), 1);
        let flow = build_node_flow(&g, NodeRef::user(0), 20, &[2, 2]).unwrap();
        assert_eq!(flow.layers[0].len(), 1);
        assert_eq!(flow.layers[1].len(), 2);
        for nb in &flow.layers[1] {
            assert_eq!(nb.node.unwrap().kind, NodeKind::Item);
            assert_eq!(nb.real_count(), 2);
        }
    }

    #[test]
    fn splits() {
        let rows: Vec<_> = (0..10).map(|i| (i % 3, i % 4, i as i64)).collect();
        let l = log(&rows);
        let (a, b, c) = chronological_split(&l, 0.8, 0.1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert!(chronological_split(&log(&[(0, 0, 1), (0, 1, 2)]), 0.5, 0.25).is_err());
        assert!(chronological_split(&l, 0.8, 0.2).is_err());

        let rows: Vec<_> = (0..100).map(|i| (i % 7, i % 5, i as i64)).collect();
        let (a, b, c) = chronological_split(&log(&rows), 0.5, 0.25).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (50, 25, 25));
    }

    #[test]
    fn leave_last_out() {
        let l = log(&[(0, 0, 1), (0, 1, 2), (0, 2, 3), (1, 0, 1), (1, 2, 5)]);
        let (train, test) = leave_last_out_split(&l).unwrap();
        assert_eq!(test.len(), 2);
        assert!(test.iter().any(|r| r.user == 0 && r.timestamp == 3));
        assert_eq!(train.len(), 3);
        let single = log(&[(0, 0, 1), (0, 1, 2), (1, 0, 3)]);
        assert!(leave_last_out_split(&single).is_err());
    }

    #[test]
    fn leave_last_out_tie_takes_larger_item() {
        let l = log(&[(0, 0, 1), (0, 2, 5), (0, 1, 5)]);
        let (_, test) = leave_last_out_split(&l).unwrap();
        assert_eq!(test[0].item, 2);
    }
}
