//! Ranking metrics, ranking protocols, cold-start cohorts and a popularity
//! reference ranker.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::conv::{Forward, Model};
use crate::error::{Error, Result};
use crate::graph::{Interaction, InteractionLog, NodeRef, TemporalBipartiteGraph, Timestamp};
use crate::par::Executor;
use crate::rng::{hash_words, purpose, SplitMix64};
use crate::tensor::dot;

/// Items for one (user, time) ordered by descending score, ties broken by
/// ascending item id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: usize,
    pub query_time: Timestamp,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// Sorts `(item, score)` candidates; NaN scores are rejected.
    pub fn from_scores(user: usize, query_time: Timestamp, mut candidates: Vec<(usize, f64)>) -> Result<Self> {
        if candidates.iter().any(|(_, s)| s.is_nan()) {
            return Err(Error::NaN("ranking score"));
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (items, scores) = candidates.into_iter().unzip();
        Ok(Self {
            user,
            query_time,
            items,
            scores,
        })
    }

    /// 1-based rank of `item`, if present.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.items.iter().position(|&i| i == item).map(|p| p + 1)
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.items[..k.min(self.items.len())]
    }
}

pub fn recall_at_k(ranked: &RankedList, truth: usize, k: usize) -> f64 {
    recall_from_rank(ranked.rank_of(truth), k)
}

pub fn ndcg_at_k(ranked: &RankedList, truth: usize, k: usize) -> f64 {
    ndcg_from_rank(ranked.rank_of(truth), k)
}

pub fn recall_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Candidate set used when ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Every item (minus excluded ones).
    Full,
    /// The true item plus this many uniformly sampled unseen items.
    Sampled(usize),
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Protocol::Full);
        }
        let m = s
            .strip_prefix("sampled")
            .map(|r| r.trim_start_matches([':', '(']).trim_end_matches(')'))
            .ok_or_else(|| Error::invalid(format!("unknown protocol {s:?}")))?;
        if m.is_empty() {
            return Ok(Protocol::Sampled(100));
        }
        m.parse()
            .map(Protocol::Sampled)
            .map_err(|_| Error::invalid(format!("unknown protocol {s:?}")))
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Full => f.write_str("full"),
            Protocol::Sampled(m) => write!(f, "sampled:{m}"),
        }
    }
}

/// Ranking options shared by every query of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankOptions {
    pub protocol: Protocol,
    /// Drop items the user interacted with strictly before the query time.
    pub exclude_seen: bool,
    pub seed: u64,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            protocol: Protocol::Full,
            exclude_seen: true,
            seed: 0,
        }
    }
}

/// Anything that scores candidate items for a user at a time.
pub trait Scorer: Sync {
    fn item_count(&self) -> usize;
    fn score_items(&self, user: usize, time: Timestamp, items: &[usize]) -> Result<Vec<f64>>;
}

/// Scores with the model's final embeddings and an inner product.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub graph: &'a TemporalBipartiteGraph,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, graph: &'a TemporalBipartiteGraph) -> Self {
        Self { model, graph }
    }
}

impl Scorer for ModelScorer<'_> {
    fn item_count(&self) -> usize {
        self.model.item_count()
    }

    fn score_items(&self, user: usize, time: Timestamp, items: &[usize]) -> Result<Vec<f64>> {
        let mut fwd = Forward::eval(self.model, self.graph);
        let mut roots = Vec::with_capacity(items.len() + 1);
        roots.push((NodeRef::user(user), time));
        roots.extend(items.iter().map(|&i| (NodeRef::item(i), time)));
        let vars = fwd.embed_batch(&roots)?;
        let zu = fwd.tape.value(vars[0]);
        Ok(vars[1..].iter().map(|&v| dot(zu, fwd.tape.value(v))).collect())
    }
}

/// Ranks items by training interaction count; time-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityRanker {
    pub counts: Vec<usize>,
}

impl PopularityRanker {
    pub fn fit(train: &InteractionLog) -> Self {
        let mut counts = vec![0; train.item_count()];
        for r in train.records() {
            counts[r.item] += 1;
        }
        Self { counts }
    }
}

impl Scorer for PopularityRanker {
    fn item_count(&self) -> usize {
        self.counts.len()
    }

    fn score_items(&self, _user: usize, _time: Timestamp, items: &[usize]) -> Result<Vec<f64>> {
        items
            .iter()
            .map(|&i| {
                self.counts
                    .get(i)
                    .map(|&c| c as f64)
                    .ok_or(Error::UnknownNode { kind: "item", id: i })
            })
            .collect()
    }
}

impl<F> Scorer for (usize, F)
where
    F: Fn(usize, Timestamp, &[usize]) -> Result<Vec<f64>> + Sync,
{
    fn item_count(&self) -> usize {
        self.0
    }

    fn score_items(&self, user: usize, time: Timestamp, items: &[usize]) -> Result<Vec<f64>> {
        (self.1)(user, time, items)
    }
}

/// Ranks candidates for `user` at `time`. `truth` is only consulted by the
/// sampled protocol, which always includes it.
pub fn rank_items(
    scorer: &dyn Scorer,
    graph: &TemporalBipartiteGraph,
    user: usize,
    time: Timestamp,
    truth: Option<usize>,
    options: &RankOptions,
) -> Result<RankedList> {
    if user >= graph.user_count() {
        return Err(Error::UnknownNode { kind: "user", id: user });
    }
    let n = scorer.item_count();
    let seen: HashSet<usize> = if options.exclude_seen {
        graph
            .history_before(NodeRef::user(user), time)?
            .iter()
            .map(|&(i, _)| i)
            .collect()
    } else {
        HashSet::new()
    };
    let candidates: Vec<usize> = match options.protocol {
        Protocol::Full => (0..n).filter(|i| !seen.contains(i)).collect(),
        Protocol::Sampled(m) => {
            let truth = truth.ok_or_else(|| Error::invalid("sampled protocol needs the true item"))?;
            let mut pool: Vec<usize> = (0..n).filter(|&i| i != truth && !seen.contains(&i)).collect();
            let mut rng = SplitMix64::new(hash_words(&[options.seed, purpose::EVAL, user as u64, time as u64]));
            let take = m.min(pool.len());
            // Partial Fisher-Yates: the first `take` slots are a uniform sample.
            for i in 0..take {
                let j = i + rng.below(pool.len() - i);
                pool.swap(i, j);
            }
            pool.truncate(take);
            pool.push(truth);
            pool
        }
    };
    let scores = scorer.score_items(user, time, &candidates)?;
    RankedList::from_scores(user, time, candidates.into_iter().zip(scores).collect())
}

/// Outcome of ranking one held-out interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub user: usize,
    pub time: Timestamp,
    pub truth: usize,
    pub rank: Option<usize>,
    /// Interactions of the user strictly before `time`.
    pub history: usize,
}

/// Ranks every test interaction; queries run in parallel on `executor`.
pub fn rank_test_set(
    scorer: &dyn Scorer,
    graph: &TemporalBipartiteGraph,
    test: &[Interaction],
    options: &RankOptions,
    executor: &Executor,
) -> Result<Vec<QueryResult>> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    executor
        .map(test, |q| {
            let ranked = rank_items(scorer, graph, q.user, q.timestamp, Some(q.item), options)?;
            Ok(QueryResult {
                user: q.user,
                time: q.timestamp,
                truth: q.item,
                rank: ranked.rank_of(q.item),
                history: graph.history_before(NodeRef::user(q.user), q.timestamp)?.len(),
            })
        })
        .into_iter()
        .collect()
}

/// One line of a metrics table; `value` is `None` for empty groups.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub k: usize,
    pub group: String,
    pub value: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn get(&self, metric: &str, k: usize, group: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.k == k && r.group == group)
            .and_then(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,group,value,count\n");
        for r in &self.rows {
            let value = r.value.map_or(String::new(), |v| format!("{v}"));
            let _ = writeln!(out, "{},{},{},{},{}", r.metric, r.k, r.group, value, r.count);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>4} {:<10} {:>10} {:>8}\n",
            "metric", "k", "group", "value", "count"
        );
        for r in &self.rows {
            let value = r.value.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<8} {:>4} {:<10} {:>10} {:>8}",
                r.metric, r.k, r.group, value, r.count
            );
        }
        out
    }

    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }
}

fn summarize(results: &[&QueryResult], ks: &[usize], group: &str) -> Vec<MetricRow> {
    let count = results.len();
    let mut rows = Vec::new();
    for &k in ks {
        for (metric, f) in [
            ("recall", recall_from_rank as fn(Option<usize>, usize) -> f64),
            ("ndcg", ndcg_from_rank),
        ] {
            let value = (count > 0).then(|| results.iter().map(|r| f(r.rank, k)).sum::<f64>() / count as f64);
            rows.push(MetricRow {
                metric,
                k,
                group: group.to_string(),
                value,
                count,
            });
        }
    }
    rows
}

/// Mean Recall@k and NDCG@k over all queries, group `all`.
pub fn metrics(results: &[QueryResult], ks: &[usize]) -> Result<MetricsTable> {
    if ks.contains(&0) {
        return Err(Error::invalid("k must be at least 1"));
    }
    let refs: Vec<&QueryResult> = results.iter().collect();
    Ok(MetricsTable {
        rows: summarize(&refs, ks, "all"),
    })
}

/// Ranks the test set and averages the metrics.
pub fn evaluate(
    scorer: &dyn Scorer,
    graph: &TemporalBipartiteGraph,
    test: &[Interaction],
    ks: &[usize],
    options: &RankOptions,
    executor: &Executor,
) -> Result<MetricsTable> {
    let results = rank_test_set(scorer, graph, test, options, executor)?;
    metrics(&results, ks)
}

/// Cumulative cohorts `lt{threshold}`: queries whose user had fewer than
/// `threshold` prior interactions.
pub fn cold_start_report(results: &[QueryResult], thresholds: &[usize], k: usize) -> Result<MetricsTable> {
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("cohort thresholds must be strictly ascending"));
    }
    let mut table = MetricsTable::default();
    for &th in thresholds {
        let group: Vec<&QueryResult> = results.iter().filter(|r| r.history < th).collect();
        table.rows.extend(summarize(&group, &[k], &format!("lt{th}")));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(scores: &[(usize, f64)]) -> RankedList {
        RankedList::from_scores(0, 0, scores.to_vec()).unwrap()
    }

    #[test]
    fn ordering_and_ties() {
        assert_eq!(list(&[(0, 1.0), (1, 0.5)]).items, vec![0, 1]);
        assert_eq!(list(&[(3, 0.5), (1, 0.5), (2, 0.7)]).items, vec![2, 1, 3]);
        assert!(RankedList::from_scores(0, 0, vec![(0, f64::NAN)]).is_err());
    }

    #[test]
    fn metric_examples() {
        let r = list(&[(0, 6.), (1, 5.), (2, 4.), (3, 3.), (4, 2.), (5, 1.)]);
        assert_eq!(recall_at_k(&r, 0, 5), 1.0);
        assert_eq!(recall_at_k(&r, 5, 5), 0.0);
        assert_eq!(ndcg_at_k(&r, 0, 5), 1.0);
        assert_eq!(ndcg_at_k(&r, 2, 5), 0.5);
        assert_eq!(ndcg_at_k(&r, 5, 5), 0.0);
        assert_eq!(ndcg_at_k(&r, 9, 5), 0.0);
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("full".parse::<Protocol>().unwrap(), Protocol::Full);
        assert_eq!("sampled:100".parse::<Protocol>().unwrap(), Protocol::Sampled(100));
        assert_eq!("sampled(5)".parse::<Protocol>().unwrap(), Protocol::Sampled(5));
        assert!("bogus".parse::<Protocol>().is_err());
    }

    fn toy_graph() -> TemporalBipartiteGraph {
        let log = InteractionLog::new(
            vec![
                Interaction::new(0, 0, 1),
                Interaction::new(0, 1, 2),
                Interaction::new(1, 2, 3),
            ],
            2,
            5,
        )
        .unwrap();
        TemporalBipartiteGraph::build(&log)
    }

    #[test]
    fn full_mode_excludes_seen_and_sampled_keeps_truth() {
        let g = toy_graph();
        let scorer = (5, |_: usize, _: Timestamp, items: &[usize]| {
            Ok(items.iter().map(|&i| i as f64).collect())
        });
        let r = rank_items(&scorer, &g, 0, 10, None, &RankOptions::default()).unwrap();
        assert_eq!(r.items, vec![4, 3, 2]);
        let opts = RankOptions {
            exclude_seen: false,
            ..RankOptions::default()
        };
        assert_eq!(
            rank_items(&scorer, &g, 0, 10, None, &opts).unwrap().items,
            vec![4, 3, 2, 1, 0]
        );
        let opts = RankOptions {
            protocol: Protocol::Sampled(2),
            ..RankOptions::default()
        };
        let r = rank_items(&scorer, &g, 0, 10, Some(2), &opts).unwrap();
        assert_eq!(r.items.len(), 3);
        assert!(r.items.contains(&2));
        assert!(!r.items.contains(&0) && !r.items.contains(&1));
        assert!(matches!(
            rank_items(&scorer, &g, 7, 10, None, &RankOptions::default()),
            Err(Error::UnknownNode { kind: "user", id: 7 })
        ));
    }

    #[test]
    fn popularity_orders_by_count_then_id() {
        let log = InteractionLog::new(
            vec![
                Interaction::new(0, 1, 1),
                Interaction::new(1, 1, 2),
                Interaction::new(2, 1, 3),
                Interaction::new(0, 0, 4),
                Interaction::new(1, 2, 5),
            ],
            4,
            4,
        )
        .unwrap();
        let pop = PopularityRanker::fit(&log);
        let g = TemporalBipartiteGraph::build(&log);
        let opts = RankOptions {
            exclude_seen: false,
            ..RankOptions::default()
        };
        let r = rank_items(&pop, &g, 3, 10, None, &opts).unwrap();
        assert_eq!(r.items, vec![1, 0, 2, 3]);
    }

    #[test]
    fn perfect_scorer_gets_full_marks_and_cohorts_count() {
        let g = toy_graph();
        let test = vec![Interaction::new(0, 3, 10), Interaction::new(1, 4, 10)];
        let scorer = (5, |u: usize, _: Timestamp, items: &[usize]| {
            let truth = if u == 0 { 3 } else { 4 };
            Ok(items.iter().map(|&i| if i == truth { 1.0 } else { 0.0 }).collect())
        });
        let ex = Executor::sequential();
        let results = rank_test_set(&scorer, &g, &test, &RankOptions::default(), &ex).unwrap();
        let table = metrics(&results, &[1, 5, 10]).unwrap();
        for k in [1, 5, 10] {
            assert_eq!(table.get("recall", k, "all"), Some(1.0));
            assert_eq!(table.get("ndcg", k, "all"), Some(1.0));
        }
        let cohorts = cold_start_report(&results, &[1, 2, 3, 4], 10).unwrap();
        let counts: Vec<usize> = cohorts.rows.iter().step_by(2).map(|r| r.count).collect();
        assert_eq!(counts, vec![0, 1, 2, 2]);
        assert_eq!(cohorts.get("recall", 10, "lt1"), None);
        assert!(cohorts.to_csv().contains("recall,10,lt1,,0"));
        assert!(evaluate(&scorer, &g, &[], &[10], &RankOptions::default(), &ex).is_err());
    }
}
