use proptest::prelude::*;
use std::collections::HashSet;

use ptgcn::config::Config;
use ptgcn::encoders::time_bucket;
use ptgcn::eval::RankedList;
use ptgcn::graph::{
    chronological_split, k_core_filter, leave_last_out_split, Interaction, InteractionLog, NodeRef,
    TemporalBipartiteGraph,
};
use ptgcn::io::{canonical_string, parse_canonical};

fn arb_log(max_users: usize, max_items: usize, max_len: usize) -> impl Strategy<Value = InteractionLog> {
    (2..=max_users, 2..=max_items).prop_flat_map(move |(users, items)| {
        prop::collection::vec((0..users, 0..items, 0i64..200), 1..=max_len).prop_map(move |rows| {
            let mut seen = HashSet::new();
            let records = rows
                .into_iter()
                .filter(|&r| seen.insert(r))
                .map(|(u, v, t)| Interaction::new(u, v, t))
                .collect();
            InteractionLog::new(records, users, items).unwrap()
        })
    })
}

fn degrees(log: &InteractionLog) -> (Vec<usize>, Vec<usize>) {
    let mut u = vec![0; log.user_count()];
    let mut v = vec![0; log.item_count()];
    for r in log.records() {
        u[r.user] += 1;
        v[r.item] += 1;
    }
    (u, v)
}

proptest! {
    #[test]
    fn k_core_is_idempotent_and_meets_thresholds(log in arb_log(12, 12, 80), ku in 1usize..4, ki in 1usize..4) {
        let once = k_core_filter(&log, ku, ki).unwrap();
        let twice = k_core_filter(&once, ku, ki).unwrap();
        prop_assert_eq!(&once, &twice);
        let (u, v) = degrees(&once);
        prop_assert!(u.iter().all(|&d| d >= ku));
        prop_assert!(v.iter().all(|&d| d >= ki));
    }

    #[test]
    fn neighborhoods_hold_latest_strictly_earlier_events(
        log in arb_log(8, 8, 60),
        pick in 0usize..16,
        t in 0i64..220,
        n in 1usize..8,
    ) {
        let graph = TemporalBipartiteGraph::build(&log);
        let node = if pick % 2 == 0 {
            NodeRef::user(pick / 2 % log.user_count())
        } else {
            NodeRef::item(pick / 2 % log.item_count())
        };
        let nb = graph.neighborhood(node, t, n).unwrap();
        prop_assert_eq!(nb.width(), n);
        let real: Vec<&Interaction> = nb.real().collect();
        let pad = n - real.len();
        prop_assert!(nb.entries[..pad].iter().all(Option::is_none));
        prop_assert!(nb.entries[pad..].iter().all(Option::is_some));
        for (i, e) in real.iter().enumerate() {
            prop_assert_eq!(e.position as usize, i + 1);
            prop_assert!(e.timestamp < t);
            prop_assert_eq!(e.endpoint(node.kind), node.id);
        }
        prop_assert!(real.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let earlier = log.records().iter().filter(|r| r.endpoint(node.kind) == node.id && r.timestamp < t).count();
        prop_assert_eq!(real.len(), earlier.min(n));
        if let Some(oldest) = real.first() {
            // Nothing skipped between the window and the query time is older than it.
            let newer = log
                .records()
                .iter()
                .filter(|r| r.endpoint(node.kind) == node.id && r.timestamp < t && r.timestamp > oldest.timestamp)
                .count();
            prop_assert!(newer < n);
        }
    }

    #[test]
    fn time_bucket_is_monotone(a in 0.0f64..1e7, b in 0.0f64..1e7, buckets in 2usize..40) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(time_bucket(lo, buckets) <= time_bucket(hi, buckets));
        prop_assert!(time_bucket(hi, buckets) <= buckets - 2);
    }

    #[test]
    fn ranked_lists_are_sorted_permutations(scores in prop::collection::vec(-5i32..5, 1..40)) {
        let candidates: Vec<(usize, f64)> = scores.iter().enumerate().map(|(i, &s)| (i, s as f64)).collect();
        let list = RankedList::from_scores(0, 0, candidates).unwrap();
        let mut items = list.items.clone();
        items.sort_unstable();
        prop_assert_eq!(items, (0..scores.len()).collect::<Vec<_>>());
        for w in list.items.windows(2) {
            let (a, b) = (scores[w[0]], scores[w[1]]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }

    #[test]
    fn chronological_split_partitions_in_order(log in arb_log(6, 6, 60), tf in 0.1f64..0.7, vf in 0.05f64..0.25) {
        prop_assume!(log.len() >= 3);
        let (a, b, c) = chronological_split(&log, tf, vf).unwrap();
        prop_assert!(!a.is_empty() && !b.is_empty() && !c.is_empty());
        let joined: Vec<Interaction> = [a.records(), b.records(), c.records()].concat();
        prop_assert_eq!(joined.as_slice(), log.records());
    }

    #[test]
    fn leave_last_holds_out_each_users_final_event(log in arb_log(6, 10, 60)) {
        let (u, _) = degrees(&log);
        prop_assume!(u.iter().all(|&d| d != 1));
        let (train, test) = leave_last_out_split(&log).unwrap();
        prop_assert_eq!(train.len() + test.len(), log.len());
        prop_assert_eq!(test.len(), u.iter().filter(|&&d| d > 0).count());
        for q in &test {
            prop_assert!(train.records().iter().filter(|r| r.user == q.user).all(|r| r.timestamp <= q.timestamp));
        }
    }

    #[test]
    fn canonical_text_round_trips(log in arb_log(10, 10, 50)) {
        let text = canonical_string(&log, &["note".to_string()]);
        prop_assert_eq!(parse_canonical(&text).unwrap(), log);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6f64..1.0, batch in 1usize..512, dropout in 0.0f64..0.9) {
        let config = Config { seed, lr, batch_size: batch, model: ptgcn::conv::ModelConfig { dropout, ..Default::default() }, ..Config::default() };
        prop_assert_eq!(Config::parse(&config.to_text()).unwrap(), config);
    }
}
