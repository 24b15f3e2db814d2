//! Deterministic generators of small interaction logs with planted structure.
//!
//! * `cyclic`: every user walks a fixed cyclic permutation of the items, so
//!   the next item is a function of the previous one.
//! * `temporal_drift`: time is split into windows; in window `w` the item
//!   block `w` receives `hot_share` of the interactions. Half of the users
//!   (the stale cohort) only act in the first window and then return once at
//!   the end, so their own history points at an outdated block.
//! * `high_order`: users form communities with disjoint item pools; in every
//!   phase each community concentrates on a small focus subset of its pool.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Interaction, InteractionLog, Timestamp};
use crate::rng::{hash_words, purpose, SplitMix64};

/// First timestamp of every generated log (2020-09-13, in seconds).
pub const BASE_TIME: Timestamp = 1_600_000_000;
pub const DAY: Timestamp = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Cyclic,
    TemporalDrift,
    HighOrder,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "cyclic" => Ok(GeneratorKind::Cyclic),
            "temporal_drift" | "drift" => Ok(GeneratorKind::TemporalDrift),
            "high_order" => Ok(GeneratorKind::HighOrder),
            _ => Err(Error::invalid(format!("unknown generator {s:?}"))),
        }
    }
}

/// Parameters of a generator. Fields that do not apply to a kind are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub users: usize,
    pub items: usize,
    pub per_user: usize,
    pub seed: u64,
    /// Probability of an off-pattern interaction.
    pub noise: f64,
    /// Drift: number of time windows, each with its own hot block.
    pub epochs: usize,
    /// Drift: items per hot block.
    pub block: usize,
    /// Drift: probability that an interaction targets the current hot block.
    pub hot_share: f64,
    /// Drift: fraction of users ("stale") that act before the final window
    /// and return for one interaction at its end; the others act only in the
    /// final window. 0.55 gives both hot blocks the same expected volume.
    pub stale_fraction: f64,
    /// Drift and high-order: days per window or phase.
    pub days_per_epoch: usize,
    /// High-order: number of communities.
    pub communities: usize,
    /// High-order: number of phases with distinct focus sets.
    pub phases: usize,
    /// High-order: focus items per community and phase.
    pub focus: usize,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        let base = Self {
            kind,
            users: 50,
            items: 30,
            per_user: 40,
            seed: 0,
            noise: 0.0,
            epochs: 2,
            block: 10,
            hot_share: 0.8,
            stale_fraction: 0.55,
            days_per_epoch: 30,
            communities: 2,
            phases: 8,
            focus: 4,
        };
        match kind {
            GeneratorKind::Cyclic => base,
            GeneratorKind::TemporalDrift => Self {
                users: 100,
                items: 50,
                per_user: 10,
                ..base
            },
            GeneratorKind::HighOrder => Self {
                users: 100,
                items: 50,
                per_user: 20,
                noise: 0.2,
                days_per_epoch: 8,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.users < 2 || self.items < 2 || self.per_user < 2 {
            return Err(Error::invalid("users, items and per_user must all be at least 2"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::invalid(format!("noise {} outside [0, 1)", self.noise)));
        }
        match self.kind {
            GeneratorKind::Cyclic => {}
            GeneratorKind::TemporalDrift => {
                if self.epochs == 0 || self.block == 0 || self.epochs * self.block > self.items {
                    return Err(Error::invalid("drift needs epochs * block <= items and both positive"));
                }
                if !(0.0..=1.0).contains(&self.hot_share) || !(0.0..=1.0).contains(&self.stale_fraction) {
                    return Err(Error::invalid("hot_share and stale_fraction must lie in [0, 1]"));
                }
                if self.days_per_epoch == 0 {
                    return Err(Error::invalid("days_per_epoch must be positive"));
                }
            }
            GeneratorKind::HighOrder => {
                if self.communities < 1 || self.items / self.communities < 2 {
                    return Err(Error::invalid("each community needs a pool of at least 2 items"));
                }
                if self.phases == 0 || self.focus == 0 || self.focus >= self.items / self.communities {
                    return Err(Error::invalid("focus must be smaller than a community pool"));
                }
                if self.days_per_epoch == 0 {
                    return Err(Error::invalid("days_per_epoch must be positive"));
                }
            }
        }
        Ok(())
    }

    /// One-line `key=value` description, used as a file header comment.
    pub fn describe(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<InteractionLog> {
    match spec.kind {
        GeneratorKind::Cyclic => gen_cyclic(spec),
        GeneratorKind::TemporalDrift => gen_temporal_drift(spec),
        GeneratorKind::HighOrder => gen_high_order(spec),
    }
}

fn rng_for(spec: &GeneratorSpec, stream: u64) -> SplitMix64 {
    SplitMix64::new(hash_words(&[spec.seed, purpose::GENERATOR, stream]))
}

/// Cyclic walks over a random permutation; each user starts at a random
/// item and steps one day at a time (users are offset by one minute).
pub fn gen_cyclic(spec: &GeneratorSpec) -> Result<InteractionLog> {
    spec.validate()?;
    let mut rng = rng_for(spec, 0);
    let mut order: Vec<usize> = (0..spec.items).collect();
    rng.shuffle(&mut order);
    let mut succ = vec![0; spec.items];
    for i in 0..spec.items {
        succ[order[i]] = order[(i + 1) % spec.items];
    }
    let mut records = Vec::with_capacity(spec.users * spec.per_user);
    for u in 0..spec.users {
        let mut item = rng.below(spec.items);
        for j in 0..spec.per_user {
            let t = BASE_TIME + j as Timestamp * DAY + u as Timestamp * 60;
            records.push(Interaction::new(u, item, t));
            item = if spec.noise > 0.0 && rng.bernoulli(spec.noise) {
                rng.below(spec.items)
            } else {
                succ[item]
            };
        }
    }
    InteractionLog::new(records, spec.users, spec.items)
}

/// Uniform draw from `pool` avoiding `seen`, or `None` if all are seen.
fn draw_unseen(rng: &mut SplitMix64, pool: &[usize], seen: &[bool]) -> Option<usize> {
    let free: Vec<usize> = pool.iter().copied().filter(|&i| !seen[i]).collect();
    (!free.is_empty()).then(|| free[rng.below(free.len())])
}

fn random_times(rng: &mut SplitMix64, count: usize, from: Timestamp, to: Timestamp) -> Vec<Timestamp> {
    let span = (to - from).max(1) as usize;
    let mut ts: Vec<Timestamp> = (0..count).map(|_| from + rng.below(span) as Timestamp).collect();
    ts.sort_unstable();
    ts
}

/// Index of the drift window containing `t`.
pub fn drift_window(spec: &GeneratorSpec, t: Timestamp) -> usize {
    let len = spec.days_per_epoch as Timestamp * DAY;
    (((t - BASE_TIME) / len).max(0) as usize).min(spec.epochs - 1)
}

/// Items of the hot block of window `w`.
pub fn hot_block(spec: &GeneratorSpec, w: usize) -> std::ops::Range<usize> {
    w * spec.block..(w + 1) * spec.block
}

/// Number of users in the stale cohort (ids `0..n`).
pub fn stale_users(spec: &GeneratorSpec) -> usize {
    (spec.stale_fraction * spec.users as f64).round() as usize
}

/// Time-windowed popularity. Each interaction targets the current window's
/// hot block with probability `hot_share` and any other item otherwise; a
/// user never repeats an item. Active users act only in the final window.
/// Stale users act in the earlier windows and return for one interaction in
/// the last quarter of the final window.
pub fn gen_temporal_drift(spec: &GeneratorSpec) -> Result<InteractionLog> {
    spec.validate()?;
    let len = spec.days_per_epoch as Timestamp * DAY;
    let end = BASE_TIME + spec.epochs as Timestamp * len;
    let stale = stale_users(spec);
    let mut records = Vec::with_capacity(spec.users * spec.per_user);
    for u in 0..spec.users {
        let mut rng = rng_for(spec, 1 + u as u64);
        let times = if u < stale {
            let mut ts = random_times(&mut rng, spec.per_user - 1, BASE_TIME, end - len);
            ts.extend(random_times(&mut rng, 1, end - len / 4, end));
            ts
        } else {
            random_times(&mut rng, spec.per_user, end - len, end)
        };
        let mut seen = vec![false; spec.items];
        for t in times {
            let hot: Vec<usize> = hot_block(spec, drift_window(spec, t)).collect();
            let cold: Vec<usize> = (0..spec.items).filter(|i| !hot.contains(i)).collect();
            let (first, second) = if rng.bernoulli(spec.hot_share) {
                (&hot, &cold)
            } else {
                (&cold, &hot)
            };
            let item = draw_unseen(&mut rng, first, &seen)
                .or_else(|| draw_unseen(&mut rng, second, &seen))
                .unwrap_or_else(|| rng.below(spec.items));
            seen[item] = true;
            records.push(Interaction::new(u, item, t));
        }
    }
    InteractionLog::new(records, spec.users, spec.items)
}

/// Community of a user in the high-order generator.
pub fn community_of_user(spec: &GeneratorSpec, user: usize) -> usize {
    user % spec.communities
}

/// Item pool of community `c`: a contiguous id range; the last community
/// absorbs any remainder.
pub fn community_pool(spec: &GeneratorSpec, c: usize) -> std::ops::Range<usize> {
    let size = spec.items / spec.communities;
    let end = if c + 1 == spec.communities {
        spec.items
    } else {
        (c + 1) * size
    };
    c * size..end
}

/// Focus set of community `c` during `phase`.
pub fn focus_items(spec: &GeneratorSpec, c: usize, phase: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = community_pool(spec, c).collect();
    let mut rng = SplitMix64::new(hash_words(&[
        spec.seed,
        purpose::GENERATOR,
        u64::MAX - 1,
        c as u64,
        phase as u64,
    ]));
    rng.shuffle(&mut pool);
    pool.truncate(spec.focus);
    pool.sort_unstable();
    pool
}

/// Community co-consumption. Users only touch their community's pool; with
/// probability `1 - noise` an interaction picks one of the phase's focus
/// items, otherwise any other pool item. Users never repeat an item while
/// unseen pool items remain.
pub fn gen_high_order(spec: &GeneratorSpec) -> Result<InteractionLog> {
    spec.validate()?;
    let len = spec.days_per_epoch as Timestamp * DAY;
    let end = BASE_TIME + spec.phases as Timestamp * len;
    let focus: Vec<Vec<Vec<usize>>> = (0..spec.communities)
        .map(|c| (0..spec.phases).map(|p| focus_items(spec, c, p)).collect())
        .collect();
    let mut records = Vec::with_capacity(spec.users * spec.per_user);
    for u in 0..spec.users {
        let mut rng = rng_for(spec, 1 + u as u64);
        let c = community_of_user(spec, u);
        let pool: Vec<usize> = community_pool(spec, c).collect();
        let mut seen = vec![false; spec.items];
        for t in random_times(&mut rng, spec.per_user, BASE_TIME, end) {
            let phase = (((t - BASE_TIME) / len) as usize).min(spec.phases - 1);
            let hot = &focus[c][phase];
            let rest: Vec<usize> = pool.iter().copied().filter(|i| !hot.contains(i)).collect();
            let (first, second) = if rng.bernoulli(1.0 - spec.noise) {
                (hot, &rest)
            } else {
                (&rest, hot)
            };
            let item = draw_unseen(&mut rng, first, &seen)
                .or_else(|| draw_unseen(&mut rng, second, &seen))
                .unwrap_or_else(|| pool[rng.below(pool.len())]);
            seen[item] = true;
            records.push(Interaction::new(u, item, t));
        }
    }
    InteractionLog::new(records, spec.users, spec.items)
}
