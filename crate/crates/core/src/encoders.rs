//! Embedding tables, exponential time buckets and sinusoidal positions.

use crate::error::{Error, Result};
use crate::graph::Timestamp;
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handles to the user, item and time-bucket tables inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub users: ParamId,
    pub items: ParamId,
    pub times: ParamId,
    pub dim: usize,
    pub buckets: usize,
}

/// Registers `users`, `items` and `times` tables with entries uniform on
/// `[-1/sqrt(d), 1/sqrt(d)]`. The last time bucket is padding and starts at zero.
pub fn init_tables(
    store: &mut ParamStore,
    user_count: usize,
    item_count: usize,
    buckets: usize,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTables> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "embedding dimension must be even and >= 2, got {dim}"
        )));
    }
    if user_count == 0 || item_count == 0 {
        return Err(Error::invalid("user and item tables need at least one row"));
    }
    if buckets < 2 {
        return Err(Error::invalid("need at least one real time bucket plus padding"));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    let mut table = |rows: usize| Tensor::from_fn(vec![rows, dim], |_| rng.uniform(-bound, bound));
    let users = store.register("emb.users", table(user_count))?;
    let items = store.register("emb.items", table(item_count))?;
    let mut times = table(buckets);
    times.row_mut(buckets - 1).fill(0.0);
    let times = store.register("emb.times", times)?;
    Ok(EmbeddingTables {
        users,
        items,
        times,
        dim,
        buckets,
    })
}

impl EmbeddingTables {
    pub fn pad_bucket(&self) -> usize {
        self.buckets - 1
    }

    /// The time-table row for a delta, or a zero vector for padding.
    pub fn time_embedding(&self, store: &ParamStore, delta: Option<f64>) -> Vec<f64> {
        match delta {
            Some(delta) => store.get(self.times).row(time_bucket(delta, self.buckets)).to_vec(),
            None => vec![0.0; self.dim],
        }
    }
}

/// Maps elapsed time to a bucket: `[0,1) -> 0`, `[1,2) -> 1`, `[2,4) -> 2`,
/// `[4,8) -> 3`, ... clamped to `buckets - 2`; bucket `buckets - 1` is padding.
pub fn time_bucket(delta: f64, buckets: usize) -> usize {
    debug_assert!(buckets >= 2);
    let max_real = buckets - 2;
    if !(delta >= 1.0) {
        return 0;
    }
    if delta >= u64::MAX as f64 {
        return max_real;
    }
    // floor(log2(delta)) == floor(log2(floor(delta))) for delta >= 1
    let whole = delta as u64;
    let bucket = (64 - whole.leading_zeros()) as usize;
    bucket.min(max_real)
}

/// Elapsed time from an interaction to the query, in `unit_seconds` units.
pub fn elapsed_units(query_time: Timestamp, timestamp: Timestamp, unit_seconds: f64) -> f64 {
    (query_time - timestamp) as f64 / unit_seconds
}

/// Sinusoidal encoding: component `2i` is `sin(pos / 10000^(2i/d))`, `2i+1` the cosine.
pub fn positional_encoding(pos: u32, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_examples() {
        assert_eq!(time_bucket(0.0, 34), 0);
        assert_eq!(time_bucket(0.99, 34), 0);
        assert_eq!(time_bucket(1.0, 34), 1);
        assert_eq!(time_bucket(3.0, 34), 2);
        assert_eq!(time_bucket(5.0, 34), 3);
        assert_eq!(time_bucket(1e12, 34), 32);
        assert_eq!(time_bucket(1e30, 34), 32);
        assert_eq!(time_bucket(100.0, 4), 2);
    }

    #[test]
    fn init_bounds_determinism_and_padding() {
        let mut a = ParamStore::new();
        let ta = init_tables(&mut a, 3, 5, 6, 4, 7).unwrap();
        let mut b = ParamStore::new();
        init_tables(&mut b, 3, 5, 6, 4, 7).unwrap();
        assert_eq!(a, b);
        for (_, t) in a.iter() {
            assert!(t.data().iter().all(|v| v.abs() <= 0.5));
        }
        assert!(a.get(ta.times).row(5).iter().all(|&v| v == 0.0));
        assert!(init_tables(&mut ParamStore::new(), 3, 5, 6, 5, 7).is_err());
        assert!(init_tables(&mut ParamStore::new(), 0, 5, 6, 4, 7).is_err());
    }

    #[test]
    fn time_embedding_lookup() {
        let mut store = ParamStore::new();
        let t = init_tables(&mut store, 1, 1, 34, 4, 1).unwrap();
        assert_eq!(t.time_embedding(&store, None), vec![0.0; 4]);
        assert_eq!(t.time_embedding(&store, Some(4.0)), t.time_embedding(&store, Some(7.5)));
        assert_eq!(t.time_embedding(&store, Some(1.0)), store.get(t.times).row(1));
        assert_eq!(t.time_embedding(&store, Some(3.0)), store.get(t.times).row(2));
    }

    #[test]
    fn positional_examples() {
        let p0 = positional_encoding(0, 6);
        assert_eq!(p0, vec![0., 1., 0., 1., 0., 1.]);
        let p1 = positional_encoding(1, 2);
        assert!((p1[0] - 0.84147).abs() < 1e-5 && (p1[1] - 0.54030).abs() < 1e-5);
        for pos in [0, 3, 77, 9999] {
            assert!(positional_encoding(pos, 16).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
