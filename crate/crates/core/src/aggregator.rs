//! Self-attention neighborhood aggregator.
//!
//! Entry rows are seeded as `entry + time + position`, refined by `K` layers
//! of (projection-free self-attention, then a residual feed-forward block with
//! layer norm), and pooled into one vector by attention against a query.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggLayerParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatorParams {
    pub layers: Vec<AggLayerParams>,
    pub heads: usize,
    pub dim: usize,
}

/// Glorot-uniform matrix.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(vec![rows, cols], |_| rng.uniform(-bound, bound))
}

pub fn init_aggregator(
    store: &mut ParamStore,
    dim: usize,
    layers: usize,
    heads: usize,
    rng: &mut SplitMix64,
) -> Result<AggregatorParams> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::invalid(format!("{heads} heads do not divide dimension {dim}")));
    }
    let layers = (0..layers)
        .map(|k| {
            Ok(AggLayerParams {
                w1: store.register(format!("agg.{k}.w1"), glorot(dim, dim, rng))?,
                w2: store.register(format!("agg.{k}.w2"), glorot(dim, dim, rng))?,
                gain: store.register(format!("agg.{k}.ln_gain"), Tensor::from_fn(vec![1, dim], |_| 1.0))?,
                bias: store.register(format!("agg.{k}.ln_bias"), Tensor::zeros(vec![1, dim]))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AggregatorParams { layers, heads, dim })
}

/// Aggregator parameters bound onto one tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w1: Var,
    pub w2: Var,
    pub gain: Var,
    pub bias: Var,
}

impl AggregatorParams {
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                w1: tape.param(store, l.w1),
                w2: tape.param(store, l.w2),
                gain: tape.param(store, l.gain),
                bias: tape.param(store, l.bias),
            })
            .collect()
    }
}

/// Dropout settings for the feed-forward blocks.
#[derive(Debug)]
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub training: bool,
    pub rng: &'a mut SplitMix64,
}

/// Row `j` = entry_j + time_j + position_j.
pub fn seed_entries(tape: &mut Tape, entries: Var, times: Var, positions: Var) -> Result<Var> {
    let s = tape.add(entries, times)?;
    tape.add(s, positions)
}

fn pair_mask(mask: &[bool]) -> Vec<bool> {
    let n = mask.len();
    let mut out = vec![false; n * n];
    for j in 0..n {
        for r in 0..n {
            out[j * n + r] = mask[j] && mask[r];
        }
    }
    out
}

fn attend(tape: &mut Tape, c: Var, pairs: &[bool]) -> Result<Var> {
    let d = tape.dims(c).1;
    let logits = tape.matmul_nt(c, c)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let alpha = tape.masked_softmax(logits, pairs)?;
    tape.matmul(alpha, c)
}

/// Scaled dot-product self-attention without projections. Padding rows
/// neither attend nor are attended to, so they come out as zeros. With
/// `heads > 1` each head attends over its own slice of the columns.
pub fn self_attention_layer(tape: &mut Tape, c: Var, mask: &[bool], heads: usize) -> Result<Var> {
    let (n, d) = tape.dims(c);
    if mask.len() != n {
        return Err(Error::Shape {
            op: "self_attention",
            detail: format!("mask of {} for {n} rows", mask.len()),
        });
    }
    let pairs = pair_mask(mask);
    if heads <= 1 {
        return attend(tape, c, &pairs);
    }
    if d % heads != 0 {
        return Err(Error::invalid(format!("{heads} heads do not divide {d}")));
    }
    let width = d / heads;
    let outs = (0..heads)
        .map(|h| {
            let slice = tape.slice_cols(c, h * width, width)?;
            attend(tape, slice, &pairs)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_cols(&outs)
}

/// `LayerNorm(Dropout(ReLU(c W1) W2) + c)` row-wise.
pub fn feed_forward(tape: &mut Tape, c: Var, layer: &LayerVars, dropout: &mut DropoutCtx<'_>) -> Result<Var> {
    let hidden = tape.matmul(c, layer.w1)?;
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, layer.w2)?;
    let out = tape.dropout(out, dropout.rate, dropout.rng, dropout.training)?;
    let res = tape.add(out, c)?;
    tape.layer_norm(res, layer.gain, layer.bias, LAYER_NORM_EPS)
}

/// Attention pooling of the rows of `s` against `query` (`1 x d`).
/// A fully padded neighborhood pools to the zero vector.
pub fn vanilla_attention_pool(tape: &mut Tape, s: Var, query: Var, mask: &[bool]) -> Result<Var> {
    let (n, d) = tape.dims(s);
    if tape.dims(query) != (1, d) || mask.len() != n {
        return Err(Error::Shape {
            op: "attention_pool",
            detail: format!("query {:?}, rows {n}x{d}, mask {}", tape.dims(query), mask.len()),
        });
    }
    let logits = tape.matmul_nt(query, s)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let alpha = tape.masked_softmax(logits, mask)?;
    tape.matmul(alpha, s)
}

/// Seeds entries, runs every (self-attention, feed-forward) layer and pools.
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    tape: &mut Tape,
    entries: Var,
    times: Var,
    positions: Var,
    mask: &[bool],
    query: Var,
    layers: &[LayerVars],
    heads: usize,
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        let d = tape.dims(query).1;
        return Ok(tape.zeros(1, d));
    }
    let mut c = seed_entries(tape, entries, times, positions)?;
    for layer in layers {
        let attended = self_attention_layer(tape, c, mask, heads)?;
        c = feed_forward(tape, attended, layer, dropout)?;
    }
    vanilla_attention_pool(tape, c, query, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: usize, cols: usize, data: &[f64]) -> Var {
        tape.leaf(&Tensor::new(vec![rows, cols], data.to_vec()).unwrap())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn seeding_is_elementwise_sum() {
        let mut tape = Tape::new();
        let e = leaf(&mut tape, 2, 2, &[1., 2., 3., 4.]);
        let t = leaf(&mut tape, 2, 2, &[0.5, 0., 0., -1.]);
        let p = leaf(&mut tape, 2, 2, &[0., 0.25, 1., 1.]);
        let c = seed_entries(&mut tape, e, t, p).unwrap();
        assert_eq!(tape.value(c), &[1.5, 2.25, 4., 4.]);
        let z = tape.zeros(2, 2);
        let c = seed_entries(&mut tape, e, z, z).unwrap();
        assert_eq!(tape.value(c), tape.value(e));
        let bad = tape.zeros(3, 2);
        assert!(seed_entries(&mut tape, e, bad, z).is_err());
    }

    #[test]
    fn self_attention_examples() {
        let mut tape = Tape::new();
        let one = leaf(&mut tape, 1, 3, &[0.3, -0.2, 0.9]);
        let out = self_attention_layer(&mut tape, one, &[true], 1).unwrap();
        assert!(close(tape.value(out), tape.value(one), 1e-15));

        let same = leaf(&mut tape, 2, 2, &[0.4, 0.7, 0.4, 0.7]);
        let out = self_attention_layer(&mut tape, same, &[true, true], 1).unwrap();
        assert!(close(tape.value(out), &[0.4, 0.7, 0.4, 0.7], 1e-15));

        // Query row 0 = [1,1,1,1]: logits (4/2, 0/2) = (2, 0).
        let c = leaf(&mut tape, 2, 4, &[1., 1., 1., 1., 0., 0., 0., 0.]);
        let out = self_attention_layer(&mut tape, c, &[true, true], 1).unwrap();
        let a0 = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((a0 - 0.8808).abs() < 1e-4);
        assert!(close(&tape.value(out)[..4], &[a0; 4], 1e-12));

        let out = self_attention_layer(&mut tape, c, &[false, true], 1).unwrap();
        assert_eq!(&tape.value(out)[..4], &[0.; 4]);
    }

    #[test]
    fn multi_head_with_one_head_matches_single() {
        let mut tape = Tape::new();
        let c = leaf(
            &mut tape,
            3,
            4,
            &[0.1, 0.5, -0.3, 0.8, 1.0, -1.0, 0.2, 0.0, 0.3, 0.3, 0.3, -0.6],
        );
        let mask = [true, false, true];
        let a = self_attention_layer(&mut tape, c, &mask, 1).unwrap();
        let b = self_attention_layer(&mut tape, c, &mask, 2).unwrap();
        assert_eq!(tape.dims(b), (3, 4));
        assert_eq!(&tape.value(b)[4..8], &[0.; 4]);
        assert!(!close(tape.value(a), tape.value(b), 1e-9));
    }

    #[test]
    fn feed_forward_zero_weights_is_layer_norm() {
        let mut tape = Tape::new();
        let c = leaf(&mut tape, 1, 4, &[1., 2., 3., 6.]);
        let w = tape.zeros(4, 4);
        let gain = leaf(&mut tape, 1, 4, &[1.; 4]);
        let bias = tape.zeros(1, 4);
        let layer = LayerVars {
            w1: w,
            w2: w,
            gain,
            bias,
        };
        let mut rng = SplitMix64::new(0);
        let mut ctx = DropoutCtx {
            rate: 0.0,
            training: false,
            rng: &mut rng,
        };
        let s = feed_forward(&mut tape, c, &layer, &mut ctx).unwrap();
        let direct = tape.layer_norm(c, gain, bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(tape.value(s), tape.value(direct));
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::new();
        let s = leaf(&mut tape, 1, 2, &[0.3, 0.4]);
        let q = leaf(&mut tape, 1, 2, &[5., -1.]);
        let h = vanilla_attention_pool(&mut tape, s, q, &[true]).unwrap();
        assert_eq!(tape.value(h), &[0.3, 0.4]);

        let rows = leaf(&mut tape, 3, 2, &[0.2, 0.1, 0.2, 0.1, 0.2, 0.1]);
        let h = vanilla_attention_pool(&mut tape, rows, q, &[true; 3]).unwrap();
        assert!(close(tape.value(h), &[0.2, 0.1], 1e-15));

        // Query orthogonal to every row: uniform weights over real rows.
        let rows = leaf(&mut tape, 3, 2, &[1., 0., 3., 0., 100., 0.]);
        let q = leaf(&mut tape, 1, 2, &[0., 1.]);
        let h = vanilla_attention_pool(&mut tape, rows, q, &[true, true, false]).unwrap();
        assert!(close(tape.value(h), &[2., 0.], 1e-15));

        let h = vanilla_attention_pool(&mut tape, rows, q, &[false; 3]).unwrap();
        assert_eq!(tape.value(h), &[0., 0.]);
    }

    fn random_layers(tape: &mut Tape, store: &mut ParamStore, d: usize, k: usize, seed: u64) -> Vec<LayerVars> {
        let mut rng = SplitMix64::new(seed);
        let params = init_aggregator(store, d, k, 1, &mut rng).unwrap();
        params.bind(tape, store)
    }

    #[test]
    fn aggregate_degenerate_cases() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let layers = random_layers(&mut tape, &mut store, 2, 1, 3);
        let mut rng = SplitMix64::new(0);
        let mut ctx = DropoutCtx {
            rate: 0.0,
            training: false,
            rng: &mut rng,
        };
        let e = leaf(&mut tape, 2, 2, &[1., 2., 3., 4.]);
        let z = tape.zeros(2, 2);
        let q = leaf(&mut tape, 1, 2, &[0.5, 0.5]);

        // K = 0 pools the seeded entries directly.
        let h = aggregate(&mut tape, e, z, z, &[true, true], q, &[], 1, &mut ctx).unwrap();
        let direct = vanilla_attention_pool(&mut tape, e, q, &[true, true]).unwrap();
        assert_eq!(tape.value(h), tape.value(direct));

        let h = aggregate(&mut tape, e, z, z, &[false, false], q, &layers, 1, &mut ctx).unwrap();
        assert_eq!(tape.value(h), &[0., 0.]);

        // K = 1, n = 1: attention is the identity, pooling too, leaving the FFN.
        let e1 = leaf(&mut tape, 1, 2, &[0.7, -0.1]);
        let z1 = tape.zeros(1, 2);
        let h = aggregate(&mut tape, e1, z1, z1, &[true], q, &layers, 1, &mut ctx).unwrap();
        let ffn = feed_forward(&mut tape, e1, &layers[0], &mut ctx).unwrap();
        assert_eq!(tape.value(h), tape.value(ffn));
    }
}
