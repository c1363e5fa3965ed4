//! Temporal reduction attention (TRA).
//!
//! Keys and values are computed from a temporally reduced copy of the input:
//! groups of `R` consecutive steps are concatenated channel-wise, projected
//! back to `c` channels and layer-normalized. Queries keep full length, so
//! the output has the input's length while the score and context products
//! shrink by a factor `R`.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Init, ParamId, ParamStore, Scalar, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TRAConfig {
    pub c: usize,
    pub heads: usize,
    pub reduction: usize,
    /// With `reduction == 1`, skip the reduction projection and norm entirely.
    #[serde(default)]
    pub passthrough: bool,
}

impl TRAConfig {
    pub fn new(c: usize, heads: usize, reduction: usize) -> Result<Self> {
        let cfg = Self {
            c,
            heads,
            reduction,
            passthrough: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.heads == 0 || self.reduction == 0 {
            return Err(Error::config(format!("attention sizes must be positive: {self:?}")));
        }
        if !self.c.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "channels {} not divisible by {} heads",
                self.c, self.heads
            )));
        }
        if self.passthrough && self.reduction != 1 {
            return Err(Error::config("reduction pass-through requires reduction 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    /// True when the reduction projection and its norm exist.
    pub fn has_reduction(&self) -> bool {
        !(self.passthrough && self.reduction == 1)
    }

    pub fn reduced_len(&self, len: usize) -> usize {
        if self.has_reduction() {
            len.div_ceil(self.reduction)
        } else {
            len
        }
    }
}

/// `W^T` (`[R·c, c]`), its bias and the layer norm applied after it.
#[derive(Clone, Debug)]
pub struct ReductionWeights {
    pub wt: ParamId,
    pub bt: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Fused per-head projections (`[c, c]` each, heads side by side) plus biases.
#[derive(Clone, Debug)]
pub struct TRAWeights {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub reduction: Option<ReductionWeights>,
}

fn linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    w: &str,
    b: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamId, ParamId)> {
    let wid = store.register(format!("{prefix}.{w}"), &[fan_in, fan_out], Init::FanIn(fan_in), rng)?;
    let bid = store.register(format!("{prefix}.{b}"), &[fan_out], Init::Zeros, rng)?;
    Ok((wid, bid))
}

impl TRAWeights {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &TRAConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c;
        let (wq, bq) = linear(store, prefix, "wq", "bq", c, c, rng)?;
        let (wk, bk) = linear(store, prefix, "wk", "bk", c, c, rng)?;
        let (wv, bv) = linear(store, prefix, "wv", "bv", c, c, rng)?;
        let (wo, bo) = linear(store, prefix, "wo", "bo", c, c, rng)?;
        let reduction = if cfg.has_reduction() {
            let (wt, bt) = linear(store, prefix, "wt", "bt", cfg.reduction * c, c, rng)?;
            let gamma = store.register(format!("{prefix}.tr_norm.gamma"), &[c], Init::Ones, rng)?;
            let beta = store.register(format!("{prefix}.tr_norm.beta"), &[c], Init::Zeros, rng)?;
            Some(ReductionWeights { wt, bt, gamma, beta })
        } else {
            None
        };
        Ok(Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            reduction,
        })
    }
}

pub(crate) fn affine<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let wv = graph.param(store, w);
    let bv = graph.param(store, b);
    let y = graph.matmul(x, wv)?;
    graph.add(y, bv)
}

/// `Norm(Reshape(x, R)·W^T)` over `x` of shape `[batch, l, c]`.
///
/// The time axis is zero-padded on the right to a multiple of `R`; the result
/// has `ceil(l/R)` steps. In pass-through mode the input is returned as is.
pub fn temporal_reduce<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &TRAConfig,
    weights: &TRAWeights,
) -> Result<Var> {
    let Some(rw) = weights.reduction.as_ref().filter(|_| cfg.has_reduction()) else {
        return Ok(x);
    };
    let shape = graph.shape(x).to_vec();
    let [batch, len, c] = shape[..] else {
        return Err(Error::dim("temporal_reduce", &shape, &[]));
    };
    let r = cfg.reduction;
    let groups = len.div_ceil(r);
    let padded = graph.pad(x, 1, 0, groups * r - len)?;
    let grouped = graph.reshape(padded, &[batch, groups, r * c])?;
    let projected = affine(graph, store, grouped, rw.wt, rw.bt)?;
    let gamma = graph.param(store, rw.gamma);
    let beta = graph.param(store, rw.beta);
    graph.layer_norm(projected, gamma, beta)
}

/// `softmax(q·kᵀ/√d)·v` for `q` `[batch, l_q, d]` and `k`, `v` `[batch, l_kv, d]`.
///
/// Returns the context and the attention weights `[batch, l_q, l_kv]`.
pub fn attention<T: Scalar>(graph: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *graph.shape(q).last().expect("rank >= 1");
    if d == 0 {
        return Err(Error::config("head dimension must be positive"));
    }
    let kt = graph.transpose(k)?;
    let scores = graph.matmul(q, kt)?;
    let scores = graph.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = graph.softmax_last(scores)?;
    let context = graph.matmul(weights, v)?;
    Ok((context, weights))
}

/// Multi-head TRA over `x` `[batch, l, c]`; output has the same shape.
///
/// When `attn_out` is given, each head's attention weights are pushed to it.
pub fn tra_forward<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &TRAConfig,
    weights: &TRAWeights,
    mut attn_out: Option<&mut Vec<Var>>,
) -> Result<Var> {
    cfg.validate()?;
    let c = *graph.shape(x).last().expect("rank >= 1");
    if c != cfg.c {
        return Err(Error::dim("tra", graph.shape(x), &[cfg.c]));
    }
    let q = affine(graph, store, x, weights.wq, weights.bq)?;
    let reduced = temporal_reduce(graph, store, x, cfg, weights)?;
    let k = affine(graph, store, reduced, weights.wk, weights.bk)?;
    let v = affine(graph, store, reduced, weights.wv, weights.bv)?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = graph.narrow(q, 2, h * dh, dh)?;
        let kh = graph.narrow(k, 2, h * dh, dh)?;
        let vh = graph.narrow(v, 2, h * dh, dh)?;
        let (ctx, w) = attention(graph, qh, kh, vh)?;
        if let Some(out) = attn_out.as_deref_mut() {
            out.push(w);
        }
        heads.push(ctx);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        graph.concat_last(&heads)?
    };
    affine(graph, store, merged, weights.wo, weights.bo)
}

/// Multiply-accumulate counts of one TRA layer on a single sequence.
///
/// One MAC per scalar multiply-add of a linear map or attention product;
/// softmax, normalization and bias additions are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraMacs {
    pub query: u64,
    pub reduction: u64,
    pub key_value: u64,
    pub score: u64,
    pub context: u64,
    pub output: u64,
}

impl TraMacs {
    pub fn score_context(&self) -> u64 {
        self.score + self.context
    }

    pub fn total(&self) -> u64 {
        self.query + self.reduction + self.key_value + self.score + self.context + self.output
    }

    pub fn add(&mut self, other: &TraMacs) {
        self.query += other.query;
        self.reduction += other.reduction;
        self.key_value += other.key_value;
        self.score += other.score;
        self.context += other.context;
        self.output += other.output;
    }
}

pub fn mac_count_tra(len: usize, cfg: &TRAConfig) -> Result<TraMacs> {
    cfg.validate()?;
    if len == 0 {
        return Err(Error::config("sequence length must be at least 1"));
    }
    let (l, c) = (len as u64, cfg.c as u64);
    let lr = cfg.reduced_len(len) as u64;
    let reduction = if cfg.has_reduction() {
        lr * (cfg.reduction as u64 * c) * c
    } else {
        0
    };
    Ok(TraMacs {
        query: l * c * c,
        reduction,
        key_value: 2 * lr * c * c,
        score: l * lr * c,
        context: l * lr * c,
        output: l * c * c,
    })
}

/// Writes one attention matrix as text: a `# shape` header line followed by
/// the rows of the last axis, comma-separated, in row-major order.
pub fn write_attention<T: Scalar, W: Write>(graph: &Graph<T>, weights: Var, mut out: W) -> Result<()> {
    let value = graph.value(weights);
    let shape = value.shape();
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    writeln!(out, "# shape {}", dims.join(" "))?;
    let width = *shape.last().expect("rank >= 1");
    for row in value.data().chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| v.as_f64().to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    fn setup(c: usize, heads: usize, r: usize, pass: bool, seed: u64) -> (ParamStore<f64>, TRAConfig, TRAWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cfg = TRAConfig::new(c, heads, r).unwrap();
        cfg.passthrough = pass;
        let w = TRAWeights::register(&mut store, "tra", &cfg, &mut rng).unwrap();
        (store, cfg, w)
    }

    #[test]
    fn reduction_lengths() {
        let (store, cfg, w) = setup(4, 2, 2, false, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(random(&[1, 100, 4], &mut rng));
        let y = temporal_reduce(&mut g, &store, x, &cfg, &w).unwrap();
        assert_eq!(g.shape(y), &[1, 50, 4]);

        let (store, cfg, w) = setup(4, 2, 1, true, 0);
        assert!(w.reduction.is_none());
        let x = g.constant(random(&[2, 7, 4], &mut rng));
        let y = temporal_reduce(&mut g, &store, x, &cfg, &w).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn odd_length_reduction_matches_group_concat_oracle() {
        let (store, cfg, w) = setup(3, 1, 2, false, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs = random(&[1, 5, 3], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xs.clone());
        let y = temporal_reduce(&mut g, &store, x, &cfg, &w).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);

        let rw = w.reduction.as_ref().unwrap();
        let wt = store.get(rw.wt).value.data();
        let x = xs.data();
        for grp in 0..3 {
            let mut cat = [0.0; 6];
            for j in 0..2 {
                let t = grp * 2 + j;
                if t < 5 {
                    cat[j * 3..j * 3 + 3].copy_from_slice(&x[t * 3..t * 3 + 3]);
                }
            }
            let proj: Vec<f64> = (0..3)
                .map(|o| (0..6).map(|i| cat[i] * wt[i * 3 + o]).sum::<f64>())
                .collect();
            let mean = proj.iter().sum::<f64>() / 3.0;
            let var = proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / 3.0;
            for (o, p) in proj.iter().enumerate() {
                let expected = (p - mean) / (var + 1e-5).sqrt();
                assert!((g.value(y).data()[grp * 3 + o] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_examples() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = g.constant(random(&[1, 4, 8], &mut rng));
        let k1 = g.constant(random(&[1, 1, 8], &mut rng));
        let v1 = g.constant(random(&[1, 1, 8], &mut rng));
        let (out, w) = attention(&mut g, q, k1, v1).unwrap();
        assert!(g.value(w).data().iter().all(|&p| (p - 1.0).abs() < 1e-15));
        for row in g.value(out).data().chunks(8) {
            assert_eq!(row, g.value(v1).data());
        }

        let krow = random(&[1, 1, 8], &mut rng);
        let mut twice = krow.data().to_vec();
        twice.extend_from_slice(krow.data());
        let k2 = g.constant(Tensor::from_f64(&[1, 2, 8], &twice).unwrap());
        let v2 = g.constant(random(&[1, 2, 8], &mut rng));
        let (out, w) = attention(&mut g, q, k2, v2).unwrap();
        assert!(g.value(w).data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
        let vv = g.value(v2).data();
        for row in g.value(out).data().chunks(8) {
            for j in 0..8 {
                assert!((row[j] - 0.5 * (vv[j] + vv[8 + j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (qs, ks, vs) = (
            random(&[1, 4, 8], &mut rng),
            random(&[1, 6, 8], &mut rng),
            random(&[1, 6, 8], &mut rng),
        );
        let mut g = Graph::<f64>::new();
        let (q, k, v) = (g.constant(qs.clone()), g.constant(ks.clone()), g.constant(vs.clone()));
        let (out, _) = attention(&mut g, q, k, v).unwrap();
        for i in 0..4 {
            let scores: Vec<f64> = (0..6)
                .map(|j| (0..8).map(|d| qs.data()[i * 8 + d] * ks.data()[j * 8 + d]).sum::<f64>() / 8f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for d in 0..8 {
                let expected: f64 = (0..6).map(|j| scores[j].exp() / z * vs.data()[j * 8 + d]).sum();
                assert!((g.value(out).data()[i * 8 + d] - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn output_keeps_length_and_weights_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &r in &[1usize, 2, 4] {
            let (store, cfg, w) = setup(8, 2, r, false, r as u64);
            for &l in &[1usize, 7, 64] {
                let mut g = Graph::new();
                let x = g.constant(random(&[2, l, 8], &mut rng));
                let mut attn = Vec::new();
                let y = tra_forward(&mut g, &store, x, &cfg, &w, Some(&mut attn)).unwrap();
                assert_eq!(g.shape(y), &[2, l, 8]);
                assert_eq!(attn.len(), 2);
                for a in attn {
                    assert_eq!(g.shape(a), &[2, l, l.div_ceil(r)]);
                    for row in g.value(a).data().chunks(l.div_ceil(r)) {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn permuting_positions_changes_output() {
        let (store, cfg, w) = setup(8, 2, 2, false, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs = random(&[1, 6, 8], &mut rng);
        let mut swapped = xs.data().to_vec();
        // swap positions 0 and 3
        for c in 0..8 {
            swapped.swap(c, 3 * 8 + c);
        }
        let mut g = Graph::new();
        let a = g.constant(xs);
        let b = g.constant(Tensor::from_f64(&[1, 6, 8], &swapped).unwrap());
        let ya = tra_forward(&mut g, &store, a, &cfg, &w, None).unwrap();
        let yb = tra_forward(&mut g, &store, b, &cfg, &w, None).unwrap();
        let (va, vb) = (g.value(ya).data(), g.value(yb).data());
        // compare position 1, which is not moved
        let diff = (0..8).map(|c| (va[8 + c] - vb[8 + c]).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-3, "diff {diff}");
    }

    #[test]
    fn mac_counts() {
        let cfg1 = TRAConfig::new(16, 4, 1).unwrap();
        let cfg2 = TRAConfig::new(16, 4, 2).unwrap();
        let m1 = mac_count_tra(64, &cfg1).unwrap();
        let m2 = mac_count_tra(64, &cfg2).unwrap();
        assert_eq!(m1.score, 64 * 64 * 16);
        assert_eq!(2 * m2.score_context(), m1.score_context());
        let single = mac_count_tra(1, &cfg1).unwrap();
        assert_eq!(single.score, 16);
        assert!(mac_count_tra(0, &cfg1).is_err());
    }

    #[test]
    fn mac_count_matches_execution_counter() {
        for &(l, r, pass) in &[(10usize, 3usize, false), (16, 1, true), (5, 1, false)] {
            let (store, cfg, w) = setup(8, 4, r, pass, 2);
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = g.constant(random(&[1, l, 8], &mut rng));
            tra_forward(&mut g, &store, x, &cfg, &w, None).unwrap();
            assert_eq!(g.macs(), mac_count_tra(l, &cfg).unwrap().total());
        }
    }

    #[test]
    fn attention_dump_has_shape_header() {
        let mut g = Graph::<f32>::new();
        let q = g.constant(Tensor::zeros(&[1, 2, 4]));
        let (_, w) = attention(&mut g, q, q, q).unwrap();
        let mut buf = Vec::new();
        write_attention(&g, w, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# shape 1 2 2");
        assert_eq!(lines[1], "0.5,0.5");
        assert_eq!(lines.len(), 3);
    }
}
