//! Temporal slice partition.
//!
//! A window of `s` consecutive steps (all channels) is flattened and mapped by
//! one weight-shared linear projection to `c_out` channels; windows start every
//! `d` steps. The input is right-padded with zeros to `d·ceil(l/d) + (s − d)`
//! steps so that no point is dropped and the output has `ceil(l/d)` tokens.
//! This is a strided 1-D convolution with kernel `s` and stride `d`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Init, ParamId, ParamStore, Scalar, Var};
use crate::error::{Error, Result};

/// Window size `s`, stride `d` and output width of one partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceConfig {
    pub s: usize,
    pub d: usize,
    pub c_out: usize,
}

impl SliceConfig {
    pub fn new(s: usize, d: usize, c_out: usize) -> Result<Self> {
        let cfg = Self { s, d, c_out };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.d == 0 || self.c_out == 0 {
            return Err(Error::config(format!("slice sizes must be positive: {self:?}")));
        }
        // a stride wider than the window would skip input points
        if self.d > self.s {
            return Err(Error::config(format!(
                "slice stride d={} exceeds window s={}",
                self.d, self.s
            )));
        }
        Ok(())
    }

    /// Number of tokens produced from `len` input steps.
    pub fn output_len(&self, len: usize) -> usize {
        len.div_ceil(self.d)
    }

    /// Zeros appended on the right before windowing.
    pub fn right_padding(&self, len: usize) -> usize {
        self.d * len.div_ceil(self.d) + (self.s - self.d) - len
    }

    pub fn macs(&self, len: usize, c_in: usize) -> u64 {
        (self.output_len(len) * self.c_out * c_in * self.s) as u64
    }
}

/// A batch of per-stage representations, shape `[batch, length, channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub length: usize,
    pub channels: usize,
}

impl FeatureMap {
    pub fn from_var<T: Scalar>(graph: &Graph<T>, var: Var) -> Result<Self> {
        let shape = graph.shape(var);
        match *shape {
            [_, length, channels] => Ok(Self { var, length, channels }),
            _ => Err(Error::dim("feature map", shape, &[])),
        }
    }
}

/// Projection kernel `[c_out, c_in, s]` and bias `[c_out]`.
#[derive(Clone, Debug)]
pub struct SliceWeights {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SliceWeights {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        cfg: &SliceConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{prefix}.weight"),
            &[cfg.c_out, c_in, cfg.s],
            Init::FanIn(c_in * cfg.s),
            rng,
        )?;
        let bias = store.register(format!("{prefix}.bias"), &[cfg.c_out], Init::Zeros, rng)?;
        Ok(Self { weight, bias })
    }
}

/// Slices `x` into tokens and projects each to `cfg.c_out` channels.
pub fn partition<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    x: FeatureMap,
    cfg: &SliceConfig,
    weights: &SliceWeights,
) -> Result<FeatureMap> {
    cfg.validate()?;
    let w = graph.param(store, weights.weight);
    if graph.shape(w)[1] != x.channels {
        return Err(Error::dim("partition", &[x.length, x.channels], graph.shape(w)));
    }
    let b = graph.param(store, weights.bias);
    let tokens = graph.conv1d(x.var, w, 0, cfg.right_padding(x.length), cfg.d, 1)?;
    let out = graph.add(tokens, b)?;
    FeatureMap::from_var(graph, out)
}
