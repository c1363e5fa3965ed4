//! Positional encodings, the gated encoder block and one full stage.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{affine, tra_forward, TRAConfig, TRAWeights};
use crate::engine::{Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::StageConfig;
use crate::slicing::{partition, FeatureMap, SliceWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosMode {
    #[default]
    Contextual,
    Static,
    Learnable,
    None,
}

impl PosMode {
    pub const ALL: [PosMode; 4] = [PosMode::None, PosMode::Static, PosMode::Learnable, PosMode::Contextual];

    pub fn name(self) -> &'static str {
        match self {
            PosMode::Contextual => "contextual",
            PosMode::Static => "static",
            PosMode::Learnable => "learnable",
            PosMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PosMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown positional mode {s:?}")))
    }
}

fn default_kernel() -> usize {
    3
}

fn default_max_len() -> usize {
    1024
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CPEConfig {
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub mode: PosMode,
    /// Table length for the learnable mode.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl Default for CPEConfig {
    fn default() -> Self {
        Self {
            kernel: default_kernel(),
            mode: PosMode::Contextual,
            max_len: default_max_len(),
        }
    }
}

impl CPEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "positional kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.mode == PosMode::Learnable && self.max_len == 0 {
            return Err(Error::config("learnable positional table needs max_len >= 1"));
        }
        Ok(())
    }

    pub fn macs(&self, len: usize, c: usize) -> u64 {
        match self.mode {
            PosMode::Contextual => (len * c * self.kernel) as u64,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub enum PosWeights {
    /// Depthwise kernel `[c, 1, k]` and bias `[c]`.
    Contextual {
        weight: ParamId,
        bias: ParamId,
    },
    Learnable {
        table: ParamId,
    },
    Static,
    None,
}

impl PosWeights {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        cfg: &CPEConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.mode {
            PosMode::Contextual => PosWeights::Contextual {
                weight: store.register(
                    format!("{prefix}.weight"),
                    &[c, 1, cfg.kernel],
                    Init::FanIn(cfg.kernel),
                    rng,
                )?,
                bias: store.register(format!("{prefix}.bias"), &[c], Init::Zeros, rng)?,
            },
            PosMode::Learnable => PosWeights::Learnable {
                table: store.register(format!("{prefix}.table"), &[cfg.max_len, c], Init::Normal(1.0), rng)?,
            },
            PosMode::Static => PosWeights::Static,
            PosMode::None => PosWeights::None,
        })
    }
}

/// Standard sine/cosine table, `[len, c]` row-major.
pub fn sinusoidal_table(len: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * c];
    for pos in 0..len {
        for i in 0..c {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / c as f64);
            let angle = pos as f64 * freq;
            out[pos * c + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Adds the configured position signal to `x` (`[batch, l, c]`).
pub fn positional_encode<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &CPEConfig,
    weights: &PosWeights,
) -> Result<Var> {
    let shape = graph.shape(x).to_vec();
    let [_, len, c] = shape[..] else {
        return Err(Error::dim("positional_encode", &shape, &[]));
    };
    match weights {
        PosWeights::None => Ok(x),
        PosWeights::Static => {
            let table = graph.constant(Tensor::from_f64(&[len, c], &sinusoidal_table(len, c))?);
            graph.add(x, table)
        }
        PosWeights::Learnable { table } => {
            if len > cfg.max_len {
                return Err(Error::config(format!(
                    "sequence length {len} exceeds learnable table length {}",
                    cfg.max_len
                )));
            }
            let t = graph.param(store, *table);
            let t = graph.narrow(t, 0, 0, len)?;
            graph.add(x, t)
        }
        PosWeights::Contextual { weight, bias } => {
            let pad = (cfg.kernel - 1) / 2;
            let w = graph.param(store, *weight);
            let b = graph.param(store, *bias);
            let conv = graph.conv1d(x, w, pad, pad, 1, c)?;
            let conv = graph.add(conv, b)?;
            graph.add(x, conv)
        }
    }
}

/// Layer-norm scale and shift, both `[c]`.
#[derive(Clone, Debug)]
pub struct NormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormWeights {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{prefix}.gamma"), &[c], Init::Ones, rng)?,
            beta: store.register(format!("{prefix}.beta"), &[c], Init::Zeros, rng)?,
        })
    }

    pub fn apply<T: Scalar>(&self, graph: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = graph.param(store, self.gamma);
        let b = graph.param(store, self.beta);
        graph.layer_norm(x, g, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub tra: TRAConfig,
    pub ffn_ratio: usize,
    pub activation: Activation,
}

impl BlockConfig {
    pub fn hidden(&self) -> usize {
        self.ffn_ratio * self.tra.c
    }

    pub fn ffn_macs(&self, len: usize) -> u64 {
        2 * (len * self.tra.c * self.hidden()) as u64
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlockWeights {
    pub norm1: NormWeights,
    pub tra: TRAWeights,
    pub alpha_attn: ParamId,
    pub norm2: NormWeights,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub alpha_ffn: ParamId,
}

impl EncoderBlockWeights {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.ffn_ratio == 0 {
            return Err(Error::config("ffn_ratio must be positive"));
        }
        let c = cfg.tra.c;
        let h = cfg.hidden();
        let norm1 = NormWeights::register(store, &format!("{prefix}.norm1"), c, rng)?;
        let tra = TRAWeights::register(store, &format!("{prefix}.tra"), &cfg.tra, rng)?;
        let alpha_attn = store.register(format!("{prefix}.alpha_attn"), &[1], Init::Zeros, rng)?;
        let norm2 = NormWeights::register(store, &format!("{prefix}.norm2"), c, rng)?;
        let w1 = store.register(format!("{prefix}.ffn.w1"), &[c, h], Init::FanIn(c), rng)?;
        let b1 = store.register(format!("{prefix}.ffn.b1"), &[h], Init::Zeros, rng)?;
        let w2 = store.register(format!("{prefix}.ffn.w2"), &[h, c], Init::FanIn(h), rng)?;
        let b2 = store.register(format!("{prefix}.ffn.b2"), &[c], Init::Zeros, rng)?;
        let alpha_ffn = store.register(format!("{prefix}.alpha_ffn"), &[1], Init::Zeros, rng)?;
        Ok(Self {
            norm1,
            tra,
            alpha_attn,
            norm2,
            w1,
            b1,
            w2,
            b2,
            alpha_ffn,
        })
    }
}

pub fn ffn<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &BlockConfig,
    w: &EncoderBlockWeights,
) -> Result<Var> {
    let h = affine(graph, store, x, w.w1, w.b1)?;
    let h = match cfg.activation {
        Activation::Gelu => graph.gelu(h),
        Activation::Relu => graph.relu(h),
    };
    affine(graph, store, h, w.w2, w.b2)
}

/// `y = x + α_a·TRA(LN₁ x)`, `z = y + α_f·FFN(LN₂ y)`.
pub fn encoder_block<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &BlockConfig,
    w: &EncoderBlockWeights,
    attn_out: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let n1 = w.norm1.apply(graph, store, x)?;
    let a = tra_forward(graph, store, n1, &cfg.tra, &w.tra, attn_out)?;
    let alpha = graph.param(store, w.alpha_attn);
    let a = graph.mul(a, alpha)?;
    let y = graph.add(x, a)?;

    let n2 = w.norm2.apply(graph, store, y)?;
    let f = ffn(graph, store, n2, cfg, w)?;
    let alpha = graph.param(store, w.alpha_ffn);
    let f = graph.mul(f, alpha)?;
    graph.add(y, f)
}

#[derive(Clone, Debug)]
pub struct StageWeights {
    pub slice: SliceWeights,
    pub partition_norm: Option<NormWeights>,
    pub pos: PosWeights,
    pub blocks: Vec<EncoderBlockWeights>,
}

impl StageWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        stage: &StageConfig,
        cpe: &CPEConfig,
        block: &BlockConfig,
        partition_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let slice = SliceWeights::register(store, &format!("{prefix}.partition"), c_in, &stage.slice, rng)?;
        let partition_norm = if partition_norm {
            Some(NormWeights::register(
                store,
                &format!("{prefix}.partition_norm"),
                stage.slice.c_out,
                rng,
            )?)
        } else {
            None
        };
        let pos = PosWeights::register(store, &format!("{prefix}.pos"), stage.slice.c_out, cpe, rng)?;
        let blocks = (0..stage.layers)
            .map(|i| EncoderBlockWeights::register(store, &format!("{prefix}.block{}", i + 1), block, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            slice,
            partition_norm,
            pos,
            blocks,
        })
    }
}

/// Intermediate values of one stage, kept for inspection and tests.
#[derive(Clone, Debug, Default)]
pub struct StageTrace {
    pub tokens: Option<Var>,
    pub encoded: Option<Var>,
    pub block_inputs: Vec<Var>,
    pub block_outputs: Vec<Var>,
    /// Per block, one attention matrix per head.
    pub attention: Vec<Vec<Var>>,
}

/// Partition, positional encoding, then the stage's encoder blocks in order.
#[allow(clippy::too_many_arguments)]
pub fn stage_forward<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    x: FeatureMap,
    stage: &StageConfig,
    cpe: &CPEConfig,
    block: &BlockConfig,
    weights: &StageWeights,
    mut trace: Option<&mut StageTrace>,
) -> Result<FeatureMap> {
    let tokens = partition(graph, store, x, &stage.slice, &weights.slice)?;
    let mut h = tokens.var;
    if let Some(norm) = &weights.partition_norm {
        h = norm.apply(graph, store, h)?;
    }
    h = positional_encode(graph, store, h, cpe, &weights.pos)?;
    if let Some(t) = trace.as_deref_mut() {
        t.tokens = Some(tokens.var);
        t.encoded = Some(h);
    }
    for w in &weights.blocks {
        let input = h;
        let mut attn = Vec::new();
        let want = trace.is_some();
        h = encoder_block(graph, store, h, block, w, want.then_some(&mut attn))?;
        if let Some(t) = trace.as_deref_mut() {
            t.block_inputs.push(input);
            t.block_outputs.push(h);
            t.attention.push(attn);
        }
    }
    FeatureMap::from_var(graph, h)
}
