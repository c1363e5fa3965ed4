//! The full classifier: stages in sequence, mean pooling over time and a
//! linear head.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{affine, mac_count_tra, TRAConfig, TraMacs};
use crate::encoder::{stage_forward, Activation, BlockConfig, CPEConfig, StageTrace, StageWeights};
use crate::engine::gradcheck::{check_parameters, GradCheckReport};
use crate::engine::{checkpoint, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::slicing::{FeatureMap, SliceConfig};

/// One row of the per-stage hyperparameter schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub slice: SliceConfig,
    pub layers: usize,
    pub reduction: usize,
    pub heads: usize,
    /// Only meaningful with `reduction == 1`: attention keys skip the
    /// reduction projection.
    #[serde(default)]
    pub passthrough: bool,
}

impl StageConfig {
    pub fn new(s: usize, d: usize, c: usize, layers: usize, reduction: usize, heads: usize) -> Self {
        Self {
            slice: SliceConfig { s, d, c_out: c },
            layers,
            reduction,
            heads,
            passthrough: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.slice.c_out
    }

    pub fn tra_config(&self) -> Result<TRAConfig> {
        let cfg = TRAConfig {
            c: self.slice.c_out,
            heads: self.heads,
            reduction: self.reduction,
            passthrough: self.passthrough,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn block_config(&self, ffn_ratio: usize, activation: Activation) -> Result<BlockConfig> {
        Ok(BlockConfig {
            tra: self.tra_config()?,
            ffn_ratio,
            activation,
        })
    }
}

fn default_ffn_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 0 in a config file means "take it from the data".
    #[serde(default)]
    pub input_channels: usize,
    #[serde(default)]
    pub num_classes: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub cpe: CPEConfig,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Layer norm right after each partition.
    #[serde(default)]
    pub post_partition_norm: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Three stages of width 64 with 6 blocks and 4 heads each, reduction
    /// `[2, 2, 1]`; stage 1 uses window `s1` and stride `d1`, later stages 2/2.
    pub fn three_stage(input_channels: usize, num_classes: usize, s1: usize, d1: usize) -> Self {
        Self {
            input_channels,
            num_classes,
            stages: vec![
                StageConfig::new(s1, d1, 64, 6, 2, 4),
                StageConfig::new(2, 2, 64, 6, 2, 4),
                StageConfig::new(2, 2, 64, 6, 1, 4),
            ],
            cpe: CPEConfig::default(),
            ffn_ratio: default_ffn_ratio(),
            activation: Activation::Gelu,
            post_partition_norm: false,
            seed: 0,
        }
    }

    /// Sets every stage's width to `c`.
    pub fn with_width(mut self, c: usize) -> Self {
        for st in &mut self.stages {
            st.slice.c_out = c;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::config("ffn_ratio must be positive"));
        }
        self.cpe.validate()?;
        for (j, st) in self.stages.iter().enumerate() {
            st.slice
                .validate()
                .and_then(|_| st.tra_config().map(|_| ()))
                .map_err(|e| Error::config(format!("stage{}: {e}", j + 1)))?;
        }
        Ok(())
    }

    /// Width of the pooled representation.
    pub fn embedding_dim(&self) -> usize {
        self.stages.last().map_or(self.input_channels, |s| s.channels())
    }

    /// Sequence length after each stage for input length `len`.
    pub fn stage_lengths(&self, len: usize) -> Vec<usize> {
        let mut l = len;
        self.stages
            .iter()
            .map(|st| {
                l = st.slice.output_len(l);
                l
            })
            .collect()
    }

    pub fn total_layers(&self) -> usize {
        self.stages.iter().map(|s| s.layers).sum()
    }

    /// Fills channel and class counts left at 0 from a dataset's shape.
    pub fn infer_shape(&mut self, channels: usize, classes: usize) {
        if self.input_channels == 0 {
            self.input_channels = channels;
        }
        if self.num_classes == 0 {
            self.num_classes = classes;
        }
    }

    /// The same model with `count` stages and the same total number of
    /// encoder blocks, spread as evenly as possible (earlier stages take the
    /// remainder). Extra stages copy the last one.
    pub fn with_stage_count(&self, count: usize) -> Result<Self> {
        let total = self.total_layers();
        let Some(last) = self.stages.last().copied() else {
            return Err(Error::config("cannot vary the stage count of a model without stages"));
        };
        if count == 0 || count > total {
            return Err(Error::config(format!(
                "cannot spread {total} blocks over {count} stages"
            )));
        }
        let mut out = self.clone();
        out.stages.truncate(count);
        while out.stages.len() < count {
            out.stages.push(last);
        }
        for (j, st) in out.stages.iter_mut().enumerate() {
            st.layers = total / count + usize::from(j < total % count);
        }
        Ok(out)
    }

    /// Applies a slice schedule given as cumulative spans per stage, e.g.
    /// `[16, 32, 64]` means stage windows 16, 2 and 2 with equal strides.
    pub fn with_slice_schedule(&self, spans: &[usize]) -> Result<Self> {
        if spans.len() != self.stages.len() {
            return Err(Error::config(format!(
                "schedule has {} entries for {} stages",
                spans.len(),
                self.stages.len()
            )));
        }
        let mut out = self.clone();
        let mut prev = 1;
        for (st, &span) in out.stages.iter_mut().zip(spans) {
            if span == 0 || span % prev != 0 {
                return Err(Error::config(format!("schedule {spans:?} is not a chain of multiples")));
            }
            st.slice.s = span / prev;
            st.slice.d = span / prev;
            prev = span;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ModelTrace {
    pub input: Option<Var>,
    pub stages: Vec<StageTrace>,
    pub pooled: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct FormerTime<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stages: Vec<StageWeights>,
    blocks: Vec<BlockConfig>,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

impl<T: Scalar> FormerTime<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut blocks = Vec::with_capacity(config.stages.len());
        let mut c_in = config.input_channels;
        for (j, st) in config.stages.iter().enumerate() {
            let block = st.block_config(config.ffn_ratio, config.activation)?;
            let w = StageWeights::register(
                &mut params,
                &format!("stage{}", j + 1),
                c_in,
                st,
                &config.cpe,
                &block,
                config.post_partition_norm,
                &mut rng,
            )?;
            stages.push(w);
            blocks.push(block);
            c_in = st.channels();
        }
        let k = config.num_classes;
        let classifier_w = params.register("classifier.weight", &[c_in, k], Init::FanIn(c_in), &mut rng)?;
        let classifier_b = params.register("classifier.bias", &[k], Init::Zeros, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            params,
            stages,
            blocks,
            classifier_w,
            classifier_b,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Puts a `[batch, m, l]` batch on the graph as `[batch, l, m]`.
    pub fn input(&self, graph: &mut Graph<T>, batch: &Tensor<T>) -> Result<Var> {
        let shape = batch.shape();
        if shape.len() != 3 {
            return Err(Error::data(format!(
                "expected a [batch, channels, length] input, got {shape:?}"
            )));
        }
        if shape[1] != self.config.input_channels {
            return Err(Error::data(format!(
                "input has {} channels, model expects {}",
                shape[1], self.config.input_channels
            )));
        }
        let x = graph.constant(batch.clone());
        graph.transpose(x)
    }

    /// Pooled `[batch, C_last]` representation of `x` (`[batch, l, m]`).
    pub fn embed_var(&self, graph: &mut Graph<T>, x: Var, trace: Option<&mut ModelTrace>) -> Result<Var> {
        self.embed_with(&self.params, graph, x, trace)
    }

    /// [`FormerTime::embed_var`] reading weights from `params`, which must
    /// share this model's layout.
    pub fn embed_with(
        &self,
        params: &ParamStore<T>,
        graph: &mut Graph<T>,
        x: Var,
        mut trace: Option<&mut ModelTrace>,
    ) -> Result<Var> {
        let mut fm = FeatureMap::from_var(graph, x)?;
        if let Some(t) = trace.as_deref_mut() {
            t.input = Some(x);
        }
        for (j, st) in self.config.stages.iter().enumerate() {
            let mut st_trace = StageTrace::default();
            let want = trace.is_some();
            fm = stage_forward(
                graph,
                params,
                fm,
                st,
                &self.config.cpe,
                &self.blocks[j],
                &self.stages[j],
                want.then_some(&mut st_trace),
            )?;
            if let Some(t) = trace.as_deref_mut() {
                t.stages.push(st_trace);
            }
        }
        let pooled = graph.mean(fm.var, 1)?;
        if let Some(t) = trace {
            t.pooled = Some(pooled);
        }
        Ok(pooled)
    }

    pub fn classify_var(&self, graph: &mut Graph<T>, pooled: Var) -> Result<Var> {
        affine(graph, &self.params, pooled, self.classifier_w, self.classifier_b)
    }

    pub fn logits_var(&self, graph: &mut Graph<T>, x: Var, trace: Option<&mut ModelTrace>) -> Result<Var> {
        self.logits_with(&self.params, graph, x, trace)
    }

    pub fn logits_with(
        &self,
        params: &ParamStore<T>,
        graph: &mut Graph<T>,
        x: Var,
        trace: Option<&mut ModelTrace>,
    ) -> Result<Var> {
        let pooled = self.embed_with(params, graph, x, trace)?;
        affine(graph, params, pooled, self.classifier_w, self.classifier_b)
    }

    /// Raw logits `[batch, num_classes]` for a `[batch, m, l]` batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let x = self.input(&mut graph, batch)?;
        let y = self.logits_var(&mut graph, x, None)?;
        Ok(graph.value(y).clone())
    }

    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let x = self.input(&mut graph, batch)?;
        let y = self.embed_var(&mut graph, x, None)?;
        Ok(graph.value(y).clone())
    }

    /// Applies the linear head to pooled representations `[batch, C_last]`.
    pub fn classify(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let p = graph.constant(pooled.clone());
        let y = self.classify_var(&mut graph, p)?;
        Ok(graph.value(y).clone())
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        checkpoint::write_checkpoint(&self.params, out)
    }

    pub fn load<R: Read>(&mut self, input: R) -> Result<()> {
        checkpoint::load_into(&mut self.params, input)
    }
}

/// Cost of one stage; see [`MacReport`] for the counting convention.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMacs {
    /// Tokens produced by the stage's partition.
    pub length: usize,
    pub partition: u64,
    pub positional: u64,
    pub attention: TraMacs,
    pub ffn: u64,
}

impl StageMacs {
    pub fn total(&self) -> u64 {
        self.partition + self.positional + self.attention.total() + self.ffn
    }
}

/// Analytic multiply-accumulate count for one sequence.
///
/// One MAC per scalar multiply-add in linear maps, convolutions and the
/// attention score and context products. Normalizations, softmax,
/// activations, pooling and additions are free.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    pub stages: Vec<StageMacs>,
    pub classifier: u64,
}

impl MacReport {
    pub fn attention(&self) -> TraMacs {
        let mut t = TraMacs::default();
        for st in &self.stages {
            t.add(&st.attention);
        }
        t
    }

    pub fn total(&self) -> u64 {
        self.stages.iter().map(StageMacs::total).sum::<u64>() + self.classifier
    }

    pub fn millions(&self) -> f64 {
        self.total() as f64 / 1e6
    }
}

/// MACs of one forward pass over a single `m × len` series.
pub fn count_macs(cfg: &ModelConfig, len: usize, m: usize) -> Result<MacReport> {
    if len == 0 || m == 0 {
        return Err(Error::config("input length and channels must be at least 1"));
    }
    if cfg.num_classes == 0 {
        return Err(Error::config("num_classes must be set to count classifier MACs"));
    }
    let mut report = MacReport::default();
    let (mut l, mut c_in) = (len, m);
    for st in &cfg.stages {
        let mut sm = StageMacs {
            partition: st.slice.macs(l, c_in),
            ..StageMacs::default()
        };
        l = st.slice.output_len(l);
        let c = st.channels();
        sm.length = l;
        sm.positional = cfg.cpe.macs(l, c);
        let block = st.block_config(cfg.ffn_ratio, cfg.activation)?;
        for _ in 0..st.layers {
            sm.attention.add(&mac_count_tra(l, &block.tra)?);
            sm.ffn += block.ffn_macs(l);
        }
        report.stages.push(sm);
        c_in = c;
    }
    report.classifier = (c_in * cfg.num_classes) as u64;
    Ok(report)
}

/// The small configuration used for gradient checks: 2 stages, width 8,
/// 2 heads, one block each, reduction 2, 3 channels, 3 classes.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        num_classes: 3,
        stages: vec![StageConfig::new(2, 2, 8, 1, 2, 2), StageConfig::new(2, 2, 8, 1, 2, 2)],
        cpe: CPEConfig::default(),
        ffn_ratio: default_ffn_ratio(),
        activation: Activation::Gelu,
        post_partition_norm: false,
        seed: 0,
    }
}

/// Finite-difference check of every parameter of a 64-bit model on a random
/// batch. Gates are opened (set to 0.5) and biases jittered first so that
/// no gradient path is zero by construction.
pub fn gradient_check(cfg: &ModelConfig, len: usize, batch: usize, h: f64) -> Result<GradCheckReport> {
    let mut model = FormerTime::<f64>::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for p in model.params.iter_mut() {
        if p.name.contains("alpha") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.5);
        } else if p.name.ends_with("bias") || p.name.ends_with(".b1") || p.name.ends_with(".b2") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let m = cfg.input_channels;
    let values: Vec<f64> = (0..batch * m * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_f64(&[batch, m, len], &values)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let mut params = model.params.clone();
    check_parameters(&mut params, h, |store, graph| {
        let input = graph.constant(x.clone());
        let input = graph.transpose(input)?;
        let logits = model.logits_with(store, graph, input, None)?;
        graph.cross_entropy(logits, &labels)
    })
}

/// Writes `id,label,e0,…` rows, one per sample.
pub fn write_embeddings_csv<W: Write>(out: W, labels: &[String], embeddings: &[Vec<f64>]) -> Result<()> {
    if labels.len() != embeddings.len() {
        return Err(Error::data(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.len()
        )));
    }
    let width = embeddings.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..width).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, (label, e)) in labels.iter().zip(embeddings).enumerate() {
        let mut row = vec![i.to_string(), label.clone()];
        row.extend(e.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_embeddings_csv`]: `(id, label, values)` per row.
pub fn read_embeddings_csv<R: Read>(input: R) -> Result<Vec<(usize, String, Vec<f64>)>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::parse(i + 2, format!("bad {what}"));
        let id = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("id"))?;
        let label = rec.get(1).ok_or_else(|| bad("label"))?.to_string();
        let values = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, label, values));
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::data(format!("csv: {other:?}")),
    }
}
