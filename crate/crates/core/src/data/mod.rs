//! Labeled multivariate series: `.ts` ingestion, synthetic tasks,
//! normalization and batching.

mod synth;
mod ts;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};

pub use synth::{longrange_label, synth_generate, SynthKind, SynthSpec};
pub use ts::{parse_ts, read_ts_file, write_ts};

/// `n` samples of `m` channels by `l` steps, stored sample-major then
/// channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub name: String,
    n: usize,
    m: usize,
    l: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl TimeSeriesDataset {
    pub fn new(
        name: impl Into<String>,
        (n, m, l): (usize, usize, usize),
        values: Vec<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if m == 0 || l == 0 {
            return Err(Error::data(format!(
                "channels and length must be positive, got m={m} l={l}"
            )));
        }
        if values.len() != n * m * l {
            return Err(Error::data(format!("{} values for {n}x{m}x{l}", values.len())));
        }
        if labels.len() != n {
            return Err(Error::data(format!("{} labels for {n} samples", labels.len())));
        }
        for (i, name) in class_names.iter().enumerate() {
            if class_names[..i].contains(name) {
                return Err(Error::data(format!("duplicate class name {name:?}")));
            }
        }
        if let Some(i) = labels.iter().position(|&y| y >= class_names.len()) {
            return Err(Error::data(format!(
                "sample {i}: label {} outside {} classes",
                labels[i],
                class_names.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            n,
            m,
            l,
            values,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.m
    }

    pub fn length(&self) -> usize {
        self.l
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sample `i` as `m` consecutive runs of `l` values.
    pub fn sample(&self, i: usize) -> &[f64] {
        let size = self.m * self.l;
        &self.values[i * size..(i + 1) * size]
    }

    pub fn channel(&self, i: usize, c: usize) -> &[f64] {
        &self.sample(i)[c * self.l..(c + 1) * self.l]
    }

    /// Stacks the given samples into a `[batch, m, l]` tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.m * self.l);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::of(v)));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), self.m, self.l], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let values = indices.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
        Self {
            name: self.name.clone(),
            n: indices.len(),
            m: self.m,
            l: self.l,
            values,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Fails unless `other` has the same shape per sample and class vocabulary.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if (self.m, self.l) != (other.m, other.l) {
            return Err(Error::data(format!(
                "split shapes differ: {}x{} vs {}x{}",
                self.m, self.l, other.m, other.l
            )));
        }
        if self.class_names != other.class_names {
            return Err(Error::data(format!(
                "class vocabularies differ: {:?} vs {:?}",
                self.class_names, other.class_names
            )));
        }
        Ok(())
    }
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics from a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &TimeSeriesDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::data("cannot fit a normalizer on an empty dataset"));
        }
        let count = (train.n * train.l) as f64;
        let mut mean = vec![0.0; train.m];
        let mut std = vec![0.0; train.m];
        for c in 0..train.m {
            let channel = || (0..train.n).flat_map(move |i| train.channel(i, c).iter().copied());
            let mu = channel().sum::<f64>() / count;
            let var = channel().map(|v| (v - mu).powi(2)).sum::<f64>() / count;
            mean[c] = mu;
            std[c] = var.sqrt().max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    fn map(&self, ds: &TimeSeriesDataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<TimeSeriesDataset> {
        if ds.m != self.mean.len() {
            return Err(Error::data(format!(
                "normalizer has {} channels, dataset {}",
                self.mean.len(),
                ds.m
            )));
        }
        let mut out = ds.clone();
        for (j, v) in out.values.iter_mut().enumerate() {
            let c = (j / ds.l) % ds.m;
            *v = f(*v, self.mean[c], self.std[c]);
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.map(ds, |v, mu, sd| (v - mu) / sd)
    }

    pub fn invert(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.map(ds, |v, mu, sd| v * sd + mu)
    }
}

/// Sample order for one epoch, cut into batches; the last may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterates `(batch, labels)` pairs over one epoch.
pub fn batch_iter<'a, T: Scalar>(
    ds: &'a TimeSeriesDataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>> + 'a> {
    let batches = batch_indices(ds.len(), batch_size, shuffle, seed)?;
    Ok(batches.into_iter().map(move |idx| ds.batch(&idx)))
}
