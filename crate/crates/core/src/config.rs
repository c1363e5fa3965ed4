//! Run configuration files (TOML) and dotted command-line overrides.
//!
//! ```toml
//! [model]
//! input_channels = 9
//! num_classes = 25
//! [[model.stages]]
//! slice = { s = 2, d = 2, c_out = 64 }
//! layers = 6
//! reduction = 2
//! heads = 4
//! [train]
//! lr = 0.001
//! ```
//!
//! Overrides are `path=value`. `stageN.` addresses `model.stages[N-1]`;
//! paths without a `model.`, `train.` or `data.` prefix are looked up in
//! `model` first, then `train`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{read_ts_file, synth_generate, SynthSpec, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    /// Test split size for synthetic data; defaults to the training size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_n: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Applies `path=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o.as_ref())?;
        }
        tree.try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))
    }
}

fn parse_value(text: &str) -> Value {
    let doc = format!("v = {text}");
    match toml::from_str::<Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(text.to_string()),
    }
}

fn resolve_path(tree: &Value, key: &str) -> Result<Vec<String>> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("bad override path {key:?}")));
    }
    if let Some(n) = parts[0].strip_prefix("stage") {
        let idx: usize = n
            .parse()
            .ok()
            .filter(|&i| i >= 1)
            .ok_or_else(|| Error::Usage(format!("bad stage in override {key:?}")))?;
        let mut out = vec!["model".into(), "stages".into(), (idx - 1).to_string()];
        out.extend(parts[1..].iter().map(|s| s.to_string()));
        return Ok(out);
    }
    let owned: Vec<String> = parts.iter().map(|s| s.to_string()).collect();
    if matches!(parts[0], "model" | "train" | "data") {
        return Ok(owned);
    }
    for section in ["model", "train"] {
        if tree.get(section).and_then(|t| t.get(parts[0])).is_some() {
            let mut out = vec![section.to_string()];
            out.extend(owned.iter().cloned());
            return Ok(out);
        }
    }
    Err(Error::Usage(format!("unknown override key {key:?}")))
}

fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {spec:?} is not path=value")))?;
    let path = resolve_path(tree, key.trim())?;
    let mut node = tree;
    for (i, part) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Usage(format!("{key}: {part:?} is not an index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Usage(format!("{key}: index {} beyond {len} entries", idx + 1)))?
            }
            Value::Table(t) => {
                if last {
                    t.insert(part.clone(), parse_value(value.trim()));
                    return Ok(());
                }
                t.entry(part.clone()).or_insert_with(|| Value::Table(Table::new()))
            }
            _ => return Err(Error::Usage(format!("{key}: {part:?} is not a section"))),
        };
    }
    Err(Error::Usage(format!("{key}: cannot assign to a list entry")))
}

/// Loads or generates the train and test splits described by `data`.
pub fn load_splits(data: &DataConfig) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    match (&data.synth, &data.train_file, &data.test_file) {
        (Some(spec), None, None) => synth_splits(spec, data.test_n),
        (None, Some(train), Some(test)) => Ok((read_ts_file(train)?, read_ts_file(test)?)),
        (None, Some(_), None) => Err(Error::Usage("a training file needs a test file".into())),
        (None, None, Some(_)) => Err(Error::Usage("a test file needs a training file".into())),
        (None, None, None) => Err(Error::Usage(
            "no data: give train/test files or a synthetic spec".into(),
        )),
        _ => Err(Error::Usage("give either files or a synthetic spec, not both".into())),
    }
}

/// Training split from `spec`; the test split uses the next seed.
pub fn synth_splits(spec: &SynthSpec, test_n: Option<usize>) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    let train = synth_generate(spec)?;
    let test_spec = SynthSpec {
        seed: spec.seed.wrapping_add(1),
        n: test_n.unwrap_or(spec.n),
        ..spec.clone()
    };
    Ok((train, synth_generate(&test_spec)?))
}
