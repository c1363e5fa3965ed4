//! Run directory layout.
//!
//! ```text
//! <out>/manifest.json    resolved config, seeds, version; written first
//! <out>/config.toml      the resolved config, reusable with --config
//! <out>/epochs.jsonl     one record per (seed, epoch)
//! <out>/summary.jsonl    one record per seed, then the aggregate
//! <out>/timing.jsonl     wall clock per seed, kept apart so summaries
//!                        are byte-identical across reruns
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use formertime::config::RunConfig;
use formertime::training::{EpochRecord, RepeatSummary, TrainReport};

use crate::CliError;

pub struct RunWriter {
    epochs: BufWriter<File>,
    summary: BufWriter<File>,
    timing: BufWriter<File>,
}

fn line<W: Write, S: Serialize>(w: &mut W, record: &S) -> Result<(), CliError> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    Ok(())
}

impl RunWriter {
    /// Creates the directory and writes the manifest before anything else.
    pub fn create(dir: &Path, command: &str, run: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seeds": run.train.seeds,
            "config": run,
        });
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        fs::write(dir.join("config.toml"), run.to_toml()?)?;
        let open =
            |name: &str| -> Result<BufWriter<File>, CliError> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        Ok(Self {
            epochs: open("epochs.jsonl")?,
            summary: open("summary.jsonl")?,
            timing: open("timing.jsonl")?,
        })
    }

    pub fn epoch(&mut self, seed: u64, e: &EpochRecord) -> Result<(), CliError> {
        line(
            &mut self.epochs,
            &json!({"seed": seed, "epoch": e.epoch, "train_loss": e.train_loss, "test_accuracy": e.test_accuracy}),
        )?;
        self.epochs.flush()?;
        Ok(())
    }

    pub fn run(&mut self, r: &TrainReport) -> Result<(), CliError> {
        line(
            &mut self.summary,
            &json!({
                "record": "run",
                "seed": r.seed,
                "best_accuracy": r.best_accuracy,
                "best_epoch": r.best_epoch,
                "final_accuracy": r.final_accuracy,
                "epochs": r.history.len(),
                "macs": r.macs,
                "parameters": r.parameters,
            }),
        )?;
        line(
            &mut self.timing,
            &json!({"seed": r.seed, "wall_clock_secs": r.wall_clock_secs}),
        )?;
        Ok(())
    }

    pub fn finish(mut self, s: &RepeatSummary) -> Result<(), CliError> {
        line(
            &mut self.summary,
            &json!({
                "record": "summary",
                "seeds": s.seeds,
                "mean": s.mean,
                "std": s.std,
                "mean_final": s.mean_final,
                "best_accuracies": s.best_accuracies,
            }),
        )?;
        self.summary.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}
