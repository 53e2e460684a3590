use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::adapt::{self_train_adapt_with, AdaptationOutcome, EpochRecord};
use super::config::AdaptationConfig;
use crate::data::{Sample, UnlabeledImage};
use crate::error::{Error, Result};
use crate::metrics::probe_table_csv;
use crate::model::{write_checkpoint, Checkpoint, SegModel};
use crate::params::ParameterSnapshot;

/// A run directory:
///
/// ```text
/// config.json  records.jsonl  timings.jsonl  report.json
/// probes.csv   series.csv     adapt.log      snapshots/epochNNN.snap
/// ```
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        let snaps = root.join("snapshots");
        fs::create_dir_all(&snaps).map_err(|e| Error::io(&snaps, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn snapshot_relpath(epoch: usize) -> String {
        format!("snapshots/epoch{epoch:03}.snap")
    }

    /// Writes via a temporary file and rename.
    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.root.join(name);
        let tmp = self.root.join(format!(".{name}.tmp"));
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("value serializes");
        self.write_text(name, &(text + "\n"))
    }

    fn append_line<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.root.join(name);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(value).expect("value serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

/// Runs [`self_train_adapt_with`](super::self_train_adapt_with), streaming
/// records to `dir` as epochs finish and persisting snapshots at the
/// configured epochs plus `snapshots/best.snap`.
pub fn adapt_into_run_dir(
    model: &SegModel<f32>,
    theta_star: &ParameterSnapshot<f32>,
    target_train: &[UnlabeledImage],
    target_val: &[Sample],
    cfg: &AdaptationConfig,
    dir: &RunDir,
) -> Result<AdaptationOutcome> {
    dir.write_json("config.json", cfg)?;
    dir.write_text("records.jsonl", "")?;
    let mut best = f64::NEG_INFINITY;
    let mut observer = |record: &mut EpochRecord, m: &SegModel<f32>| -> Result<()> {
        if cfg.snapshot_epochs.contains(&record.epoch) {
            let rel = RunDir::snapshot_relpath(record.epoch);
            write_checkpoint(&dir.path().join(&rel), &Checkpoint::from_model(m))?;
            record.snapshot_path = Some(rel);
        }
        if record.target_val_dice > best {
            best = record.target_val_dice;
            write_checkpoint(&dir.path().join("snapshots/best.snap"), &Checkpoint::from_model(m))?;
        }
        dir.append_line("records.jsonl", record)
    };
    let out = self_train_adapt_with(model, theta_star, target_train, target_val, cfg, &mut observer)?;
    let timings: String = out
        .timings
        .iter()
        .map(|t| serde_json::to_string(t).expect("timing serializes") + "\n")
        .collect();
    dir.write_text("timings.jsonl", &timings)?;
    dir.write_json("report.json", &out.report)?;
    if let Some(r) = &out.report {
        dir.write_text("series.csv", &r.series_csv())?;
        dir.write_text("probes.csv", &probe_table_csv(&cfg.probe_epochs, &[(cfg.method.to_string(), Some(r))]))?;
    }
    dir.write_text("adapt.log", &(out.log.join("\n") + "\n"))?;
    Ok(out)
}
