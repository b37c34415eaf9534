use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-image training loss.
    pub train_loss: f64,
    pub val_map: Option<f64>,
    /// Mean over images of `Σ_l z̃⁻_l`; only for the weak-negative loss.
    pub z_tilde_mass: Option<f64>,
    /// Cosine similarities set to 0 because a representation had zero norm.
    pub degenerate_similarities: usize,
    pub wall_time_s: f64,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    Final { checkpoint: &'a Option<PathBuf> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

impl RunLog {
    pub fn step_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Mirrors a [`RunLog`] into a JSON-lines file and an optional stdout table.
pub(crate) struct LogSink {
    file: Option<(PathBuf, BufWriter<File>)>,
    echo: bool,
}

impl LogSink {
    pub(crate) fn new(path: Option<&Path>, echo: bool) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = File::create(p).map_err(|e| Error::io(p, e))?;
                Some((p.to_path_buf(), BufWriter::new(f)))
            }
            None => None,
        };
        if echo {
            println!(
                "{:>5} {:>10} {:>12} {:>8} {:>10} {:>8}",
                "epoch", "lr", "train_loss", "val_mAP", "z~- mass", "time_s"
            );
        }
        Ok(Self { file, echo })
    }

    fn write(&mut self, line: &Line<'_>) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            let text = serde_json::to_string(line).map_err(|e| Error::json(path.as_path(), e))?;
            writeln!(w, "{text}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub(crate) fn step(&mut self, rec: &StepRecord) -> Result<()> {
        self.write(&Line::Step(rec))
    }

    pub(crate) fn epoch(&mut self, rec: &EpochRecord, lr: f64) -> Result<()> {
        self.write(&Line::Epoch(rec))?;
        if let Some((path, w)) = &mut self.file {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        if self.echo {
            let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            println!(
                "{:>5} {:>10.3e} {:>12.5} {:>8} {:>10} {:>8.1}",
                rec.epoch,
                lr,
                rec.train_loss,
                opt(rec.val_map),
                opt(rec.z_tilde_mass),
                rec.wall_time_s
            );
        }
        Ok(())
    }

    pub(crate) fn finish(&mut self, checkpoint: &Option<PathBuf>) -> Result<()> {
        self.write(&Line::Final { checkpoint })?;
        if let Some((path, w)) = &mut self.file {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}
