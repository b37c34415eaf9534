//! Training configuration and loop.

mod optim;
mod runlog;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{freeze_single_positives, load_annotations, read_json, MultiLabelDataset};
use crate::error::{Error, Result};
use crate::inference::evaluate_model;
use crate::losses::{an_loss, bce_loss, ce_loss, epr_loss, reduce, wn_loss, LossKind, Reduction};
use crate::model::{ImageForward, ModelConfig, PatchModel};
use crate::negatives::{weak_negatives, NegativeEstimate, SimilarityConfig};

pub use optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind};
pub use runlog::{EpochRecord, RunLog, StepRecord};

pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const PATCH_STREAM: u64 = 0x5041_5443;
const LABEL_STREAM: u64 = 0x4c41_4245;

/// Which annotations the loss sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// One positive per image, sampled once and frozen; no negatives.
    #[default]
    SinglePositive,
    /// `z⁺ = y` and `z⁻ = 1 − y`.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub supervision: Supervision,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    /// Run log and checkpoints go here; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub similarity: SimilarityConfig,
    /// Expected number of positives per image, for `epr`.
    pub k: Option<f64>,
    pub epr_lambda: f64,
    pub an_lambda: f64,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Wn,
            supervision: Supervision::SinglePositive,
            epochs: 25,
            batch_size: 16,
            lr_schedule: LrSchedule::default(),
            weight_decay: 1e-4,
            optimizer: OptimizerKind::Lamb,
            seed: 0,
            train_data: None,
            val_data: None,
            out_dir: None,
            model: ModelConfig::default(),
            similarity: SimilarityConfig::default(),
            k: None,
            epr_lambda: 1.0,
            an_lambda: 1.0,
            reduction: Reduction::Sum,
        }
    }
}

impl TrainConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg: TrainConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train_data, &mut cfg.val_data, &mut cfg.out_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.an_lambda < 0.0 {
            return Err(Error::Config(format!("an_lambda must be ≥ 0, got {}", self.an_lambda)));
        }
        if self.loss == LossKind::Epr && !self.k.is_some_and(|k| k > 0.0) {
            return Err(Error::Config("the epr loss needs a positive `k`".into()));
        }
        self.lr_schedule.validate()?;
        self.similarity.validate()?;
        self.model.validate()
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Observed annotations of one training image.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub z_plus: Tensor,
    pub z_minus: Tensor,
}

/// Frozen per-image targets for a dataset under `supervision`.
pub fn build_targets(ds: &MultiLabelDataset, supervision: Supervision, seed: u64) -> Result<Vec<Targets>> {
    let l = ds.num_labels();
    match supervision {
        Supervision::Full => Ok(ds
            .items()
            .iter()
            .map(|it| Targets {
                z_plus: Tensor::vector(it.y.clone()),
                z_minus: Tensor::vector(it.y.iter().map(|v| 1.0 - v).collect()),
            })
            .collect()),
        Supervision::SinglePositive => Ok(freeze_single_positives(ds, seed ^ LABEL_STREAM)?
            .into_iter()
            .map(|z| Targets {
                z_plus: Tensor::vector(z),
                z_minus: Tensor::zeros(&[l]),
            })
            .collect()),
    }
}

/// The configured loss for one image's forward pass.
pub fn image_loss(
    g: &mut Graph,
    cfg: &TrainConfig,
    fw: &ImageForward,
    t: &Targets,
) -> Result<(Var, Option<NegativeEstimate>)> {
    let yhat = fw.head.predictions;
    let z = &t.z_plus;
    Ok(match cfg.loss {
        LossKind::Ce => (ce_loss(g, z, yhat)?, None),
        LossKind::Bce => (bce_loss(g, z, &t.z_minus, yhat)?, None),
        LossKind::An => (an_loss(g, z, yhat, cfg.an_lambda)?, None),
        LossKind::Epr => {
            let k = cfg.k.ok_or_else(|| Error::Config("the epr loss needs `k`".into()))?;
            (epr_loss(g, z, yhat, k, cfg.epr_lambda)?, None)
        }
        LossKind::Wn => {
            let (zt, est) = weak_negatives(g, fw.head.representations, z, &cfg.similarity)?;
            (wn_loss(g, z, zt, yhat)?, Some(est))
        }
    })
}

pub struct TrainOutcome {
    pub model: PatchModel,
    pub log: RunLog,
}

/// Loads the datasets named in `cfg` and trains.
pub fn train(cfg: &TrainConfig, echo: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let path = cfg
        .train_data
        .as_deref()
        .ok_or_else(|| Error::Config("train_data is not set".into()))?;
    let train_ds = load_annotations(path)?;
    let val_ds = cfg.val_data.as_deref().map(load_annotations).transpose()?;
    train_on(cfg, &train_ds, val_ds.as_ref(), echo)
}

/// Trains on in-memory datasets. With `echo`, prints an epoch table.
pub fn train_on(
    cfg: &TrainConfig,
    train_ds: &MultiLabelDataset,
    val_ds: Option<&MultiLabelDataset>,
    echo: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Config("the training set is empty".into()));
    }
    if let Some(v) = val_ds {
        if v.label_names() != train_ds.label_names() {
            return Err(Error::Config("training and validation label sets differ".into()));
        }
    }
    let mut model = PatchModel::new(cfg.model.clone(), train_ds.label_names().to_vec(), cfg.seed)?;
    let targets = build_targets(train_ds, cfg.supervision, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut patch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PATCH_STREAM);
    let ckpt_root = cfg.out_dir.as_ref().map(|d| d.join(CHECKPOINT_DIR));
    let mut sink = runlog::LogSink::new(cfg.out_dir.as_ref().map(|d| d.join(RUN_LOG_FILE)).as_deref(), echo)?;
    let boundaries: Vec<usize> = cfg.lr_schedule.boundaries().collect();
    let mut run = RunLog::default();
    let mut last_checkpoint: Option<PathBuf> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_schedule.lr_at(epoch);
        let (mut loss_sum, mut mass_sum, mut degenerate) = (0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let step = run.steps.len();
            let sets = chunk
                .iter()
                .map(|&i| model.training_patches(&train_ds.items()[i].load_image()?, &mut patch_rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = sets.iter().collect();
            let mut g = Graph::new();
            let forwards = model.forward_batch(&mut g, &refs)?;
            let mut total: Option<Var> = None;
            for (fw, &i) in forwards.iter().zip(chunk) {
                let (li, est) = image_loss(&mut g, cfg, fw, &targets[i])?;
                loss_sum += g.value(li).item();
                if let Some(est) = est {
                    mass_sum += est.mass();
                    degenerate += est.degenerate;
                }
                total = Some(match total {
                    Some(acc) => g.add(acc, li),
                    None => li,
                });
            }
            let root = reduce(&mut g, total.expect("non-empty batch"), chunk.len(), cfg.reduction);
            let loss = g.value(root).item();
            let diverged = || Error::Diverged {
                step,
                last_checkpoint: last_checkpoint.clone(),
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            let grads = match g.param_gradients(root, model.store()) {
                Err(Error::NonFinite { op }) => {
                    log::error!("non-finite value from `{op}` at step {step}");
                    return Err(diverged());
                }
                other => other?,
            };
            if grads.values().any(|t| !t.is_finite()) {
                return Err(diverged());
            }
            opt.step(model.store_mut(), &grads, lr)?;
            let rec = StepRecord { step, epoch, lr, loss };
            sink.step(&rec)?;
            run.steps.push(rec);
        }
        order.shuffle(&mut shuffle_rng);

        let val_map = val_ds.map(|v| evaluate_model(&model, v).map(|r| r.map)).transpose()?;
        let n = train_ds.len() as f64;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_map,
            z_tilde_mass: (cfg.loss == LossKind::Wn).then(|| mass_sum / n),
            degenerate_similarities: degenerate,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if degenerate > 0 {
            log::warn!("epoch {epoch}: {degenerate} similarities involved zero-norm representations");
        }
        sink.epoch(&rec, lr)?;
        run.epochs.push(rec);

        if let Some(root) = &ckpt_root {
            let next = epoch + 1;
            if boundaries.contains(&next) && next < cfg.epochs {
                let dir = root.join(format!("epoch_{next:03}"));
                model.save(&dir, checkpoint_meta(cfg, next, run.steps.len()))?;
                last_checkpoint = Some(dir);
            }
        }
    }

    if let Some(root) = &ckpt_root {
        let dir = root.join("final");
        model.save(&dir, checkpoint_meta(cfg, cfg.epochs, run.steps.len()))?;
        run.final_checkpoint = Some(dir);
    }
    sink.finish(&run.final_checkpoint)?;
    Ok(TrainOutcome { model, log: run })
}

fn checkpoint_meta(cfg: &TrainConfig, epochs_done: usize, steps: usize) -> serde_json::Value {
    serde_json::json!({
        "epochs_completed": epochs_done,
        "steps": steps,
        "loss": cfg.loss,
        "supervision": cfg.supervision,
        "seed": cfg.seed,
    })
}
