//! Scoring datasets, checkpoint evaluation and attention heatmaps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{load_annotations, save_rgb8, MultiLabelDataset};
use crate::error::{Error, Result};
use crate::metrics::{mean_average_precision, EvalReport};
use crate::model::{PatchModel, Prediction};
use crate::patches::{ImageTensor, PatchLocation};

/// `N × |L|` predictions in item order. Images are scored in parallel.
pub fn predict_dataset(model: &PatchModel, ds: &MultiLabelDataset) -> Result<Tensor> {
    if ds.num_labels() != model.num_labels() {
        return Err(Error::Shape {
            context: "dataset label count",
            expected: vec![model.num_labels()],
            actual: vec![ds.num_labels()],
        });
    }
    let rows = ds
        .items()
        .par_iter()
        .map(|it| model.predict(&it.load_image()?).map(|p| p.scores))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::matrix(ds.len(), ds.num_labels(), rows.concat()))
}

pub fn evaluate_model(model: &PatchModel, ds: &MultiLabelDataset) -> Result<EvalReport> {
    let scores = predict_dataset(model, ds)?;
    mean_average_precision(&scores, &ds.truth_matrix(), ds.label_names())
}

/// Loads a checkpoint and a manifest and reports mAP.
pub fn evaluate(checkpoint: &Path, manifest: &Path) -> Result<EvalReport> {
    let (model, _) = PatchModel::load(checkpoint)?;
    let ds = load_annotations(manifest)?;
    if ds.label_names() != model.labels() {
        if ds.num_labels() != model.num_labels() {
            return Err(Error::Shape {
                context: "checkpoint vs dataset label count",
                expected: vec![model.num_labels()],
                actual: vec![ds.num_labels()],
            });
        }
        return Err(Error::Config("dataset labels differ from the checkpoint's".into()));
    }
    evaluate_model(&model, &ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub location: PatchLocation,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub label: String,
    pub score: f64,
    /// One entry per patch, in provenance order.
    pub patches: Vec<PatchScore>,
    pub patch_size: (usize, usize),
    pub stride: usize,
    pub ratio: f64,
}

impl Localization {
    pub fn from_prediction(model: &PatchModel, pred: &Prediction, label: &str) -> Result<Self> {
        let l = model.label_index(label)?;
        let grid = &model.config().grid;
        Ok(Self {
            label: label.to_string(),
            score: pred.scores[l],
            patches: pred
                .provenance
                .iter()
                .zip(pred.attention.row(l))
                .map(|(&location, &alpha)| PatchScore { location, alpha })
                .collect(),
            patch_size: (grid.patch_height, grid.patch_width),
            stride: grid.stride,
            ratio: grid.ratio,
        })
    }

    /// Level-0 pixel rectangle `[x0, y0, x1, y1)` covered by a patch.
    pub fn rect(&self, loc: PatchLocation) -> [usize; 4] {
        let f = self.ratio.powi(loc.level as i32);
        let scale = |v: usize| (v as f64 * f).round() as usize;
        let (y0, x0) = (scale(loc.row * self.stride), scale(loc.col * self.stride));
        [x0, y0, x0 + scale(self.patch_size.1), y0 + scale(self.patch_size.0)]
    }

    /// The level-0 patch with the largest attention weight; ties go to the first.
    pub fn top_level0(&self) -> Option<&PatchScore> {
        self.patches
            .iter()
            .filter(|p| p.location.level == 0)
            .fold(None, |best: Option<&PatchScore>, p| match best {
                Some(b) if b.alpha >= p.alpha => Some(b),
                _ => Some(p),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,row,col,alpha\n");
        for p in &self.patches {
            let _ = writeln!(
                out,
                "{},{},{},{:.9e}",
                p.location.level, p.location.row, p.location.col, p.alpha
            );
        }
        out
    }

    /// Per-pixel red opacity: the largest max-normalised `α` of any patch
    /// covering the pixel.
    pub fn opacity_map(&self, height: usize, width: usize) -> Vec<f64> {
        let max = self.patches.iter().map(|p| p.alpha).fold(0.0, f64::max);
        let mut op = vec![0.0; height * width];
        if max <= 0.0 {
            return op;
        }
        for p in &self.patches {
            let a = p.alpha / max;
            let [x0, y0, x1, y1] = self.rect(p.location);
            for y in y0.min(height)..y1.min(height) {
                for x in x0.min(width)..x1.min(width) {
                    let o = &mut op[y * width + x];
                    *o = o.max(a);
                }
            }
        }
        op
    }

    pub fn overlay(&self, image: &ImageTensor) -> RgbImage {
        let (h, w) = (image.height(), image.width());
        let op = self.opacity_map(h, w);
        let base = image.to_rgb8();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let o = op[y as usize * w + x as usize];
            let px = base.get_pixel(x, y).0;
            let red = [255.0, 0.0, 0.0];
            Rgb(std::array::from_fn(|c| {
                ((1.0 - o) * f64::from(px[c]) + o * red[c]).round() as u8
            }))
        })
    }
}

/// Paths written by [`localize`].
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationArtifacts {
    pub csv: PathBuf,
    pub overlay: PathBuf,
    pub localization: Localization,
}

/// Writes the attention row of `label` as CSV and as a red overlay. Both file
/// names carry the prediction score.
pub fn localize(
    model: &PatchModel,
    image: &ImageTensor,
    stem: &str,
    label: &str,
    out_dir: &Path,
) -> Result<LocalizationArtifacts> {
    model.label_index(label)?;
    let pred = model.predict(image)?;
    let loc = Localization::from_prediction(model, &pred, label)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let base = format!("{stem}_{label}_score{:.4}", loc.score);
    let csv = out_dir.join(format!("{base}.csv"));
    std::fs::write(&csv, loc.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let overlay = out_dir.join(format!("{base}.png"));
    save_rgb8(&loc.overlay(image), &overlay)?;
    Ok(LocalizationArtifacts {
        csv,
        overlay,
        localization: loc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(patches: Vec<PatchScore>) -> Localization {
        Localization {
            label: "x".into(),
            score: 0.5,
            patches,
            patch_size: (64, 64),
            stride: 64,
            ratio: 2.0,
        }
    }

    fn ps(level: usize, row: usize, col: usize, alpha: f64) -> PatchScore {
        PatchScore {
            location: PatchLocation { level, row, col },
            alpha,
        }
    }

    #[test]
    fn coarse_patches_project_to_scaled_rectangles() {
        let l = loc(vec![]);
        assert_eq!(
            l.rect(PatchLocation {
                level: 0,
                row: 1,
                col: 0
            }),
            [0, 64, 64, 128]
        );
        assert_eq!(
            l.rect(PatchLocation {
                level: 1,
                row: 0,
                col: 1
            }),
            [128, 0, 256, 128]
        );
    }

    #[test]
    fn uniform_attention_gives_equal_opacity() {
        let l = loc((0..4).map(|i| ps(0, i / 2, i % 2, 0.25)).collect());
        let op = l.opacity_map(128, 128);
        assert!(op.iter().all(|&o| o == 1.0));
    }

    #[test]
    fn top_patch_ignores_coarse_levels() {
        let l = loc(vec![ps(0, 0, 0, 0.1), ps(0, 0, 1, 0.3), ps(1, 0, 0, 0.6)]);
        assert_eq!(l.top_level0().unwrap().location.col, 1);
        assert_eq!(l.to_csv().lines().count(), 4);
    }
}
