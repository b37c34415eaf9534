//! Multi-label datasets, the JSON annotation manifest and PNG I/O.

mod sampling;
mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::patches::ImageTensor;

pub use sampling::{freeze_single_positives, sample_single_positive};
pub use synthetic::{
    default_visuals, generate_split, generate_synthetic, LabelVisual, ObjectRecord, PlacementRecord, ShapeKind,
    SplitSizes, SyntheticConfig, SyntheticData, RECORDS_FILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// On-disk annotation manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationManifest {
    pub labels: Vec<String>,
    pub items: Vec<ManifestItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// Path relative to the manifest's directory.
    pub image: String,
    pub positives: Vec<String>,
}

/// Where an item's pixels come from.
#[derive(Clone, Debug)]
pub enum ImageSource {
    File(PathBuf),
    /// Decoded 8-bit pixels, as they would be read back from PNG.
    Memory(Arc<image::RgbImage>),
}

#[derive(Clone, Debug)]
pub struct DataItem {
    /// Relative name used in manifests and reports.
    pub name: String,
    pub source: ImageSource,
    /// Ground truth over the label set, entries in `{0, 1}`.
    pub y: Vec<f64>,
}

impl DataItem {
    pub fn load_image(&self) -> Result<ImageTensor> {
        match &self.source {
            ImageSource::Memory(img) => Ok(ImageTensor::from_rgb8(img)),
            ImageSource::File(path) => load_png(path),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiLabelDataset {
    label_names: Vec<String>,
    items: Vec<DataItem>,
    pub split: Option<Split>,
}

impl MultiLabelDataset {
    pub fn new(label_names: Vec<String>, items: Vec<DataItem>, split: Option<Split>) -> Result<Self> {
        let unique: BTreeSet<&String> = label_names.iter().collect();
        if unique.len() != label_names.len() {
            return Err(Error::Labels("duplicate label names".into()));
        }
        if label_names.is_empty() {
            return Err(Error::Labels("an empty label set".into()));
        }
        for item in &items {
            if item.y.len() != label_names.len() {
                return Err(Error::Shape {
                    context: "dataset item ground truth",
                    expected: vec![label_names.len()],
                    actual: vec![item.y.len()],
                });
            }
            if item.y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Labels(format!("non-binary ground truth for `{}`", item.name)));
            }
            if !item.y.contains(&1.0) {
                return Err(Error::Labels(format!("no positive label for `{}`", item.name)));
            }
        }
        Ok(Self {
            label_names,
            items,
            split,
        })
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn items(&self) -> &[DataItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn label_index(&self, name: &str) -> Result<usize> {
        self.label_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLabel {
                name: name.to_string(),
                available: self.label_names.clone(),
            })
    }

    /// `N × |L|` ground-truth matrix.
    pub fn truth_matrix(&self) -> Tensor {
        let data = self.items.iter().flat_map(|it| it.y.iter().copied()).collect();
        Tensor::matrix(self.len(), self.num_labels(), data)
    }

    pub fn positives_per_label(&self) -> Vec<usize> {
        (0..self.num_labels())
            .map(|l| self.items.iter().filter(|it| it.y[l] == 1.0).count())
            .collect()
    }

    pub fn mean_labels_per_image(&self) -> f64 {
        let total: f64 = self.items.iter().map(|it| it.y.iter().sum::<f64>()).sum();
        total / self.len().max(1) as f64
    }

    /// The first `n` items.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            label_names: self.label_names.clone(),
            items: self.items[..n.min(self.len())].to_vec(),
            split: self.split,
        }
    }

    /// Writes the manifest to `path`; images must already live at
    /// `dir(path)/item.name`.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let manifest = AnnotationManifest {
            labels: self.label_names.clone(),
            items: self
                .items
                .iter()
                .map(|it| ManifestItem {
                    image: it.name.clone(),
                    positives: (0..self.num_labels())
                        .filter(|&l| it.y[l] == 1.0)
                        .map(|l| self.label_names[l].clone())
                        .collect(),
                })
                .collect(),
            split: self.split,
        };
        write_json(path, &manifest)
    }
}

/// Reads an annotation manifest. Repeated label instances on one image
/// collapse into a single positive.
pub fn load_annotations(manifest_path: &Path) -> Result<MultiLabelDataset> {
    let manifest: AnnotationManifest = read_json(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let labels = manifest.labels;
    let mut items = Vec::with_capacity(manifest.items.len());
    for entry in manifest.items {
        let mut y = vec![0.0; labels.len()];
        for name in &entry.positives {
            let l = labels
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::UnknownLabel {
                    name: name.clone(),
                    available: labels.clone(),
                })?;
            y[l] = 1.0;
        }
        if entry.positives.is_empty() {
            return Err(Error::Labels(format!("no positive label for `{}`", entry.image)));
        }
        let path = root.join(&entry.image);
        if !path.is_file() {
            return Err(Error::MissingImage(path));
        }
        items.push(DataItem {
            name: entry.image,
            source: ImageSource::File(path),
            y,
        });
    }
    MultiLabelDataset::new(labels, items, manifest.split)
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    if !path.is_file() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    save_rgb8(&img.to_rgb8(), path)
}

pub(crate) fn save_rgb8(img: &image::RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
