//! The full patch model: patch grid, embedder and attention head over one
//! parameter store, with checkpoint save and load.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHead, HeadConfig, HeadOutputs};
use crate::autodiff::{checkpoint, Graph, ParameterStore, Tensor, Var};
use crate::embedder::{Embedder, EmbedderConfig};
use crate::error::{Error, Result};
use crate::patches::{image_to_patches, subsample_patches, ImageTensor, PatchGridConfig, PatchLocation, PatchSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub grid: PatchGridConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default)]
    pub scaled_scores: bool,
}

fn default_mlp_hidden() -> usize {
    256
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: PatchGridConfig::default(),
            embedder: EmbedderConfig::default(),
            mlp_hidden: default_mlp_hidden(),
            scaled_scores: false,
        }
    }
}

impl ModelConfig {
    pub fn head(&self, num_labels: usize) -> HeadConfig {
        HeadConfig {
            num_labels,
            embedding_dim: self.embedder.embedding_dim,
            mlp_hidden: self.mlp_hidden,
            scaled_scores: self.scaled_scores,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.embedder.validate()?;
        if (self.grid.patch_height, self.grid.patch_width) != self.embedder.input_size {
            return Err(Error::Config(format!(
                "patch grid produces {}x{} patches but the embedder expects {}x{}",
                self.grid.patch_height, self.grid.patch_width, self.embedder.input_size.0, self.embedder.input_size.1
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    labels: Vec<String>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Forward pass of one image inside a shared graph.
#[derive(Clone, Copy, Debug)]
pub struct ImageForward {
    pub embeddings: Var,
    pub head: HeadOutputs,
}

/// Read-only results of scoring one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    /// `|L| × m`.
    pub attention: Tensor,
    /// `|L| × F`.
    pub representations: Tensor,
    pub provenance: Vec<PatchLocation>,
}

pub struct PatchModel {
    cfg: ModelConfig,
    labels: Vec<String>,
    store: ParameterStore,
    embedder: Embedder,
    head: AttentionHead,
}

impl PatchModel {
    /// A freshly initialised model.
    pub fn new(cfg: ModelConfig, labels: Vec<String>, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(cfg, labels, ParameterStore::new(seed))?;
        model.embedder.init(&mut model.store)?;
        model.head.init(&mut model.store)?;
        Ok(model)
    }

    fn skeleton(cfg: ModelConfig, labels: Vec<String>, store: ParameterStore) -> Result<Self> {
        cfg.validate()?;
        let embedder = Embedder::new(cfg.embedder.clone())?;
        let head = AttentionHead::new(cfg.head(labels.len()))?;
        Ok(Self {
            cfg,
            labels,
            store,
            embedder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, name: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLabel {
                name: name.to_string(),
                available: self.labels.clone(),
            })
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Every patch of the image's grid, in provenance order.
    pub fn patches(&self, image: &ImageTensor) -> Result<PatchSet> {
        image_to_patches(image, &self.cfg.grid)
    }

    /// Patches capped at `max_patches` when the grid config sets one.
    pub fn training_patches(&self, image: &ImageTensor, rng: &mut impl Rng) -> Result<PatchSet> {
        let set = self.patches(image)?;
        Ok(match self.cfg.grid.max_patches {
            Some(max) => subsample_patches(&set, max, rng),
            None => set,
        })
    }

    /// Embeds the concatenated patches of several images in one pass and runs
    /// the head on each image's rows.
    pub fn forward_batch(&self, g: &mut Graph, sets: &[&PatchSet]) -> Result<Vec<ImageForward>> {
        if sets.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptyPatchSet);
        }
        let nchw = concat_nchw(sets);
        let x = g.constant(nchw);
        let all = self.embedder.forward(g, &self.store, x)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(sets.len());
        for set in sets {
            let emb = if sets.len() == 1 {
                all
            } else {
                g.slice_rows(all, start, set.len())
            };
            start += set.len();
            let head = self.head.forward(g, &self.store, emb)?;
            out.push(ImageForward { embeddings: emb, head });
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, set: &PatchSet) -> Result<ImageForward> {
        Ok(self.forward_batch(g, &[set])?.remove(0))
    }

    pub fn predict_patches(&self, set: &PatchSet) -> Result<Prediction> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, set)?;
        Ok(Prediction {
            scores: g.value(f.head.predictions).data().to_vec(),
            attention: g.value(f.head.attention).clone(),
            representations: g.value(f.head.representations).clone(),
            provenance: set.provenance.clone(),
        })
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<Prediction> {
        self.predict_patches(&self.patches(image)?)
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.cfg.clone(),
            labels: self.labels.clone(),
            extra,
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::json(dir, e))?;
        checkpoint::save(dir, &self.store, meta)
    }

    /// Restores a model and the extra metadata it was saved with.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, manifest) = checkpoint::load(dir)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.metadata)
            .map_err(|e| Error::json(dir.join(checkpoint::MANIFEST_FILE), e))?;
        let reference = Self::new(meta.model.clone(), meta.labels.clone(), store.seed())?;
        for (path, t) in reference.store.iter() {
            match store.get(path) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::Shape {
                        context: "checkpoint parameter",
                        expected: t.shape().to_vec(),
                        actual: v.shape().to_vec(),
                    })
                }
                None => return Err(Error::Config(format!("checkpoint is missing parameter `{path}`"))),
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::Config(
                "checkpoint holds parameters the model does not use".into(),
            ));
        }
        Ok((Self::skeleton(meta.model, meta.labels, store)?, meta.extra))
    }
}

fn concat_nchw(sets: &[&PatchSet]) -> Tensor {
    let first = sets[0].to_nchw();
    if sets.len() == 1 {
        return first;
    }
    let mut shape = first.shape().to_vec();
    let mut data = first.into_data();
    for s in &sets[1..] {
        let t = s.to_nchw();
        shape[0] += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&shape, data)
}
