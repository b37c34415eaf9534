//! Shared convolutional patch embedder.
//!
//! Every patch goes through the same stack of convolution blocks, then global
//! average pooling and a dense projection to the embedding width.
//! Convolutions are followed by a learnable per-channel scale and bias (no
//! batch statistics) and the swish activation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::patches::{PatchLocation, PatchSet};

pub const PREFIX: &str = "embedder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// `k×k` convolution, affine, swish.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Inverted-residual block: 1×1 expansion (skipped when `expansion == 1`),
    /// `k×k` depthwise convolution, 1×1 linear projection, with an identity
    /// shortcut when shape allows. `repeats` copies are stacked; only the first
    /// uses `stride`.
    MbConv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        expansion: usize,
        repeats: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub in_channels: usize,
    /// Expected `(height, width)` of each patch.
    pub input_size: (usize, usize),
    pub embedding_dim: usize,
    pub blocks: Vec<BlockSpec>,
}

impl Default for EmbedderConfig {
    /// Four stride-2 conv blocks (16, 32, 64, 128 channels) and a 256-wide
    /// embedding.
    fn default() -> Self {
        Self::reduced(&[16, 32, 64, 128], 256)
    }
}

impl EmbedderConfig {
    /// Plain stride-2 3×3 conv blocks with the given widths.
    pub fn reduced(channels: &[usize], embedding_dim: usize) -> Self {
        Self {
            in_channels: 3,
            input_size: (64, 64),
            embedding_dim,
            blocks: channels
                .iter()
                .map(|&c| BlockSpec::Conv {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
        }
    }

    /// Stem and the first four inverted-residual stages of EfficientNet-B0
    /// (squeeze-excitation omitted).
    pub fn efficientnet_b0_stages(embedding_dim: usize) -> Self {
        let mb = |out_channels, kernel, stride, expansion, repeats| BlockSpec::MbConv {
            out_channels,
            kernel,
            stride,
            expansion,
            repeats,
        };
        Self {
            in_channels: 3,
            input_size: (64, 64),
            embedding_dim,
            blocks: vec![
                BlockSpec::Conv {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
                mb(16, 3, 1, 1, 1),
                mb(24, 3, 2, 6, 2),
                mb(40, 5, 2, 6, 2),
                mb(80, 3, 2, 6, 3),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config("embedder widths must be positive".into()));
        }
        let (mut h, mut w) = self.input_size;
        for (i, b) in self.blocks.iter().enumerate() {
            let (out, k, s) = match *b {
                BlockSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => (out_channels, kernel, stride),
                BlockSpec::MbConv {
                    out_channels,
                    kernel,
                    stride,
                    expansion,
                    repeats,
                } => {
                    if expansion == 0 || repeats == 0 {
                        return Err(Error::Config(format!("block {i}: expansion and repeats must be ≥ 1")));
                    }
                    (out_channels, kernel, stride)
                }
            };
            if out == 0 || k == 0 || k % 2 == 0 || s == 0 {
                return Err(Error::Config(format!(
                    "block {i}: need positive channels, odd kernel and positive stride"
                )));
            }
            // Only the first repeat strides; padding keeps the rest size-preserving.
            h = (h + 2 * (k / 2) - k) / s + 1;
            w = (w + 2 * (k / 2) - k) / s + 1;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("block {i} reduces the patch to nothing")));
            }
        }
        Ok(())
    }

    fn last_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| match *b {
                BlockSpec::Conv { out_channels, .. } | BlockSpec::MbConv { out_channels, .. } => out_channels,
            })
            .unwrap_or(self.in_channels)
    }
}

/// One learnable convolution followed by a per-channel affine.
struct ConvUnit {
    path: String,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
}

impl ConvUnit {
    fn init(&self, store: &mut ParameterStore) -> Result<()> {
        let cg = self.in_channels / self.groups;
        let fan_in = cg * self.kernel * self.kernel;
        store.init(
            &format!("{}/weight", self.path),
            &[self.out_channels, cg, self.kernel, self.kernel],
            Init::unit_variance(fan_in),
        )?;
        store.init(&format!("{}/scale", self.path), &[self.out_channels], Init::Ones)?;
        store.init(&format!("{}/bias", self.path), &[self.out_channels], Init::Zeros)?;
        Ok(())
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let w = g.param(store, &format!("{}/weight", self.path));
        let s = g.param(store, &format!("{}/scale", self.path));
        let b = g.param(store, &format!("{}/bias", self.path));
        let y = g.conv2d(x, w, self.stride, self.kernel / 2, self.groups);
        g.channel_affine(y, s, b)
    }
}

enum Layer {
    Conv(ConvUnit),
    MbConv {
        expand: Option<ConvUnit>,
        depthwise: ConvUnit,
        project: ConvUnit,
        residual: bool,
    },
}

/// The patch embedder described by an [`EmbedderConfig`].
pub struct Embedder {
    cfg: EmbedderConfig,
    layers: Vec<Layer>,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut c = cfg.in_channels;
        for (i, b) in cfg.blocks.iter().enumerate() {
            match *b {
                BlockSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    layers.push(Layer::Conv(ConvUnit {
                        path: format!("{PREFIX}/block{i}/conv"),
                        in_channels: c,
                        out_channels,
                        kernel,
                        stride,
                        groups: 1,
                    }));
                    c = out_channels;
                }
                BlockSpec::MbConv {
                    out_channels,
                    kernel,
                    stride,
                    expansion,
                    repeats,
                } => {
                    for r in 0..repeats {
                        let base = format!("{PREFIX}/block{i}/rep{r}");
                        let s = if r == 0 { stride } else { 1 };
                        let hidden = c * expansion;
                        let expand = (expansion > 1).then(|| ConvUnit {
                            path: format!("{base}/expand"),
                            in_channels: c,
                            out_channels: hidden,
                            kernel: 1,
                            stride: 1,
                            groups: 1,
                        });
                        layers.push(Layer::MbConv {
                            expand,
                            depthwise: ConvUnit {
                                path: format!("{base}/depthwise"),
                                in_channels: hidden,
                                out_channels: hidden,
                                kernel,
                                stride: s,
                                groups: hidden,
                            },
                            project: ConvUnit {
                                path: format!("{base}/project"),
                                in_channels: hidden,
                                out_channels,
                                kernel: 1,
                                stride: 1,
                                groups: 1,
                            },
                            residual: s == 1 && c == out_channels,
                        });
                        c = out_channels;
                    }
                }
            }
        }
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        for layer in &self.layers {
            match layer {
                Layer::Conv(u) => u.init(store)?,
                Layer::MbConv {
                    expand,
                    depthwise,
                    project,
                    ..
                } => {
                    if let Some(e) = expand {
                        e.init(store)?;
                    }
                    depthwise.init(store)?;
                    project.init(store)?;
                }
            }
        }
        let c = self.cfg.last_channels();
        store.init(
            &format!("{PREFIX}/fc/weight"),
            &[c, self.cfg.embedding_dim],
            Init::unit_variance(c),
        )?;
        store.init(&format!("{PREFIX}/fc/bias"), &[self.cfg.embedding_dim], Init::Zeros)?;
        Ok(())
    }

    /// `patches` is `m × C × h × w`; the result is `m × F`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, patches: Var) -> Result<Var> {
        let shape = g.shape(patches).to_vec();
        let (h, w) = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != self.cfg.in_channels || shape[2] != h || shape[3] != w {
            return Err(Error::Shape {
                context: "embedder input",
                expected: vec![shape.first().copied().unwrap_or(0), self.cfg.in_channels, h, w],
                actual: shape,
            });
        }
        if shape[0] == 0 {
            return Err(Error::EmptyPatchSet);
        }
        let mut x = patches;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(u) => {
                    let y = u.forward(g, store, x);
                    g.swish(y)
                }
                Layer::MbConv {
                    expand,
                    depthwise,
                    project,
                    residual,
                } => {
                    let mut y = x;
                    if let Some(e) = expand {
                        let t = e.forward(g, store, y);
                        y = g.swish(t);
                    }
                    let t = depthwise.forward(g, store, y);
                    y = g.swish(t);
                    y = project.forward(g, store, y);
                    if *residual {
                        g.add(y, x)
                    } else {
                        y
                    }
                }
            };
        }
        let pooled = g.global_avg_pool(x);
        let wt = g.param(store, &format!("{PREFIX}/fc/weight"));
        let b = g.param(store, &format!("{PREFIX}/fc/bias"));
        let z = g.matmul(pooled, wt);
        Ok(g.add_row_broadcast(z, b))
    }
}

/// `m × F` patch descriptors with the provenance of the patches they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbeddings {
    pub matrix: Tensor,
    pub provenance: Vec<PatchLocation>,
}

/// Embeds every patch of `set` with the parameters in `store`.
pub fn embed_patches(set: &PatchSet, store: &ParameterStore, cfg: &EmbedderConfig) -> Result<PatchEmbeddings> {
    if (set.patch_height, set.patch_width) != cfg.input_size || set.channels != cfg.in_channels {
        return Err(Error::Config(format!(
            "patches are {}x{}x{} but the embedder expects {}x{}x{}",
            set.patch_height, set.patch_width, set.channels, cfg.input_size.0, cfg.input_size.1, cfg.in_channels
        )));
    }
    let embedder = Embedder::new(cfg.clone())?;
    let mut g = Graph::new();
    let x = g.constant(set.to_nchw());
    let e = embedder.forward(&mut g, store, x)?;
    Ok(PatchEmbeddings {
        matrix: g.value(e).clone(),
        provenance: set.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patches::{image_to_patches, ImageTensor, PatchGridConfig};

    fn tiny_cfg() -> EmbedderConfig {
        EmbedderConfig {
            in_channels: 3,
            input_size: (8, 8),
            embedding_dim: 5,
            blocks: vec![
                BlockSpec::Conv {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                },
                BlockSpec::Conv {
                    out_channels: 6,
                    kernel: 3,
                    stride: 2,
                },
            ],
        }
    }

    fn store_for(cfg: &EmbedderConfig) -> ParameterStore {
        let mut store = ParameterStore::new(3);
        Embedder::new(cfg.clone()).unwrap().init(&mut store).unwrap();
        store
    }

    fn grid8() -> PatchGridConfig {
        PatchGridConfig {
            levels: 1,
            patch_height: 8,
            patch_width: 8,
            stride: 8,
            ..Default::default()
        }
    }

    #[test]
    fn identical_patches_embed_identically() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg);
        let img = ImageTensor::filled(8, 16, 3, 0.3);
        let set = image_to_patches(&img, &grid8()).unwrap();
        let e = embed_patches(&set, &store, &cfg).unwrap();
        assert_eq!(e.matrix.shape(), &[2, 5]);
        assert_eq!(e.matrix.row(0), e.matrix.row(1));
    }

    #[test]
    fn full_size_output_shape() {
        let cfg = EmbedderConfig::default();
        let store = store_for(&cfg);
        let set = image_to_patches(&ImageTensor::filled(128, 192, 3, 0.5), &PatchGridConfig::default()).unwrap();
        let e = embed_patches(&set, &store, &cfg).unwrap();
        assert_eq!(e.matrix.shape(), &[set.len(), 256]);
        assert!(e.matrix.is_finite());
    }

    #[test]
    fn efficientnet_variant_builds_and_runs() {
        let cfg = EmbedderConfig::efficientnet_b0_stages(32);
        let store = store_for(&cfg);
        let set = image_to_patches(&ImageTensor::filled(64, 64, 3, 0.5), &PatchGridConfig::default()).unwrap();
        let e = embed_patches(&set, &store, &cfg).unwrap();
        assert_eq!(e.matrix.shape(), &[1, 32]);
        assert!(store.contains("embedder/block2/rep1/depthwise/weight"));
    }

    #[test]
    fn mismatched_patch_size_is_a_config_error() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg);
        let set = image_to_patches(&ImageTensor::filled(64, 64, 3, 0.5), &PatchGridConfig::default()).unwrap();
        assert!(matches!(embed_patches(&set, &store, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn even_kernel_is_rejected() {
        let mut cfg = tiny_cfg();
        cfg.blocks[0] = BlockSpec::Conv {
            out_channels: 4,
            kernel: 2,
            stride: 1,
        };
        assert!(Embedder::new(cfg).is_err());
    }
}
