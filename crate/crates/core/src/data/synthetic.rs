//! Deterministic multi-label images of flat-colour shapes.
//!
//! The canvas is divided into square cells. Each object sits entirely inside
//! its own cell, so every cell-aligned window contains at most one label.

use std::path::Path;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_rgb8, write_json, DataItem, ImageSource, MultiLabelDataset, Split};
use crate::error::{Error, Result};

/// Placement records for both splits, written next to the manifests.
pub const RECORDS_FILE: &str = "objects.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Stripes,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::Stripes,
        ShapeKind::Frame,
    ];

    fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Stripes => "stripes",
            ShapeKind::Frame => "frame",
        }
    }

    /// Whether the point `(u, v) ∈ [-1, 1]²` of the bounding box is inked.
    fn covers(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Disk => r2 <= 1.0,
            ShapeKind::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Cross => u.abs() <= 0.3 || v.abs() <= 0.3,
            ShapeKind::Ring => (0.3..=1.0).contains(&r2),
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Stripes => ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
            ShapeKind::Frame => u.abs().max(v.abs()) >= 0.6,
        }
    }
}

const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [50, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("magenta", [200, 50, 200]),
    ("cyan", [40, 200, 210]),
    ("orange", [240, 140, 30]),
    ("white", [240, 240, 240]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVisual {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    /// Per-pixel uniform noise amplitude on the object, in `[0, 1]` units.
    #[serde(default)]
    pub texture: f64,
}

/// Distinct `(shape, colour)` pairs; supports up to 64 labels.
pub fn default_visuals(num_labels: usize) -> Vec<LabelVisual> {
    let (s, c) = (ShapeKind::ALL.len(), PALETTE.len());
    (0..num_labels)
        .map(|l| {
            let shape = ShapeKind::ALL[l % s];
            let (cname, color) = PALETTE[(l + l / s) % c];
            LabelVisual {
                name: format!("{cname}_{}", shape.name()),
                shape,
                color,
                texture: 0.0,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_labels: usize,
    pub images_per_split: SplitSizes,
    pub canvas_size: usize,
    pub cell_size: usize,
    /// Inclusive range for the number of objects (and labels) per image.
    pub shapes_per_image_range: [usize; 2],
    /// Inclusive range of object bounding-box sides in pixels.
    pub object_size_range: [usize; 2],
    pub rng_seed: u64,
    pub background: [u8; 3],
    /// Defaults to distinct shape and colour combinations.
    pub label_visuals: Option<Vec<LabelVisual>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_labels: 8,
            images_per_split: SplitSizes { train: 2000, val: 500 },
            canvas_size: 128,
            cell_size: 64,
            shapes_per_image_range: [1, 4],
            object_size_range: [32, 56],
            rng_seed: 0,
            background: [24, 24, 24],
            label_visuals: None,
        }
    }
}

impl SyntheticConfig {
    pub fn cells_per_side(&self) -> usize {
        self.canvas_size / self.cell_size.max(1)
    }

    pub fn visuals(&self) -> Vec<LabelVisual> {
        self.label_visuals
            .clone()
            .unwrap_or_else(|| default_visuals(self.num_labels))
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.shapes_per_image_range;
        let [smin, smax] = self.object_size_range;
        let cells = self.cells_per_side().pow(2);
        let fail = |m: String| Err(Error::Config(m));
        if self.num_labels < 2 {
            return fail("at least two labels are required".into());
        }
        if lo == 0 || lo > hi {
            return fail(format!("invalid shapes_per_image_range [{lo}, {hi}]"));
        }
        if self.cell_size == 0 || cells == 0 {
            return fail(format!(
                "canvas {} cannot hold a {} pixel cell",
                self.canvas_size, self.cell_size
            ));
        }
        if hi > cells {
            return fail(format!("{hi} objects do not fit in {cells} non-overlapping cells"));
        }
        if hi > self.num_labels {
            return fail(format!("{hi} distinct objects need at least {hi} labels"));
        }
        if smin == 0 || smin > smax || smax > self.cell_size {
            return fail(format!(
                "object sizes [{smin}, {smax}] must fit a {} pixel cell",
                self.cell_size
            ));
        }
        let visuals = self.visuals();
        if visuals.len() != self.num_labels {
            return fail(format!(
                "{} label visuals for {} labels",
                visuals.len(),
                self.num_labels
            ));
        }
        if self.label_visuals.is_none() && self.num_labels > ShapeKind::ALL.len() * PALETTE.len() {
            return fail("too many labels for the default visuals".into());
        }
        for (i, a) in visuals.iter().enumerate() {
            for b in &visuals[i + 1..] {
                if (a.shape, a.color) == (b.shape, b.color) || a.name == b.name {
                    return fail(format!(
                        "labels `{}` and `{}` are not visually distinct",
                        a.name, b.name
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One placed object; `bbox` is `[x0, y0, x1, y1)` in level-0 pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub label: usize,
    pub name: String,
    pub bbox: [usize; 4],
}

impl ObjectRecord {
    pub fn intersects(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> bool {
        self.bbox[0] < x1 && x0 < self.bbox[2] && self.bbox[1] < y1 && y0 < self.bbox[3]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub image: String,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RecordsFile {
    train: Vec<PlacementRecord>,
    val: Vec<PlacementRecord>,
}

pub struct SyntheticData {
    pub train: MultiLabelDataset,
    pub val: MultiLabelDataset,
    pub train_records: Vec<PlacementRecord>,
    pub val_records: Vec<PlacementRecord>,
}

impl SyntheticData {
    /// Writes PNGs, `train.json`, `val.json` and the placement records.
    pub fn save(&self, out: &Path) -> Result<()> {
        for ds in [&self.train, &self.val] {
            for item in ds.items() {
                if let ImageSource::Memory(img) = &item.source {
                    save_rgb8(img, &out.join(&item.name))?;
                }
            }
        }
        self.train.write_manifest(&out.join("train.json"))?;
        self.val.write_manifest(&out.join("val.json"))?;
        write_json(
            &out.join(RECORDS_FILE),
            &RecordsFile {
                train: self.train_records.clone(),
                val: self.val_records.clone(),
            },
        )
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    let (train, train_records) = generate_split(cfg, Split::Train, cfg.images_per_split.train)?;
    let (val, val_records) = generate_split(cfg, Split::Val, cfg.images_per_split.val)?;
    Ok(SyntheticData {
        train,
        val,
        train_records,
        val_records,
    })
}

/// Generates `n` images of one split. Each split has its own random stream.
pub fn generate_split(
    cfg: &SyntheticConfig,
    split: Split,
    n: usize,
) -> Result<(MultiLabelDataset, Vec<PlacementRecord>)> {
    cfg.validate()?;
    let visuals = cfg.visuals();
    let tag = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let stream = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Val => 0x7661_6c00_0000_0000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ stream);
    let mut items = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let name = format!("{tag}/img_{i:05}.png");
        let (img, objects) = draw_image(cfg, &visuals, &mut rng);
        let mut y = vec![0.0; cfg.num_labels];
        for o in &objects {
            y[o.label] = 1.0;
        }
        items.push(DataItem {
            name: name.clone(),
            source: ImageSource::Memory(Arc::new(img)),
            y,
        });
        records.push(PlacementRecord { image: name, objects });
    }
    let names = visuals.into_iter().map(|v| v.name).collect();
    Ok((MultiLabelDataset::new(names, items, Some(split))?, records))
}

fn draw_image(cfg: &SyntheticConfig, visuals: &[LabelVisual], rng: &mut ChaCha8Rng) -> (RgbImage, Vec<ObjectRecord>) {
    let side = cfg.cells_per_side();
    let [lo, hi] = cfg.shapes_per_image_range;
    let [smin, smax] = cfg.object_size_range;
    let count = rng.random_range(lo..=hi);
    let labels = sample(rng, cfg.num_labels, count).into_vec();
    let cells = sample(rng, side * side, count).into_vec();
    let size = cfg.canvas_size as u32;
    let mut img = RgbImage::from_pixel(size, size, Rgb(cfg.background));
    let mut objects = Vec::with_capacity(count);
    for (&label, &cell) in labels.iter().zip(&cells) {
        let s = rng.random_range(smin..=smax);
        let x0 = (cell % side) * cfg.cell_size + rng.random_range(0..=cfg.cell_size - s);
        let y0 = (cell / side) * cfg.cell_size + rng.random_range(0..=cfg.cell_size - s);
        let vis = &visuals[label];
        for py in y0..y0 + s {
            for px in x0..x0 + s {
                let u = 2.0 * ((px - x0) as f64 + 0.5) / s as f64 - 1.0;
                let v = 2.0 * ((py - y0) as f64 + 0.5) / s as f64 - 1.0;
                if vis.shape.covers(u, v) {
                    let mut c = vis.color;
                    if vis.texture > 0.0 {
                        let jitter = rng.random_range(-vis.texture..=vis.texture) * 255.0;
                        for ch in &mut c {
                            *ch = (f64::from(*ch) + jitter).round().clamp(0.0, 255.0) as u8;
                        }
                    }
                    img.put_pixel(px as u32, py as u32, Rgb(c));
                }
            }
        }
        objects.push(ObjectRecord {
            label,
            name: vis.name.clone(),
            bbox: [x0, y0, x0 + s, y0 + s],
        });
    }
    (img, objects)
}
