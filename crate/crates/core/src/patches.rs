//! Multi-resolution patch extraction.
//!
//! An image is resampled into a pyramid of `levels` images, each `ratio`
//! times smaller than the previous one, and every level is cut into a grid of
//! fixed-size windows. Windows that would cross the border are discarded, so
//! with `stride == patch size` the patches tile each level exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `height × width × channels` image with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape {
                context: "ImageTensor::new",
                expected: vec![height, width, channels],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// 8-bit RGB to `[0, 1]`.
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    /// Rounds to 8-bit RGB. Single-channel images are replicated to grey.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.get(y as usize, x as usize, c.min(self.channels - 1));
                px.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Bilinear resampling with half-pixel-centre alignment: output pixel `i`
/// samples the source at `(i + 0.5)·(in/out) − 0.5`, clamped to the border.
pub fn resize_bilinear(src: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let c = src.channels;
    let sy = src.height as f64 / out_h as f64;
    let sx = src.width as f64 / out_w as f64;
    let taps = |i: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, src.width)).collect();
    let mut out = ImageTensor::filled(out_h, out_w, c, 0.0);
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, sy, src.height);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = src.get(y0, x0, ch) * (1.0 - fx) + src.get(y0, x1, ch) * fx;
                let bottom = src.get(y1, x0, ch) * (1.0 - fx) + src.get(y1, x1, ch) * fx;
                out.set(y, x, ch, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchGridConfig {
    /// Number of resolution levels, the input itself included.
    pub levels: usize,
    /// Downsampling ratio between consecutive levels.
    pub ratio: f64,
    pub patch_height: usize,
    pub patch_width: usize,
    pub stride: usize,
    /// Random subsampling cap; `None` keeps every patch.
    pub max_patches: Option<usize>,
}

impl Default for PatchGridConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            ratio: 2.0,
            patch_height: 64,
            patch_width: 64,
            stride: 64,
            max_patches: None,
        }
    }
}

impl PatchGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("patch grid needs at least one level".into()));
        }
        if self.ratio.is_nan() || self.ratio <= 1.0 {
            return Err(Error::Config(format!(
                "downsampling ratio must exceed 1, got {}",
                self.ratio
            )));
        }
        if self.patch_height == 0 || self.patch_width == 0 || self.stride == 0 {
            return Err(Error::Config("patch size and stride must be positive".into()));
        }
        if self.max_patches == Some(0) {
            return Err(Error::Config("max_patches must be at least 1".into()));
        }
        Ok(())
    }

    /// Spatial size of level `r` of an `h × w` input.
    pub fn level_size(&self, r: usize, h: usize, w: usize) -> (usize, usize) {
        let f = self.ratio.powi(r as i32);
        ((h as f64 / f).floor() as usize, (w as f64 / f).floor() as usize)
    }

    /// Window grid of one `h × w` level; zero when the level is too small.
    pub fn grid_size(&self, h: usize, w: usize) -> (usize, usize) {
        if h < self.patch_height || w < self.patch_width {
            return (0, 0);
        }
        (
            (h - self.patch_height) / self.stride + 1,
            (w - self.patch_width) / self.stride + 1,
        )
    }

    /// Total patch count for an `h × w` input, before subsampling.
    pub fn patch_count(&self, h: usize, w: usize) -> usize {
        (0..self.levels)
            .map(|r| {
                let (lh, lw) = self.level_size(r, h, w);
                let (gr, gc) = self.grid_size(lh, lw);
                gr * gc
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    /// Level `r` is at index `r`; only levels at least one window large are kept.
    pub levels: Vec<ImageTensor>,
    /// Coarse levels dropped for being smaller than the patch window.
    pub dropped: usize,
}

pub fn build_pyramid(image: &ImageTensor, cfg: &PatchGridConfig) -> Result<Pyramid> {
    cfg.validate()?;
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut dropped = 0;
    for r in 0..cfg.levels {
        let (h, w) = cfg.level_size(r, image.height, image.width);
        if h < cfg.patch_height || w < cfg.patch_width {
            dropped += 1;
            continue;
        }
        let level = match levels.last() {
            None => image.clone(),
            Some(prev) => resize_bilinear(prev, h, w),
        };
        levels.push(level);
    }
    if levels.is_empty() {
        return Err(Error::EmptyPyramid {
            h: cfg.patch_height,
            w: cfg.patch_width,
        });
    }
    if dropped > 0 {
        log::debug!("pyramid: dropped {dropped} level(s) smaller than the patch window");
    }
    Ok(Pyramid { levels, dropped })
}

/// Where a patch came from: pyramid level and window grid position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchLocation {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

/// Fixed-size patches with provenance, each stored `h × w × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch_height: usize,
    pub patch_width: usize,
    pub channels: usize,
    pixels: Vec<f64>,
    pub provenance: Vec<PatchLocation>,
    pub source_size: (usize, usize),
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    fn patch_len(&self) -> usize {
        self.patch_height * self.patch_width * self.channels
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let n = self.patch_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn level_counts(&self) -> Vec<usize> {
        let levels = self.provenance.iter().map(|p| p.level + 1).max().unwrap_or(0);
        let mut counts = vec![0; levels];
        for p in &self.provenance {
            counts[p.level] += 1;
        }
        counts
    }

    /// Keeps the patches at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PatchSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.patch_len());
        for &i in indices {
            pixels.extend_from_slice(self.patch(i));
        }
        PatchSet {
            pixels,
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> PatchSet {
        PatchSet {
            patch_height: self.patch_height,
            patch_width: self.patch_width,
            channels: self.channels,
            pixels: Vec::new(),
            provenance: Vec::new(),
            source_size: self.source_size,
        }
    }

    /// Channels-first `m × C × h × w` tensor for the convolutional embedder.
    pub fn to_nchw(&self) -> Tensor {
        let (h, w, c) = (self.patch_height, self.patch_width, self.channels);
        let mut out = vec![0.0; self.len() * c * h * w];
        for i in 0..self.len() {
            let src = self.patch(i);
            let dst = &mut out[i * c * h * w..(i + 1) * c * h * w];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        dst[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
                    }
                }
            }
        }
        Tensor::from_vec(&[self.len(), c, h, w], out)
    }
}

/// Cuts every pyramid level into `patch_height × patch_width` windows.
pub fn extract_patches(pyramid: &Pyramid, cfg: &PatchGridConfig) -> Result<PatchSet> {
    let first = pyramid.levels.first().ok_or(Error::EmptyPyramid {
        h: cfg.patch_height,
        w: cfg.patch_width,
    })?;
    let (h, w, c) = (cfg.patch_height, cfg.patch_width, first.channels);
    let mut pixels = Vec::new();
    let mut provenance = Vec::new();
    for (level, img) in pyramid.levels.iter().enumerate() {
        let (rows, cols) = cfg.grid_size(img.height, img.width);
        for row in 0..rows {
            for col in 0..cols {
                let (y0, x0) = (row * cfg.stride, col * cfg.stride);
                for y in y0..y0 + h {
                    let start = (y * img.width + x0) * c;
                    pixels.extend_from_slice(&img.data[start..start + w * c]);
                }
                provenance.push(PatchLocation { level, row, col });
            }
        }
    }
    Ok(PatchSet {
        patch_height: h,
        patch_width: w,
        channels: c,
        pixels,
        provenance,
        source_size: (first.height, first.width),
    })
}

/// Pyramid plus extraction in one call.
pub fn image_to_patches(image: &ImageTensor, cfg: &PatchGridConfig) -> Result<PatchSet> {
    extract_patches(&build_pyramid(image, cfg)?, cfg)
}

/// Per-level sample sizes for drawing `max` of `counts.iter().sum()` patches
/// proportionally: floor of each exact share, with the leftover handed out by
/// largest fractional part, ties going to the coarser level.
pub fn level_quotas(counts: &[usize], max: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total <= max {
        return counts.to_vec();
    }
    let mut quotas: Vec<usize> = counts.iter().map(|&c| c * max / total).collect();
    let mut left = max - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Remainder numerators are exact integers: (c·max) mod total.
    order.sort_by(|&a, &b| {
        let ra = counts[a] * max % total;
        let rb = counts[b] * max % total;
        rb.cmp(&ra).then(b.cmp(&a))
    });
    for &l in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quotas[l] < counts[l] {
            quotas[l] += 1;
            left -= 1;
        }
    }
    quotas
}

/// Uniform random subset of at most `max_patches`, stratified per level.
/// Selected patches keep their original order.
pub fn subsample_patches(set: &PatchSet, max_patches: usize, rng: &mut impl Rng) -> PatchSet {
    if set.len() <= max_patches {
        return set.clone();
    }
    let counts = set.level_counts();
    let quotas = level_quotas(&counts, max_patches);
    let mut keep = Vec::with_capacity(max_patches);
    let mut offset = 0;
    for (&count, &quota) in counts.iter().zip(&quotas) {
        let mut picked = rand::seq::index::sample(rng, count, quota).into_vec();
        picked.sort_unstable();
        keep.extend(picked.into_iter().map(|i| offset + i));
        offset += count;
    }
    set.select(&keep)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        let data = (0..h * w * 3).map(|i| (i % 251) as f64 / 251.0).collect();
        ImageTensor::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn pyramid_sizes_for_640() {
        let p = build_pyramid(&ImageTensor::filled(640, 640, 3, 0.2), &PatchGridConfig::default()).unwrap();
        let sizes: Vec<_> = p.levels.iter().map(|l| (l.height(), l.width())).collect();
        assert_eq!(sizes, [(640, 640), (320, 320), (160, 160)]);
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn constant_image_stays_constant() {
        let p = build_pyramid(&ImageTensor::filled(200, 150, 3, 0.37), &PatchGridConfig::default()).unwrap();
        for level in &p.levels {
            assert!(level.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn checkerboard_2x2_downsamples_to_half() {
        let img = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_bilinear(&img, 1, 1);
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn small_levels_are_dropped_and_all_dropped_is_an_error() {
        let cfg = PatchGridConfig::default();
        let p = build_pyramid(&ImageTensor::filled(128, 128, 3, 0.0), &cfg).unwrap();
        assert_eq!(p.levels.len(), 2);
        assert_eq!(p.dropped, 1);
        let err = build_pyramid(&ImageTensor::filled(32, 100, 3, 0.0), &cfg).unwrap_err();
        assert!(matches!(err, Error::EmptyPyramid { .. }));
    }

    #[test]
    fn patch_count_640() {
        let cfg = PatchGridConfig::default();
        let set = image_to_patches(&ImageTensor::filled(640, 640, 3, 0.5), &cfg).unwrap();
        assert_eq!(set.len(), 129);
        assert_eq!(set.level_counts(), [100, 25, 4]);
        assert_eq!(cfg.patch_count(640, 640), 129);
    }

    #[test]
    fn window_equal_to_image_gives_one_patch() {
        let cfg = PatchGridConfig {
            levels: 1,
            ..Default::default()
        };
        assert_eq!(image_to_patches(&gradient_image(64, 64), &cfg).unwrap().len(), 1);
        // The 36-row remainder is discarded.
        let set = image_to_patches(&gradient_image(100, 64), &cfg).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.patch(0), &gradient_image(100, 64).data()[..64 * 64 * 3]);
    }

    #[test]
    fn patches_are_exact_subwindows() {
        let cfg = PatchGridConfig::default();
        let img = gradient_image(192, 130);
        let pyr = build_pyramid(&img, &cfg).unwrap();
        let set = extract_patches(&pyr, &cfg).unwrap();
        for (i, loc) in set.provenance.iter().enumerate() {
            let level = &pyr.levels[loc.level];
            let p = set.patch(i);
            for y in 0..64 {
                for x in 0..64 {
                    for c in 0..3 {
                        assert_eq!(
                            p[(y * 64 + x) * 3 + c],
                            level.get(loc.row * 64 + y, loc.col * 64 + x, c)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn quotas_follow_largest_remainder() {
        assert_eq!(level_quotas(&[100, 25, 4], 65), [50, 13, 2]);
        assert_eq!(level_quotas(&[100, 25, 4], 200), [100, 25, 4]);
        // Equal remainders: the coarsest level wins.
        assert_eq!(level_quotas(&[2, 2], 3), [1, 2]);
    }

    #[test]
    fn subsampling_is_identity_under_the_cap_and_deterministic_over_it() {
        let cfg = PatchGridConfig::default();
        let set = image_to_patches(&gradient_image(640, 640), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(subsample_patches(&set, 200, &mut rng), set);
        let a = subsample_patches(&set, 64, &mut ChaCha8Rng::seed_from_u64(11));
        let b = subsample_patches(&set, 64, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a.provenance, b.provenance);
        assert_eq!(a.len(), 64);
        let c = subsample_patches(&set, 65, &mut rng);
        assert_eq!(c.level_counts(), [50, 13, 2]);
    }

    #[test]
    fn nchw_layout_transposes_channels() {
        let cfg = PatchGridConfig {
            levels: 1,
            patch_height: 2,
            patch_width: 2,
            stride: 2,
            ..Default::default()
        };
        let img = ImageTensor::new(2, 2, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let t = image_to_patches(&img, &cfg).unwrap().to_nchw();
        assert_eq!(t.shape(), &[1, 2, 2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
    }
}
