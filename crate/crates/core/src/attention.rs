//! Mean attention distance per (layer, head) and cls-attention maps.

use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::{AttentionRecord, ModelConfig, TransformerModel};
use crate::tensor::Tensor;

/// Pixel distances between the centers of every pair of patches,
/// row-major `[P, P]` over a `grid × grid` layout.
pub fn patch_distances(grid: usize, patch_size: usize) -> Vec<f64> {
    let p = grid * grid;
    let mut out = Vec::with_capacity(p * p);
    for q in 0..p {
        for k in 0..p {
            let dy = (q / grid) as f64 - (k / grid) as f64;
            let dx = (q % grid) as f64 - (k % grid) as f64;
            out.push((dx * dx + dy * dy).sqrt() * patch_size as f64);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDistance {
    pub layer: usize,
    pub head: usize,
    pub mean_distance_px: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDistanceTable {
    pub grid: usize,
    pub patch_size: usize,
    pub entries: Vec<HeadDistance>,
}

impl AttentionDistanceTable {
    /// Largest possible distance: opposite corners of the patch grid.
    pub fn max_distance(&self) -> f64 {
        self.patch_size as f64 * 2f64.sqrt() * (self.grid as f64 - 1.0)
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&HeadDistance> {
        self.entries.iter().find(|e| e.layer == layer && e.head == head)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,mean_distance_px,n_images\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.layer, e.head, e.mean_distance_px, e.n_images));
        }
        out
    }
}

/// Streaming reduction of attention records into per-head distances.
#[derive(Clone, Debug)]
pub struct DistanceAccumulator {
    grid: usize,
    patch_size: usize,
    cls: bool,
    heads: Vec<usize>,
    dist: Vec<f64>,
    sums: Vec<Vec<f64>>,
    images: usize,
}

impl DistanceAccumulator {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            grid: config.grid(),
            patch_size: config.patch_size,
            cls: config.use_cls_token,
            heads: config.num_heads.clone(),
            dist: patch_distances(config.grid(), config.patch_size),
            sums: config.num_heads.iter().map(|&h| vec![0.0; h]).collect(),
            images: 0,
        }
    }

    pub fn add(&mut self, record: &AttentionRecord) -> Result<()> {
        let p = self.grid * self.grid;
        let n = p + usize::from(self.cls);
        if record.layers.len() != self.heads.len() {
            return Err(Error::GridMismatch(format!(
                "record has {} layers, model has {}",
                record.layers.len(),
                self.heads.len()
            )));
        }
        for (l, t) in record.layers.iter().enumerate() {
            let s = t.shape();
            if s.len() != 4 || s[1] != self.heads[l] || s[2] != n || s[3] != n || s[0] != record.batch() {
                return Err(Error::GridMismatch(format!(
                    "layer {l} attention has shape {s:?}, expected [B, {}, {n}, {n}]",
                    self.heads[l]
                )));
            }
        }
        let off = usize::from(self.cls);
        for b in 0..record.batch() {
            for (l, sums) in self.sums.iter_mut().enumerate() {
                for (h, sum) in sums.iter_mut().enumerate() {
                    let a = record.matrix(l, b, h);
                    let mut total = 0.0;
                    for q in 0..p {
                        let row = &a[(q + off) * n + off..(q + off + 1) * n];
                        let mass: f64 = row.iter().sum();
                        let d = &self.dist[q * p..(q + 1) * p];
                        let weighted: f64 = row.iter().zip(d).map(|(w, d)| w * d).sum();
                        total += if mass > 0.0 {
                            weighted / mass
                        } else {
                            d.iter().sum::<f64>() / p as f64
                        };
                    }
                    *sum += total / p as f64;
                }
            }
        }
        self.images += record.batch();
        Ok(())
    }

    pub fn finish(&self) -> AttentionDistanceTable {
        let mut entries = Vec::new();
        for (l, sums) in self.sums.iter().enumerate() {
            for (h, s) in sums.iter().enumerate() {
                entries.push(HeadDistance {
                    layer: l,
                    head: h,
                    mean_distance_px: if self.images == 0 { 0.0 } else { s / self.images as f64 },
                    n_images: self.images,
                });
            }
        }
        AttentionDistanceTable {
            grid: self.grid,
            patch_size: self.patch_size,
            entries,
        }
    }
}

/// For every (layer, head): drop the cls row and column, renormalize each
/// query row, take the attention-weighted pixel distance to every key,
/// average over queries, then over images.
pub fn mean_attention_distance<'a>(
    records: impl IntoIterator<Item = &'a AttentionRecord>,
    config: &ModelConfig,
) -> Result<AttentionDistanceTable> {
    let mut acc = DistanceAccumulator::new(config);
    for r in records {
        acc.add(r)?;
    }
    Ok(acc.finish())
}

/// Runs the model over `indices` and reduces the recorded attention.
pub fn analyze_dataset(
    model: &TransformerModel,
    dataset: &DomainDataset,
    indices: &[usize],
) -> Result<AttentionDistanceTable> {
    let mut acc = DistanceAccumulator::new(model.config());
    for chunk in indices.chunks(32) {
        let (x, _) = dataset.batch(chunk, None);
        let out = model.forward(&x, true)?;
        acc.add(out.attention.as_ref().expect("recording requested"))?;
    }
    Ok(acc.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    ClsQuery,
    TokenMask,
}

/// Cls-query attention of image `image` at `layer`, averaged over heads,
/// restricted to patch keys and renormalized to sum to one.
pub fn cls_saliency(record: &AttentionRecord, config: &ModelConfig, layer: usize, image: usize) -> Result<Vec<f64>> {
    if !config.use_cls_token {
        return Err(Error::InvalidConfig("cls attention maps need a model with a cls token".into()));
    }
    if layer >= record.num_layers() || image >= record.batch() {
        return Err(Error::InvalidConfig(format!("layer {layer} / image {image} not in the record")));
    }
    let p = config.num_patches();
    let n = p + 1;
    if record.tokens() != n {
        return Err(Error::GridMismatch(format!("record has {} tokens, grid needs {n}", record.tokens())));
    }
    let heads = record.heads(layer);
    let mut sal = vec![0.0; p];
    for h in 0..heads {
        let cls_row = &record.matrix(layer, image, h)[1..n];
        for (s, a) in sal.iter_mut().zip(cls_row) {
            *s += a / heads as f64;
        }
    }
    let total: f64 = sal.iter().sum();
    if total > 0.0 {
        sal.iter_mut().for_each(|s| *s /= total);
    } else {
        sal.iter_mut().for_each(|s| *s = 1.0 / p as f64);
    }
    Ok(sal)
}

/// Smallest set of patches whose saliency covers at least `coverage` of the
/// mass, taken in descending order. Patches tied with the last one admitted
/// are admitted too, so a flat map keeps every patch.
pub fn token_mask(saliency: &[f64], coverage: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..saliency.len()).collect();
    order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
    let mut mask = vec![false; saliency.len()];
    let mut acc = 0.0;
    let mut cutoff = None;
    for &i in &order {
        if let Some(c) = cutoff {
            if saliency[i] < c {
                break;
            }
        }
        mask[i] = true;
        acc += saliency[i];
        if cutoff.is_none() && acc >= coverage - 1e-12 {
            cutoff = Some(saliency[i]);
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub mode: MapMode,
    pub grid: usize,
    pub saliency: Vec<f64>,
    pub mask: Option<Vec<bool>>,
    pub heatmap: GrayImage,
}

impl AttentionMap {
    /// Writes the heatmap as binary PGM.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_pgm(&self.heatmap, path)
    }
}

/// Binary (P5) PGM, the format used for every exported map.
pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend_from_slice(img.as_raw());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn luma(image: &Tensor) -> Vec<f64> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut y: Vec<f64> = (0..plane)
        .map(|i| (0..c).map(|ch| image.data()[ch * plane + i]).sum::<f64>() / c as f64)
        .collect();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    y.iter_mut().for_each(|v| *v = (*v - lo) / span * 255.0);
    y
}

/// Nearest-neighbour upsampling of a patch-grid map blended 50/50 over the
/// image luma. In token-mask mode, masked-out patches show the luma at a
/// quarter brightness instead.
pub fn render_heatmap(image: &Tensor, grid: usize, saliency: &[f64], mask: Option<&[bool]>) -> GrayImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let base = luma(image);
    let peak = saliency.iter().copied().fold(0.0, f64::max).max(1e-300);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let cell = (y * grid / h) * grid + x * grid / w;
        let l = base[y * w + x];
        let v = match mask {
            Some(m) if !m[cell] => 0.25 * l,
            Some(_) => l,
            None => 0.5 * l + 0.5 * 255.0 * saliency[cell] / peak,
        };
        image::Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

/// Attention map of a single `[C, H, W]` image (already normalized).
pub fn attention_map(model: &TransformerModel, image: &Tensor, layer: usize, mode: MapMode) -> Result<AttentionMap> {
    let c = model.config();
    if !c.use_cls_token {
        return Err(Error::InvalidConfig("cls attention maps need a model with a cls token".into()));
    }
    if layer >= c.num_layers() {
        return Err(Error::InvalidConfig(format!("layer {layer} out of range")));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let out = model.forward(&image.reshaped(&shape)?, true)?;
    let record = out.attention.expect("recording requested");
    let saliency = cls_saliency(&record, c, layer, 0)?;
    let mask = (mode == MapMode::TokenMask).then(|| token_mask(&saliency, 0.9));
    let heatmap = render_heatmap(image, c.grid(), &saliency, mask.as_deref());
    Ok(AttentionMap {
        mode,
        grid: c.grid(),
        saliency,
        mask,
        heatmap,
    })
}
