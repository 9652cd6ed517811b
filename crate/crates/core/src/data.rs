//! Multi-domain image datasets: a synthetic shape generator, a folder
//! ingester, and the split protocols used for training and evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image stored as raw `u8` levels in channel-major `[C, H, W]` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub pixels: Vec<u8>,
    pub label: usize,
    pub domain: usize,
}

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { config: SynthConfig, seed: u64 },
    Folder { root: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    pub channels: usize,
    pub image_size: usize,
    pub samples: Vec<Sample>,
    pub normalization: Normalization,
    pub provenance: Provenance,
}

impl DomainDataset {
    /// Checks the shared-class-set and single-shape invariants and fills
    /// in the normalization statistics.
    fn assemble(
        classes: Vec<String>,
        domains: Vec<String>,
        channels: usize,
        image_size: usize,
        samples: Vec<Sample>,
        provenance: Provenance,
    ) -> Result<Self> {
        let len = channels * image_size * image_size;
        if samples.is_empty() {
            return Err(Error::InvalidDataset("no samples".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.pixels.len() != len || s.label >= classes.len() || s.domain >= domains.len() {
                return Err(Error::InvalidDataset(format!("sample {i} does not match the dataset layout")));
            }
        }
        let normalization = channel_stats(&samples, channels);
        Ok(Self {
            classes,
            domains,
            channels,
            image_size,
            samples,
            normalization,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    /// Indices of the samples of domain `d`, in dataset order.
    pub fn domain_samples(&self, d: usize) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].domain == d).collect()
    }

    /// Normalized `[B, C, H, W]` batch and labels. With `flip`, each image is
    /// mirrored horizontally with probability ½.
    pub fn batch(&self, indices: &[usize], mut flip: Option<&mut ChaCha8Rng>) -> (Tensor, Vec<usize>) {
        let (c, s) = (self.channels, self.image_size);
        let mut data = Vec::with_capacity(indices.len() * c * s * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let sample = &self.samples[i];
            let mirror = flip.as_deref_mut().is_some_and(|rng| rng.random_bool(0.5));
            for ch in 0..c {
                let (m, sd) = (self.normalization.mean[ch], self.normalization.std[ch]);
                for y in 0..s {
                    for x in 0..s {
                        let xx = if mirror { s - 1 - x } else { x };
                        let v = sample.pixels[(ch * s + y) * s + xx] as f64 / 255.0;
                        data.push((v - m) / sd);
                    }
                }
            }
            labels.push(sample.label);
        }
        let t = Tensor::new(vec![indices.len(), c, s, s], data).expect("layout checked at assembly");
        (t, labels)
    }

    /// Writes every sample as `root/domain/class/NNNNN.png`.
    pub fn export_folder(&self, root: &Path) -> Result<()> {
        let s = self.image_size as u32;
        for (i, sample) in self.samples.iter().enumerate() {
            let dir = root.join(&self.domains[sample.domain]).join(&self.classes[sample.label]);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{i:05}.png"));
            let plane = (s * s) as usize;
            let result = if self.channels == 1 {
                image::GrayImage::from_raw(s, s, sample.pixels.clone())
                    .expect("sized buffer")
                    .save(&path)
            } else {
                let interleaved: Vec<u8> = (0..plane)
                    .flat_map(|p| (0..3).map(move |ch| (ch, p)))
                    .map(|(ch, p)| sample.pixels[ch * plane + p])
                    .collect();
                image::RgbImage::from_raw(s, s, interleaved).expect("sized buffer").save(&path)
            };
            result.map_err(|e| Error::Decode {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }
}

fn channel_stats(samples: &[Sample], channels: usize) -> Normalization {
    let plane = samples[0].pixels.len() / channels;
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    for s in samples {
        for ch in 0..channels {
            for &p in &s.pixels[ch * plane..(ch + 1) * plane] {
                let v = p as f64 / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let n = (samples.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    Normalization { mean, std }
}

pub const SHAPES: [&str; 7] = ["circle", "square", "triangle", "plus", "ring", "diamond", "bars"];
pub const STYLES: [&str; 4] = ["photo", "art_painting", "cartoon", "sketch"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub domains: usize,
    /// Images rendered for every (class, domain) pair.
    pub images_per_class: usize,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 7,
            domains: 4,
            images_per_class: 200,
            image_size: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDataset(m));
        if !(2..=SHAPES.len()).contains(&self.classes) {
            return bad(format!("classes must be in 2..={}, got {}", SHAPES.len(), self.classes));
        }
        if !(2..=STYLES.len()).contains(&self.domains) {
            return bad(format!("domains must be in 2..={}, got {}", STYLES.len(), self.domains));
        }
        if self.images_per_class == 0 {
            return bad("images_per_class must be positive".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small to draw shapes", self.image_size));
        }
        Ok(())
    }
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        0 => r <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => (-0.9..=0.75).contains(&v) && u.abs() <= (v + 0.9) * 0.6,
        3 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        4 => (0.55..=1.0).contains(&r),
        5 => u.abs() + v.abs() <= 1.0,
        6 => u.abs() <= 0.9 && ((v - 0.5).abs() <= 0.22 || (v + 0.5).abs() <= 0.22),
        _ => unreachable!("shape index checked by config"),
    }
}

/// Shape mask with random placement, size and a small rotation.
fn shape_mask(shape: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let cy = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let radius = rng.random_range(0.28..0.38) * s;
    let theta: f64 = rng.random_range(-0.3..0.3);
    let (sin, cos) = theta.sin_cos();
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            mask.push(inside(shape, cos * dx + sin * dy, -sin * dx + cos * dy));
        }
    }
    mask
}

fn edges(mask: &[bool], size: usize) -> Vec<bool> {
    let at = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size && mask[y as usize * size + x as usize]
    };
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as isize, (i / size) as isize);
            let m = at(x, y);
            m && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !at(x + dx, y + dy))
        })
        .collect()
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(lo..hi))
}

fn render(shape: usize, style: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mask = shape_mask(shape, size, rng);
    let edge = edges(&mask, size);
    let plane = size * size;
    let mut rgb = vec![[0.0f64; 3]; plane];
    match style {
        // photo: shaded object on a smooth two-colour gradient, sensor noise
        0 => {
            let (top, bottom) = (random_color(rng, 40.0, 200.0), random_color(rng, 40.0, 200.0));
            let fg = random_color(rng, 30.0, 230.0);
            for (i, px) in rgb.iter_mut().enumerate() {
                let t = (i / size) as f64 / size as f64;
                *px = if mask[i] {
                    fg.map(|c| c * (1.1 - 0.4 * t))
                } else {
                    [0, 1, 2].map(|k| top[k] * (1.0 - t) + bottom[k] * t)
                };
                for c in px.iter_mut() {
                    *c += 8.0 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        // art painting: striped fill over a dark mottled checker ground
        1 => {
            let (a, b) = (random_color(rng, 90.0, 220.0), random_color(rng, 20.0, 110.0));
            let ground = random_color(rng, 40.0, 120.0);
            let period = rng.random_range(3..6);
            let diagonal = rng.random_bool(0.5);
            for (i, px) in rgb.iter_mut().enumerate() {
                let (x, y) = (i % size, i / size);
                *px = if mask[i] {
                    let phase = if diagonal { x + y } else { x };
                    if (phase / period) % 2 == 0 {
                        a
                    } else {
                        b
                    }
                } else {
                    let shade = if (x / 4 + y / 4) % 2 == 0 { 0.8 } else { 1.1 };
                    ground.map(|c| c * shade + rng.random_range(-20.0..20.0))
                };
            }
        }
        // cartoon: flat saturated fill, thick dark outline, pastel background
        2 => {
            let bg = random_color(rng, 170.0, 250.0);
            let mut fg = random_color(rng, 0.0, 90.0);
            fg[rng.random_range(0..3)] = 255.0;
            for (i, px) in rgb.iter_mut().enumerate() {
                *px = if edge[i] {
                    [15.0; 3]
                } else if mask[i] {
                    fg
                } else {
                    bg
                };
            }
        }
        // sketch: outline only, graphite on white paper
        3 => {
            let ink = rng.random_range(10.0..60.0);
            for (i, px) in rgb.iter_mut().enumerate() {
                let v = if edge[i] { ink } else { 250.0 - rng.random_range(0.0..10.0) };
                *px = [v; 3];
            }
        }
        _ => unreachable!("style index checked by config"),
    }
    let mut out = vec![0u8; 3 * plane];
    for (i, px) in rgb.iter().enumerate() {
        for k in 0..3 {
            out[k * plane + i] = px[k].round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Renders `classes × domains × images_per_class` labelled shape images.
/// Class `c` is always shape `c`; domain `d` fixes the rendering style.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<DomainDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(config.classes * config.domains * config.images_per_class);
    for domain in 0..config.domains {
        for label in 0..config.classes {
            for _ in 0..config.images_per_class {
                samples.push(Sample {
                    pixels: render(label, domain, config.image_size, &mut rng),
                    label,
                    domain,
                });
            }
        }
    }
    DomainDataset::assemble(
        SHAPES[..config.classes].iter().map(|s| s.to_string()).collect(),
        STYLES[..config.domains].iter().map(|s| s.to_string()).collect(),
        3,
        config.image_size,
        samples,
        Provenance::Synthetic {
            config: config.clone(),
            seed,
        },
    )
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn decode(path: &Path, channels: usize, size: u32) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let img = img.resize_exact(size, size, FilterType::Triangle);
    let plane = (size * size) as usize;
    Ok(if channels == 1 {
        img.to_luma8().into_raw()
    } else {
        let raw = img.to_rgb8().into_raw();
        let mut out = vec![0u8; 3 * plane];
        for p in 0..plane {
            for k in 0..3 {
                out[k * plane + p] = raw[p * 3 + k];
            }
        }
        out
    })
}

/// Reads `root/domain/class/*` into a dataset. Domains, classes and files
/// are taken in lexicographic order; every image is resized to
/// `image_size × image_size` with `channels` (1 or 3) channels.
pub fn ingest_folder(root: &Path, channels: usize, image_size: usize) -> Result<DomainDataset> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidDataset(format!("channels must be 1 or 3, got {channels}")));
    }
    let domain_dirs = sorted_entries(root, true)?;
    if domain_dirs.is_empty() {
        return Err(Error::InvalidDataset(format!("no domain directories under {}", root.display())));
    }
    let mut per_domain = Vec::new();
    for d in &domain_dirs {
        let classes = sorted_entries(d, true)?;
        per_domain.push(classes.iter().map(|c| file_name(c)).collect::<BTreeSet<_>>());
    }
    let all: BTreeSet<String> = per_domain.iter().flatten().cloned().collect();
    let common: BTreeSet<String> = all
        .iter()
        .filter(|c| per_domain.iter().all(|s| s.contains(*c)))
        .cloned()
        .collect();
    if common != all {
        let odd: Vec<String> = all.difference(&common).cloned().collect();
        return Err(Error::AsymmetricClasses(odd.join(", ")));
    }
    let classes: Vec<String> = all.into_iter().collect();
    let mut samples = Vec::new();
    for (domain, d) in domain_dirs.iter().enumerate() {
        for (label, class) in classes.iter().enumerate() {
            for file in sorted_entries(&d.join(class), false)? {
                samples.push(Sample {
                    pixels: decode(&file, channels, image_size as u32)?,
                    label,
                    domain,
                });
            }
        }
    }
    DomainDataset::assemble(
        classes,
        domain_dirs.iter().map(|d| file_name(d)).collect(),
        channels,
        image_size,
        samples,
        Provenance::Folder { root: root.to_path_buf() },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitKind {
    PooledHoldout {
        /// Share of every domain kept for train + valid; the rest is test.
        train_fraction: f64,
    },
    LeaveOneDomainOut {
        holdout: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitProtocol {
    #[serde(flatten)]
    pub kind: SplitKind,
    /// Share of the train + valid pool moved to valid.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl SplitProtocol {
    pub fn pooled(seed: u64) -> Self {
        Self {
            kind: SplitKind::PooledHoldout { train_fraction: 0.8 },
            valid_fraction: 0.1,
            seed,
        }
    }

    pub fn lodo(holdout: &str, seed: u64) -> Self {
        Self {
            kind: SplitKind::LeaveOneDomainOut {
                holdout: holdout.to_string(),
            },
            valid_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::InvalidDataset(format!("valid_fraction {} outside [0, 1)", self.valid_fraction)));
        }
        if let SplitKind::PooledHoldout { train_fraction } = self.kind {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(Error::InvalidDataset(format!("train_fraction {train_fraction} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Sample indices of the three splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled(mut idx: Vec<usize>, seed: u64, domain: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain as u64);
    idx.shuffle(&mut rng);
    idx
}

/// Deterministic per-domain partition. Counts are rounded per domain:
/// a domain of `n` samples keeps `round(n·train_fraction)` for train +
/// valid, of which `round(·valid_fraction)` go to valid.
pub fn split(dataset: &DomainDataset, protocol: &SplitProtocol) -> Result<Splits> {
    protocol.validate()?;
    let holdout = match &protocol.kind {
        SplitKind::LeaveOneDomainOut { holdout } => Some(
            dataset
                .domain_index(holdout)
                .ok_or_else(|| Error::InvalidDataset(format!("holdout domain {holdout:?} not in dataset")))?,
        ),
        SplitKind::PooledHoldout { .. } => None,
    };
    let mut out = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for d in 0..dataset.domains.len() {
        let idx = shuffled(dataset.domain_samples(d), protocol.seed, d);
        if Some(d) == holdout {
            out.test.extend(idx);
            continue;
        }
        let pool = match protocol.kind {
            SplitKind::PooledHoldout { train_fraction } => (idx.len() as f64 * train_fraction).round() as usize,
            SplitKind::LeaveOneDomainOut { .. } => idx.len(),
        };
        let n_valid = (pool as f64 * protocol.valid_fraction).round() as usize;
        out.valid.extend(&idx[..n_valid]);
        out.train.extend(&idx[n_valid..pool]);
        out.test.extend(&idx[pool..]);
    }
    for part in [&mut out.train, &mut out.valid, &mut out.test] {
        part.sort_unstable();
    }
    if out.train.is_empty() || out.valid.is_empty() || out.test.is_empty() {
        return Err(Error::InvalidDataset("protocol leaves an empty split".into()));
    }
    Ok(out)
}
