//! Datasets: seeded synthetic textures, image-folder ingestion, stratified
//! splits and batching.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageBatch, ImageDims};
use crate::seed;

/// Labelled images with every pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: ImageBatch,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: ImageBatch, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_names.len(),
            });
        }
        if let Some((index, &value)) = images
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::PixelOutOfRange { index, value });
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dims(&self) -> ImageDims {
        self.images.dims()
    }

    pub fn images(&self) -> &ImageBatch {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order. Class names are kept.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.select(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels, self.class_names.clone())
    }

    /// Batches covering every sample once, in order or seeded-shuffled.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Batches<'_> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = shuffle_seed {
            order.shuffle(&mut seed::rng(s));
        }
        Batches {
            dataset: self,
            order,
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }
}

/// One mini-batch with the dataset indices it was drawn from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: self.dataset.images.select(&indices),
            labels: indices.iter().map(|&i| self.dataset.labels[i]).collect(),
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Disjoint per-class stratified train/val/test partition.
///
/// For a class of `n` samples the validation and test shares are
/// `round(n * frac)`; training takes the rest. Every class must leave at
/// least one sample in each part.
pub fn stratified_split(
    d: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..d.num_classes() {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
        let n = idx.len();
        let n_val = (n as f64 * fv).round() as usize;
        let n_test = (n as f64 * fs).round() as usize;
        if n_val == 0 || n_test == 0 || n_val + n_test >= n {
            return Err(Error::Data(format!(
                "class `{}` has {n} samples, too few for split {fractions:?}",
                d.class_names[class]
            )));
        }
        idx.shuffle(&mut seed::rng(seed::derive(seed, class as u64)));
        parts[1].extend_from_slice(&idx[..n_val]);
        parts[2].extend_from_slice(&idx[n_val..n_val + n_test]);
        parts[0].extend_from_slice(&idx[n_val + n_test..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        d.subset(&parts[0])?,
        d.subset(&parts[1])?,
        d.subset(&parts[2])?,
    ))
}

/// Seeded band-limited textures: class `k` is a sum of sinusoids whose
/// spatial frequencies (cycles per image) lie in `bands[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTextureConfig {
    pub num_classes: usize,
    pub samples_per_class: Vec<usize>,
    pub image_size: usize,
    pub channels: usize,
    /// Per-class `(low, high)` frequency band; generated when empty.
    pub bands: Vec<(f64, f64)>,
    pub noise_level: f64,
    /// Generator seed; a run configuration fills it from the master seed.
    pub seed: Option<u64>,
}

impl Default for SyntheticTextureConfig {
    fn default() -> Self {
        SyntheticTextureConfig {
            num_classes: 7,
            samples_per_class: vec![300, 1800, 140, 90, 300, 40, 40],
            image_size: 32,
            channels: 3,
            bands: Vec::new(),
            noise_level: 0.05,
            seed: None,
        }
    }
}

/// Sinusoid components per class prototype.
const COMPONENTS: usize = 3;

impl SyntheticTextureConfig {
    /// Balanced configuration with `k` classes of `n` samples each.
    pub fn balanced(k: usize, n: usize, seed: u64) -> Self {
        SyntheticTextureConfig {
            num_classes: k,
            samples_per_class: vec![n; k],
            seed: Some(seed),
            ..Default::default()
        }
    }

    /// Explicit bands, or evenly spaced disjoint bands of width 0.35 with a
    /// 0.15 gap starting at half a cycle per image.
    pub fn resolved_bands(&self) -> Vec<(f64, f64)> {
        if !self.bands.is_empty() {
            return self.bands.clone();
        }
        (0..self.num_classes)
            .map(|k| {
                let low = 0.5 + 0.5 * k as f64;
                (low, low + 0.35)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if self.samples_per_class.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "samples_per_class has {} entries for {} classes",
                self.samples_per_class.len(),
                self.num_classes
            )));
        }
        if self.samples_per_class.contains(&0) {
            return Err(Error::invalid("every class needs at least one sample"));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::invalid("image_size and channels must be positive"));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::invalid("noise_level must be >= 0"));
        }
        let bands = self.resolved_bands();
        if bands.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} bands for {} classes",
                bands.len(),
                self.num_classes
            )));
        }
        if let Some(b) = bands.iter().find(|(lo, hi)| !(*lo > 0.0 && lo < hi)) {
            return Err(Error::invalid(format!(
                "band {b:?} must satisfy 0 < low < high"
            )));
        }
        let mut sorted = bands.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = sorted.windows(2).find(|w| w[0].1 > w[1].0) {
            return Err(Error::invalid(format!(
                "frequency bands {:?} and {:?} overlap",
                w[0], w[1]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Component {
    freq: f64,
    angle: f64,
    phase: f64,
    gains: [f64; 4],
}

fn render(components: &[Component], size: usize, channels: usize, out: &mut [f64]) {
    let s = size as f64;
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let mut v = 0.0;
                for comp in components {
                    let (sin, cos) = comp.angle.sin_cos();
                    let u = (x as f64 * cos + y as f64 * sin) / s;
                    v += comp.gains[c % 4] * (2.0 * PI * comp.freq * u + comp.phase).sin();
                }
                out[(c * size + y) * size + x] += v;
            }
        }
    }
}

/// Generates the synthetic texture dataset. Bit-identical for equal configs.
pub fn generate_synthetic(cfg: &SyntheticTextureConfig) -> Result<Dataset> {
    cfg.validate()?;
    let base = cfg.seed.unwrap_or(0);
    let bands = cfg.resolved_bands();
    let dims = ImageDims::square(cfg.channels, cfg.image_size);
    let total: usize = cfg.samples_per_class.iter().sum();
    let mut images = Vec::with_capacity(total * dims.numel());
    let mut labels = Vec::with_capacity(total);
    let noise = Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;

    for (class, (&(lo, hi), &count)) in bands.iter().zip(&cfg.samples_per_class).enumerate() {
        let mut proto_rng = seed::rng(seed::derive(base, 2 * class as u64));
        let prototype: Vec<Component> = (0..COMPONENTS)
            .map(|_| Component {
                freq: proto_rng.random_range(lo..hi),
                angle: proto_rng.random_range(0.0..PI),
                phase: proto_rng.random_range(0.0..2.0 * PI),
                gains: std::array::from_fn(|_| proto_rng.random_range(0.5..1.0)),
            })
            .collect();
        let mut rng = seed::rng(seed::derive(base, 2 * class as u64 + 1));
        for _ in 0..count {
            let comps: Vec<Component> = prototype
                .iter()
                .map(|p| Component {
                    freq: rng.random_range(lo..hi),
                    angle: p.angle + rng.random_range(-0.15..0.15),
                    phase: p.phase + rng.random_range(-0.6..0.6),
                    gains: p.gains.map(|g| g * rng.random_range(0.8..1.2)),
                })
                .collect();
            let mut img = vec![0.0; dims.numel()];
            render(&comps, cfg.image_size, cfg.channels, &mut img);
            if cfg.noise_level > 0.0 {
                img.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            let (min, max) = img
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            let span = if max > min { max - min } else { 1.0 };
            img.iter_mut()
                .for_each(|v| *v = ((*v - min) / span).clamp(0.0, 1.0));
            images.extend_from_slice(&img);
            labels.push(class);
        }
    }
    let class_names = (0..cfg.num_classes).map(|k| format!("class_{k}")).collect();
    Dataset::new(ImageBatch::new(total, dims, images)?, labels, class_names)
}

/// Options for [`load_image_folder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FolderOptions {
    pub extensions: Vec<String>,
    pub image_size: usize,
    pub channels: usize,
    /// Fail on undecodable files instead of skipping them.
    pub strict: bool,
}

impl Default for FolderOptions {
    fn default() -> Self {
        FolderOptions {
            extensions: ["png", "ppm", "bmp"].map(String::from).to_vec(),
            image_size: 32,
            channels: 3,
            strict: true,
        }
    }
}

/// Loads `root/<class>/<image>` with classes in sorted directory order,
/// resizing bilinearly to a square and scaling 8-bit values by `1/255`.
pub fn load_image_folder(root: &Path, opts: &FolderOptions) -> Result<Dataset> {
    if opts.image_size == 0 || !matches!(opts.channels, 1 | 3) {
        return Err(Error::invalid(
            "image_size must be positive and channels 1 or 3",
        ));
    }
    let exts: BTreeSet<String> = opts
        .extensions
        .iter()
        .map(|e| e.to_ascii_lowercase())
        .collect();
    let mut class_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    class_dirs.sort_by_key(|e| e.file_name());
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class directories in {}",
            root.display()
        )));
    }

    let dims = ImageDims::square(opts.channels, opts.image_size);
    let mut images = ImageBatch::empty(dims);
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    let size = opts.image_size as u32;
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().to_string_lossy().into_owned();
        let mut files: Vec<_> = fs::read_dir(dir.path())?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .map(|e| exts.contains(&e.to_string_lossy().to_ascii_lowercase()))
                        .unwrap_or(false)
            })
            .collect();
        files.sort();
        let before = labels.len();
        for path in files {
            let decoded = match image::open(&path) {
                Ok(img) => img,
                Err(e) if opts.strict => {
                    return Err(Error::Decode {
                        path,
                        reason: e.to_string(),
                    })
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            let resized = decoded.resize_exact(size, size, FilterType::Triangle);
            let pixels: Vec<f64> = if opts.channels == 1 {
                resized
                    .to_luma8()
                    .into_raw()
                    .into_iter()
                    .map(|v| f64::from(v) / 255.0)
                    .collect()
            } else {
                let rgb = resized.to_rgb8();
                let hw = (size * size) as usize;
                let raw = rgb.as_raw();
                let mut planar = vec![0.0; 3 * hw];
                for (p, px) in raw.chunks(3).enumerate() {
                    for c in 0..3 {
                        planar[c * hw + p] = f64::from(px[c]) / 255.0;
                    }
                }
                planar
            };
            images.push(&pixels)?;
            labels.push(label);
        }
        if labels.len() == before {
            return Err(Error::Data(format!("class `{name}` has no usable images")));
        }
        class_names.push(name);
    }
    Dataset::new(images, labels, class_names)
}

/// Writes a dataset as `root/<class>/<index>.png` (8-bit).
pub fn export_image_folder(d: &Dataset, root: &Path) -> Result<()> {
    let dims = d.dims();
    if !matches!(dims.channels, 1 | 3) {
        return Err(Error::invalid(
            "only 1- or 3-channel datasets can be exported",
        ));
    }
    for name in d.class_names() {
        fs::create_dir_all(root.join(name))?;
    }
    for i in 0..d.len() {
        let path = root
            .join(&d.class_names()[d.labels()[i]])
            .join(format!("{i:05}.png"));
        save_png(d.images().image(i), dims, &path)?;
    }
    Ok(())
}

/// Saves one planar `[C, H, W]` image in `[0, 1]` as an 8-bit PNG.
pub fn save_png(pixels: &[f64], dims: ImageDims, path: &Path) -> Result<()> {
    let hw = dims.height * dims.width;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (dims.width as u32, dims.height as u32);
    let result = if dims.channels == 1 {
        image::GrayImage::from_raw(w, h, pixels.iter().map(|&v| q(v)).collect())
            .expect("buffer size matches")
            .save(path)
    } else {
        let raw: Vec<u8> = (0..hw)
            .flat_map(|p| (0..3).map(move |c| (c, p)))
            .map(|(c, p)| q(pixels[c * hw + p]))
            .collect();
        image::RgbImage::from_raw(w, h, raw)
            .expect("buffer size matches")
            .save(path)
    };
    result.map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}
