//! Corpus loading, stratified splitting, affine augmentation and batching.
//!
//! Images are single-channel `[1, H, W]` tensors with ink at 1.0 and
//! background at 0.0.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "pgm", "pbm", "ppm"];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub source: String,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub images: Vec<LabeledImage>,
    pub class_names: Vec<String>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

/// Reads `root/<class>/<image>` files, classes in lexicographic order.
///
/// Every image is converted to grayscale, flipped if its border is lighter
/// than its interior so ink ends up bright, scaled to fit `image_size`
/// with its aspect ratio kept, centered on a zero background and mapped to
/// `[0, 1]`.
pub fn load_corpus(root: &Path, image_size: usize) -> Result<Corpus> {
    if image_size == 0 {
        return Err(invalid("image size must be positive"));
    }
    let mut class_dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.is_dir() && !is_hidden(&path) {
            class_dirs.push(path);
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} contains no class directories", root.display())));
    }

    let mut images = Vec::new();
    let mut class_names = Vec::new();
    let mut skipped = 0;
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("class directory {} is not valid UTF-8", dir.display())))?
            .to_string();
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_file() && !is_hidden(&path) && has_image_extension(&path) {
                files.push(path);
            }
        }
        files.sort();
        let before = images.len();
        for path in files {
            match load_image(&path, image_size) {
                Ok(pixels) => images.push(LabeledImage {
                    pixels,
                    label,
                    source: source_id(root, &path),
                }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
        if images.len() == before {
            return Err(Error::Data(format!(
                "class directory {} holds no readable images",
                dir.display()
            )));
        }
        class_names.push(name);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} unreadable files under {}", root.display());
    }
    Ok(Corpus {
        images,
        class_names,
        skipped,
    })
}

fn is_hidden(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'))
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn source_id(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Decodes one file into a normalized `[1, size, size]` tensor.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    Ok(normalize_gray(&img, size))
}

/// Polarity normalization, aspect-preserving fit and scaling to `[0, 1]`.
pub fn normalize_gray(img: &GrayImage, size: usize) -> Tensor<f32> {
    let mut img = img.clone();
    if border_mean(&img) > interior_mean(&img) {
        imageops::invert(&mut img);
    }
    let (w, h) = img.dimensions();
    let target = size as u32;
    let fitted = if w == target && h == target {
        img
    } else {
        let scale = target as f64 / w.max(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).clamp(1, target);
        let nh = ((h as f64 * scale).round() as u32).clamp(1, target);
        let resized = imageops::resize(&img, nw, nh, FilterType::Triangle);
        let mut canvas = GrayImage::new(target, target);
        imageops::replace(
            &mut canvas,
            &resized,
            ((target - nw) / 2) as i64,
            ((target - nh) / 2) as i64,
        );
        canvas
    };
    let data = fitted.as_raw().iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new([1, size, size], data).expect("fitted image matches the target size")
}

fn border_mean(img: &GrayImage) -> f64 {
    let (w, h) = img.dimensions();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y, p) in img.enumerate_pixels() {
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            sum += p.0[0] as f64;
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

fn interior_mean(img: &GrayImage) -> f64 {
    let total: f64 = img.as_raw().iter().map(|&p| p as f64).sum();
    total / img.as_raw().len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub class_names: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Per-class stratified shuffle split; each class contributes
/// `floor(n · train_frac)` images to train (at least one to each side).
pub fn split(corpus: Corpus, train_frac: f64, seed: u64) -> Result<DatasetSplit> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(invalid(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let k = corpus.class_names.len();
    let mut by_class: Vec<Vec<LabeledImage>> = vec![Vec::new(); k];
    for img in corpus.images {
        if img.label >= k {
            return Err(Error::Data(format!("label {} out of range for {k} classes", img.label)));
        }
        by_class[img.label].push(img);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, mut items) in by_class.into_iter().enumerate() {
        let n = items.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "class {} has {n} images; a split needs at least 2",
                corpus.class_names[label]
            )));
        }
        items.shuffle(&mut rng);
        let n_train = ((n as f64 * train_frac + 1e-9).floor() as usize).clamp(1, n - 1);
        let rest = items.split_off(n_train);
        train.extend(items);
        test.extend(rest);
    }
    Ok(DatasetSplit {
        train,
        test,
        class_names: corpus.class_names,
        seed,
    })
}

/// Ranges of the random affine augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub shear_frac: f64,
    pub zoom_frac: f64,
    pub shift_frac: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            shear_frac: 0.10,
            zoom_frac: 0.10,
            shift_frac: 0.10,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Enabled, with every range zero.
    pub fn zero() -> Self {
        Self {
            rotation_deg: 0.0,
            shear_frac: 0.0,
            zoom_frac: 0.0,
            shift_frac: 0.0,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rotation_deg", self.rotation_deg),
            ("shear_frac", self.shear_frac),
            ("zoom_frac", self.zoom_frac),
            ("shift_frac", self.shift_frac),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("augmentation {name} must be finite and >= 0, got {v}")));
            }
        }
        if self.zoom_frac >= 1.0 {
            return Err(invalid(format!("zoom_frac must be below 1, got {}", self.zoom_frac)));
        }
        Ok(())
    }

    /// Draws one transform; `width`/`height` convert shift fractions to pixels.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, width: usize, height: usize) -> Affine {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let rotation = sym(self.rotation_deg).to_radians();
        let shear = sym(self.shear_frac);
        let zoom = 1.0 + sym(self.zoom_frac);
        let tx = sym(self.shift_frac) * width as f64;
        let ty = sym(self.shift_frac) * height as f64;
        Affine {
            rotation,
            shear,
            zoom,
            tx,
            ty,
        }
    }
}

/// A rotation·shear·zoom about the image center followed by a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    /// Radians.
    pub rotation: f64,
    pub shear: f64,
    pub zoom: f64,
    /// Pixels, positive moves content right.
    pub tx: f64,
    /// Pixels, positive moves content down.
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        rotation: 0.0,
        shear: 0.0,
        zoom: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            tx,
            ty,
            ..Self::IDENTITY
        }
    }

    /// Forward matrix `R(θ) · [[1, s], [0, 1]] · z`.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (sin, cos) = self.rotation.sin_cos();
        let z = self.zoom;
        [
            [cos * z, (cos * self.shear - sin) * z],
            [sin * z, (sin * self.shear + cos) * z],
        ]
    }

    /// Resamples `[1, H, W]` pixels through the transform with bilinear
    /// interpolation; samples falling outside the source read as 0.
    pub fn warp(&self, pixels: &Tensor<f32>) -> Tensor<f32> {
        let (c, h, w) = match *pixels.shape() {
            [c, h, w] => (c, h, w),
            _ => panic!("warp expects a [C, H, W] image, got {:?}", pixels.shape()),
        };
        let [[a, b], [cc, d]] = self.matrix();
        let det = a * d - b * cc;
        let inv = [[d / det, -b / det], [-cc / det, a / det]];
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let src = pixels.data();
        let mut out = vec![0.0f32; src.len()];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let at = |x: isize, y: isize| -> f64 {
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    0.0
                } else {
                    plane[y as usize * w + x as usize] as f64
                }
            };
            for oy in 0..h {
                for ox in 0..w {
                    let dx = ox as f64 - cx - self.tx;
                    let dy = oy as f64 - cy - self.ty;
                    let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
                    let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
                    let (fx, fy) = (sx.floor(), sy.floor());
                    let (wx, wy) = (sx - fx, sy - fy);
                    let (x0, y0) = (fx as isize, fy as isize);
                    let top = at(x0, y0) * (1.0 - wx) + at(x0 + 1, y0) * wx;
                    let bottom = at(x0, y0 + 1) * (1.0 - wx) + at(x0 + 1, y0 + 1) * wx;
                    let v = top * (1.0 - wy) + bottom * wy;
                    out[ch * h * w + oy * w + ox] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        Tensor::new(pixels.shape(), out).expect("same shape as the input")
    }
}

/// Applies one random transform drawn from `cfg`; the label is untouched.
pub fn augment<R: Rng + ?Sized>(image: &LabeledImage, cfg: &AugmentConfig, rng: &mut R) -> LabeledImage {
    if !cfg.enabled {
        return image.clone();
    }
    let t = cfg.sample(rng, image.width(), image.height());
    LabeledImage {
        pixels: t.warp(&image.pixels),
        label: image.label,
        source: image.source.clone(),
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the augmentation of sample `index` in `epoch`.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ epoch as u64) ^ index as u64))
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ 0x5348_5546_464c_4521) ^ epoch as u64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacks `[1, H, W]` images into a `[B, 1, H, W]` batch.
pub fn stack<'a>(images: impl IntoIterator<Item = &'a LabeledImage>) -> Result<Batch> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for img in images {
        match &shape {
            None => shape = Some(img.pixels.shape().to_vec()),
            Some(s) if s != img.pixels.shape() => {
                return Err(Error::Data(format!(
                    "cannot batch {} with shape {:?} next to {:?}",
                    img.source,
                    img.pixels.shape(),
                    s
                )))
            }
            _ => {}
        }
        data.extend_from_slice(img.pixels.data());
        labels.push(img.label);
    }
    let shape = shape.ok_or_else(|| invalid("cannot stack an empty batch"))?;
    let mut full = vec![labels.len()];
    full.extend(shape);
    Ok(Batch {
        images: Tensor::new(full, data)?,
        labels,
    })
}

/// One shuffled pass over `samples` in batches of `batch_size`, the last
/// one possibly short. Sample `i` is augmented with [`sample_rng`]`(seed,
/// epoch, i)`, so the stream depends only on `(seed, epoch)`.
pub struct BatchIter<'a> {
    samples: &'a [LabeledImage],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: AugmentConfig,
    seed: u64,
    epoch: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        samples: &'a [LabeledImage],
        batch_size: usize,
        augment: AugmentConfig,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        augment.validate()?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng(seed, epoch));
        Ok(Self {
            samples,
            order,
            pos: 0,
            batch_size,
            augment,
            seed,
            epoch,
        })
    }

    /// Sequential, unshuffled and unaugmented batches, for evaluation.
    pub fn sequential(samples: &'a [LabeledImage], batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        Ok(Self {
            samples,
            order: (0..samples.len()).collect(),
            pos: 0,
            batch_size,
            augment: AugmentConfig::disabled(),
            seed: 0,
            epoch: 0,
        })
    }

    pub fn batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked: Vec<LabeledImage> = self.order[self.pos..end]
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                if self.augment.enabled {
                    augment(s, &self.augment, &mut sample_rng(self.seed, self.epoch, i))
                } else {
                    s.clone()
                }
            })
            .collect();
        self.pos = end;
        Some(stack(&picked).expect("corpus images share one shape"))
    }
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
