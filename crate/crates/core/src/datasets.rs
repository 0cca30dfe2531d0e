//! Labeled image sets: folder loading, the synthetic two-class toy task,
//! test-time corruptions and a small on-disk cache.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DiscError, Result};
use crate::nn::device;
use crate::seed;

/// Environment variable naming the dataset cache directory.
pub const CACHE_DIR_ENV: &str = "DISC_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images in channels-first layout with values in [0, 1], plus labels.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<u32>,
    class_names: Vec<String>,
    split: Split,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<u32>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let dims = images.dims().to_vec();
        if dims.len() != 4 {
            return Err(DiscError::Data(format!("images must be (N, C, H, W), got {dims:?}")));
        }
        if dims[0] == 0 {
            return Err(DiscError::Data("image set is empty".into()));
        }
        if labels.len() != dims[0] {
            return Err(DiscError::Data(format!(
                "{} labels for {} images",
                labels.len(),
                dims[0]
            )));
        }
        let k = class_names.len() as u32;
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(DiscError::Data(format!("label {bad} outside [0, {k})")));
        }
        let images = images.to_dtype(DType::F32)?;
        let lo = images.flatten_all()?.min(0)?.to_scalar::<f32>()?;
        let hi = images.flatten_all()?.max(0)?.to_scalar::<f32>()?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(DiscError::Data(format!("pixel values span [{lo}, {hi}], expected [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            split,
        })
    }

    pub fn from_vec(
        data: Vec<f32>,
        dims: (usize, usize, usize, usize),
        labels: Vec<u32>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        let images = Tensor::from_vec(data, dims, &device())?;
        Self::new(images, labels, class_names, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.labels.as_slice(), &device())?)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// (C, H, W) of every image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        Ok(self.images.get(i)?)
    }

    pub fn with_split(&self, split: Split) -> Self {
        Self {
            split,
            ..self.clone()
        }
    }

    pub fn with_labels(&self, labels: Vec<u32>) -> Result<Self> {
        Self::new(self.images.clone(), labels, self.class_names.clone(), self.split)
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(DiscError::Data("selection is empty".into()));
        }
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let ids = Tensor::new(ids.as_slice(), &device())?;
        Ok(Self {
            images: self.images.index_select(&ids, 0)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            split: self.split,
        })
    }

    pub fn indices_of_class(&self, class: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn of_class(&self, class: u32) -> Result<Self> {
        let idx = self.indices_of_class(class);
        if idx.is_empty() {
            return Err(DiscError::Data(format!("no samples of class {class}")));
        }
        self.select(&idx)
    }

    pub fn first(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Stack several sets that share image shape and class names.
    pub fn concat(parts: &[&LabeledImageSet]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| DiscError::Data("nothing to concatenate".into()))?;
        for p in parts {
            if p.image_dims() != first.image_dims() || p.class_names != first.class_names {
                return Err(DiscError::Data("concatenated sets disagree on shape or classes".into()));
            }
        }
        let imgs: Vec<&Tensor> = parts.iter().map(|p| &p.images).collect();
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Self::new(Tensor::cat(&imgs, 0)?, labels, first.class_names.clone(), first.split)
    }

    /// Stratified split: `val_fraction` of every class goes to the second set.
    pub fn stratified_split(&self, val_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(DiscError::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
        }
        let mut rng = seed::rng(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..self.num_classes() as u32 {
            let mut idx = self.indices_of_class(c);
            idx.shuffle(&mut rng);
            let n_val = ((idx.len() as f64) * val_fraction).round() as usize;
            let n_val = if idx.len() > 1 { n_val.clamp(1, idx.len() - 1) } else { 0 };
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        if val.is_empty() {
            return Err(DiscError::Data("too few samples for a validation split".into()));
        }
        Ok((
            self.select(&train)?.with_split(Split::Train),
            self.select(&val)?.with_split(Split::Val),
        ))
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.images.flatten_all()?.to_vec1()?)
    }
}

/// Load `<root>/<class_name>/*.{png,jpg,jpeg}` into a training set.
pub fn load_image_folder(path: &Path, image_size: usize, class_map: &BTreeMap<String, u32>) -> Result<LabeledImageSet> {
    if !path.is_dir() {
        return Err(DiscError::Data(format!("image folder {} does not exist", path.display())));
    }
    let num_classes = class_map.values().map(|&v| v as usize + 1).max().unwrap_or(0);
    let mut class_names = vec![String::new(); num_classes];
    for (name, &label) in class_map {
        class_names[label as usize] = name.clone();
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (name, &label) in class_map {
        let dir = path.join(name);
        if !dir.is_dir() {
            return Err(DiscError::Data(format!("class directory {} does not exist", dir.display())));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| DiscError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        let mut loaded = 0usize;
        for f in files {
            match image::open(&f) {
                Ok(img) => {
                    data.extend(image_to_chw(&img, image_size));
                    labels.push(label);
                    loaded += 1;
                }
                Err(e) => log::warn!("skipping unreadable image {}: {e}", f.display()),
            }
        }
        if loaded == 0 {
            return Err(DiscError::Data(format!("class '{name}' has no images")));
        }
    }
    let n = labels.len();
    LabeledImageSet::from_vec(data, (n, 3, image_size, image_size), labels, class_names, Split::Train)
}

/// Resize to a square RGB image and flatten channels-first in [0, 1].
pub fn image_to_chw(img: &image::DynamicImage, size: usize) -> Vec<f32> {
    let rgb = img
        .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let mut out = vec![0f32; 3 * size * size];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[c * size * size + y as usize * size + x as usize] = f32::from(p[c]) / 255.0;
        }
    }
    out
}

/// Save a (C, H, W) image in [0, 1] as an 8-bit PNG.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    let v: Vec<f32> = img.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (ch, p) in px.iter_mut().enumerate() {
                let src = if c == 1 { 0 } else { ch };
                let val = v[src * h * w + y * w + x].clamp(0.0, 1.0);
                *p = (val * 255.0).round() as u8;
            }
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub const TOY_CLASS_NAMES: [&str; 2] = ["bar", "arc"];

/// Synthetic two-class task. Both classes share a textured background
/// (low-frequency waves plus per-pixel grain) and
/// two "eyes"; they differ only in the lower-third "mouth": class 0 is a dark
/// horizontal bar, class 1 an upward-curved arc.
pub fn make_toy_dataset(n_per_class: usize, image_size: usize, seed: u64) -> Result<LabeledImageSet> {
    if n_per_class < 1 {
        return Err(DiscError::Config("n_per_class must be at least 1".into()));
    }
    if image_size < 16 {
        return Err(DiscError::Config(format!("image_size {image_size} below the minimum of 16")));
    }
    let n = 2 * n_per_class;
    let per = 3 * image_size * image_size;
    let mut data = vec![0f32; n * per];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let mut rng = seed::rng(seed::derive(seed, i as u64));
        render_toy(&mut data[i * per..(i + 1) * per], image_size, label, &mut rng);
        labels.push(label);
    }
    LabeledImageSet::from_vec(
        data,
        (n, 3, image_size, image_size),
        labels,
        TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        Split::Train,
    )
}

fn seg_dist(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

fn render_toy(out: &mut [f32], s: usize, label: u32, rng: &mut seed::Rng) {
    use std::f64::consts::PI;
    let base: f64 = rng.random_range(0.40..0.62);
    let tint: [f64; 3] = [
        rng.random_range(0.0..0.06),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.06..0.0),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = rng.random_range(0.015..0.04);
            let freq = rng.random_range(0.5..1.5);
            let ang = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (amp, freq * ang.cos(), freq * ang.sin(), phase)
        })
        .collect();
    let contrast: f64 = rng.random_range(0.6..1.0);
    let grain: f64 = rng.random_range(0.02..0.05);

    // Eyes, shared by both classes.
    let eye_y = 0.33 + rng.random_range(-0.03..0.03);
    let eye_dx = 0.17 + rng.random_range(-0.02..0.02);
    let eye_r = 0.055;
    let eye_dark = 0.35 * contrast;

    // Mouth in the lower third.
    let cx = 0.5 + rng.random_range(-0.05..0.05);
    let cy = 0.80 + rng.random_range(-0.02..0.02);
    let half_w = rng.random_range(0.17..0.23);
    let arc_h = rng.random_range(0.14..0.20);
    let mouth_dark = rng.random_range(0.25..0.5) * contrast;
    let sigma = (0.045f64).max(0.7 / s as f64);

    // Polyline approximating the mouth curve.
    let curve: Vec<(f64, f64)> = (0..=32)
        .map(|k| {
            let t = -1.0 + 2.0 * k as f64 / 32.0;
            let x = cx + t * half_w;
            let y = if label == 0 {
                cy
            } else {
                // Ends raised, middle lowered: a smile in image coordinates.
                cy - arc_h / 2.0 + arc_h * (1.0 - t * t)
            };
            (x, y)
        })
        .collect();

    for yi in 0..s {
        for xi in 0..s {
            let u = (xi as f64 + 0.5) / s as f64;
            let v = (yi as f64 + 0.5) / s as f64;
            let mut bg = base;
            for &(a, fx, fy, ph) in &waves {
                bg += a * (2.0 * PI * (fx * u + fy * v) + ph).sin();
            }
            let mut dark = 0.0;
            for ex in [0.5 - eye_dx, 0.5 + eye_dx] {
                let d2 = (u - ex).powi(2) + (v - eye_y).powi(2);
                dark += eye_dark * (-d2 / (2.0 * eye_r * eye_r)).exp();
            }
            let mut dmin = f64::INFINITY;
            for w in curve.windows(2) {
                dmin = dmin.min(seg_dist(u, v, w[0].0, w[0].1, w[1].0, w[1].1));
            }
            let mouth = mouth_dark * (-(dmin * dmin) / (2.0 * sigma * sigma)).exp();
            let z: f64 = StandardNormal.sample(rng);
            let texture = grain * z;
            for c in 0..3 {
                let gain = if c == 0 { 1.0 } else { 0.85 };
                let val = bg + texture + tint[c] - dark - mouth * gain;
                out[c * s * s + yi * s + xi] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Deterministic photo-like test image (C=3): sky gradient, a hill line,
/// a sun disc, a blocky "building", and multi-octave texture. Used as a
/// fixed target for prior-capacity checks.
pub fn fixture_image(size: usize, seed: u64) -> Result<Tensor> {
    use std::f64::consts::PI;
    if size < 2 {
        return Err(DiscError::Config("fixture image size must be at least 2".into()));
    }
    let mut rng = seed::rng(seed);
    let octaves: Vec<(f64, f64, f64, f64, f64)> = (0..12)
        .map(|k| {
            let f = 1.5 * 1.45f64.powi(k);
            let ang = rng.random_range(0.0..PI);
            (0.06 / (1.0 + 0.5 * k as f64), f * ang.cos(), f * ang.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..1.0))
        })
        .collect();
    let hill_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let mut data = vec![0f32; 3 * size * size];
    for yi in 0..size {
        for xi in 0..size {
            let u = (xi as f64 + 0.5) / size as f64;
            let v = (yi as f64 + 0.5) / size as f64;
            let mut tex = 0.0;
            for &(a, fx, fy, ph, _) in &octaves {
                tex += a * (2.0 * PI * (fx * u + fy * v) + ph).sin();
            }
            let sky = [0.45 + 0.35 * v, 0.6 + 0.25 * v, 0.9 - 0.1 * v];
            let ground = [0.35, 0.5, 0.2];
            let hill = 0.62 + 0.08 * (2.0 * PI * 1.3 * u + hill_phase).sin();
            let g = ((v - hill) * size as f64 * 1.5).tanh() * 0.5 + 0.5;
            let sun = (((u - 0.72).powi(2) + (v - 0.22).powi(2)).sqrt() - 0.1) * size as f64;
            let sun = 0.5 - 0.5 * sun.clamp(-1.0, 1.0);
            let bx = (u - 0.22).abs().max((v - 0.6).abs() * 1.6);
            let building = 0.5 - 0.5 * ((bx - 0.12) * size as f64).clamp(-1.0, 1.0);
            for c in 0..3 {
                let mut val = sky[c] * (1.0 - g) + ground[c] * g;
                val = val * (1.0 - sun) + [1.0, 0.9, 0.5][c] * sun;
                val = val * (1.0 - building) + [0.55, 0.3, 0.25][c] * building;
                val += tex * if c == 1 { 0.8 } else { 1.0 };
                data[c * size * size + yi * size + xi] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Tensor::from_vec(data, (3, size, size), &crate::nn::device())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    BrightnessShift,
    OcclusionMask,
}

impl FromStr for CorruptionKind {
    type Err = DiscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(Self::GaussianNoise),
            "blur" => Ok(Self::Blur),
            "brightness_shift" => Ok(Self::BrightnessShift),
            "occlusion_mask" => Ok(Self::OcclusionMask),
            other => Err(DiscError::Config(format!("unknown corruption kind '{other}'"))),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::Blur => "blur",
            Self::BrightnessShift => "brightness_shift",
            Self::OcclusionMask => "occlusion_mask",
        };
        f.write_str(s)
    }
}

impl CorruptionKind {
    /// Severity to physical parameter:
    ///
    /// | kind             | parameter at severity s              |
    /// |------------------|--------------------------------------|
    /// | gaussian_noise   | noise std σ = 0.3·s                  |
    /// | blur             | Gaussian kernel std = 2.0·s pixels   |
    /// | brightness_shift | additive offset = 0.4·s              |
    /// | occlusion_mask   | gray square, side = 0.5·s·image size |
    pub fn parameter(self, severity: f64) -> f64 {
        match self {
            Self::GaussianNoise => 0.3 * severity,
            Self::Blur => 2.0 * severity,
            Self::BrightnessShift => 0.4 * severity,
            Self::OcclusionMask => 0.5 * severity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub seed: u64,
}

/// Apply a seeded corruption to every image; labels pass through untouched.
pub fn corrupt(set: &LabeledImageSet, spec: &CorruptionSpec) -> Result<LabeledImageSet> {
    if !(0.0..=1.0).contains(&spec.severity) {
        return Err(DiscError::Config(format!("severity {} outside [0, 1]", spec.severity)));
    }
    let (c, h, w) = set.image_dims();
    let per = c * h * w;
    let mut data = set.to_vec()?;
    if spec.severity > 0.0 {
        let p = spec.kind.parameter(spec.severity);
        for (i, img) in data.chunks_mut(per).enumerate() {
            let mut rng = seed::rng(seed::derive(spec.seed, i as u64));
            match spec.kind {
                CorruptionKind::GaussianNoise => {
                    for v in img.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += (p * z) as f32;
                    }
                }
                CorruptionKind::Blur => gaussian_blur(img, c, h, w, p),
                CorruptionKind::BrightnessShift => {
                    for v in img.iter_mut() {
                        *v += p as f32;
                    }
                }
                CorruptionKind::OcclusionMask => {
                    let side = ((p * h.min(w) as f64).round() as usize).min(h.min(w));
                    if side > 0 {
                        let y0 = rng.random_range(0..=h - side);
                        let x0 = rng.random_range(0..=w - side);
                        for ch in 0..c {
                            for y in y0..y0 + side {
                                for x in x0..x0 + side {
                                    img[ch * h * w + y * w + x] = 0.5;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    LabeledImageSet::from_vec(
        data,
        (set.len(), c, h, w),
        set.labels.clone(),
        set.class_names.clone(),
        set.split,
    )
}

fn gaussian_blur(img: &mut [f32], c: usize, h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0f32; h * w];
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * f64::from(plane[y * w + xx]);
                }
                tmp[y * w + x] = acc as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * f64::from(tmp[yy * w + x]);
                }
                plane[y * w + x] = acc as f32;
            }
        }
    }
}

/// Sidecar manifest for a cached dataset archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub n: usize,
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub seed: Option<u64>,
    pub corruption: Option<CorruptionSpec>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_archive(set: &LabeledImageSet, path: &Path, seed: Option<u64>, corruption: Option<CorruptionSpec>) -> Result<()> {
    let mut map = HashMap::new();
    map.insert("images".to_string(), set.images.clone());
    map.insert("labels".to_string(), set.labels_tensor()?);
    candle_core::safetensors::save(&map, path)?;
    let manifest = ArchiveManifest {
        n: set.len(),
        image_size: set.image_dims().1,
        class_names: set.class_names.clone(),
        seed,
        corruption,
    };
    let side = sidecar(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&manifest)?).map_err(|e| DiscError::io(&side, e))?;
    Ok(())
}

pub fn load_archive(path: &Path, split: Split) -> Result<(LabeledImageSet, ArchiveManifest)> {
    let side = sidecar(path);
    let raw = std::fs::read(&side).map_err(|e| DiscError::io(&side, e))?;
    let manifest: ArchiveManifest = serde_json::from_slice(&raw)?;
    let map = candle_core::safetensors::load(path, &device())?;
    let get = |k: &str| {
        map.get(k)
            .cloned()
            .ok_or_else(|| DiscError::MissingArtifact(format!("{k} missing from {}", path.display())))
    };
    let labels: Vec<u32> = get("labels")?.to_vec1()?;
    let set = LabeledImageSet::new(get("images")?, labels, manifest.class_names.clone(), split)?;
    if set.len() != manifest.n {
        return Err(DiscError::Data(format!(
            "archive {} holds {} images, manifest says {}",
            path.display(),
            set.len(),
            manifest.n
        )));
    }
    Ok((set, manifest))
}

/// [`make_toy_dataset`] memoized in `$DISC_CACHE_DIR` when that variable is set.
pub fn toy_dataset_cached(n_per_class: usize, image_size: usize, seed: u64) -> Result<LabeledImageSet> {
    let Some(dir) = std::env::var_os(CACHE_DIR_ENV) else {
        return make_toy_dataset(n_per_class, image_size, seed);
    };
    let dir = PathBuf::from(dir);
    let path = dir.join(format!("toy_n{n_per_class}_s{image_size}_seed{seed}.safetensors"));
    if path.exists() {
        match load_archive(&path, Split::Train) {
            Ok((set, _)) => return Ok(set),
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
        }
    }
    let set = make_toy_dataset(n_per_class, image_size, seed)?;
    std::fs::create_dir_all(&dir).map_err(|e| DiscError::io(&dir, e))?;
    save_archive(&set, &path, Some(seed), None)?;
    Ok(set)
}
