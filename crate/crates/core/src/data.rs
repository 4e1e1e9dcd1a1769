//! In-memory datasets, crop/flip augmentation and the procedural toy set.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vit::{patchify_batch, Image};

/// Labeled images with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let (s, c) = (images[0].size, images[0].channels);
        if images.iter().any(|i| i.size != s || i.channels != c) {
            return Err(Error::invalid("images differ in size or channel count"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!(
                "label {l} outside [0, {n_classes})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images[0].size
    }

    pub fn channels(&self) -> usize {
        self.images[0].channels
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            idx.iter().map(|&i| self.images[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.n_classes,
        )
    }

    /// SHA-256 over pixels (as stored, quantised to bytes) and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for img in &self.images {
            let bytes: Vec<u8> = img.data.iter().map(|v| to_byte(*v)).collect();
            h.update(&bytes);
        }
        for l in &self.labels {
            h.update((*l as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Patch matrix fed to the encoder: pixels mapped from `[0, 1]` to `[-1, 1]`.
pub fn input_patches(images: &[&Image], patch_size: usize) -> Result<Tensor> {
    let t = patchify_batch(images, patch_size)?;
    Ok(t.map(|v| 2.0 * v - 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    CropFlip,
    None,
}

/// Random-resized-crop settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropFlip {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub flip_p: f64,
}

impl Default for CropFlip {
    fn default() -> Self {
        CropFlip {
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
        }
    }
}

pub fn augment(image: &Image, rng: &mut impl Rng, mode: Augmentation, params: &CropFlip) -> Image {
    match mode {
        Augmentation::None => image.clone(),
        Augmentation::CropFlip => {
            let out = random_resized_crop(image, rng, params);
            if rng.random::<f64>() < params.flip_p {
                hflip(&out)
            } else {
                out
            }
        }
    }
}

pub fn hflip(image: &Image) -> Image {
    let (s, c) = (image.size, image.channels);
    let mut out = image.clone();
    for y in 0..s {
        for x in 0..s {
            for ch in 0..c {
                out.set(y, x, ch, image.at(y, s - 1 - x, ch));
            }
        }
    }
    out
}

/// Samples a crop box `(top, left, height, width)` in pixels; falls back to
/// the central crop after ten rejected draws.
fn crop_box(size: usize, rng: &mut impl Rng, p: &CropFlip) -> (usize, usize, usize, usize) {
    let area = (size * size) as f64;
    let (lr0, lr1) = (p.ratio.0.ln(), p.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(p.scale.0..=p.scale.1);
        let ar = rng.random_range(lr0..=lr1).exp();
        let w = (target * ar).sqrt().round() as usize;
        let h = (target / ar).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= size && h <= size {
            let top = rng.random_range(0..=size - h);
            let left = rng.random_range(0..=size - w);
            return (top, left, h, w);
        }
    }
    (0, 0, size, size)
}

pub fn random_resized_crop(image: &Image, rng: &mut impl Rng, p: &CropFlip) -> Image {
    let (top, left, h, w) = crop_box(image.size, rng, p);
    resize_region(image, top, left, h, w)
}

/// Bilinear resize of a region back to the full image size (half-pixel
/// centres, edge clamping).
pub fn resize_region(image: &Image, top: usize, left: usize, h: usize, w: usize) -> Image {
    let (s, c) = (image.size, image.channels);
    let mut out = Image::filled(s, c, 0.0);
    let sample = |pos: f64, len: usize| {
        let v = (pos.max(0.0)).min((len - 1) as f64);
        let i0 = v.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, v - i0 as f64)
    };
    for oy in 0..s {
        let (y0, y1, fy) = sample((oy as f64 + 0.5) * h as f64 / s as f64 - 0.5, h);
        for ox in 0..s {
            let (x0, x1, fx) = sample((ox as f64 + 0.5) * w as f64 / s as f64 - 0.5, w);
            for ch in 0..c {
                let a = image.at(top + y0, left + x0, ch);
                let b = image.at(top + y0, left + x1, ch);
                let cc = image.at(top + y1, left + x0, ch);
                let d = image.at(top + y1, left + x1, ch);
                let v = (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (cc * (1.0 - fx) + d * fx) * fy;
                out.set(oy, ox, ch, v);
            }
        }
    }
    out
}

/// Rotates a square image counter-clockwise by `quarter_turns * 90` degrees.
pub fn rotate90(image: &Image, quarter_turns: usize) -> Image {
    let s = image.size;
    let mut cur = image.clone();
    for _ in 0..quarter_turns % 4 {
        let prev = cur.clone();
        for y in 0..s {
            for x in 0..s {
                for ch in 0..image.channels {
                    cur.set(s - 1 - x, y, ch, prev.at(y, x, ch));
                }
            }
        }
    }
    cur
}

/// Size of the procedural toy set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            image_size: 32,
        }
    }
}

/// Number of distinct shapes the generator can draw.
pub const TOY_SHAPES: usize = 10;

/// Coverage of shape `class` at local coordinates `(u, v)` in `[-1, 1]^2`.
fn shape_mask(class: usize, u: f64, v: f64) -> f64 {
    let r = (u * u + v * v).sqrt();
    let inside = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => inside(r <= 0.9),
        1 => inside(u.abs() <= 0.75 && v.abs() <= 0.75),
        2 => inside((0.55..=0.95).contains(&r)),
        3 => inside((u.abs() <= 0.25 && v.abs() <= 0.95) || (v.abs() <= 0.25 && u.abs() <= 0.95)),
        4 => inside(((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3) && r <= 1.0),
        5 => inside(u.abs() <= 0.9 && v.abs() <= 0.9 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0),
        6 => inside(u.abs() <= 0.9 && v.abs() <= 0.9 && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0),
        7 => inside(
            u.abs() <= 0.9
                && v.abs() <= 0.9
                && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        ),
        8 => inside(v <= 0.8 && v >= -0.9 + 1.7 * u.abs() / 0.9 * 1.0 && u.abs() <= 0.9),
        _ => inside(u.abs().max(v.abs()) <= 0.9 && u.abs().max(v.abs()) >= 0.55),
    }
}

/// Mid-luminance background palette.
const BACKGROUNDS: [[f64; 3]; 6] = [
    [0.30, 0.50, 0.75],
    [0.35, 0.65, 0.40],
    [0.80, 0.40, 0.35],
    [0.65, 0.60, 0.30],
    [0.60, 0.45, 0.70],
    [0.50, 0.50, 0.50],
];

/// Foreground tones; either contrasts with every background.
const FOREGROUNDS: [[f64; 3]; 2] = [[0.95, 0.95, 0.92], [0.08, 0.08, 0.10]];

/// Renders one sample of `class`: the class shape in a light or dark tone
/// at a random position and scale over a background drawn from a small
/// palette, with 2x2 supersampling and mild pixel noise.
pub fn render_toy(class: usize, size: usize, rng: &mut impl Rng) -> Image {
    let bg = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())];
    let fg = FOREGROUNDS[rng.random_range(0..FOREGROUNDS.len())];
    let s = size as f64;
    let scale = rng.random_range(0.25..0.45) * s;
    let cx = rng.random_range(scale..s - scale);
    let cy = rng.random_range(scale..s - scale);
    let mut img = Image::filled(size, 3, 0.0);
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0;
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let u = (x as f64 + dx - cx) / scale;
                let v = (y as f64 + dy - cy) / scale;
                if u.abs() <= 1.0 && v.abs() <= 1.0 {
                    cover += 0.25 * shape_mask(class % TOY_SHAPES, u, v);
                }
            }
            for ch in 0..3 {
                let noise: f64 = rng.random_range(-0.03..0.03);
                let val = bg[ch] * (1.0 - cover) + fg[ch] * cover + noise;
                img.set(y, x, ch, to_byte(val) as f64 / 255.0);
            }
        }
    }
    img
}

/// Train and test splits, class-interleaved, deterministic per seed.
pub fn generate_toy(spec: &ToySpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.n_classes == 0 || spec.n_classes > TOY_SHAPES {
        return Err(Error::invalid(format!(
            "toy set supports 1..={TOY_SHAPES} classes"
        )));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 || spec.image_size < 8 {
        return Err(Error::invalid(
            "toy set needs samples in both splits and images of at least 8 pixels",
        ));
    }
    let split = |per_class: usize, label: &str| {
        let mut rng = crate::seed::rng_for(seed, label);
        let mut images = Vec::with_capacity(per_class * spec.n_classes);
        let mut labels = Vec::with_capacity(per_class * spec.n_classes);
        for _ in 0..per_class {
            for c in 0..spec.n_classes {
                images.push(render_toy(c, spec.image_size, &mut rng));
                labels.push(c);
            }
        }
        Dataset::new(images, labels, spec.n_classes)
    };
    Ok((
        split(spec.train_per_class, "toy/train")?,
        split(spec.test_per_class, "toy/test")?,
    ))
}
