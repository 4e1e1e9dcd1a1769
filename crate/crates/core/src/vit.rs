//! Vision Transformer encoder and the transformer blocks shared with the
//! MAE decoder.
//!
//! Activations are kept as `(batch * seq) x dim` matrices. Patch tokens
//! get a fixed 2D sine-cosine positional embedding; the CLS token is
//! prepended after masking so a masked sequence is `1 + |kept|` long.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{init_tensor, Bound, Init, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Cls,
    MeanPatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pooling: Pooling,
    /// Give the CLS token the positional embedding of grid cell (0, 0)
    /// instead of none.
    #[serde(default)]
    pub cls_pos_embed: bool,
}

fn default_channels() -> usize {
    3
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            pooling: Pooling::Cls,
            cls_pos_embed: false,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            errs.push(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            errs.push(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) {
            errs.push(format!(
                "embed_dim {} is not divisible by 4",
                self.embed_dim
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            errs.push("depth, mlp_ratio and channels must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(errs.join("; ")))
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut v = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![1, d]),
            ("cls_token".to_string(), vec![1, d]),
        ];
        v.extend(block_shapes("blocks", self.depth, d, self.mlp_ratio));
        v.push(("norm.weight".into(), vec![1, d]));
        v.push(("norm.bias".into(), vec![1, d]));
        v
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<Params> {
        self.validate()?;
        Ok(init_params(&self.param_shapes(), rng))
    }
}

pub(crate) fn block_shapes(
    prefix: &str,
    depth: usize,
    d: usize,
    mlp_ratio: usize,
) -> Vec<(String, Vec<usize>)> {
    let h = d * mlp_ratio;
    let mut v = Vec::new();
    for i in 0..depth {
        let p = format!("{prefix}.{i}.");
        for (n, s) in [
            ("norm1.weight", vec![1, d]),
            ("norm1.bias", vec![1, d]),
            ("attn.qkv.weight", vec![d, 3 * d]),
            ("attn.qkv.bias", vec![1, 3 * d]),
            ("attn.proj.weight", vec![d, d]),
            ("attn.proj.bias", vec![1, d]),
            ("norm2.weight", vec![1, d]),
            ("norm2.bias", vec![1, d]),
            ("mlp.fc1.weight", vec![d, h]),
            ("mlp.fc1.bias", vec![1, h]),
            ("mlp.fc2.weight", vec![h, d]),
            ("mlp.fc2.bias", vec![1, d]),
        ] {
            v.push((format!("{p}{n}"), s));
        }
    }
    v
}

/// Initialises parameters by naming convention: norm weights one, biases
/// zero, tokens N(0, 0.02), everything else Xavier-uniform.
pub(crate) fn init_params(shapes: &[(String, Vec<usize>)], rng: &mut impl Rng) -> Params {
    let mut p = Params::new();
    for (name, shape) in shapes {
        let init = if name.ends_with(".bias") {
            Init::Zeros
        } else if name.contains("norm") || name.contains("bn") {
            Init::Ones
        } else if name.ends_with("token") {
            Init::Normal(0.02)
        } else {
            Init::XavierUniform
        };
        p.insert(name.clone(), init_tensor(shape, init, rng));
    }
    p
}

/// Square image with interleaved channels (`H x W x C`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size * channels {
            return Err(Error::shape(
                "image",
                format!("{} values for {size}x{size}x{channels}", data.len()),
            ));
        }
        Ok(Image {
            size,
            channels,
            data,
        })
    }

    pub fn filled(size: usize, channels: usize, value: f64) -> Self {
        Image {
            size,
            channels,
            data: vec![value; size * size * channels],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.size + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.size + x) * self.channels + c] = v;
    }
}

/// Splits an image into non-overlapping patches, row-major over the grid.
/// Each patch is flattened as `(y, x, channel)`.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Vec<Vec<f64>>> {
    if patch_size == 0 || !image.size.is_multiple_of(patch_size) {
        return Err(Error::shape(
            "patchify",
            format!(
                "image size {} not divisible by patch size {patch_size}",
                image.size
            ),
        ));
    }
    let g = image.size / patch_size;
    let c = image.channels;
    let mut patches = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let mut p = Vec::with_capacity(patch_size * patch_size * c);
            for y in 0..patch_size {
                let start = ((gy * patch_size + y) * image.size + gx * patch_size) * c;
                p.extend_from_slice(&image.data[start..start + patch_size * c]);
            }
            patches.push(p);
        }
    }
    Ok(patches)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Vec<f64>], patch_size: usize, channels: usize) -> Result<Image> {
    let g = (patches.len() as f64).sqrt().round() as usize;
    if g * g != patches.len()
        || patches
            .iter()
            .any(|p| p.len() != patch_size * patch_size * channels)
    {
        return Err(Error::shape("unpatchify", "patch count or length"));
    }
    let size = g * patch_size;
    let mut img = Image::filled(size, channels, 0.0);
    for (i, p) in patches.iter().enumerate() {
        let (gy, gx) = (i / g, i % g);
        for y in 0..patch_size {
            let start = ((gy * patch_size + y) * size + gx * patch_size) * channels;
            img.data[start..start + patch_size * channels]
                .copy_from_slice(&p[y * patch_size * channels..(y + 1) * patch_size * channels]);
        }
    }
    Ok(img)
}

/// Patches of a batch stacked into a `(batch * n_patches) x patch_dim` tensor.
pub fn patchify_batch(images: &[&Image], patch_size: usize) -> Result<Tensor> {
    let mut rows = Vec::new();
    for img in images {
        rows.extend(patchify(img, patch_size)?);
    }
    Tensor::from_rows(&rows)
}

fn sincos_1d(dim: usize, pos: f64, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin();
        out[half + i] = (pos * omega).cos();
    }
}

/// Fixed 2D sine-cosine embedding, one row per grid cell (row-major).
/// The first half of each row encodes the grid row, the second half the
/// grid column; each half is a block of sines followed by cosines.
pub fn sincos_pos_embed(grid_side: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "positional embedding dim {dim} is not divisible by 4"
        )));
    }
    if grid_side == 0 {
        return Err(Error::invalid("empty grid"));
    }
    let mut t = Tensor::zeros(&[grid_side * grid_side, dim]);
    for gy in 0..grid_side {
        for gx in 0..grid_side {
            let row = t.row_mut(gy * grid_side + gx);
            let (ry, rx) = row.split_at_mut(dim / 2);
            sincos_1d(dim / 2, gy as f64, ry);
            sincos_1d(dim / 2, gx as f64, rx);
        }
    }
    Ok(t)
}

/// One pre-norm transformer block.
pub(crate) fn block(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    let g = |n: &str| p.get(&format!("{prefix}{n}"));
    let h = tape.layer_norm(x, g("norm1.weight")?, g("norm1.bias")?)?;
    let qkv = tape.linear(h, g("attn.qkv.weight")?, g("attn.qkv.bias")?)?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let k = tape.slice_cols(qkv, d, d)?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;
    let a = tape.attention(q, k, v, batch, seq, heads)?;
    let a = tape.linear(a, g("attn.proj.weight")?, g("attn.proj.bias")?)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, g("norm2.weight")?, g("norm2.bias")?)?;
    let h = tape.linear(h, g("mlp.fc1.weight")?, g("mlp.fc1.bias")?)?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, g("mlp.fc2.weight")?, g("mlp.fc2.bias")?)?;
    tape.add(x, h)
}

/// Output of [`encode`].
pub struct Encoded {
    /// `(batch * seq) x dim`, CLS first in every sequence, after the final norm.
    pub tokens: Var,
    /// `batch x dim`
    pub pooled: Var,
    pub seq: usize,
    /// CLS state after each block (before the final norm), when requested.
    pub block_cls: Vec<Var>,
}

/// Options for [`encode`].
#[derive(Clone, Copy, Default)]
pub struct EncodeOpts<'a> {
    /// Visible patch indices per sample; `None` keeps every patch.
    pub keep: Option<&'a [Vec<usize>]>,
    pub collect_block_cls: bool,
}

fn validate_keep(keep: &[Vec<usize>], batch: usize, n: usize) -> Result<usize> {
    if keep.len() != batch {
        return Err(Error::invalid(format!(
            "{} keep lists for batch {batch}",
            keep.len()
        )));
    }
    let len = keep[0].len();
    for k in keep {
        if k.len() != len || len == 0 {
            return Err(Error::invalid(
                "keep lists must be non-empty and of equal length",
            ));
        }
        let mut seen = vec![false; n];
        for &i in k {
            if i >= n {
                return Err(Error::invalid(format!(
                    "patch index {i} out of range for {n} patches"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("duplicate patch index {i}")));
            }
        }
    }
    Ok(len)
}

/// Encodes a batch given its patch matrix (`(batch * n_patches) x patch_dim`).
/// Parameter names are looked up under `prefix`.
pub fn encode(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    config: &ViTConfig,
    patches: &Tensor,
    opts: EncodeOpts<'_>,
) -> Result<Encoded> {
    let n = config.n_patches();
    let d = config.embed_dim;
    if patches.cols() != config.patch_dim() || !patches.rows().is_multiple_of(n) {
        return Err(Error::shape(
            "encode",
            format!(
                "patch matrix {:?} for {n} patches of {}",
                patches.shape(),
                config.patch_dim()
            ),
        ));
    }
    let batch = patches.rows() / n;
    let g = |name: &str| p.get(&format!("{prefix}{name}"));

    let x = tape.constant(patches.clone())?;
    let x = tape.linear(x, g("patch_embed.weight")?, g("patch_embed.bias")?)?;
    let pos = sincos_pos_embed(config.grid_side(), d)?;
    let (x, visible) = match opts.keep {
        None => {
            let tiled = tile_rows(&pos, batch);
            let pos = tape.constant(tiled)?;
            (tape.add(x, pos)?, n)
        }
        Some(keep) => {
            let k = validate_keep(keep, batch, n)?;
            let mut pos_rows = Vec::with_capacity(batch * k * d);
            let mut idx = Vec::with_capacity(batch * k);
            for (b, kk) in keep.iter().enumerate() {
                for &i in kk {
                    idx.push(b * n + i);
                    pos_rows.extend_from_slice(pos.row(i));
                }
            }
            let x = tape.gather_rows(x, &idx)?;
            let pos = tape.constant(Tensor::matrix(batch * k, d, pos_rows)?)?;
            (tape.add(x, pos)?, k)
        }
    };
    let seq = 1 + visible;

    let mut cls = tape.gather_rows(g("cls_token")?, &vec![0; batch])?;
    if config.cls_pos_embed {
        let c = tape.constant(tile_rows(
            &Tensor::matrix(1, d, pos.row(0).to_vec())?,
            batch,
        ))?;
        cls = tape.add(cls, c)?;
    }
    let all = tape.concat_rows(&[cls, x])?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| std::iter::once(b).chain((0..visible).map(move |j| batch + b * visible + j)))
        .collect();
    let mut x = tape.gather_rows(all, &order)?;

    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let mut block_cls = Vec::new();
    for i in 0..config.depth {
        x = block(
            tape,
            p,
            &format!("{prefix}blocks.{i}."),
            x,
            batch,
            seq,
            config.heads,
        )?;
        if opts.collect_block_cls {
            block_cls.push(tape.gather_rows(x, &cls_rows)?);
        }
    }
    let tokens = tape.layer_norm(x, g("norm.weight")?, g("norm.bias")?)?;
    let pooled = match config.pooling {
        Pooling::Cls => tape.gather_rows(tokens, &cls_rows)?,
        Pooling::MeanPatch => {
            let rows: Vec<usize> = (0..batch)
                .flat_map(|b| (1..seq).map(move |j| b * seq + j))
                .collect();
            let patch_tokens = tape.gather_rows(tokens, &rows)?;
            tape.group_mean_rows(patch_tokens, visible)?
        }
    };
    Ok(Encoded {
        tokens,
        pooled,
        seq,
        block_cls,
    })
}

pub(crate) fn tile_rows(t: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.numel() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(t.rows() * times, t.cols(), data).expect("tiled shape")
}

/// Which blocks are excluded from training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FreezePlan {
    pub frozen_blocks: usize,
}

impl FreezePlan {
    pub fn new(frozen_blocks: usize, config: &ViTConfig) -> Result<Self> {
        if frozen_blocks > config.depth {
            return Err(Error::invalid(format!(
                "cannot freeze {frozen_blocks} of {} blocks",
                config.depth
            )));
        }
        Ok(FreezePlan { frozen_blocks })
    }

    pub fn all(config: &ViTConfig) -> Self {
        FreezePlan {
            frozen_blocks: config.depth,
        }
    }

    /// Whether an encoder parameter (name without prefix) is frozen.
    pub fn is_frozen(&self, name: &str) -> bool {
        match layer_group(name) {
            LayerGroup::Block(i) => i < self.frozen_blocks,
            LayerGroup::Embed => self.frozen_blocks > 0,
            LayerGroup::Head => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerGroup {
    Embed,
    Block(usize),
    Head,
}

fn layer_group(name: &str) -> LayerGroup {
    if let Some(rest) = name.strip_prefix("blocks.") {
        let i = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        LayerGroup::Block(i)
    } else if name.starts_with("patch_embed") || name.starts_with("cls_token") {
        LayerGroup::Embed
    } else {
        LayerGroup::Head
    }
}

/// Per-group learning rates, ordered top-down: index 0 is the post-encoder
/// group (final norm), index `i` is the `i`-th block from the top. Frozen
/// groups get exactly zero.
pub fn layerwise_lr(
    base_lr: f64,
    decay: f64,
    config: &ViTConfig,
    freeze: FreezePlan,
) -> Result<Vec<f64>> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid(format!(
            "layer decay {decay} outside (0, 1]"
        )));
    }
    let depth = config.depth;
    Ok((0..=depth)
        .map(|i| {
            if i > 0 && depth - i < freeze.frozen_blocks {
                0.0
            } else {
                base_lr * decay.powi(i as i32)
            }
        })
        .collect())
}

/// Learning-rate multiplier of one encoder parameter (name without prefix).
/// The patch embedding and CLS token share the bottom block's rate.
pub fn param_lr_scale(name: &str, decay: f64, config: &ViTConfig, freeze: FreezePlan) -> f64 {
    if freeze.is_frozen(name) {
        return 0.0;
    }
    let from_top = match layer_group(name) {
        LayerGroup::Head => 0,
        LayerGroup::Block(i) => config.depth - i,
        LayerGroup::Embed => config.depth,
    };
    decay.powi(from_top as i32)
}
