//! Masked autoencoder objective: random patch masking, per-patch
//! normalised pixel targets, the masked-only reconstruction loss, the
//! lightweight decoder, and the pre-training loop (optionally joint with
//! an NNCLR head).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{augment, input_patches, Dataset};
use crate::error::{Error, Result};
use crate::nnclr::{
    nnclr_loss_symmetrized, projector, BnMode, EmbeddingQueue, Head, HeadConfig, LookupPath,
};
use crate::optim::{lr_schedule, scaled_lr, AdamW};
use crate::params::{Bound, Params};
use crate::seed::rng_for;
use crate::tuning::{epoch_batches, steps_per_epoch, LogRow, Stage, StageConfig};
use crate::vit::{
    block, block_shapes, encode, init_params, sincos_pos_embed, EncodeOpts, ViTConfig,
};

/// Epsilon added to the per-patch variance of reconstruction targets.
pub const TARGET_EPS: f64 = 1e-6;

/// Visible/masked partition of one sample's patches, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub keep: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskSpec {
    pub fn n_patches(&self) -> usize {
        self.keep.len() + self.masked.len()
    }
}

/// Masks exactly `round(ratio * n)` patches chosen uniformly without
/// replacement. At least one patch stays visible.
pub fn sample_mask(n_patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n_mask = (ratio * n_patches as f64).round() as usize;
    if n_mask >= n_patches {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} leaves no visible patch out of {n_patches}"
        )));
    }
    let mut perm: Vec<usize> = (0..n_patches).collect();
    perm.shuffle(rng);
    let mut masked = perm[..n_mask].to_vec();
    let mut keep = perm[n_mask..].to_vec();
    masked.sort_unstable();
    keep.sort_unstable();
    Ok(MaskSpec { keep, masked })
}

/// `(p - mean) / sqrt(var + 1e-6)` with the population variance.
pub fn normalize_target(patch: &[f64]) -> Result<Vec<f64>> {
    if patch.len() < 2 {
        return Err(Error::invalid("patch needs at least two values"));
    }
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + TARGET_EPS).sqrt();
    Ok(patch.iter().map(|v| (v - mean) * inv).collect())
}

/// Mean squared error between predictions and normalised targets over the
/// masked patches only. `predictions` and `patches` hold every patch of
/// every sample (`(batch * n_patches) x patch_dim`).
pub fn mae_loss(
    tape: &mut Tape,
    predictions: Var,
    patches: &Tensor,
    masks: &[MaskSpec],
) -> Result<Var> {
    let pred = tape.value(predictions);
    if pred.shape() != patches.shape() {
        return Err(Error::shape(
            "mae_loss",
            format!(
                "predictions {:?} vs patches {:?}",
                pred.shape(),
                patches.shape()
            ),
        ));
    }
    if masks.is_empty() || !patches.rows().is_multiple_of(masks.len()) {
        return Err(Error::shape(
            "mae_loss",
            format!("{} masks for {} patches", masks.len(), patches.rows()),
        ));
    }
    let n = patches.rows() / masks.len();
    let mut rows = Vec::new();
    let mut target = Vec::new();
    for (b, m) in masks.iter().enumerate() {
        if m.n_patches() != n {
            return Err(Error::shape(
                "mae_loss",
                format!("mask covers {} of {n} patches", m.n_patches()),
            ));
        }
        for &i in &m.masked {
            rows.push(b * n + i);
            target.extend(normalize_target(patches.row(b * n + i))?);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("mae_loss needs at least one masked patch"));
    }
    let p = tape.gather_rows(predictions, &rows)?;
    let t = tape.constant(Tensor::matrix(rows.len(), patches.cols(), target)?)?;
    tape.mse(p, t)
}

/// `l_mae + lambda * l_nnclr`.
pub fn combined_loss(l_mae: f64, l_nnclr: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(l_mae + lambda * l_nnclr)
}

/// Differentiable [`combined_loss`].
pub fn combined_loss_var(tape: &mut Tape, l_mae: Var, l_nnclr: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let w = tape.scale(l_nnclr, lambda)?;
    tape.add(l_mae, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("decoder sizes must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) || !self.embed_dim.is_multiple_of(4) {
            return Err(Error::invalid(
                "decoder embed_dim must be divisible by heads and by 4",
            ));
        }
        Ok(())
    }

    pub fn param_shapes(&self, vit: &ViTConfig) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut v = vec![
            ("decoder_embed.weight".to_string(), vec![vit.embed_dim, d]),
            ("decoder_embed.bias".to_string(), vec![1, d]),
            ("mask_token".to_string(), vec![1, d]),
        ];
        v.extend(block_shapes("blocks", self.depth, d, self.mlp_ratio));
        v.push(("norm.weight".into(), vec![1, d]));
        v.push(("norm.bias".into(), vec![1, d]));
        v.push(("pred.weight".into(), vec![d, vit.patch_dim()]));
        v.push(("pred.bias".into(), vec![1, vit.patch_dim()]));
        v
    }

    pub fn init(&self, vit: &ViTConfig, rng: &mut impl Rng) -> Result<Params> {
        self.validate()?;
        Ok(init_params(&self.param_shapes(vit), rng))
    }
}

/// Reconstructs every patch from encoder tokens (`batch * (1 + |keep|)`
/// rows, CLS first). Masked positions receive the mask token; every patch
/// position gets the decoder's positional embedding. Output:
/// `(batch * n_patches) x patch_dim`.
pub fn decode(
    tape: &mut Tape,
    p: &Bound,
    cfg: &DecoderConfig,
    vit: &ViTConfig,
    tokens: Var,
    masks: &[MaskSpec],
) -> Result<Var> {
    let n = vit.n_patches();
    let batch = masks.len();
    let visible = masks.first().map_or(0, |m| m.keep.len());
    let seq_in = 1 + visible;
    if tape.value(tokens).rows() != batch * seq_in
        || masks
            .iter()
            .any(|m| m.n_patches() != n || m.keep.len() != visible)
    {
        return Err(Error::shape("decode", "token rows do not match the masks"));
    }
    let n_masked = n - visible;
    let d = cfg.embed_dim;
    let x = tape.linear(
        tokens,
        p.get("decoder_embed.weight")?,
        p.get("decoder_embed.bias")?,
    )?;
    let mut parts = vec![x];
    if n_masked > 0 {
        parts.push(tape.gather_rows(p.get("mask_token")?, &vec![0; batch * n_masked])?);
    }
    let all = tape.concat_rows(&parts)?;
    let mask_base = batch * seq_in;
    let mut order = Vec::with_capacity(batch * (n + 1));
    for (b, m) in masks.iter().enumerate() {
        let mut slot = vec![0; n];
        for (j, &i) in m.keep.iter().enumerate() {
            slot[i] = b * seq_in + 1 + j;
        }
        for (j, &i) in m.masked.iter().enumerate() {
            slot[i] = mask_base + b * n_masked + j;
        }
        order.push(b * seq_in);
        order.extend(slot);
    }
    let x = tape.gather_rows(all, &order)?;
    let pos = sincos_pos_embed(vit.grid_side(), d)?;
    let mut pos_rows = Vec::with_capacity(batch * (n + 1) * d);
    for _ in 0..batch {
        pos_rows.extend(std::iter::repeat_n(0.0, d));
        pos_rows.extend_from_slice(pos.data());
    }
    let pos = tape.constant(Tensor::matrix(batch * (n + 1), d, pos_rows)?)?;
    let mut x = tape.add(x, pos)?;
    for i in 0..cfg.depth {
        x = block(tape, p, &format!("blocks.{i}."), x, batch, n + 1, cfg.heads)?;
    }
    let x = tape.layer_norm(x, p.get("norm.weight")?, p.get("norm.bias")?)?;
    let rows: Vec<usize> = (0..batch)
        .flat_map(|b| (1..=n).map(move |j| b * (n + 1) + j))
        .collect();
    let x = tape.gather_rows(x, &rows)?;
    tape.linear(x, p.get("pred.weight")?, p.get("pred.bias")?)
}

/// Loss and pooled encoder output of one masked view.
pub struct MaeForward {
    pub loss: Var,
    pub pooled: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn mae_forward(
    tape: &mut Tape,
    encoder: &Bound,
    decoder: &Bound,
    vit: &ViTConfig,
    dec: &DecoderConfig,
    patches: &Tensor,
    masks: &[MaskSpec],
) -> Result<MaeForward> {
    let keep: Vec<Vec<usize>> = masks.iter().map(|m| m.keep.clone()).collect();
    let e = encode(
        tape,
        encoder,
        "",
        vit,
        patches,
        EncodeOpts {
            keep: Some(&keep),
            ..Default::default()
        },
    )?;
    let pred = decode(tape, decoder, dec, vit, e.tokens, masks)?;
    let loss = mae_loss(tape, pred, patches, masks)?;
    Ok(MaeForward {
        loss,
        pooled: e.pooled,
    })
}

/// Result of [`mae_pretrain`].
pub struct PretrainOutput {
    pub encoder: Params,
    pub decoder: Params,
    /// NNCLR head of the combined objective.
    pub head: Option<Head>,
    pub log: Vec<LogRow>,
}

/// Masked-reconstruction pre-training. With `cfg.combined`, an NNCLR head
/// on the pooled output of the masked views adds `lambda * L_nnclr`
/// (`cfg.detached` stops its gradient at the encoder). Randomness is
/// drawn from separate streams per purpose, so `lambda = 0` reproduces
/// plain MAE bit for bit.
pub fn mae_pretrain(
    vit: &ViTConfig,
    dec: &DecoderConfig,
    head_cfg: &HeadConfig,
    cfg: &StageConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<PretrainOutput> {
    if cfg.stage != Stage::Pretrain {
        return Err(Error::invalid("mae_pretrain needs a pretrain stage config"));
    }
    cfg.check(vit)?;
    vit.validate()?;
    if data.image_size() != vit.image_size || data.channels() != vit.channels {
        return Err(Error::invalid(
            "dataset images do not match the encoder input size",
        ));
    }
    let mut encoder = vit.init(&mut rng_for(cfg.seed, "pretrain/encoder_init"))?;
    let mut decoder = dec.init(vit, &mut rng_for(cfg.seed, "pretrain/decoder_init"))?;
    let mut head = if cfg.combined {
        if head_cfg.input_dim != vit.embed_dim {
            return Err(Error::invalid(
                "head input_dim must equal the encoder embed_dim",
            ));
        }
        Some(Head::init(
            head_cfg.clone(),
            &mut rng_for(cfg.seed, "pretrain/head_init"),
        ))
    } else {
        None
    };
    let mut queue = EmbeddingQueue::new(cfg.queue_capacity, head_cfg.proj_out)?;
    let mut shuffle = rng_for(cfg.seed, "pretrain/shuffle");
    let mut aug = rng_for(cfg.seed, "pretrain/augment");
    let mut mask_rng = rng_for(cfg.seed, "pretrain/mask");
    let mut nn_rng = rng_for(cfg.seed, "pretrain/nn");
    let mut enc_opt = AdamW::new(cfg.weight_decay);
    let mut dec_opt = AdamW::new(cfg.weight_decay);
    let mut head_opt = AdamW::new(cfg.weight_decay);
    let lr0 = scaled_lr(cfg.base_lr, cfg.batch_size, cfg.views)?;
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    if spe == 0 {
        return Err(Error::invalid("dataset smaller than one batch"));
    }
    let total = cfg.epochs * spe;
    let n = vit.n_patches();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut shuffle) {
            let lr = lr0 * lr_schedule(step, total, cfg.warmup_fraction);
            let mut tape = Tape::new();
            let eb = Bound::bind(&mut tape, &encoder, |_| true)?;
            let db = Bound::bind(&mut tape, &decoder, |_| true)?;
            let mut losses = Vec::with_capacity(cfg.views);
            let mut pooled = Vec::with_capacity(cfg.views);
            for _ in 0..cfg.views {
                let views: Vec<_> = idx
                    .iter()
                    .map(|&i| augment(&data.images[i], &mut aug, cfg.augmentation, &cfg.crop))
                    .collect();
                let refs: Vec<_> = views.iter().collect();
                let patches = input_patches(&refs, vit.patch_size)?;
                let masks = idx
                    .iter()
                    .map(|_| sample_mask(n, cfg.mask_ratio, &mut mask_rng))
                    .collect::<Result<Vec<_>>>()?;
                let f = mae_forward(&mut tape, &eb, &db, vit, dec, &patches, &masks)?;
                losses.push(f.loss);
                pooled.push(f.pooled);
            }
            let mut l_mae = losses[0];
            if losses.len() == 2 {
                let s = tape.add(losses[0], losses[1])?;
                l_mae = tape.scale(s, 0.5)?;
            }

            let mut total_loss = l_mae;
            let mut head_step = None;
            if let Some(h) = head.as_ref() {
                let (mut y1, mut y2) = (pooled[0], pooled[1]);
                if cfg.detached {
                    y1 = tape.detach(y1);
                    y2 = tape.detach(y2);
                }
                if queue.len() >= cfg.k {
                    let online = Bound::bind(&mut tape, &h.params, |_| true)?;
                    let path = LookupPath {
                        ema_projector: None,
                        k: cfg.k,
                        tau: cfg.tau,
                        labels: None,
                    };
                    let out = nnclr_loss_symmetrized(
                        &mut tape,
                        y1,
                        y2,
                        h,
                        &online,
                        &queue,
                        &path,
                        &mut nn_rng,
                    )?;
                    total_loss = combined_loss_var(&mut tape, l_mae, out.loss, cfg.lambda)?;
                    head_step = Some((online, out));
                } else {
                    let yv = tape.value(y1).clone();
                    let hb = Bound::bind(&mut tape, &h.projector_params(), |_| false)?;
                    let x = tape.constant(yv)?;
                    let mut stats = Vec::new();
                    let g = projector(&mut tape, &hb, &h.buffers, x, BnMode::Train, &mut stats)?;
                    let z = tape.l2_normalize(g)?;
                    queue.push(&tape.value(z).to_rows(), None)?;
                }
            }

            let loss = tape.value(total_loss).item();
            if !loss.is_finite() {
                return Err(Error::Diverged { step, lr, loss });
            }
            let mut grads = tape.backward(total_loss, Tensor::scalar(1.0))?;
            let ge = eb.collect(&mut grads, |_| true);
            let gd = db.collect(&mut grads, |_| true);
            enc_opt.step(&mut encoder, &ge, |_| lr)?;
            dec_opt.step(&mut decoder, &gd, |_| lr)?;
            if let (Some(h), Some((online, out))) = (head.as_mut(), head_step) {
                let gh = online.collect(&mut grads, |_| true);
                head_opt.step(&mut h.params, &gh, |_| lr)?;
                h.update_running(&out.online_stats)?;
                queue.push(&out.z1, None)?;
            }
            sum += loss;
            step += 1;
        }
        let row = LogRow {
            epoch,
            step,
            lr: lr_schedule(step - 1, total, cfg.warmup_fraction),
            loss: Some(sum / spe as f64),
            queue_fill: queue.len(),
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(PretrainOutput {
        encoder,
        decoder,
        head,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_mask(64, 0.75, &mut rng).unwrap();
        assert_eq!((m.masked.len(), m.keep.len()), (48, 16));
        let mut all = [m.keep.clone(), m.masked.clone()].concat();
        all.sort();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        let m = sample_mask(64, 0.0, &mut rng).unwrap();
        assert!(m.masked.is_empty());
        assert!(sample_mask(64, 1.0, &mut rng).is_err());
        assert!(sample_mask(64, -0.1, &mut rng).is_err());
        assert!(sample_mask(4, 0.9, &mut rng).is_err());
    }

    #[test]
    fn target_normalisation() {
        let t = normalize_target(&[1.0, 3.0]).unwrap();
        assert!((t[0] + 1.0).abs() < 1e-6 && (t[1] - 1.0).abs() < 1e-6);
        assert_eq!(normalize_target(&[0.4; 5]).unwrap(), vec![0.0; 5]);
        assert!(normalize_target(&[1.0]).is_err());
    }

    #[test]
    fn combined_arithmetic() {
        assert!((combined_loss(2.0, 5.0, 0.001).unwrap() - 2.005).abs() < 1e-15);
        assert_eq!(combined_loss(2.0, 5.0, 0.0).unwrap(), 2.0);
        assert!(combined_loss(2.0, 5.0, -1.0).is_err());
    }
}
