//! Stage configuration, NNCLR head initialisation on a frozen encoder and
//! contrastive tuning of the upper encoder blocks.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{augment, input_patches, Dataset};
use crate::error::{Error, Result};
use crate::mae::sample_mask;
use crate::nnclr::{
    ema_update, nnclr_loss_symmetrized, projector, BnMode, EmbeddingQueue, Head, HeadConfig,
    LookupPath,
};
use crate::optim::AdamW;
use crate::params::{Bound, Params};
use crate::seed::rng_for;
use crate::vit::{encode, param_lr_scale, EncodeOpts, FreezePlan, ViTConfig};

pub use crate::data::{Augmentation, CropFlip};
pub use crate::optim::{lr_schedule, scaled_lr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    HeadInit,
    Ct,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::HeadInit => "head_init",
            Stage::Ct => "ct",
            Stage::Eval => "eval",
        }
    }
}

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub tau: f64,
    pub k: usize,
    pub frozen_blocks: usize,
    pub layer_decay: f64,
    /// Encoder EMA momentum `t1`.
    pub encoder_ema: f64,
    /// Queue-path projector EMA momentum `t2`.
    pub projector_ema: f64,
    pub views: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    #[serde(default)]
    pub crop: CropFlip,
    /// Fraction of patches dropped from the encoder input.
    #[serde(default)]
    pub mask_ratio: f64,
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
    /// Joint MAE + lambda * NNCLR objective during pre-training.
    #[serde(default)]
    pub combined: bool,
    #[serde(default)]
    pub lambda: f64,
    /// Stop the NNCLR gradient at the encoder output (combined mode).
    #[serde(default)]
    pub detached: bool,
    /// Contrastive tuning with a randomly initialised head.
    #[serde(default)]
    pub skip_init: bool,
    /// Restrict neighbour lookups to queue entries of the anchor's class.
    #[serde(default)]
    pub oracle: bool,
}

fn default_queue() -> usize {
    4096
}

impl StageConfig {
    /// Desk-scale defaults for a stage.
    pub fn defaults(stage: Stage) -> Self {
        let base = StageConfig {
            stage,
            epochs: 20,
            batch_size: 64,
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            warmup_fraction: 0.2,
            tau: 0.15,
            k: 1,
            frozen_blocks: 0,
            layer_decay: 1.0,
            encoder_ema: 1.0,
            projector_ema: 1.0,
            views: 1,
            seed: 0,
            augmentation: Augmentation::CropFlip,
            crop: CropFlip::default(),
            mask_ratio: 0.0,
            queue_capacity: default_queue(),
            combined: false,
            lambda: 0.0,
            detached: false,
            skip_init: false,
            oracle: false,
        };
        match stage {
            Stage::Pretrain => StageConfig {
                mask_ratio: 0.75,
                ..base
            },
            Stage::HeadInit => StageConfig {
                base_lr: 1e-4,
                weight_decay: 1e-5,
                views: 2,
                ..base
            },
            Stage::Ct => StageConfig {
                base_lr: 1e-4,
                weight_decay: 1e-5,
                tau: 0.2,
                k: 20,
                frozen_blocks: 4,
                layer_decay: 0.65,
                encoder_ema: 0.9999,
                projector_ema: 0.99,
                views: 2,
                ..base
            },
            Stage::Eval => base,
        }
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        let s = self.stage.name();
        if self.batch_size == 0 {
            e.push(format!("{s}.batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            e.push(format!(
                "{s}.warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(1..=2).contains(&self.views) {
            e.push(format!("{s}.views must be 1 or 2, got {}", self.views));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                e.push(format!(
                    "{s}.{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        if !(self.tau > 0.0) {
            e.push(format!("{s}.tau must be positive, got {}", self.tau));
        }
        if self.k == 0 {
            e.push(format!("{s}.k must be at least 1"));
        }
        for (name, v) in [
            ("encoder_ema", self.encoder_ema),
            ("projector_ema", self.projector_ema),
        ] {
            if !(0.0..=1.0).contains(&v) {
                e.push(format!("{s}.{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            e.push(format!(
                "{s}.layer_decay must lie in (0, 1], got {}",
                self.layer_decay
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            e.push(format!(
                "{s}.mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            ));
        }
        let (lo, hi) = self.crop.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            e.push(format!(
                "{s}.crop.scale must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
            ));
        }
        if !(0.0..=1.0).contains(&self.crop.flip_p) {
            e.push(format!("{s}.crop.flip_p must lie in [0, 1]"));
        }
        let nnclr = matches!(self.stage, Stage::HeadInit | Stage::Ct) || self.combined;
        if nnclr {
            if self.views != 2 {
                e.push(format!("{s}.views must be 2 for a contrastive objective"));
            }
            if self.batch_size < 2 {
                e.push(format!(
                    "{s}.batch_size must be at least 2 for BatchNorm in the head"
                ));
            }
            if self.queue_capacity < self.batch_size {
                e.push(format!(
                    "{s}.queue_capacity ({}) must hold at least one batch ({})",
                    self.queue_capacity, self.batch_size
                ));
            }
            if self.k > self.queue_capacity {
                e.push(format!(
                    "{s}.k ({}) exceeds queue_capacity ({})",
                    self.k, self.queue_capacity
                ));
            }
        }
        if self.combined && self.stage != Stage::Pretrain {
            e.push(format!("{s}.combined only applies to pretrain"));
        }
        if self.detached && !self.combined {
            e.push(format!("{s}.detached requires combined"));
        }
        e
    }

    /// Constraints that involve the encoder architecture.
    pub fn validate_against(&self, vit: &ViTConfig) -> Vec<String> {
        let mut e = self.validate();
        if self.frozen_blocks > vit.depth {
            e.push(format!(
                "{}.frozen_blocks ({}) exceeds model depth ({})",
                self.stage.name(),
                self.frozen_blocks,
                vit.depth
            ));
        }
        e
    }

    pub fn check(&self, vit: &ViTConfig) -> Result<()> {
        let e = self.validate_against(vit);
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(e.join("; ")))
        }
    }
}

/// Shuffled full batches of one epoch; the incomplete tail is dropped.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n / batch
}

/// One row of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    /// Schedule multiplier.
    pub lr: f64,
    /// Mean loss over the epoch's optimisation steps; `None` if every step
    /// was a queue warm-up step.
    pub loss: Option<f64>,
    pub queue_fill: usize,
}

fn check_loss(loss: f64, step: usize, lr: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, lr, loss })
    }
}

/// Augmented patch matrices of two views of `idx`.
fn two_views(
    data: &Dataset,
    idx: &[usize],
    cfg: &StageConfig,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let mut v1 = Vec::with_capacity(idx.len());
    let mut v2 = Vec::with_capacity(idx.len());
    for &i in idx {
        v1.push(augment(&data.images[i], rng, cfg.augmentation, &cfg.crop));
        v2.push(augment(&data.images[i], rng, cfg.augmentation, &cfg.crop));
    }
    let r1: Vec<_> = v1.iter().collect();
    let r2: Vec<_> = v2.iter().collect();
    Ok((
        input_patches(&r1, patch_size)?,
        input_patches(&r2, patch_size)?,
    ))
}

/// Pooled encoder output without gradient tracking.
pub fn encode_frozen(encoder: &Params, vit: &ViTConfig, patches: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, encoder, |_| false)?;
    let out = encode(&mut tape, &b, "", vit, patches, EncodeOpts::default())?;
    Ok(tape.value(out.pooled).clone())
}

fn stack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut d = a.data().to_vec();
    d.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), d)
}

/// Unit-norm queue-path embeddings (projector in training mode).
fn queue_embeddings(
    tape: &mut Tape,
    proj: &Params,
    buffers: &Params,
    y: &Tensor,
) -> Result<Vec<Vec<f64>>> {
    let b = Bound::bind(tape, proj, |_| false)?;
    let x = tape.constant(y.clone())?;
    let mut stats = Vec::new();
    let g = projector(tape, &b, buffers, x, BnMode::Train, &mut stats)?;
    let z = tape.l2_normalize(g)?;
    Ok(tape.value(z).to_rows())
}

/// Trains a freshly initialised NNCLR head on the outputs of a fully frozen
/// encoder with top-1 lookup and no projector EMA. Returns the head and a
/// per-epoch log.
pub fn init_head(
    encoder: &Params,
    vit: &ViTConfig,
    head_cfg: &HeadConfig,
    cfg: &StageConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<(Head, Vec<LogRow>)> {
    if cfg.stage != Stage::HeadInit {
        return Err(Error::invalid("init_head needs a head_init stage config"));
    }
    cfg.check(vit)?;
    encoder.check_shapes(&vit.param_shapes())?;
    if head_cfg.input_dim != vit.embed_dim {
        return Err(Error::invalid(
            "head input_dim must equal the encoder embed_dim",
        ));
    }
    let mut head = Head::init(head_cfg.clone(), &mut rng_for(cfg.seed, "head_init/init"));
    let mut shuffle = rng_for(cfg.seed, "head_init/shuffle");
    let mut aug = rng_for(cfg.seed, "head_init/augment");
    let mut nn_rng = rng_for(cfg.seed, "head_init/nn");
    let mut queue = EmbeddingQueue::new(cfg.queue_capacity, head_cfg.proj_out)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let lr0 = scaled_lr(cfg.base_lr, cfg.batch_size, cfg.views)?;
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    let total = cfg.epochs * spe;
    let k = 1;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut sum, mut count) = (0.0, 0);
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut shuffle) {
            let (p1, p2) = two_views(data, &idx, cfg, vit.patch_size, &mut aug)?;
            let y = encode_frozen(encoder, vit, &stack(&p1, &p2)?)?;
            let b = idx.len();
            let mut tape = Tape::new();
            let yv = tape.constant(y)?;
            let y1 = tape.gather_rows(yv, &(0..b).collect::<Vec<_>>())?;
            let y2 = tape.gather_rows(yv, &(b..2 * b).collect::<Vec<_>>())?;
            let lr = lr0 * lr_schedule(step, total, cfg.warmup_fraction);
            if queue.len() < k {
                let y1v = tape.value(y1).clone();
                let z1 =
                    queue_embeddings(&mut tape, &head.projector_params(), &head.buffers, &y1v)?;
                queue.push(&z1, None)?;
            } else {
                let online = Bound::bind(&mut tape, &head.params, |_| true)?;
                let path = LookupPath {
                    ema_projector: None,
                    k,
                    tau: cfg.tau,
                    labels: None,
                };
                let out = nnclr_loss_symmetrized(
                    &mut tape,
                    y1,
                    y2,
                    &head,
                    &online,
                    &queue,
                    &path,
                    &mut nn_rng,
                )?;
                let loss = tape.value(out.loss).item();
                check_loss(loss, step, lr)?;
                let mut grads = tape.backward(out.loss, Tensor::scalar(1.0))?;
                let g = online.collect(&mut grads, |_| true);
                opt.step(&mut head.params, &g, |_| lr)?;
                head.update_running(&out.online_stats)?;
                queue.push(&out.z1, None)?;
                sum += loss;
                count += 1;
            }
            step += 1;
        }
        let row = LogRow {
            epoch,
            step,
            lr: lr_schedule(step.saturating_sub(1), total, cfg.warmup_fraction),
            loss: (count > 0).then(|| sum / count as f64),
            queue_fill: queue.len(),
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok((head, log))
}

/// Everything contrastive tuning mutates.
#[derive(Clone, Debug)]
pub struct CtState {
    pub vit: ViTConfig,
    pub freeze: FreezePlan,
    /// Online encoder `f`.
    pub encoder: Params,
    /// Slow EMA encoder `f_m`; the stage output.
    pub encoder_ema: Params,
    /// Online projector `g` and predictor `h`.
    pub head: Head,
    /// Fast EMA projector `g_m` feeding the queue.
    pub projector_ema: Params,
    pub queue: EmbeddingQueue,
    pub encoder_opt: AdamW,
    pub head_opt: AdamW,
}

impl CtState {
    pub fn new(vit: &ViTConfig, encoder: Params, head: Head, cfg: &StageConfig) -> Result<Self> {
        cfg.check(vit)?;
        encoder.check_shapes(&vit.param_shapes())?;
        let queue = EmbeddingQueue::new(cfg.queue_capacity, head.config.proj_out)?;
        Ok(CtState {
            vit: vit.clone(),
            freeze: FreezePlan::new(cfg.frozen_blocks, vit)?,
            encoder_ema: encoder.clone(),
            encoder,
            projector_ema: head.projector_params(),
            head,
            queue,
            encoder_opt: AdamW::new(cfg.weight_decay),
            head_opt: AdamW::new(cfg.weight_decay),
        })
    }
}

/// Outcome of one [`ct_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    /// `None` for a queue warm-up step (forward only).
    pub loss: Option<f64>,
    pub queue_fill: usize,
}

/// Visible patch indices for each of the two views.
pub type ViewKeep<'a> = (&'a [Vec<usize>], &'a [Vec<usize>]);

/// Inputs of one contrastive-tuning step.
pub struct StepBatch<'a> {
    pub view1: &'a Tensor,
    pub view2: &'a Tensor,
    /// Visible patches per view when masking during tuning.
    pub keep: Option<ViewKeep<'a>>,
    /// Anchor classes, for oracle lookups.
    pub labels: Option<&'a [usize]>,
}

/// One step: encode both views, symmetrised NNCLR loss, AdamW with
/// layer-wise rates (`lr` is the already scheduled base rate), push `z1`,
/// then both EMA updates. While the queue holds fewer than `k` entries the
/// step only fills the queue.
pub fn ct_step(
    state: &mut CtState,
    cfg: &StageConfig,
    batch: &StepBatch<'_>,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<StepInfo> {
    let b = batch.view1.rows() / state.vit.n_patches();
    let freeze = state.freeze;
    let mut tape = Tape::new();
    let enc = Bound::bind(&mut tape, &state.encoder, |n| !freeze.is_frozen(n))?;
    let (y1, y2) = match batch.keep {
        None => {
            let e = encode(
                &mut tape,
                &enc,
                "",
                &state.vit,
                &stack(batch.view1, batch.view2)?,
                EncodeOpts::default(),
            )?;
            let y1 = tape.gather_rows(e.pooled, &(0..b).collect::<Vec<_>>())?;
            let y2 = tape.gather_rows(e.pooled, &(b..2 * b).collect::<Vec<_>>())?;
            (y1, y2)
        }
        Some((k1, k2)) => {
            let e1 = encode(
                &mut tape,
                &enc,
                "",
                &state.vit,
                batch.view1,
                EncodeOpts {
                    keep: Some(k1),
                    ..Default::default()
                },
            )?;
            let e2 = encode(
                &mut tape,
                &enc,
                "",
                &state.vit,
                batch.view2,
                EncodeOpts {
                    keep: Some(k2),
                    ..Default::default()
                },
            )?;
            (e1.pooled, e2.pooled)
        }
    };

    if state.queue.len() < cfg.k {
        let y1v = tape.value(y1).clone();
        let z1 = queue_embeddings(&mut tape, &state.projector_ema, &state.head.buffers, &y1v)?;
        state.queue.push(&z1, batch.labels)?;
        return Ok(StepInfo {
            loss: None,
            queue_fill: state.queue.len(),
        });
    }

    let online = Bound::bind(&mut tape, &state.head.params, |_| true)?;
    let path = LookupPath {
        ema_projector: Some(&state.projector_ema),
        k: cfg.k,
        tau: cfg.tau,
        labels: if cfg.oracle { batch.labels } else { None },
    };
    let out = nnclr_loss_symmetrized(
        &mut tape,
        y1,
        y2,
        &state.head,
        &online,
        &state.queue,
        &path,
        rng,
    )?;
    let loss = tape.value(out.loss).item();
    check_loss(loss, state.encoder_opt.steps_taken() as usize, lr)?;
    let mut grads = tape.backward(out.loss, Tensor::scalar(1.0))?;

    let ge = enc.collect(&mut grads, |n| !freeze.is_frozen(n));
    let (vit, decay) = (&state.vit, cfg.layer_decay);
    state.encoder_opt.step(&mut state.encoder, &ge, |n| {
        lr * param_lr_scale(n, decay, vit, freeze)
    })?;
    let gh = online.collect(&mut grads, |_| true);
    state.head_opt.step(&mut state.head.params, &gh, |_| lr)?;
    state.head.update_running(&out.online_stats)?;

    state.queue.push(&out.z1, batch.labels)?;
    ema_trainable(
        &mut state.encoder_ema,
        &state.encoder,
        cfg.encoder_ema,
        |n| !freeze.is_frozen(n),
    )?;
    ema_update(
        &mut state.projector_ema,
        &state.head.projector_params(),
        cfg.projector_ema,
    )?;
    Ok(StepInfo {
        loss: Some(loss),
        queue_fill: state.queue.len(),
    })
}

/// EMA restricted to names accepted by `filter`; the rest stay bit-identical.
fn ema_trainable(
    target: &mut Params,
    source: &Params,
    t: f64,
    filter: impl Fn(&str) -> bool,
) -> Result<()> {
    let mut sub_t = Params::new();
    let mut sub_s = Params::new();
    for (n, v) in source.iter() {
        if filter(n) {
            sub_t.insert(n.clone(), target.get(n)?.clone());
            sub_s.insert(n.clone(), v.clone());
        }
    }
    ema_update(&mut sub_t, &sub_s, t)?;
    for (n, v) in sub_t.iter() {
        *target.get_mut(n)? = v.clone();
    }
    Ok(())
}

/// Result of [`contrastive_tune`].
pub struct CtOutput {
    /// Slow EMA encoder.
    pub encoder: Params,
    pub head: Head,
    pub queue: EmbeddingQueue,
    pub log: Vec<LogRow>,
}

/// Contrastive tuning. `head = None` runs the skip-init ablation with a
/// randomly initialised head (requires `cfg.skip_init`). The queue always
/// starts empty.
pub fn contrastive_tune(
    encoder: &Params,
    head: Option<&Head>,
    vit: &ViTConfig,
    head_cfg: &HeadConfig,
    cfg: &StageConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<CtOutput> {
    if cfg.stage != Stage::Ct {
        return Err(Error::invalid("contrastive_tune needs a ct stage config"));
    }
    let head = match (head, cfg.skip_init) {
        (Some(h), false) => h.clone(),
        (None, true) => Head::init(head_cfg.clone(), &mut rng_for(cfg.seed, "ct/head_init")),
        (Some(_), true) => {
            return Err(Error::invalid(
                "skip_init set but a head checkpoint was supplied",
            ))
        }
        (None, false) => {
            return Err(Error::invalid(
                "contrastive tuning needs an initialised head (or skip_init)",
            ))
        }
    };
    if head.config.input_dim != vit.embed_dim {
        return Err(Error::invalid(
            "head input_dim must equal the encoder embed_dim",
        ));
    }
    let mut state = CtState::new(vit, encoder.clone(), head, cfg)?;
    let mut shuffle = rng_for(cfg.seed, "ct/shuffle");
    let mut aug = rng_for(cfg.seed, "ct/augment");
    let mut mask_rng = rng_for(cfg.seed, "ct/mask");
    let mut nn_rng = rng_for(cfg.seed, "ct/nn");
    let lr0 = scaled_lr(cfg.base_lr, cfg.batch_size, cfg.views)?;
    let n_patches = vit.n_patches();
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    let total = cfg.epochs * spe;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut sum, mut count) = (0.0, 0);
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut shuffle) {
            let (p1, p2) = two_views(data, &idx, cfg, vit.patch_size, &mut aug)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let keeps = if cfg.mask_ratio > 0.0 {
                let mut draw = || -> Result<Vec<Vec<usize>>> {
                    idx.iter()
                        .map(|_| Ok(sample_mask(n_patches, cfg.mask_ratio, &mut mask_rng)?.keep))
                        .collect()
                };
                Some((draw()?, draw()?))
            } else {
                None
            };
            let batch = StepBatch {
                view1: &p1,
                view2: &p2,
                keep: keeps.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
                labels: Some(&labels),
            };
            let lr = lr0 * lr_schedule(step, total, cfg.warmup_fraction);
            let info = ct_step(&mut state, cfg, &batch, lr, &mut nn_rng)?;
            if let Some(l) = info.loss {
                sum += l;
                count += 1;
            }
            step += 1;
        }
        let row = LogRow {
            epoch,
            step,
            lr: lr_schedule(step.saturating_sub(1), total, cfg.warmup_fraction),
            loss: (count > 0).then(|| sum / count as f64),
            queue_fill: state.queue.len(),
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(CtOutput {
        encoder: state.encoder_ema,
        head: state.head,
        queue: state.queue,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for s in [Stage::Pretrain, Stage::HeadInit, Stage::Ct, Stage::Eval] {
            assert!(StageConfig::defaults(s).validate().is_empty(), "{s:?}");
        }
    }

    #[test]
    fn validation_is_exhaustive() {
        let mut c = StageConfig::defaults(Stage::Ct);
        c.batch_size = 0;
        c.tau = 0.0;
        c.views = 3;
        c.warmup_fraction = 1.0;
        let errs = c.validate();
        for key in ["batch_size", "tau", "views", "warmup_fraction"] {
            assert!(
                errs.iter().any(|e| e.contains(key)),
                "{key} missing from {errs:?}"
            );
        }
    }

    #[test]
    fn table_ten_column_is_expressible() {
        let c = StageConfig {
            epochs: 20,
            tau: 0.2,
            k: 20,
            frozen_blocks: 12,
            layer_decay: 0.65,
            encoder_ema: 0.9999,
            projector_ema: 0.99,
            ..StageConfig::defaults(Stage::Ct)
        };
        let large = ViTConfig {
            embed_dim: 1024,
            depth: 24,
            heads: 16,
            patch_size: 16,
            image_size: 224,
            ..ViTConfig::default()
        };
        assert!(c.validate_against(&large).is_empty());
        assert!(!c.validate_against(&ViTConfig::default()).is_empty());
    }

    #[test]
    fn batches_drop_tail() {
        let mut rng = rng_for(0, "t");
        let b = epoch_batches(10, 3, &mut rng);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9);
    }
}
