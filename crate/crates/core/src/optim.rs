//! AdamW with decoupled weight decay, the linear learning-rate scaling
//! rule and the warmup-then-cosine schedule.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{is_no_decay, Params};

/// `base_lr * batch_size * views / 256`.
pub fn scaled_lr(base_lr: f64, batch_size: usize, views: usize) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if !(1..=2).contains(&views) {
        return Err(Error::invalid(format!("views must be 1 or 2, got {views}")));
    }
    Ok(base_lr * batch_size as f64 * views as f64 / 256.0)
}

/// Multiplier in `[0, 1]`: linear warmup over the first
/// `round(warmup_fraction * total_steps)` steps, cosine decay to zero at
/// `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).round() as usize;
    let step = step.min(total_steps);
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    let span = total_steps - warmup;
    if span == 0 {
        return 1.0;
    }
    let progress = (step - warmup) as f64 / span as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW as in PyTorch: `p *= 1 - lr*wd`, then the bias-corrected Adam step.
/// Biases and normalisation parameters are never decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient in `grads`, using
    /// learning rate `lr(name)`. Parameters with a zero rate are left
    /// untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &Params,
        lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let rate = lr(name);
            if rate == 0.0 {
                continue;
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("`{name}` {:?} vs {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            let wd = if is_no_decay(name) {
                0.0
            } else {
                self.weight_decay
            };
            let step_size = rate / bc1;
            let sqrt_bc2 = bc2.sqrt();
            update(
                p,
                g,
                st,
                self.beta1,
                self.beta2,
                self.eps,
                rate * wd,
                step_size,
                sqrt_bc2,
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut Tensor,
    g: &Tensor,
    st: &mut Moments,
    b1: f64,
    b2: f64,
    eps: f64,
    decay: f64,
    step_size: f64,
    sqrt_bc2: f64,
) {
    for (((p, g), m), v) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(st.m.iter_mut())
        .zip(st.v.iter_mut())
    {
        *p *= 1.0 - decay;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let denom = v.sqrt() / sqrt_bc2 + eps;
        *p -= step_size * *m / denom;
    }
}
