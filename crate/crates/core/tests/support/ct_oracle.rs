//! Scripted recomputation of contrastive-tuning steps, written against the
//! tape primitives and the encoder forward only.

use std::collections::BTreeMap;

use maect::autodiff::{Tape, Tensor, Var};
use maect::nnclr::{Head, HeadConfig};
use maect::params::{Bound, Params};
use maect::tuning::{ct_step, CtState, Stage, StageConfig, StepBatch};
use maect::vit::{encode, EncodeOpts, Pooling, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;
const BN_MOMENTUM: f64 = 0.1;

fn vit() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        depth: 3,
        heads: 2,
        mlp_ratio: 2,
        pooling: Pooling::Cls,
        cls_pos_embed: false,
    }
}

fn stage() -> StageConfig {
    StageConfig {
        k: 2,
        tau: 0.3,
        frozen_blocks: 1,
        layer_decay: 0.7,
        encoder_ema: 0.9,
        projector_ema: 0.8,
        weight_decay: 0.05,
        queue_capacity: 12,
        batch_size: 5,
        ..StageConfig::defaults(Stage::Ct)
    }
}

fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

fn frozen(name: &str, f: usize) -> bool {
    match block_of(name) {
        Some(i) => i < f,
        None => f > 0 && (name.starts_with("patch_embed") || name == "cls_token"),
    }
}

fn lr_factor(name: &str, depth: usize, decay: f64) -> f64 {
    let from_top = match block_of(name) {
        Some(i) => depth - i,
        None if name.starts_with("norm.") => 0,
        None => depth,
    };
    decay.powi(from_top as i32)
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm") || name.contains(".bn"))
}

#[derive(Default)]
struct Adam {
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(&str) -> f64,
        wd: f64,
    ) {
        self.t += 1;
        for (name, g) in grads {
            let rate = lr(name);
            let p = params.get_mut(name).unwrap();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let wd = if decays(name) { wd } else { 0.0 };
            for i in 0..g.numel() {
                let gi = g.data()[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                // torch.optim.AdamW, operation for operation.
                let step_size = rate / (1.0 - BETA1.powi(self.t));
                let denom = v[i].sqrt() / (1.0 - BETA2.powi(self.t)).sqrt() + ADAM_EPS;
                let x = &mut p.data_mut()[i];
                *x *= 1.0 - rate * wd;
                *x -= step_size * m[i] / denom;
            }
        }
    }
}

/// Column mean and population variance.
fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows() as f64, x.cols());
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..x.rows()).map(|i| x.row(i)[j]).sum::<f64>() / n)
        .collect();
    let var = (0..d)
        .map(|j| {
            (0..x.rows())
                .map(|i| (x.row(i)[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n
        })
        .collect();
    (mean, var)
}

type Stats = Vec<(String, Vec<f64>, Vec<f64>)>;

fn layer(
    t: &mut Tape,
    p: &BTreeMap<String, Var>,
    x: Var,
    fc: &str,
    bn: Option<&str>,
    relu: bool,
    stats: &mut Stats,
) -> Var {
    let mut h = t
        .linear(x, p[&format!("{fc}.weight")], p[&format!("{fc}.bias")])
        .unwrap();
    if let Some(bn) = bn {
        let (mean, var) = moments(t.value(h));
        stats.push((bn.to_string(), mean, var));
        h = t
            .batch_norm(
                h,
                Some((p[&format!("{bn}.weight")], p[&format!("{bn}.bias")])),
            )
            .unwrap()
            .0;
    }
    if relu {
        h = t.relu(h).unwrap();
    }
    h
}

fn projector(t: &mut Tape, p: &BTreeMap<String, Var>, x: Var, stats: &mut Stats) -> Var {
    let h = layer(t, p, x, "projector.fc1", Some("projector.bn1"), true, stats);
    let h = layer(t, p, h, "projector.fc2", Some("projector.bn2"), true, stats);
    layer(
        t,
        p,
        h,
        "projector.fc3",
        Some("projector.bn3"),
        false,
        stats,
    )
}

fn predictor(t: &mut Tape, p: &BTreeMap<String, Var>, x: Var, stats: &mut Stats) -> Var {
    let h = layer(t, p, x, "predictor.fc1", Some("predictor.bn1"), true, stats);
    layer(t, p, h, "predictor.fc2", None, false, stats)
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Everything Algorithm 1 carries between steps.
struct Script {
    vit: ViTConfig,
    cfg: StageConfig,
    enc: Params,
    enc_ema: Params,
    head: Params,
    buffers: Params,
    proj_ema: Params,
    queue: Vec<Vec<f64>>,
    enc_adam: Adam,
    head_adam: Adam,
}

impl Script {
    /// `f` on both views. They share one batch: key biases and biases
    /// ahead of a normalisation have exactly zero gradient, and Adam would
    /// rescale the rounding noise in those zeros to `lr * 1e-8`-sized
    /// updates that differ between batchings.
    fn encode(&self, t: &mut Tape, v1: &Tensor, v2: &Tensor) -> (Var, Var, BTreeMap<String, Var>) {
        let f = self.cfg.frozen_blocks;
        let mut vars = BTreeMap::new();
        for (n, v) in self.enc.iter() {
            vars.insert(n.clone(), t.leaf(v.clone(), !frozen(n, f)).unwrap());
        }
        let b = Bound::from_vars(vars.clone());
        let mut both = v1.data().to_vec();
        both.extend_from_slice(v2.data());
        let x = Tensor::matrix(v1.rows() + v2.rows(), v1.cols(), both).unwrap();
        let y = encode(t, &b, "", &self.vit, &x, EncodeOpts::default())
            .unwrap()
            .pooled;
        let n = v1.rows() / self.vit.n_patches();
        let y1 = t.gather_rows(y, &(0..n).collect::<Vec<_>>()).unwrap();
        let y2 = t.gather_rows(y, &(n..2 * n).collect::<Vec<_>>()).unwrap();
        (y1, y2, vars)
    }

    fn queue_path(&self, t: &mut Tape, y: &Tensor) -> Vec<Vec<f64>> {
        let p: BTreeMap<String, Var> = self
            .proj_ema
            .iter()
            .map(|(n, v)| (n.clone(), t.constant(v.clone()).unwrap()))
            .collect();
        let x = t.constant(y.clone()).unwrap();
        let g = projector(t, &p, x, &mut Vec::new());
        unit_rows(t.value(g))
    }

    fn lookup(&self, z: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let k = self.cfg.k;
        z.iter()
            .map(|zi| {
                let sims: Vec<f64> = self
                    .queue
                    .iter()
                    .map(|e| e.iter().zip(zi).map(|(a, b)| a * b).sum())
                    .collect();
                let mut order: Vec<usize> = (0..self.queue.len()).collect();
                order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
                self.queue[order[rng.random_range(0..k)]].clone()
            })
            .collect()
    }

    fn push(&mut self, z: Vec<Vec<f64>>) {
        self.queue.extend(z);
        let over = self.queue.len().saturating_sub(self.cfg.queue_capacity);
        self.queue.drain(..over);
    }

    /// One step; returns the loss, or `None` while the queue fills.
    fn step(&mut self, v1: &Tensor, v2: &Tensor, lr: f64, rng: &mut ChaCha8Rng) -> Option<f64> {
        let mut t = Tape::new();
        let (y1, y2, enc_vars) = self.encode(&mut t, v1, v2);
        let (y1v, y2v) = (t.value(y1).clone(), t.value(y2).clone());

        if self.queue.len() < self.cfg.k {
            let z1 = self.queue_path(&mut t, &y1v);
            self.push(z1);
            return None;
        }

        let hp: BTreeMap<String, Var> = self
            .head
            .iter()
            .map(|(n, v)| (n.clone(), t.param(v.clone()).unwrap()))
            .collect();
        let mut stats = Vec::new();
        let mut p = Vec::new();
        for y in [y1, y2] {
            let g = projector(&mut t, &hp, y, &mut stats);
            let h = predictor(&mut t, &hp, g, &mut stats);
            p.push(t.l2_normalize(h).unwrap());
        }
        let z1 = self.queue_path(&mut t, &y1v);
        let z2 = self.queue_path(&mut t, &y2v);
        let nn1 = self.lookup(&z1, rng);
        let nn2 = self.lookup(&z2, rng);

        let tau = self.cfg.tau;
        let contrast = |t: &mut Tape, nn: &[Vec<f64>], p: Var| {
            let nn = t.constant(Tensor::from_rows(nn).unwrap()).unwrap();
            let logits = t.matmul_t(nn, p).unwrap();
            let logits = t.scale(logits, 1.0 / tau).unwrap();
            let targets: Vec<usize> = (0..nn1.len()).collect();
            t.cross_entropy(logits, &targets).unwrap()
        };
        let l12 = contrast(&mut t, &nn1, p[1]);
        let l21 = contrast(&mut t, &nn2, p[0]);
        let s = t.add(l12, l21).unwrap();
        let loss = t.scale(s, 0.5).unwrap();
        let value = t.value(loss).item();
        let mut grads = t.backward(loss, Tensor::scalar(1.0)).unwrap();

        let f = self.cfg.frozen_blocks;
        let ge: BTreeMap<String, Tensor> = enc_vars
            .iter()
            .filter(|(n, _)| !frozen(n, f))
            .map(|(n, v)| (n.clone(), grads.take(*v).unwrap()))
            .collect();
        let gh: BTreeMap<String, Tensor> = hp
            .iter()
            .map(|(n, v)| (n.clone(), grads.take(*v).unwrap()))
            .collect();

        let (depth, decay, wd) = (self.vit.depth, self.cfg.layer_decay, self.cfg.weight_decay);
        self.enc_adam
            .step(&mut self.enc, &ge, |n| lr * lr_factor(n, depth, decay), wd);
        self.head_adam.step(&mut self.head, &gh, |_| lr, wd);
        for (name, mean, var) in stats {
            for (buf, batch) in [("running_mean", mean), ("running_var", var)] {
                let r = self.buffers.get_mut(&format!("{name}.{buf}")).unwrap();
                for (x, b) in r.data_mut().iter_mut().zip(batch) {
                    *x = (1.0 - BN_MOMENTUM) * *x + BN_MOMENTUM * b;
                }
            }
        }
        self.push(z1);

        let t1 = self.cfg.encoder_ema;
        for (n, e) in self.enc_ema.iter_mut() {
            if !frozen(n, f) {
                let src = self.enc.get(n).unwrap();
                for (a, b) in e.data_mut().iter_mut().zip(src.data()) {
                    *a = t1 * *a + (1.0 - t1) * b;
                }
            }
        }
        let t2 = self.cfg.projector_ema;
        for (n, e) in self.proj_ema.iter_mut() {
            let src = self.head.get(n).unwrap();
            for (a, b) in e.data_mut().iter_mut().zip(src.data()) {
                *a = t2 * *a + (1.0 - t2) * b;
            }
        }
        Some(value)
    }
}

fn max_diff(a: &Params, b: &Params) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .map(|(n, x)| {
            let y = b.get(n).unwrap();
            x.data()
                .iter()
                .zip(y.data())
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
        })
        .fold(0.0, f64::max)
}

fn perturb(p: &mut Params, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in p.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.random_range(-scale..scale));
    }
}

/// Runs `steps` library steps and the script side by side and returns the
/// largest absolute difference over the loss, every parameter, buffer, EMA
/// and queue entry, plus how many steps produced a loss (the first ones
/// only fill the queue).
pub fn ct_step_oracle(steps: usize, seed: u64) -> (f64, usize) {
    let vit = vit();
    let cfg = stage();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = vit.init(&mut rng).unwrap();
    perturb(&mut enc, &mut rng, 0.1);
    let hc = HeadConfig {
        input_dim: 8,
        proj_hidden: 12,
        proj_out: 6,
        pred_hidden: 10,
    };
    let mut head = Head::init(hc, &mut rng);
    perturb(&mut head.params, &mut rng, 0.1);

    let mut state = CtState::new(&vit, enc.clone(), head.clone(), &cfg).unwrap();
    let mut script = Script {
        vit: vit.clone(),
        cfg: cfg.clone(),
        enc_ema: enc.clone(),
        enc,
        proj_ema: head.projector_params(),
        head: head.params,
        buffers: head.buffers,
        queue: Vec::new(),
        enc_adam: Adam::default(),
        head_adam: Adam::default(),
    };

    let batch = 5;
    let rows = batch * vit.n_patches();
    let mut worst: f64 = 0.0;
    let mut losses = 0;
    for s in 0..steps {
        let mut view = || {
            Tensor::matrix(
                rows,
                vit.patch_dim(),
                (0..rows * vit.patch_dim())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap()
        };
        let (v1, v2) = (view(), view());
        let lr = 1e-2 * (s + 1) as f64;
        let mut lib_rng = ChaCha8Rng::seed_from_u64(seed ^ s as u64);
        let mut script_rng = lib_rng.clone();
        let b = StepBatch {
            view1: &v1,
            view2: &v2,
            keep: None,
            labels: None,
        };
        let info = ct_step(&mut state, &cfg, &b, lr, &mut lib_rng).unwrap();
        let expected = script.step(&v1, &v2, lr, &mut script_rng);
        match (info.loss, expected) {
            (Some(a), Some(b)) => {
                worst = worst.max((a - b).abs());
                losses += 1;
            }
            (None, None) => {}
            _ => return (f64::INFINITY, losses),
        }
        worst = worst
            .max(max_diff(&state.encoder, &script.enc))
            .max(max_diff(&state.encoder_ema, &script.enc_ema))
            .max(max_diff(&state.head.params, &script.head))
            .max(max_diff(&state.head.buffers, &script.buffers))
            .max(max_diff(&state.projector_ema, &script.proj_ema));
        let entries = state.queue.entries();
        if entries.len() != script.queue.len() {
            return (f64::INFINITY, losses);
        }
        for (a, b) in entries.iter().zip(&script.queue) {
            worst = a
                .iter()
                .zip(b)
                .fold(worst, |m, (p, q)| m.max((p - q).abs()));
        }
    }
    (worst, losses)
}
