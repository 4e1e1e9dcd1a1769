//! NNCLR head: projector and predictor MLPs, the FIFO embedding queue
//! with top-k nearest-neighbour sampling, InfoNCE, parameter EMA, and the
//! symmetrised loss used for head initialisation and contrastive tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Params};
use crate::vit::init_params;

/// Momentum of BatchNorm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            input_dim: 64,
            proj_hidden: 256,
            proj_out: 64,
            pred_hidden: 512,
        }
    }
}

impl HeadConfig {
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (i, h, o, ph) = (
            self.input_dim,
            self.proj_hidden,
            self.proj_out,
            self.pred_hidden,
        );
        let mut v = Vec::new();
        let mut lin = |name: &str, fan_in: usize, fan_out: usize| {
            v.push((format!("{name}.weight"), vec![fan_in, fan_out]));
            v.push((format!("{name}.bias"), vec![1, fan_out]));
        };
        lin("projector.fc1", i, h);
        lin("projector.bn1", 1, h);
        lin("projector.fc2", h, h);
        lin("projector.bn2", 1, h);
        lin("projector.fc3", h, o);
        lin("projector.bn3", 1, o);
        lin("predictor.fc1", o, ph);
        lin("predictor.bn1", 1, ph);
        lin("predictor.fc2", ph, o);
        v
    }

    /// BatchNorm layers as (name, width).
    fn batch_norms(&self) -> [(&'static str, usize); 4] {
        [
            ("projector.bn1", self.proj_hidden),
            ("projector.bn2", self.proj_hidden),
            ("projector.bn3", self.proj_out),
            ("predictor.bn1", self.pred_hidden),
        ]
    }
}

/// Head parameters plus BatchNorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub params: Params,
    pub buffers: Params,
}

impl Head {
    pub fn init(config: HeadConfig, rng: &mut impl Rng) -> Self {
        let params = init_params(&config.param_shapes(), rng);
        let mut buffers = Params::new();
        for (name, width) in config.batch_norms() {
            buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[1, width]));
            buffers.insert(
                format!("{name}.running_var"),
                Tensor::filled(&[1, width], 1.0),
            );
        }
        Head {
            config,
            params,
            buffers,
        }
    }

    pub fn projector_params(&self) -> Params {
        let mut p = Params::new();
        p.merge_prefixed("projector.", &self.params.strip_prefix("projector."));
        p
    }

    /// Applies batch statistics to the running buffers.
    pub fn update_running(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        update_running(&mut self.buffers, stats)
    }
}

pub fn update_running(buffers: &mut Params, stats: &[(String, BatchStats)]) -> Result<()> {
    for (name, s) in stats {
        let m = buffers.get_mut(&format!("{name}.running_mean"))?;
        for (r, b) in m.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let v = buffers.get_mut(&format!("{name}.running_var"))?;
        for (r, b) in v.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the caller receives them for running updates.
    Train,
    /// Running statistics from the buffers.
    Eval,
}

fn bn(
    tape: &mut Tape,
    p: &Bound,
    buffers: &Params,
    name: &str,
    x: Var,
    mode: BnMode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let affine = Some((
        p.get(&format!("{name}.weight"))?,
        p.get(&format!("{name}.bias"))?,
    ));
    match mode {
        BnMode::Train => {
            let (y, s) = tape.batch_norm(x, affine)?;
            stats.push((name.to_string(), s));
            Ok(y)
        }
        BnMode::Eval => {
            let mean = buffers
                .get(&format!("{name}.running_mean"))?
                .data()
                .to_vec();
            let var = buffers.get(&format!("{name}.running_var"))?.data().to_vec();
            tape.batch_norm_eval(x, &mean, &var, affine)
        }
    }
}

fn lin(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    tape.linear(
        x,
        p.get(&format!("{name}.weight"))?,
        p.get(&format!("{name}.bias"))?,
    )
}

/// Three linear layers, each followed by BatchNorm; ReLU after the first
/// two. The output is not normalised.
pub fn projector(
    tape: &mut Tape,
    p: &Bound,
    buffers: &Params,
    x: Var,
    mode: BnMode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let mut h = x;
    for i in 1..=3 {
        h = lin(tape, p, &format!("projector.fc{i}"), h)?;
        h = bn(
            tape,
            p,
            buffers,
            &format!("projector.bn{i}"),
            h,
            mode,
            stats,
        )?;
        if i < 3 {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Linear, BatchNorm, ReLU, Linear.
pub fn predictor(
    tape: &mut Tape,
    p: &Bound,
    buffers: &Params,
    x: Var,
    mode: BnMode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let h = lin(tape, p, "predictor.fc1", x)?;
    let h = bn(tape, p, buffers, "predictor.bn1", h, mode, stats)?;
    let h = tape.relu(h)?;
    lin(tape, p, "predictor.fc2", h)
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "queue entries must be unit-norm, got norm {n}"
        )));
    }
    Ok(())
}

/// Fixed-capacity FIFO of unit-norm embeddings, stored as a ring buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    labels: Vec<Option<usize>>,
    len: usize,
    /// Physical slot that receives the next push.
    head: usize,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("queue capacity and dim must be positive"));
        }
        Ok(EmbeddingQueue {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            labels: vec![None; capacity],
            len: 0,
            head: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn physical(&self, logical: usize) -> usize {
        if self.len < self.capacity {
            logical
        } else {
            (self.head + logical) % self.capacity
        }
    }

    fn logical(&self, physical: usize) -> usize {
        if self.len < self.capacity {
            physical
        } else {
            (physical + self.capacity - self.head) % self.capacity
        }
    }

    /// Entry `i`, oldest first.
    pub fn get(&self, i: usize) -> &[f64] {
        assert!(i < self.len, "queue index out of range");
        let p = self.physical(i);
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[self.physical(i)]
    }

    /// All entries, oldest first.
    pub fn entries(&self) -> Vec<Vec<f64>> {
        (0..self.len).map(|i| self.get(i).to_vec()).collect()
    }

    /// Appends a batch newest-last, evicting the oldest entries on overflow.
    /// `labels` are only needed for class-restricted lookups.
    pub fn push(&mut self, batch: &[Vec<f64>], labels: Option<&[usize]>) -> Result<()> {
        if batch.len() > self.capacity {
            return Err(Error::invalid(format!(
                "batch of {} exceeds queue capacity {}",
                batch.len(),
                self.capacity
            )));
        }
        if let Some(l) = labels {
            if l.len() != batch.len() {
                return Err(Error::invalid("one label per queued embedding"));
            }
        }
        for v in batch {
            if v.len() != self.dim {
                return Err(Error::shape(
                    "queue_push",
                    format!("dim {} vs {}", v.len(), self.dim),
                ));
            }
            check_unit(v)?;
        }
        for (i, v) in batch.iter().enumerate() {
            let h = self.head;
            self.data[h * self.dim..(h + 1) * self.dim].copy_from_slice(v);
            self.labels[h] = labels.map(|l| l[i]);
            self.head = (h + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Samples uniformly among the `k` entries with the largest dot product
    /// with `z`; ties favour older entries. With `class_filter`, only entries
    /// of that class are candidates. Returns the entry index (oldest = 0).
    pub fn topk_nn(
        &self,
        z: &[f64],
        k: usize,
        rng: &mut impl Rng,
        class_filter: Option<usize>,
    ) -> Result<usize> {
        let sims: Vec<f64> = (0..self.len)
            .map(|i| self.get(i).iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        self.pick(&sims, k, rng, class_filter)
    }

    /// [`topk_nn`](Self::topk_nn) for every row of `z`, one draw per row.
    pub fn topk_nn_batch(
        &self,
        z: &Tensor,
        k: usize,
        rng: &mut impl Rng,
        class_filter: Option<&[usize]>,
    ) -> Result<Vec<usize>> {
        if z.cols() != self.dim {
            return Err(Error::shape(
                "topk_nn",
                format!("dim {} vs {}", z.cols(), self.dim),
            ));
        }
        if self.len == 0 {
            return Err(Error::QueueUnderflow { have: 0, k });
        }
        // sims[r][logical] via one GEMM over the physical layout.
        let mut tape = Tape::new();
        let zq = tape.constant(z.clone())?;
        let rows: Vec<f64> = (0..self.len)
            .flat_map(|i| self.get(i).iter().copied())
            .collect();
        let q = tape.constant(Tensor::matrix(self.len, self.dim, rows)?)?;
        let s = tape.matmul_t(zq, q)?;
        let sims = tape.value(s);
        (0..z.rows())
            .map(|r| self.pick(sims.row(r), k, rng, class_filter.map(|c| c[r])))
            .collect()
    }

    fn pick(
        &self,
        sims: &[f64],
        k: usize,
        rng: &mut impl Rng,
        class_filter: Option<usize>,
    ) -> Result<usize> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let mut cand: Vec<usize> = match class_filter {
            None => (0..self.len).collect(),
            Some(c) => (0..self.len)
                .filter(|&i| self.label(i) == Some(c))
                .collect(),
        };
        if cand.len() < k {
            return Err(Error::QueueUnderflow {
                have: cand.len(),
                k,
            });
        }
        let order = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
        }
        cand.sort_by(order);
        Ok(cand[rng.random_range(0..k)])
    }

    /// Entries as an `n x dim` tensor, oldest first.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let rows: Vec<f64> = idx
            .iter()
            .flat_map(|&i| self.get(i).iter().copied())
            .collect();
        Tensor::matrix(idx.len(), self.dim, rows)
    }

    /// Snapshot for checkpointing: entries (oldest first) and labels
    /// (`usize::MAX` encodes "none").
    pub fn snapshot(&self) -> Option<(Tensor, Vec<usize>)> {
        if self.len == 0 {
            return None;
        }
        let t = self.gather(&(0..self.len).collect::<Vec<_>>()).ok()?;
        let labels = (0..self.len)
            .map(|i| self.label(i).unwrap_or(usize::MAX))
            .collect();
        Some((t, labels))
    }

    /// Logical position of a physical slot; exposed for tests of the ring.
    #[doc(hidden)]
    pub fn logical_of(&self, physical: usize) -> usize {
        self.logical(physical)
    }
}

/// InfoNCE of `nn` against `p`: row `i` of `nn @ p^T / tau` is scored
/// against target `i`. `nn` is treated as constant by callers.
pub fn infonce(tape: &mut Tape, nn: Var, p: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (a, b) = (
        tape.value(nn).shape().to_vec(),
        tape.value(p).shape().to_vec(),
    );
    if a != b {
        return Err(Error::shape("infonce", format!("{a:?} vs {b:?}")));
    }
    let logits = tape.matmul_t(nn, p)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let targets: Vec<usize> = (0..a[0]).collect();
    tape.cross_entropy(logits, &targets)
}

/// `target <- t * target + (1 - t) * source`, elementwise.
pub fn ema_update(target: &mut Params, source: &Params, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("EMA momentum {t} outside [0, 1]")));
    }
    if target.len() != source.len() {
        return Err(Error::shape("ema_update", "parameter sets differ"));
    }
    for (name, tv) in target.iter_mut() {
        let sv = source.get(name)?;
        if sv.shape() != tv.shape() {
            return Err(Error::shape(
                "ema_update",
                format!("`{name}` {:?} vs {:?}", tv.shape(), sv.shape()),
            ));
        }
        for (a, b) in tv.data_mut().iter_mut().zip(sv.data()) {
            *a = t * *a + (1.0 - t) * b;
        }
    }
    Ok(())
}

/// Target parameters tracking a source by exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaPair {
    pub target: Params,
    pub momentum: f64,
}

impl EmaPair {
    pub fn new(initial: Params, momentum: f64) -> Self {
        EmaPair {
            target: initial,
            momentum,
        }
    }

    pub fn update(&mut self, source: &Params) -> Result<()> {
        ema_update(&mut self.target, source, self.momentum)
    }
}

/// Everything one symmetrised NNCLR evaluation produces.
pub struct NnclrOutput {
    pub loss: Var,
    /// Normalised queue-path embeddings of view 1, to be pushed after the step.
    pub z1: Vec<Vec<f64>>,
    pub nn1: Vec<usize>,
    pub nn2: Vec<usize>,
    /// Batch statistics of the online projector and predictor.
    pub online_stats: Vec<(String, BatchStats)>,
}

/// Queue-path projector and lookup settings.
pub struct LookupPath<'a> {
    /// Projector used for the queue path; `None` reuses the online
    /// projector's current values (no projector EMA).
    pub ema_projector: Option<&'a Params>,
    pub k: usize,
    pub tau: f64,
    /// Anchor classes for class-restricted lookups.
    pub labels: Option<&'a [usize]>,
}

/// Symmetrised NNCLR loss `L(nn1, p2)/2 + L(nn2, p1)/2` for encoder
/// outputs `y1`, `y2` of two views. Gradients reach only the online
/// projector/predictor (and whatever produced `y1`, `y2`).
#[allow(clippy::too_many_arguments)]
pub fn nnclr_loss_symmetrized(
    tape: &mut Tape,
    y1: Var,
    y2: Var,
    head: &Head,
    online: &Bound,
    queue: &EmbeddingQueue,
    path: &LookupPath<'_>,
    rng: &mut impl Rng,
) -> Result<NnclrOutput> {
    if queue.is_empty() {
        return Err(Error::QueueUnderflow { have: 0, k: path.k });
    }
    let mut online_stats = Vec::new();
    let mut p = Vec::with_capacity(2);
    for y in [y1, y2] {
        let g = projector(
            tape,
            online,
            &head.buffers,
            y,
            BnMode::Train,
            &mut online_stats,
        )?;
        let h = predictor(
            tape,
            online,
            &head.buffers,
            g,
            BnMode::Train,
            &mut online_stats,
        )?;
        p.push(tape.l2_normalize(h)?);
    }

    // The queue path runs in training mode, so its batch statistics are
    // used but never accumulated.
    let mut queue_stats = Vec::new();
    let ema_params = path
        .ema_projector
        .cloned()
        .unwrap_or_else(|| head.projector_params());
    let ema = Bound::bind(tape, &ema_params, |_| false)?;
    let mut z = Vec::with_capacity(2);
    for y in [y1, y2] {
        let y = tape.detach(y);
        let g = projector(
            tape,
            &ema,
            &head.buffers,
            y,
            BnMode::Train,
            &mut queue_stats,
        )?;
        let zn = tape.l2_normalize(g)?;
        z.push(tape.value(zn).clone());
    }

    let nn1 = queue.topk_nn_batch(&z[0], path.k, rng, path.labels)?;
    let nn2 = queue.topk_nn_batch(&z[1], path.k, rng, path.labels)?;
    let n1 = tape.constant(queue.gather(&nn1)?)?;
    let n2 = tape.constant(queue.gather(&nn2)?)?;
    let l12 = infonce(tape, n1, p[1], path.tau)?;
    let l21 = infonce(tape, n2, p[0], path.tau)?;
    let sum = tape.add(l12, l21)?;
    let loss = tape.scale(sum, 0.5)?;
    Ok(NnclrOutput {
        loss,
        z1: z[0].to_rows(),
        nn1,
        nn2,
        online_stats,
    })
}

/// Projector embedding (eval-mode BatchNorm) of encoder features, L2-normalised.
pub fn project_eval(head: &Head, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &head.projector_params(), |_| false)?;
    let x = tape.constant(features.clone())?;
    let mut stats = Vec::new();
    let g = projector(&mut tape, &b, &head.buffers, x, BnMode::Eval, &mut stats)?;
    let z = tape.l2_normalize(g)?;
    Ok(tape.value(z).clone())
}
