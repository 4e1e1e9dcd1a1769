//! Embedding extraction and the classifiers trained on frozen embeddings:
//! weighted k-NN, the linear probe and low-shot logistic regression.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{input_patches, Dataset};
use crate::error::{Error, Result};
use crate::nnclr::{project_eval, Head};
use crate::optim::lr_schedule;
use crate::params::{Bound, Params};
use crate::seed::rng_for;
use crate::tuning::epoch_batches;
use crate::vit::{encode, EncodeOpts, Image, ViTConfig};

/// Where an embedding set was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    RawEncoder,
    EmaEncoder,
    HeadProjector,
}

/// Per-sample representation vectors with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Tensor,
    pub labels: Option<Vec<usize>>,
    pub source: Source,
    pub layer: String,
}

impl EmbeddingSet {
    pub fn new(
        vectors: Tensor,
        labels: Option<Vec<usize>>,
        source: Source,
        layer: impl Into<String>,
    ) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::invalid("embeddings must be a matrix"));
        }
        if let Some(l) = &labels {
            if l.len() != vectors.rows() {
                return Err(Error::invalid(format!(
                    "{} labels for {} vectors",
                    l.len(),
                    vectors.rows()
                )));
            }
        }
        Ok(EmbeddingSet {
            vectors,
            labels,
            source,
            layer: layer.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self, what: &str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("{what} embeddings need labels")))
    }
}

const EXTRACT_BATCH: usize = 250;

/// Pooled encoder outputs of unaugmented images, in dataset order.
pub fn encode_images(encoder: &Params, vit: &ViTConfig, images: &[Image]) -> Result<Tensor> {
    per_batch(encoder, vit, images, |tape, pooled, _| {
        Ok(vec![tape.value(pooled).clone()])
    })
    .map(|mut v| v.remove(0))
}

/// CLS state after each block (before the final norm), one tensor per block.
pub fn encode_block_cls(
    encoder: &Params,
    vit: &ViTConfig,
    images: &[Image],
) -> Result<Vec<Tensor>> {
    per_batch(encoder, vit, images, |tape, _, blocks| {
        Ok(blocks.iter().map(|&b| tape.value(b).clone()).collect())
    })
}

fn per_batch(
    encoder: &Params,
    vit: &ViTConfig,
    images: &[Image],
    take: impl Fn(&Tape, crate::Var, &[crate::Var]) -> Result<Vec<Tensor>>,
) -> Result<Vec<Tensor>> {
    if images.is_empty() {
        return Err(Error::invalid("cannot embed an empty dataset"));
    }
    encoder.check_shapes(&vit.param_shapes())?;
    let mut parts: Vec<Vec<f64>> = Vec::new();
    let mut cols = Vec::new();
    for chunk in images.chunks(EXTRACT_BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let patches = input_patches(&refs, vit.patch_size)?;
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, encoder, |_| false)?;
        let e = encode(
            &mut tape,
            &b,
            "",
            vit,
            &patches,
            EncodeOpts {
                keep: None,
                collect_block_cls: true,
            },
        )?;
        let outs = take(&tape, e.pooled, &e.block_cls)?;
        if parts.is_empty() {
            parts = vec![Vec::new(); outs.len()];
            cols = outs.iter().map(Tensor::cols).collect();
        }
        for (p, o) in parts.iter_mut().zip(outs) {
            p.extend(o.into_data());
        }
    }
    parts
        .into_iter()
        .zip(cols)
        .map(|(d, c)| Tensor::matrix(images.len(), c, d))
        .collect()
}

/// Pooled representations of a dataset.
pub fn extract_embeddings(
    encoder: &Params,
    vit: &ViTConfig,
    data: &Dataset,
    source: Source,
) -> Result<EmbeddingSet> {
    let v = encode_images(encoder, vit, &data.images)?;
    EmbeddingSet::new(v, Some(data.labels.clone()), source, "pooled")
}

/// Normalised projector outputs of the pooled representations.
pub fn extract_head_embeddings(
    encoder: &Params,
    vit: &ViTConfig,
    head: &Head,
    data: &Dataset,
) -> Result<EmbeddingSet> {
    let v = encode_images(encoder, vit, &data.images)?;
    EmbeddingSet::new(
        project_eval(head, &v)?,
        Some(data.labels.clone()),
        Source::HeadProjector,
        "projector",
    )
}

/// Per-column mean and population standard deviation.
pub fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (c, v) in x.row(r).iter().enumerate() {
            var[c] += (v - mean[c]) * (v - mean[c]);
        }
    }
    (mean, var.iter().map(|v| (v / n as f64).sqrt()).collect())
}

/// Zero mean, unit standard deviation per dimension; constant dimensions
/// become zero.
pub fn standardize(set: &EmbeddingSet) -> EmbeddingSet {
    let (mean, std) = column_stats(&set.vectors);
    let d = set.vectors.cols();
    let mut v = set.vectors.clone();
    for (i, x) in v.data_mut().iter_mut().enumerate() {
        let c = i % d;
        *x = if std[c] > 0.0 {
            (*x - mean[c]) / std[c]
        } else {
            0.0
        };
    }
    EmbeddingSet {
        vectors: v,
        ..set.clone()
    }
}

fn l2_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let d = y.cols();
    for r in y.data_mut().chunks_mut(d) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
    y
}

fn gram(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(a.clone())?;
    let y = tape.constant(b.clone())?;
    let s = tape.matmul_t(x, y)?;
    Ok(tape.value(s).clone())
}

fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub predictions: Vec<usize>,
    /// `None` when the test set is unlabeled.
    pub accuracy: Option<f64>,
}

/// Cosine k-NN: each of the `k` most similar training vectors votes for its
/// class with its similarity. Ties between neighbours favour lower training
/// indices, ties between class scores the lowest class id.
pub fn knn_classify(train: &EmbeddingSet, test: &EmbeddingSet, k: usize) -> Result<KnnResult> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let labels = train.labels("training")?;
    if k > train.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds {} training vectors",
            train.len()
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let sims = gram(&l2_rows(&test.vectors), &l2_rows(&train.vectors))?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut predictions = Vec::with_capacity(test.len());
    for r in 0..test.len() {
        let s = sims.row(r);
        let cmp = |a: &usize, b: &usize| s[*b].total_cmp(&s[*a]).then(a.cmp(b));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        let mut scores = vec![0.0; n_classes];
        for &j in &order[..k] {
            scores[labels[j]] += s[j];
        }
        predictions.push(argmax_lowest(&scores));
    }
    let accuracy = test.labels.as_ref().map(|l| accuracy(&predictions, l));
    Ok(KnnResult {
        predictions,
        accuracy,
    })
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hit = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hit as f64 / labels.len() as f64
}

/// Linear probe hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_sweep: Vec<f64>,
    pub momentum: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            batch_size: 256,
            lr_sweep: (1..=10).rev().map(|i| i as f64 / 100.0).collect(),
            momentum: 0.9,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
        }
    }
}

/// Non-affine standardisation followed by a linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `d x classes`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Variance epsilon of the probe's standardisation (as in BatchNorm).
const PROBE_EPS: f64 = 1e-5;

impl LinearProbe {
    fn standardized(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) * self.inv_std[i % d];
        }
        y
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = gram(&self.standardized(x), &transpose(&self.weight))?;
        add_bias(&mut z, &self.bias);
        Ok(z)
    }

    /// Class probabilities.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.logits(x)?;
        let c = z.cols();
        for r in z.data_mut().chunks_mut(c) {
            crate::autodiff::softmax_in_place(r);
        }
        Ok(z)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows()).map(|r| argmax_lowest(z.row(r))).collect())
    }

    /// The standardisation absorbed into a single affine map `(W', b')`.
    pub fn folded(&self) -> (Tensor, Vec<f64>) {
        let (d, c) = (self.weight.rows(), self.weight.cols());
        let mut w = self.weight.clone();
        let mut b = self.bias.clone();
        for i in 0..d {
            for (j, bj) in b.iter_mut().enumerate().take(c) {
                let wij = self.weight.row(i)[j] * self.inv_std[i];
                w.row_mut(i)[j] = wij;
                *bj -= self.mean[i] * wij;
            }
        }
        (w, b)
    }
}

pub(crate) fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut d = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            d[j * r + i] = x.row(i)[j];
        }
    }
    Tensor::matrix(c, r, d).expect("transposed shape")
}

fn add_bias(z: &mut Tensor, b: &[f64]) {
    let c = z.cols();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v += b[i % c];
    }
}

/// Outcome of a probe sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub best_lr: f64,
    /// Test accuracy per swept rate; `None` where training diverged.
    pub per_lr: Vec<(f64, Option<f64>)>,
    pub probe: LinearProbe,
}

fn train_probe(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
    lr: f64,
    seed: u64,
) -> Result<Option<LinearProbe>> {
    let (mean, std) = column_stats(x);
    let inv_std: Vec<f64> = std
        .iter()
        .map(|s| 1.0 / (s * s + PROBE_EPS).sqrt())
        .collect();
    let d = x.cols();
    let mut probe = LinearProbe {
        mean,
        inv_std,
        weight: Tensor::zeros(&[d, n_classes]),
        bias: vec![0.0; n_classes],
    };
    let xs = probe.standardized(x);
    let bs = cfg.batch_size.min(x.rows());
    let spe = x.rows() / bs;
    let total = cfg.epochs * spe;
    let mut vel_w = vec![0.0; d * n_classes];
    let mut vel_b = vec![0.0; n_classes];
    let mut rng = rng_for(seed, "probe/shuffle");
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(x.rows(), bs, &mut rng) {
            let rows: Vec<f64> = idx
                .iter()
                .flat_map(|&i| xs.row(i).iter().copied())
                .collect();
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xb = tape.constant(Tensor::matrix(idx.len(), d, rows)?)?;
            let w = tape.param(probe.weight.clone())?;
            let b = tape.param(Tensor::matrix(1, n_classes, probe.bias.clone())?)?;
            let z = tape.linear(xb, w, b)?;
            let loss = tape.cross_entropy(z, &yb)?;
            if !tape.value(loss).item().is_finite() {
                return Ok(None);
            }
            let g = tape.backward(loss, Tensor::scalar(1.0))?;
            let rate = lr * lr_schedule(step, total, cfg.warmup_fraction);
            let gw = g.get(w).expect("weight gradient");
            let gb = g.get(b).expect("bias gradient");
            for ((p, v), gi) in probe
                .weight
                .data_mut()
                .iter_mut()
                .zip(&mut vel_w)
                .zip(gw.data())
            {
                *v = cfg.momentum * *v + gi + cfg.weight_decay * *p;
                *p -= rate * *v;
            }
            for ((p, v), gi) in probe.bias.iter_mut().zip(&mut vel_b).zip(gb.data()) {
                *v = cfg.momentum * *v + gi;
                *p -= rate * *v;
            }
            step += 1;
        }
    }
    let finite = probe.weight.is_finite() && probe.bias.iter().all(|v| v.is_finite());
    Ok(finite.then_some(probe))
}

/// Trains one probe per swept learning rate and reports the best test
/// accuracy. Rates that diverge are skipped.
pub fn linear_probe(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let ytr = train.labels("training")?;
    let yte = test.labels("test")?;
    if cfg.lr_sweep.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid(
            "probe needs a non-empty sweep, epochs and batch size",
        ));
    }
    let n_classes = ytr.iter().chain(yte).max().map_or(0, |m| m + 1);
    let mut best: Option<(f64, f64, LinearProbe)> = None;
    let mut per_lr = Vec::new();
    for &lr in &cfg.lr_sweep {
        let acc = match train_probe(&train.vectors, ytr, n_classes, cfg, lr, seed)? {
            Some(p) => {
                let a = accuracy(&p.predict(&test.vectors)?, yte);
                if best.as_ref().is_none_or(|b| a > b.0) {
                    best = Some((a, lr, p));
                }
                Some(a)
            }
            None => None,
        };
        per_lr.push((lr, acc));
    }
    let (accuracy, best_lr, probe) =
        best.ok_or_else(|| Error::invalid("every probe learning rate diverged"))?;
    Ok(ProbeResult {
        accuracy,
        best_lr,
        per_lr,
        probe,
    })
}

/// Multinomial logistic regression with an L2 penalty on the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LogReg {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl LogReg {
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut z = gram(x, &transpose(&self.weight))?;
        add_bias(&mut z, &self.bias);
        Ok((0..z.rows()).map(|r| argmax_lowest(z.row(r))).collect())
    }
}

fn logreg_objective(
    x: &Tensor,
    y: &[usize],
    w: &Tensor,
    b: &[f64],
    l2: f64,
    grad: bool,
) -> Result<(f64, Option<(Tensor, Tensor)>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let wv = tape.param(w.clone())?;
    let bv = tape.param(Tensor::matrix(1, b.len(), b.to_vec())?)?;
    let z = tape.linear(xv, wv, bv)?;
    let ce = tape.cross_entropy(z, y)?;
    let sq = tape.mul(wv, wv)?;
    let pen = tape.sum(sq)?;
    let pen = tape.scale(pen, 0.5 * l2)?;
    let f = tape.add(ce, pen)?;
    let val = tape.value(f).item();
    if !grad {
        return Ok((val, None));
    }
    let mut g = tape.backward(f, Tensor::scalar(1.0))?;
    Ok((
        val,
        Some((g.take(wv).expect("w grad"), g.take(bv).expect("b grad"))),
    ))
}

/// Fits [`LogReg`] by full-batch gradient descent with backtracking line
/// search until the gradient norm drops below `1e-6` or `max_iter`.
pub fn fit_logreg(
    x: &Tensor,
    y: &[usize],
    n_classes: usize,
    l2: f64,
    max_iter: usize,
) -> Result<LogReg> {
    if !(l2 >= 0.0) {
        return Err(Error::invalid("l2 must be non-negative"));
    }
    let mut w = Tensor::zeros(&[x.cols(), n_classes]);
    let mut b = vec![0.0; n_classes];
    let mut t = 1.0;
    for _ in 0..max_iter {
        let (f, g) = logreg_objective(x, y, &w, &b, l2, true)?;
        let (gw, gb) = g.expect("gradient requested");
        let gn2: f64 = gw.data().iter().chain(gb.data()).map(|v| v * v).sum();
        if gn2.sqrt() < 1e-6 {
            break;
        }
        t *= 2.0;
        loop {
            let w2 = Tensor::new(
                w.shape().to_vec(),
                w.data()
                    .iter()
                    .zip(gw.data())
                    .map(|(a, g)| a - t * g)
                    .collect(),
            )?;
            let b2: Vec<f64> = b.iter().zip(gb.data()).map(|(a, g)| a - t * g).collect();
            let (f2, _) = logreg_objective(x, y, &w2, &b2, l2, false)?;
            if f2 <= f - 0.5 * t * gn2 || t < 1e-12 {
                w = w2;
                b = b2;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(LogReg { weight: w, bias: b })
}

/// Low-shot evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowShotConfig {
    /// Labeled samples per class; `None` uses the whole training set.
    pub shots: Option<usize>,
    pub l2: f64,
    pub split_seeds: Vec<u64>,
    pub max_iter: usize,
}

impl Default for LowShotConfig {
    fn default() -> Self {
        LowShotConfig {
            shots: Some(10),
            l2: 1e-3,
            split_seeds: vec![0, 1, 2],
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowShotResult {
    pub mean: f64,
    pub std: f64,
    pub per_split: Vec<f64>,
}

/// Per-class sample of `shots` training indices.
pub fn lowshot_split(
    labels: &[usize],
    n_classes: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = rng_for(seed, "lowshot/split");
    let mut out = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("class {c} has no training sample")));
        }
        members.shuffle(&mut rng);
        out.extend(members.into_iter().take(shots));
    }
    out.sort_unstable();
    Ok(out)
}

/// L2-regularised logistic regression on L2-normalised embeddings, averaged
/// over the configured splits.
pub fn logistic_regression_lowshot(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    cfg: &LowShotConfig,
) -> Result<LowShotResult> {
    let ytr = train.labels("training")?;
    let yte = test.labels("test")?;
    let n_classes = ytr.iter().chain(yte).max().map_or(0, |m| m + 1);
    if cfg.shots == Some(0) {
        return Err(Error::invalid("at least one shot per class"));
    }
    let xtr = l2_rows(&train.vectors);
    let xte = l2_rows(&test.vectors);
    let mut per_split = Vec::new();
    for &seed in &cfg.split_seeds {
        let idx = match cfg.shots {
            Some(s) => lowshot_split(ytr, n_classes, s, seed)?,
            None => {
                for c in 0..n_classes {
                    if !ytr.contains(&c) {
                        return Err(Error::invalid(format!("class {c} has no training sample")));
                    }
                }
                (0..ytr.len()).collect()
            }
        };
        let rows: Vec<f64> = idx
            .iter()
            .flat_map(|&i| xtr.row(i).iter().copied())
            .collect();
        let x = Tensor::matrix(idx.len(), xtr.cols(), rows)?;
        let y: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
        let model = fit_logreg(&x, &y, n_classes, cfg.l2, cfg.max_iter)?;
        per_split.push(accuracy(&model.predict(&xte)?, yte));
    }
    let n = per_split.len() as f64;
    let mean = per_split.iter().sum::<f64>() / n;
    let std = (per_split
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(LowShotResult {
        mean,
        std,
        per_split,
    })
}
