//! Effective invariance under rotations and colour changes, and the
//! colour-histogram regression probe that measures colour shortcuts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::rotate90;
use crate::error::{Error, Result};
use crate::eval::classify::{column_stats, LinearProbe};
use crate::optim::AdamW;
use crate::params::Params;
use crate::seed::rng_for;
use crate::tuning::epoch_batches;
use crate::vit::Image;

/// `sqrt(p * p_t)` when both predictions name the same class, else 0.
pub fn effective_invariance(pred: (usize, f64), pred_t: (usize, f64)) -> Result<f64> {
    for p in [pred.1, pred_t.1] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("confidence {p} outside [0, 1]")));
        }
    }
    Ok(if pred.0 == pred_t.0 {
        (pred.1 * pred_t.1).sqrt()
    } else {
        0.0
    })
}

/// A predicted class and its confidence.
pub type Prediction = (usize, f64);

/// Mean EI over paired predictions.
pub fn mean_effective_invariance(pairs: &[(Prediction, Prediction)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no predictions to aggregate"));
    }
    let mut s = 0.0;
    for (a, b) in pairs {
        s += effective_invariance(*a, *b)?;
    }
    Ok(s / pairs.len() as f64)
}

/// Input transformations for the invariance evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EiTransform {
    Rot90,
    Rot180,
    Rot270,
    Brightness,
    Contrast,
    Hue,
    Saturation,
}

impl EiTransform {
    pub const ALL: [EiTransform; 7] = [
        EiTransform::Rot90,
        EiTransform::Rot180,
        EiTransform::Rot270,
        EiTransform::Brightness,
        EiTransform::Contrast,
        EiTransform::Hue,
        EiTransform::Saturation,
    ];

    pub fn is_rotation(self) -> bool {
        matches!(
            self,
            EiTransform::Rot90 | EiTransform::Rot180 | EiTransform::Rot270
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            EiTransform::Rot90 => "rot90",
            EiTransform::Rot180 => "rot180",
            EiTransform::Rot270 => "rot270",
            EiTransform::Brightness => "brightness",
            EiTransform::Contrast => "contrast",
            EiTransform::Hue => "hue",
            EiTransform::Saturation => "saturation",
        }
    }

    /// Fixed-strength transform of an RGB image in `[0, 1]`.
    pub fn apply(self, img: &Image) -> Image {
        match self {
            EiTransform::Rot90 => rotate90(img, 1),
            EiTransform::Rot180 => rotate90(img, 2),
            EiTransform::Rot270 => rotate90(img, 3),
            EiTransform::Brightness => per_pixel(img, |rgb| rgb.map(|v| v * 1.4)),
            EiTransform::Contrast => {
                let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
                per_pixel(img, |rgb| rgb.map(|v| mean + 0.5 * (v - mean)))
            }
            EiTransform::Hue => per_pixel(img, |rgb| {
                let (h, s, v) = rgb_to_hsv(rgb);
                hsv_to_rgb(((h + 0.25) % 1.0, s, v))
            }),
            EiTransform::Saturation => per_pixel(img, |rgb| {
                let (h, s, v) = rgb_to_hsv(rgb);
                hsv_to_rgb((h, s * 0.3, v))
            }),
        }
    }
}

fn per_pixel(img: &Image, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
    let mut out = img.clone();
    for px in out.data.chunks_mut(3) {
        let r = f([px[0], px[1], px[2]]);
        for (o, v) in px.iter_mut().zip(r) {
            *o = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb((h, s, v): (f64, f64, f64)) -> [f64; 3] {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Top class and its probability for every row of a probability matrix.
pub fn top_predictions(proba: &Tensor) -> Vec<(usize, f64)> {
    (0..proba.rows())
        .map(|r| {
            let row = proba.row(r);
            let mut best = 0;
            for (i, p) in row.iter().enumerate() {
                if *p > row[best] {
                    best = i;
                }
            }
            (best, row[best].clamp(0.0, 1.0))
        })
        .collect()
}

/// EI of a probe between original and transformed embeddings.
pub fn probe_effective_invariance(
    probe: &LinearProbe,
    original: &Tensor,
    transformed: &Tensor,
) -> Result<f64> {
    let a = top_predictions(&probe.predict_proba(original)?);
    let b = top_predictions(&probe.predict_proba(transformed)?);
    let pairs: Vec<_> = a.into_iter().zip(b).collect();
    mean_effective_invariance(&pairs)
}

/// Per-channel histogram over `bins` equal-width bins of `[0, 1]`; each
/// channel sums to one. Output length `channels * bins`.
pub fn color_histogram_target(image: &Image, bins: usize) -> Result<Vec<f64>> {
    if bins < 1 {
        return Err(Error::invalid("at least one histogram bin"));
    }
    let c = image.channels;
    let mut h = vec![0.0; c * bins];
    for px in image.data.chunks(c) {
        for (ch, v) in px.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
            }
            let b = ((v * bins as f64) as usize).min(bins - 1);
            h[ch * bins + b] += 1.0;
        }
    }
    let n = (image.size * image.size) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

fn mean_l1(pred: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != targets.len() || pred.is_empty() {
        return Err(Error::invalid(
            "predictions and targets must be non-empty and paired",
        ));
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::invalid("histogram lengths differ"));
        }
        s += p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>();
        n += p.len();
    }
    Ok(s / n as f64)
}

/// Mean L1 error of the uniform predictor (`1 / bins` everywhere).
pub fn uniform_baseline(targets: &[Vec<f64>], bins: usize) -> Result<f64> {
    let u: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| vec![1.0 / bins as f64; t.len()])
        .collect();
    mean_l1(&u, targets)
}

/// Mean L1 error relative to `baseline`, in percent.
pub fn histogram_probe_error(
    predictions: &[Vec<f64>],
    targets: &[Vec<f64>],
    baseline: f64,
) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::invalid("baseline must be positive"));
    }
    Ok(mean_l1(predictions, targets)? / baseline * 100.0)
}

/// Regression probe settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistProbeConfig {
    pub bins: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for HistProbeConfig {
    fn default() -> Self {
        HistProbeConfig {
            bins: 64,
            epochs: 30,
            batch_size: 256,
            lr: 1e-3,
        }
    }
}

/// Trains a linear map from standardised features to histograms with an L1
/// loss (AdamW, no decay) and returns the test error in percent of the
/// uniform predictor's error on the test set.
pub fn histogram_probe(
    train_x: &Tensor,
    train_t: &[Vec<f64>],
    test_x: &Tensor,
    test_t: &[Vec<f64>],
    cfg: &HistProbeConfig,
    seed: u64,
) -> Result<f64> {
    if train_x.rows() != train_t.len() || test_x.rows() != test_t.len() || train_t.is_empty() {
        return Err(Error::invalid(
            "features and histogram targets must be paired",
        ));
    }
    let (mean, std) = column_stats(train_x);
    let inv: Vec<f64> = std.iter().map(|s| 1.0 / (s * s + 1e-5).sqrt()).collect();
    let norm = |x: &Tensor| {
        let d = x.cols();
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = (*v - mean[i % d]) * inv[i % d];
        }
        y
    };
    let (xtr, xte) = (norm(train_x), norm(test_x));
    let (d, o) = (xtr.cols(), train_t[0].len());
    let mut params = Params::new();
    params.insert("weight", Tensor::zeros(&[d, o]));
    // Start at the uniform histogram.
    params.insert("bias", Tensor::filled(&[1, o], 1.0 / cfg.bins as f64));
    let mut opt = AdamW::new(0.0);
    let mut rng = rng_for(seed, "hist_probe/shuffle");
    let bs = cfg.batch_size.min(xtr.rows());
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(xtr.rows(), bs, &mut rng) {
            let rows: Vec<f64> = idx
                .iter()
                .flat_map(|&i| xtr.row(i).iter().copied())
                .collect();
            let tg: Vec<f64> = idx
                .iter()
                .flat_map(|&i| train_t[i].iter().copied())
                .collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(idx.len(), d, rows)?)?;
            let t = tape.constant(Tensor::matrix(idx.len(), o, tg)?)?;
            let w = tape.param(params.get("weight")?.clone())?;
            let b = tape.param(params.get("bias")?.clone())?;
            let y = tape.linear(x, w, b)?;
            let loss = tape.l1(y, t)?;
            let mut g = tape.backward(loss, Tensor::scalar(1.0))?;
            let mut grads = Params::new();
            grads.insert("weight", g.take(w).expect("weight grad"));
            grads.insert("bias", g.take(b).expect("bias grad"));
            opt.step(&mut params, &grads, |_| cfg.lr)?;
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(xte)?;
    let w = tape.constant(params.get("weight")?.clone())?;
    let b = tape.constant(params.get("bias")?.clone())?;
    let y = tape.linear(x, w, b)?;
    let pred = tape.value(y).to_rows();
    histogram_probe_error(&pred, test_t, uniform_baseline(test_t, cfg.bins)?)
}
