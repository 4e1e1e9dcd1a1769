//! Finite-difference checks of every tape primitive and of the composed
//! losses, on random small instances.

use maect::autodiff::{five_point_grad, relative_error_with_floor, Tape, Tensor, Var};
use maect::mae::{mae_loss, sample_mask};
use maect::nnclr::{infonce, nnclr_loss_symmetrized, EmbeddingQueue, Head, HeadConfig, LookupPath};
use maect::params::Bound;
use maect::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Gradient entries smaller than this times `max(1, |f|)` in both estimates
/// are compared absolutely; structurally zero gradients (a bias feeding
/// BatchNorm) otherwise measure only rounding noise, which grows with `|f|`.
pub const REL_FLOOR: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Entries bounded away from zero, for kinked functions.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Scalar-valued graph over the inputs; non-scalar results are reduced
/// with a fixed random weighting so every output entry matters.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn reduce(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

/// Max relative error between tape and central-difference gradients over
/// every input.
pub fn check(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.param(t.clone()).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let floor = REL_FLOOR * tape.value(out).item().abs().max(1.0);
    let grads = tape.backward(out, Tensor::scalar(1.0)).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = five_point_grad(
            |p| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        t.constant(if i == j { p.clone() } else { v.clone() })
                            .unwrap()
                    })
                    .collect();
                let o = build(&mut t, &vs)?;
                Ok(t.value(o).item())
            },
            x,
            FD_STEP,
        )
        .unwrap();
        let e = relative_error_with_floor(grads.get(vars[i]).unwrap(), &numeric, floor);
        worst = worst.max(e);
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(1..5),
    )
}

/// One random instance of the named check; returns its max relative error.
pub fn instance(name: &str, rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = dims(rng);
    match name {
        "matmul" => {
            let w = rand_tensor(rng, m, n);
            check(
                &[rand_tensor(rng, m, k), rand_tensor(rng, k, n)],
                &|t, v| {
                    let o = t.matmul(v[0], v[1])?;
                    reduce(t, o, &w)
                },
            )
        }
        "matmul_t" => {
            let w = rand_tensor(rng, m, n);
            check(
                &[rand_tensor(rng, m, k), rand_tensor(rng, n, k)],
                &|t, v| {
                    let o = t.matmul_t(v[0], v[1])?;
                    reduce(t, o, &w)
                },
            )
        }
        "add" | "sub" | "mul" => {
            let w = rand_tensor(rng, m, n);
            let op = name.to_string();
            check(
                &[rand_tensor(rng, m, n), rand_tensor(rng, m, n)],
                &|t, v| {
                    let o = match op.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    reduce(t, o, &w)
                },
            )
        }
        "add_row" => {
            let w = rand_tensor(rng, m, n);
            check(
                &[rand_tensor(rng, m, n), rand_tensor(rng, 1, n)],
                &|t, v| {
                    let o = t.add_row(v[0], v[1])?;
                    reduce(t, o, &w)
                },
            )
        }
        "scale" => {
            let w = rand_tensor(rng, m, n);
            let c = rng.random_range(-2.0..2.0);
            check(&[rand_tensor(rng, m, n)], &|t, v| {
                let o = t.scale(v[0], c)?;
                reduce(t, o, &w)
            })
        }
        "linear" => {
            let w = rand_tensor(rng, m, n);
            check(
                &[
                    rand_tensor(rng, m, k),
                    rand_tensor(rng, k, n),
                    rand_tensor(rng, 1, n),
                ],
                &|t, v| {
                    let o = t.linear(v[0], v[1], v[2])?;
                    reduce(t, o, &w)
                },
            )
        }
        "layer_norm" => {
            let n = n + 1;
            let w = rand_tensor(rng, m, n);
            check(
                &[
                    rand_tensor(rng, m, n),
                    rand_tensor(rng, 1, n),
                    rand_tensor(rng, 1, n),
                ],
                &|t, v| {
                    let o = t.layer_norm(v[0], v[1], v[2])?;
                    reduce(t, o, &w)
                },
            )
        }
        "batch_norm" => {
            let m = m + 1;
            let w = rand_tensor(rng, m, n);
            check(
                &[
                    rand_tensor(rng, m, n),
                    rand_tensor(rng, 1, n),
                    rand_tensor(rng, 1, n),
                ],
                &|t, v| {
                    let (o, _) = t.batch_norm(v[0], Some((v[1], v[2])))?;
                    reduce(t, o, &w)
                },
            )
        }
        "batch_norm_plain" => {
            let m = m + 1;
            let w = rand_tensor(rng, m, n);
            check(&[rand_tensor(rng, m, n)], &|t, v| {
                let (o, _) = t.batch_norm(v[0], None)?;
                reduce(t, o, &w)
            })
        }
        "batch_norm_eval" => {
            let w = rand_tensor(rng, m, n);
            let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
            check(
                &[
                    rand_tensor(rng, m, n),
                    rand_tensor(rng, 1, n),
                    rand_tensor(rng, 1, n),
                ],
                &|t, v| {
                    let o = t.batch_norm_eval(v[0], &mean, &var, Some((v[1], v[2])))?;
                    reduce(t, o, &w)
                },
            )
        }
        "softmax" | "gelu" | "l2_normalize" => {
            let w = rand_tensor(rng, m, n);
            let op = name.to_string();
            check(&[rand_tensor(rng, m, n)], &|t, v| {
                let o = match op.as_str() {
                    "softmax" => t.softmax(v[0])?,
                    "gelu" => t.gelu(v[0])?,
                    _ => t.l2_normalize(v[0])?,
                };
                reduce(t, o, &w)
            })
        }
        "relu" => {
            let w = rand_tensor(rng, m, n);
            check(&[away_from_zero(rng, m, n)], &|t, v| {
                let o = t.relu(v[0])?;
                reduce(t, o, &w)
            })
        }
        "attention" => {
            let batch = rng.random_range(1..3);
            let seq = rng.random_range(1..4);
            let heads = rng.random_range(1..3);
            let dim = heads * rng.random_range(1..3);
            let rows = batch * seq;
            let w = rand_tensor(rng, rows, dim);
            check(
                &[
                    rand_tensor(rng, rows, dim),
                    rand_tensor(rng, rows, dim),
                    rand_tensor(rng, rows, dim),
                ],
                &|t, v| {
                    let o = t.attention(v[0], v[1], v[2], batch, seq, heads)?;
                    reduce(t, o, &w)
                },
            )
        }
        "cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            check(&[rand_tensor(rng, m, n)], &|t, v| {
                t.cross_entropy(v[0], &targets)
            })
        }
        "mse" => check(
            &[rand_tensor(rng, m, n), rand_tensor(rng, m, n)],
            &|t, v| t.mse(v[0], v[1]),
        ),
        "l1" => {
            let b = rand_tensor(rng, m, n);
            let diff = away_from_zero(rng, m, n);
            let a = Tensor::matrix(
                m,
                n,
                b.data()
                    .iter()
                    .zip(diff.data())
                    .map(|(x, d)| x + d)
                    .collect(),
            )
            .unwrap();
            check(&[a, b], &|t, v| t.l1(v[0], v[1]))
        }
        "concat_rows" => {
            let m2 = rng.random_range(1..4);
            let w = rand_tensor(rng, m + m2, n);
            check(
                &[rand_tensor(rng, m, n), rand_tensor(rng, m2, n)],
                &|t, v| {
                    let o = t.concat_rows(&[v[0], v[1]])?;
                    reduce(t, o, &w)
                },
            )
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..rng.random_range(1..6))
                .map(|_| rng.random_range(0..m))
                .collect();
            let w = rand_tensor(rng, idx.len(), n);
            check(&[rand_tensor(rng, m, n)], &|t, v| {
                let o = t.gather_rows(v[0], &idx)?;
                reduce(t, o, &w)
            })
        }
        "slice_cols" => {
            let n = n + 1;
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            let w = rand_tensor(rng, m, len);
            check(&[rand_tensor(rng, m, n)], &|t, v| {
                let o = t.slice_cols(v[0], start, len)?;
                reduce(t, o, &w)
            })
        }
        "sum" => check(&[rand_tensor(rng, m, n)], &|t, v| t.sum(v[0])),
        "mean" => check(&[rand_tensor(rng, m, n)], &|t, v| t.mean(v[0])),
        "group_mean_rows" => {
            let g = rng.random_range(1..4);
            let w = rand_tensor(rng, m, n);
            check(&[rand_tensor(rng, m * g, n)], &|t, v| {
                let o = t.group_mean_rows(v[0], g)?;
                reduce(t, o, &w)
            })
        }
        "mae_loss" => {
            let batch = rng.random_range(1..3);
            let n_patches = rng.random_range(4..8);
            let pd = rng.random_range(2..5);
            let patches = rand_tensor(rng, batch * n_patches, pd);
            let masks: Vec<_> = (0..batch)
                .map(|_| sample_mask(n_patches, rng.random_range(0.25..0.6), rng).unwrap())
                .collect();
            if masks.iter().all(|m| m.masked.is_empty()) {
                return 0.0;
            }
            check(&[rand_tensor(rng, batch * n_patches, pd)], &|t, v| {
                mae_loss(t, v[0], &patches, &masks)
            })
        }
        "infonce" => {
            let tau = rng.random_range(0.1..1.0);
            check(
                &[rand_tensor(rng, m, n), rand_tensor(rng, m, n)],
                &|t, v| {
                    let a = t.l2_normalize(v[0])?;
                    let b = t.l2_normalize(v[1])?;
                    infonce(t, a, b, tau)
                },
            )
        }
        "nnclr_symmetrized" => nnclr_instance(rng),
        other => panic!("unknown check `{other}`"),
    }
}

/// Smallest |pre-activation| over the ReLUs of the online head.
fn relu_margin(head: &Head, y: &Tensor) -> f64 {
    let mut t = Tape::new();
    let p = |t: &mut Tape, n: &str| t.constant(head.params.get(n).unwrap().clone()).unwrap();
    let mut margin = f64::INFINITY;
    let mut h = t.constant(y.clone()).unwrap();
    let layer = |t: &mut Tape, h: Var, fc: &str, bn: &str, relu: bool, margin: &mut f64| {
        let (w, b) = (p(t, &format!("{fc}.weight")), p(t, &format!("{fc}.bias")));
        let z = t.linear(h, w, b).unwrap();
        let (g, be) = (p(t, &format!("{bn}.weight")), p(t, &format!("{bn}.bias")));
        let (o, _) = t.batch_norm(z, Some((g, be))).unwrap();
        if relu {
            *margin = t
                .value(o)
                .data()
                .iter()
                .fold(*margin, |m, v| m.min(v.abs()));
            t.relu(o).unwrap()
        } else {
            o
        }
    };
    h = layer(
        &mut t,
        h,
        "projector.fc1",
        "projector.bn1",
        true,
        &mut margin,
    );
    h = layer(
        &mut t,
        h,
        "projector.fc2",
        "projector.bn2",
        true,
        &mut margin,
    );
    h = layer(
        &mut t,
        h,
        "projector.fc3",
        "projector.bn3",
        false,
        &mut margin,
    );
    layer(
        &mut t,
        h,
        "predictor.fc1",
        "predictor.bn1",
        true,
        &mut margin,
    );
    margin
}

/// Gradients with respect to both views' encoder outputs and every head
/// parameter. Instances with a ReLU input near its kink are redrawn.
fn nnclr_instance(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        if let Some(e) = nnclr_draw(rng) {
            return e;
        }
    }
}

fn nnclr_draw(rng: &mut ChaCha8Rng) -> Option<f64> {
    let cfg = HeadConfig {
        input_dim: rng.random_range(3..6),
        proj_hidden: rng.random_range(4..8),
        proj_out: rng.random_range(3..6),
        pred_hidden: rng.random_range(4..8),
    };
    let mut head = Head::init(cfg.clone(), rng);
    // Non-trivial BatchNorm affines and biases.
    for (_, t) in head.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = rng.random_range(4..7);
    // One queue entry per class and class-restricted lookups: the
    // neighbour of every anchor is fixed, so the loss is smooth in every
    // input and the perturbed graphs stay on the same branch.
    let classes = batch + 1;
    let mut queue = EmbeddingQueue::new(classes, cfg.proj_out).unwrap();
    let entries: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.proj_out)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let queue_labels: Vec<usize> = (0..classes).collect();
    queue.push(&entries, Some(&queue_labels)).unwrap();
    let anchor_labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let tau = rng.random_range(0.1..1.0);
    let lookup_seed: u64 = rng.random();
    let names: Vec<String> = head.params.names().cloned().collect();
    let mut inputs = vec![
        rand_tensor(rng, batch, cfg.input_dim),
        rand_tensor(rng, batch, cfg.input_dim),
    ];
    if relu_margin(&head, &inputs[0]).min(relu_margin(&head, &inputs[1])) < 1e-2 {
        return None;
    }
    inputs.extend(names.iter().map(|n| head.params.get(n).unwrap().clone()));
    Some(check(&inputs, &|t, v| {
        let mut p = maect::Params::new();
        let mut bound_head = head.clone();
        for (i, n) in names.iter().enumerate() {
            p.insert(n.clone(), t.value(v[2 + i]).clone());
        }
        bound_head.params = p;
        let online = BoundView::new(&names, &v[2..]);
        let path = LookupPath {
            ema_projector: None,
            k: 1,
            tau,
            labels: Some(&anchor_labels),
        };
        let mut r = ChaCha8Rng::seed_from_u64(lookup_seed);
        let out =
            nnclr_loss_symmetrized(t, v[0], v[1], &bound_head, &online.0, &queue, &path, &mut r)?;
        Ok(out.loss)
    }))
}

/// A `Bound` over vars that already live on the tape.
struct BoundView(Bound);

impl BoundView {
    fn new(names: &[String], vars: &[Var]) -> Self {
        BoundView(Bound::from_vars(
            names.iter().cloned().zip(vars.iter().copied()),
        ))
    }
}

/// Every check with its instance count.
pub const CHECKS: &[&str] = &[
    "matmul",
    "matmul_t",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "linear",
    "layer_norm",
    "batch_norm",
    "batch_norm_plain",
    "batch_norm_eval",
    "softmax",
    "gelu",
    "relu",
    "l2_normalize",
    "attention",
    "cross_entropy",
    "mse",
    "l1",
    "concat_rows",
    "gather_rows",
    "slice_cols",
    "sum",
    "mean",
    "group_mean_rows",
    "mae_loss",
    "infonce",
    "nnclr_symmetrized",
];

/// Worst relative error of each check over `instances` random draws.
pub fn run_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    CHECKS
        .iter()
        .map(|name| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ maect::seed::derive_seed(0, name));
            let worst = (0..instances)
                .map(|_| instance(name, &mut rng))
                .fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}
