//! Independent recomputations of the NNCLR building blocks.

use std::collections::VecDeque;

use maect::autodiff::{Tape, Tensor};
use maect::nnclr::{infonce, EmbeddingQueue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Direct evaluation: `-1/n sum_i log(exp(s_ii) / sum_j exp(s_ij))` with
/// `s_ij = nn_i . p_j / tau`, no max shift.
pub fn naive_infonce(nn: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> f64 {
    let n = nn.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|j| (dot(&nn[i], &p[j]) / tau).exp()).sum();
        total -= ((dot(&nn[i], &p[i]) / tau).exp() / denom).ln();
    }
    total / n as f64
}

pub fn tape_infonce(nn: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(nn).unwrap()).unwrap();
    let b = t.constant(Tensor::from_rows(p).unwrap()).unwrap();
    let l = infonce(&mut t, a, b, tau).unwrap();
    t.value(l).item()
}

/// Largest |stable - naive| over random batches with `n <= 16`, `d <= 32`,
/// and the loss of a single pair.
pub fn infonce_oracle(batches: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..batches {
        let n = rng.random_range(1..=16);
        let d = rng.random_range(1..=32);
        let tau = rng.random_range(0.05..1.0);
        let nn = unit_rows(&mut rng, n, d);
        let p = unit_rows(&mut rng, n, d);
        worst = worst.max((tape_infonce(&nn, &p, tau) - naive_infonce(&nn, &p, tau)).abs());
    }
    let single = unit_rows(&mut rng, 2, 8);
    let one = tape_infonce(&single[..1], &single[1..], 0.1);
    (worst, one)
}

/// Outcome of the lookup semantics checks.
pub struct TopkReport {
    pub non_member: usize,
    pub argmax_mismatch: usize,
    /// Pick frequencies of the entries with similarity 0.9, 0.5, 0.1.
    pub frequencies: [f64; 3],
}

pub fn topk_semantics(cases: usize, draws: usize, seed: u64) -> TopkReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut non_member, mut argmax_mismatch) = (0, 0);
    for _ in 0..cases {
        let d = rng.random_range(2..8);
        let cap = rng.random_range(1..20);
        let mut q = EmbeddingQueue::new(cap, d).unwrap();
        let fill = rng.random_range(1..=2 * cap);
        for chunk in unit_rows(&mut rng, fill, d).chunks(cap) {
            q.push(chunk, None).unwrap();
        }
        let z = &unit_rows(&mut rng, 1, d)[0];
        let k = rng.random_range(1..=q.len());
        if q.topk_nn(z, k, &mut rng, None).unwrap() >= q.len() {
            non_member += 1;
        }
        let sims: Vec<f64> = q
            .entries()
            .iter()
            .map(|e| e.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        let best = (0..sims.len()).fold(0, |b, i| if sims[i] > sims[b] { i } else { b });
        if q.topk_nn(z, 1, &mut rng, None).unwrap() != best {
            argmax_mismatch += 1;
        }
    }

    // Entries at angles whose cosine with the anchor is 0.9, 0.5, 0.1.
    let mut q = EmbeddingQueue::new(3, 2).unwrap();
    let entries: Vec<Vec<f64>> = [0.9f64, 0.5, 0.1]
        .iter()
        .map(|&c| vec![c, (1.0 - c * c).sqrt()])
        .collect();
    q.push(&entries, None).unwrap();
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[q.topk_nn(&[1.0, 0.0], 2, &mut rng, None).unwrap()] += 1;
    }
    TopkReport {
        non_member,
        argmax_mismatch,
        frequencies: counts.map(|c| c as f64 / draws as f64),
    }
}

/// One queue operation: push `n` fresh entries, labelled or not.
#[derive(Clone, Debug)]
pub struct PushOp {
    pub n: usize,
    pub labelled: bool,
}

/// Replays `ops` on a queue and on a `VecDeque` model, checking length,
/// contents, order and labels after every push. Entries are tagged by a
/// running counter so every one is distinct.
pub fn queue_matches_model(capacity: usize, ops: &[PushOp]) -> Result<(), String> {
    let mut q = EmbeddingQueue::new(capacity, 2).map_err(|e| e.to_string())?;
    let mut model: VecDeque<(Vec<f64>, Option<usize>)> = VecDeque::new();
    let mut counter = 0usize;
    for (step, op) in ops.iter().enumerate() {
        let batch: Vec<Vec<f64>> = (0..op.n)
            .map(|i| {
                let a = (counter + i) as f64 * 0.001;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let labels: Vec<usize> = (counter..counter + op.n).collect();
        counter += op.n;
        let result = q.push(&batch, op.labelled.then_some(labels.as_slice()));
        if op.n > capacity {
            if result.is_ok() {
                return Err(format!("step {step}: oversized push accepted"));
            }
            counter -= op.n;
            continue;
        }
        result.map_err(|e| format!("step {step}: {e}"))?;
        for (i, v) in batch.into_iter().enumerate() {
            model.push_back((v, op.labelled.then_some(labels[i])));
            if model.len() > capacity {
                model.pop_front();
            }
        }
        if q.len() != model.len() || q.len() > capacity {
            return Err(format!(
                "step {step}: len {} vs model {}",
                q.len(),
                model.len()
            ));
        }
        for (i, (v, l)) in model.iter().enumerate() {
            if q.get(i) != v.as_slice() || q.label(i) != *l {
                return Err(format!("step {step}: entry {i} differs from the model"));
            }
        }
    }
    Ok(())
}

/// Random operation sequences for the queue law check.
pub fn random_queue_case(rng: &mut ChaCha8Rng) -> (usize, Vec<PushOp>) {
    let capacity = rng.random_range(1..12);
    let ops = (0..rng.random_range(1..30))
        .map(|_| PushOp {
            n: rng.random_range(0..=capacity + 1),
            labelled: rng.random_bool(0.5),
        })
        .collect();
    (capacity, ops)
}
