//! Brute-force and closed-form references for the evaluation metrics.

use maect::autodiff::Tensor;
use maect::eval::{cluster_accuracy, nmi_ami_ari, silhouette};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best accuracy over every bijection between (padded) cluster and class ids.
pub fn brute_force_accuracy(assignment: &[usize], labels: &[usize]) -> f64 {
    let k = assignment.iter().chain(labels).max().map_or(0, |m| m + 1);
    permutations(k)
        .iter()
        .map(|perm| {
            assignment
                .iter()
                .zip(labels)
                .filter(|(a, l)| perm[**a] == **l)
                .count()
        })
        .max()
        .unwrap_or(0) as f64
        / assignment.len() as f64
}

/// Silhouette straight from the definition over a full distance matrix.
pub fn naive_silhouette(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = x.len();
    let dist = |i: usize, j: usize| {
        x[i].iter()
            .zip(&x[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let classes: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: usize| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
            others.iter().map(|&j| dist(i, j)).sum::<f64>() / others.len() as f64
        };
        if labels.iter().filter(|&&l| l == labels[i]).count() == 1 {
            continue;
        }
        let a = mean_to(labels[i]);
        let b = classes
            .iter()
            .filter(|&&c| c != labels[i])
            .map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

pub fn random_partition(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Cases where cluster accuracy differs from the permutation search.
pub fn accuracy_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .filter(|_| {
            let n = rng.random_range(1..40);
            let (ka, kb) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let a = random_partition(&mut rng, n, ka);
            let l = random_partition(&mut rng, n, kb);
            (cluster_accuracy(&a, &l).unwrap() - brute_force_accuracy(&a, &l)).abs() > 1e-12
        })
        .count()
}

/// Largest |silhouette - reference| over random labelled point sets.
pub fn silhouette_max_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|_| {
            let (n, d) = (rng.random_range(3..60), rng.random_range(1..6));
            let k = rng.random_range(2..6);
            let x: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let mut labels = random_partition(&mut rng, n, k);
            labels[0] = 0;
            labels[1] = 1;
            let t = Tensor::from_rows(&x).unwrap();
            (silhouette(&t, &labels).unwrap() - naive_silhouette(&x, &labels)).abs()
        })
        .fold(0.0, f64::max)
}

/// (assignment, labels, nmi, ami, ari). NMI and ARI follow from the
/// contingency tables by hand; AMI values are scikit-learn's.
#[allow(clippy::type_complexity)]
pub const CONTINGENCY_EXAMPLES: [(&[usize], &[usize], f64, f64, f64); 4] = [
    // cells {2, 0 | 1, 1 | 0, 2}: MI = (2/3) ln 2, H = ln 3 and ln 2;
    // ARI = (2 - 6/5) / (9/2 - 6/5) = 8/33
    (
        &[0, 0, 1, 1, 2, 2],
        &[0, 0, 0, 1, 1, 1],
        0.515_803_742_979_388_9,
        0.298_792_458_170_890_3,
        8.0 / 33.0,
    ),
    // independent halves: MI = 0; ARI = (0 - 2/3) / (2 - 2/3)
    (&[0, 1, 0, 1], &[0, 0, 1, 1], 0.0, -0.5, -0.5),
    // cells {2,0,0 | 2,2,0 | 0,0,2}: MI = ln 2, both H = 1.5 ln 2;
    // ARI = (4 - 16/7) / (8 - 16/7) = 3/10
    (
        &[0, 0, 1, 1, 1, 1, 2, 2],
        &[0, 0, 0, 0, 1, 1, 2, 2],
        2.0 / 3.0,
        0.485_220_118_006_266_5,
        0.3,
    ),
    // singletons against one block
    (&[0, 1, 2, 3], &[0, 0, 0, 0], 0.0, 0.0, 0.0),
];

/// Largest deviation from the contingency examples, and whether identical
/// partitions score exactly 1 on accuracy, NMI, AMI and ARI.
pub fn partition_examples(seed: u64) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    for (a, l, nmi, ami, ari) in CONTINGENCY_EXAMPLES {
        let s = nmi_ami_ari(a, l).unwrap();
        worst = worst
            .max((s.nmi - nmi).abs())
            .max((s.ami - ami).abs())
            .max((s.ari - ari).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identical = (0..50).all(|_| {
        let n = rng.random_range(2..50);
        let k = rng.random_range(1..8);
        let p = random_partition(&mut rng, n, k);
        let s = nmi_ami_ari(&p, &p).unwrap();
        cluster_accuracy(&p, &p).unwrap() == 1.0 && s.nmi == 1.0 && s.ami == 1.0 && s.ari == 1.0
    });
    (worst, identical)
}
