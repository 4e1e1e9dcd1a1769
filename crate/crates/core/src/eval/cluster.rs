//! k-means, Hungarian matching, cluster accuracy, silhouette and the
//! information-theoretic / pair-counting partition scores.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

/// Points above this count are subsampled before computing silhouettes.
pub const SILHOUETTE_MAX_POINTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
}

/// Best restart plus the final inertia of every restart.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOutput {
    pub best: ClusterResult,
    pub restart_inertias: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seeding(x: &Tensor, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centers = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn assign(x: &Tensor, centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (0..x.rows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist(x.row(i), ctr);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

/// One Lloyd run from k-means++ seeding.
pub fn kmeans_single(x: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<ClusterResult> {
    let (n, d) = (x.rows(), x.cols());
    if k < 1 || k > n {
        return Err(Error::invalid(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let mut rng = rng_for(seed, "kmeans");
    let mut centers = plus_plus_seeding(x, k, &mut rng);
    let (mut labels, mut dist) = assign(x, &centers);
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            sums[c].iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Reseed an empty cluster at the point farthest from its centre.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a free point");
                taken[far] = true;
                centers[c] = x.row(far).to_vec();
            }
        }
        let (next, nd) = assign(x, &centers);
        let stable = next == labels;
        labels = next;
        dist = nd;
        if stable {
            break;
        }
    }
    Ok(ClusterResult {
        assignment: labels,
        inertia: dist.iter().sum(),
        seed,
    })
}

/// Minimum-inertia result over `n_restarts` independently seeded runs.
pub fn kmeans(x: &Tensor, n_clusters: usize, n_restarts: usize, seed: u64) -> Result<KMeansOutput> {
    if n_clusters < 1 {
        return Err(Error::invalid("n_clusters must be at least 1"));
    }
    if n_restarts < 1 {
        return Err(Error::invalid("n_restarts must be at least 1"));
    }
    let mut best: Option<ClusterResult> = None;
    let mut inertias = Vec::with_capacity(n_restarts);
    for r in 0..n_restarts {
        let res = kmeans_single(
            x,
            n_clusters,
            derive_seed(seed, &format!("restart/{r}")),
            300,
        )?;
        inertias.push(res.inertia);
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(KMeansOutput {
        best: best.expect("at least one restart"),
        restart_inertias: inertias,
    })
}

/// Minimum-cost perfect matching on a square cost matrix (potentials
/// method, O(n^3)). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("hungarian needs a square cost matrix"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    Ok(row_to_col)
}

fn dense_ids(v: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &x in v {
        let next = map.len();
        map.entry(x).or_insert(next);
    }
    (v.iter().map(|x| map[x]).collect(), map.len())
}

fn contingency(a: &[usize], b: &[usize]) -> Result<(Vec<Vec<usize>>, usize, usize)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "partitions of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("partitions are empty"));
    }
    let (a, ka) = dense_ids(a);
    let (b, kb) = dense_ids(b);
    let mut m = vec![vec![0; kb]; ka];
    for (x, y) in a.iter().zip(&b) {
        m[*x][*y] += 1;
    }
    Ok((m, ka, kb))
}

/// Best fraction of agreeing samples over one-to-one cluster-to-class maps.
pub fn cluster_accuracy(assignment: &[usize], labels: &[usize]) -> Result<f64> {
    let (m, ka, kb) = contingency(assignment, labels)?;
    let size = ka.max(kb);
    let mut cost = vec![vec![0.0; size]; size];
    for i in 0..ka {
        for j in 0..kb {
            cost[i][j] = -(m[i][j] as f64);
        }
    }
    let matching = hungarian(&cost)?;
    let hit: usize = (0..ka)
        .filter(|&i| matching[i] < kb)
        .map(|i| m[i][matching[i]])
        .sum();
    Ok(hit as f64 / assignment.len() as f64)
}

/// Mean silhouette with Euclidean distances. Samples in singleton classes
/// score 0. Sets above [`SILHOUETTE_MAX_POINTS`] are subsampled with a
/// fixed seed.
pub fn silhouette(x: &Tensor, labels: &[usize]) -> Result<f64> {
    if x.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} points but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let idx: Vec<usize> = if x.rows() > SILHOUETTE_MAX_POINTS {
        let mut rng = rng_for(0, "silhouette/subsample");
        let mut s = sample(&mut rng, x.rows(), SILHOUETTE_MAX_POINTS).into_vec();
        s.sort_unstable();
        s
    } else {
        (0..x.rows()).collect()
    };
    let sub: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let (lab, k) = dense_ids(&sub);
    if k < 2 {
        return Err(Error::invalid("silhouette needs at least two classes"));
    }
    let n = idx.len();
    let mut counts = vec![0usize; k];
    lab.iter().for_each(|&l| counts[l] += 1);
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[lab[j]] += sq_dist(x.row(idx[i]), x.row(idx[j])).sqrt();
            }
        }
        let own = lab[i];
        if counts[own] == 1 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Normalised, adjusted mutual information and adjusted Rand index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionScores {
    pub nmi: f64,
    pub ami: f64,
    pub ari: f64,
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Expected mutual information under the hypergeometric model.
fn expected_mi(a: &[usize], b: &[usize], n: usize) -> f64 {
    let mut lf = vec![0.0; n + 1];
    for i in 1..=n {
        lf[i] = lf[i - 1] + (i as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (ai as f64 * bj as f64)).ln();
                let logp = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj]
                    - lf[n]
                    - lf[nij]
                    - lf[ai - nij]
                    - lf[bj - nij]
                    - lf[n + nij - ai - bj];
                emi += term * logp.exp();
            }
        }
    }
    emi
}

/// NMI (arithmetic-mean normalisation), AMI and ARI of two partitions.
pub fn nmi_ami_ari(assignment: &[usize], labels: &[usize]) -> Result<PartitionScores> {
    let (m, ka, kb) = contingency(assignment, labels)?;
    let n = assignment.len();
    let nf = n as f64;
    let a: Vec<usize> = m.iter().map(|r| r.iter().sum()).collect();
    let b: Vec<usize> = (0..kb).map(|j| m.iter().map(|r| r[j]).sum()).collect();

    let (ha, hb) = (entropy(&a, nf), entropy(&b, nf));
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            if m[i][j] > 0 {
                let x = m[i][j] as f64;
                mi += x / nf * (nf * x / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    let mi = mi.max(0.0);
    let mean_h = 0.5 * (ha + hb);

    // Equivalent up to relabelling (one non-zero cell per row and column);
    // this covers both partitions being trivial.
    let trivial = ka == kb && m.iter().all(|r| r.iter().filter(|&&x| x > 0).count() == 1);
    let nmi = if trivial || mean_h == 0.0 {
        1.0
    } else {
        mi / mean_h
    };
    let ami = if trivial {
        1.0
    } else {
        let emi = expected_mi(&a, &b, n);
        let mut den = mean_h - emi;
        den = if den < 0.0 {
            den.min(-f64::EPSILON)
        } else {
            den.max(f64::EPSILON)
        };
        (mi - emi) / den
    };

    let sum_comb: f64 = m.iter().flatten().map(|&x| comb2(x)).sum();
    let sa: f64 = a.iter().map(|&x| comb2(x)).sum();
    let sb: f64 = b.iter().map(|&x| comb2(x)).sum();
    let expected = sa * sb / comb2(n).max(f64::MIN_POSITIVE);
    let max_index = 0.5 * (sa + sb);
    let ari = if trivial || max_index == expected {
        1.0
    } else {
        (sum_comb - expected) / (max_index - expected)
    };

    Ok(PartitionScores { nmi, ami, ari })
}
