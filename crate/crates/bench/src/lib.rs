//! Fixtures shared by the benchmarks.

use maect::autodiff::Tensor;
use maect::nnclr::EmbeddingQueue;
use maect::vit::{Pooling, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// The desk-scale encoder.
pub fn desk_vit() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 8,
        channels: 3,
        embed_dim: 64,
        depth: 4,
        heads: 4,
        mlp_ratio: 4,
        pooling: Pooling::Cls,
        cls_pos_embed: false,
    }
}

pub fn full_queue(rng: &mut ChaCha8Rng, capacity: usize, dim: usize) -> EmbeddingQueue {
    let mut q = EmbeddingQueue::new(capacity, dim).unwrap();
    for chunk in unit_rows(rng, capacity, dim).chunks(256) {
        q.push(chunk, None).unwrap();
    }
    q
}
