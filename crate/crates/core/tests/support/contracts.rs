//! Contracts of effective invariance, the histogram probe, the learning
//! rate rules and layer freezing.

use maect::data::{generate_toy, ToySpec};
use maect::eval::{
    color_histogram_target, effective_invariance, histogram_probe_error, mean_effective_invariance,
    uniform_baseline,
};
use maect::nnclr::{Head, HeadConfig};
use maect::optim::{lr_schedule, scaled_lr};
use maect::tuning::{contrastive_tune, Stage, StageConfig};
use maect::vit::{Image, Pooling, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct EiReport {
    /// Largest EI over disagreeing predictions.
    pub disagreement: f64,
    /// |EI((c, 0.8), (c, 0.5)) - sqrt(0.4)|
    pub agreement_error: f64,
    /// |batch EI - mean of per-sample EI| over random batches.
    pub aggregation_error: f64,
}

pub fn ei_contract(seed: u64) -> EiReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = |rng: &mut ChaCha8Rng| (rng.random_range(0..5usize), rng.random_range(0.0..=1.0));
    let mut disagreement: f64 = 0.0;
    let mut aggregation_error: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (pred(&mut rng), pred(&mut rng));
        if a.0 != b.0 {
            disagreement = disagreement.max(effective_invariance(a, b).unwrap());
        }
    }
    for _ in 0..100 {
        let pairs: Vec<_> = (0..rng.random_range(1..50))
            .map(|_| (pred(&mut rng), pred(&mut rng)))
            .collect();
        let mean = pairs
            .iter()
            .map(|(a, b)| effective_invariance(*a, *b).unwrap())
            .sum::<f64>()
            / pairs.len() as f64;
        aggregation_error =
            aggregation_error.max((mean_effective_invariance(&pairs).unwrap() - mean).abs());
    }
    EiReport {
        disagreement,
        agreement_error: (effective_invariance((3, 0.8), (3, 0.5)).unwrap() - 0.4f64.sqrt()).abs(),
        aggregation_error,
    }
}

pub struct HistogramReport {
    pub uniform_score: f64,
    pub perfect_score: f64,
    /// Largest |sum of a channel's histogram - 1|.
    pub channel_sum_error: f64,
}

pub fn histogram_contract(seed: u64) -> HistogramReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = 64;
    let images: Vec<Image> = (0..40)
        .map(|_| {
            let size = rng.random_range(1..20);
            Image::new(
                size,
                3,
                (0..size * size * 3)
                    .map(|_| rng.random_range(0.0..=1.0))
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let targets: Vec<Vec<f64>> = images
        .iter()
        .map(|i| color_histogram_target(i, bins).unwrap())
        .collect();
    let channel_sum_error = targets
        .iter()
        .flat_map(|t| t.chunks(bins).map(|c| (c.iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max);
    let baseline = uniform_baseline(&targets, bins).unwrap();
    let uniform: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| vec![1.0 / bins as f64; t.len()])
        .collect();
    HistogramReport {
        uniform_score: histogram_probe_error(&uniform, &targets, baseline).unwrap(),
        perfect_score: histogram_probe_error(&targets, &targets, baseline).unwrap(),
        channel_sum_error,
    }
}

pub struct ScheduleReport {
    pub scaled: f64,
    /// Multipliers at the first step, the end of warmup and the last step.
    pub endpoints: [f64; 3],
}

pub fn schedule_contract() -> ScheduleReport {
    let (total, warmup) = (1000, 0.1);
    ScheduleReport {
        scaled: scaled_lr(1e-4, 1024, 2).unwrap(),
        endpoints: [
            lr_schedule(0, total, warmup),
            lr_schedule(100, total, warmup),
            lr_schedule(total, total, warmup),
        ],
    }
}

/// Runs a short contrastive tuning and reports whether every frozen
/// parameter kept its hash and every trainable one changed.
pub fn frozen_blocks_preserved(seed: u64) -> (bool, bool) {
    let vit = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        depth: 4,
        heads: 2,
        mlp_ratio: 2,
        pooling: Pooling::Cls,
        cls_pos_embed: false,
    };
    let spec = ToySpec {
        n_classes: 3,
        train_per_class: 8,
        test_per_class: 1,
        image_size: 8,
    };
    let (train, _) = generate_toy(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = vit.init(&mut rng).unwrap();
    let hc = HeadConfig {
        input_dim: 8,
        proj_hidden: 8,
        proj_out: 4,
        pred_hidden: 8,
    };
    let head = Head::init(hc.clone(), &mut rng);
    let cfg = StageConfig {
        epochs: 2,
        batch_size: 6,
        k: 2,
        frozen_blocks: 2,
        queue_capacity: 12,
        encoder_ema: 0.5,
        base_lr: 1e-2,
        seed,
        ..StageConfig::defaults(Stage::Ct)
    };
    let out = contrastive_tune(&encoder, Some(&head), &vit, &hc, &cfg, &train, |_| {}).unwrap();
    // Two frozen blocks: the embedding and blocks 0 and 1.
    let frozen = |n: &str| {
        ["patch_embed.", "cls_token", "blocks.0.", "blocks.1."]
            .iter()
            .any(|p| n.starts_with(p))
    };
    let frozen_same = encoder.fingerprint_where(frozen) == out.encoder.fingerprint_where(frozen);
    let trainable_moved = encoder
        .iter()
        .filter(|(n, _)| !frozen(n))
        .all(|(n, v)| out.encoder.get(n).unwrap() != v);
    (frozen_same, trainable_moved)
}
