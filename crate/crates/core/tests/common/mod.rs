#![allow(dead_code)]

use hardboost::boost::{adapt_scale, HardnessStats};
use hardboost::data::{LabeledSample, Tier};
use hardboost::margin::{MarginParams, MarginPreset};
use hardboost::numeric::{Architecture, EmbeddingModel, Gradients};
use hardboost::trainer::batch_loss_and_grads;
use hardboost::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random loss instance: model, batch, non-uniform weights and the
/// per-sample scales they induce.
pub struct LossInstance {
    pub model: EmbeddingModel,
    pub samples: Vec<LabeledSample>,
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
    pub margin: MarginParams,
}

impl LossInstance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = rng.random_range(3..7);
        let classes = rng.random_range(3..6);
        let arch = Architecture {
            input_dim,
            hidden: vec![rng.random_range(3..6); rng.random_range(1..3)],
            embed_dim: rng.random_range(2..5),
            num_classes: classes,
        };
        let model = EmbeddingModel::init(&arch, &mut rng).unwrap();
        let n = rng.random_range(3..8);
        let samples: Vec<LabeledSample> = (0..n)
            .map(|i| LabeledSample {
                sample_id: i as u64,
                input: (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                class_id: rng.random_range(0..classes),
                tier: Tier::Easy,
            })
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let stats = HardnessStats::new(1.4, 0.6, 0.99, 1.0, 1e-6)
            .update_running_stats(&weights)
            .unwrap();
        let preset = MarginPreset::ALL[seed as usize % 3];
        let margin = preset.params(rng.random_range(4.0..12.0));
        let scales = weights
            .iter()
            .map(|&d| adapt_scale(margin.base_scale, stats.normalize_hardness(d)))
            .collect();
        Self {
            model,
            samples,
            weights,
            scales,
            margin,
        }
    }

    pub fn loss(&self, model: &EmbeddingModel) -> Result<(f64, Gradients)> {
        batch_loss_and_grads(
            model,
            self.samples.iter(),
            &self.weights,
            &self.scales,
            &self.margin,
        )
    }
}

pub fn small_gen(seed: u64) -> hardboost::GenConfig {
    hardboost::GenConfig {
        num_classes: 10,
        samples_per_class: 30,
        input_dim: 8,
        seed,
        ..Default::default()
    }
}

pub fn small_train(seed: u64) -> hardboost::TrainConfig {
    let mut c = hardboost::TrainConfig {
        epochs_per_round: 4,
        batch_size: 32,
        seed,
        ..Default::default()
    };
    c.model.hidden = vec![12, 12];
    c.model.embed_dim = 6;
    c.sgd.lr_drop_epochs = vec![2, 3];
    c
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn tree(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
