//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctkd::frontend::{generate_toy_corpus, ToyCorpusSpec, Utterance};
use ctkd::model::{DecoderConfig, EncoderConfig, Model, ModelConfig};
use ctkd::rnnt::Lattice;

/// A normalised random lattice and a label sequence that fits it.
pub fn random_lattice(frames: usize, labels: usize, vocab: usize, seed: u64) -> (Lattice, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits: Vec<f64> = (0..frames * (labels + 1) * (vocab + 1))
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let lat = Lattice::from_logits(frames, labels, vocab, &logits).expect("consistent sizes");
    let seq = (0..labels).map(|_| rng.random_range(1..=vocab)).collect();
    (lat, seq)
}

/// The toy-scale model shape used in the experiments, scaled by width.
pub fn toy_config(model_dim: usize, layers: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_dim: 40,
            num_layers: layers,
            model_dim,
            attention_heads: 4,
            ff_expansion: 4,
            conv_kernel: 15,
            pooling_layers: 2,
            dropout: 0.1,
            max_positions: 64,
        },
        decoder: DecoderConfig {
            num_layers: 1,
            hidden_dim: hidden,
            dropout: 0.1,
        },
        joint_dim: hidden,
        vocab_size: 8,
        blank_id: 0,
    }
}

pub fn toy_teacher() -> Model {
    Model::new(toy_config(44, 4, 64), 1).expect("valid config")
}

pub fn toy_student() -> Model {
    Model::new(toy_config(24, 3, 32), 2).expect("valid config")
}

/// A handful of toy utterances with five labels each.
pub fn toy_utterances(n: usize) -> Vec<Utterance> {
    generate_toy_corpus(&ToyCorpusSpec {
        num_utterances: n,
        label_len_range: (5, 5),
        frames_per_label: 4,
        noise_std: 1.0,
        ..ToyCorpusSpec::default()
    })
    .expect("valid spec")
}
