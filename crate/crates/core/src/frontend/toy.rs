use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FeatureMatrix, Utterance};
use crate::error::{Error, Result};

/// Synthetic labelled corpus: each label is a fixed random vector held for
/// `frames_per_label` frames, plus Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    /// Labels are `1..=vocab_size`.
    pub vocab_size: usize,
    pub num_utterances: usize,
    /// Inclusive.
    pub label_len_range: (usize, usize),
    pub frames_per_label: usize,
    pub noise_std: f64,
    /// Keys the label embedding table; train and test sets must share it.
    pub synthesizer_seed: u64,
    /// Keys label sampling and noise.
    pub sample_seed: u64,
    pub dims: usize,
    pub id_prefix: String,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            vocab_size: 8,
            num_utterances: 200,
            label_len_range: (3, 8),
            frames_per_label: 8,
            noise_std: 0.5,
            synthesizer_seed: 1,
            sample_seed: 2,
            dims: 40,
            id_prefix: "utt".into(),
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.label_len_range;
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("toy vocab_size {} < 2", self.vocab_size)));
        }
        if lo > hi || lo == 0 {
            return Err(Error::Config(format!("label length range {lo}..={hi} is empty or starts at 0")));
        }
        if self.frames_per_label == 0 || self.dims == 0 {
            return Err(Error::Config("frames_per_label and dims must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} is negative", self.noise_std)));
        }
        Ok(())
    }
}

/// `(vocab_size + 1) x dims` table; row `k` is the embedding of label `k`
/// (row 0 unused).
pub fn label_embeddings(spec: &ToyCorpusSpec) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.synthesizer_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..=spec.vocab_size)
        .map(|_| (0..spec.dims).map(|_| normal.sample(&mut rng) as f32).collect())
        .collect()
}

pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let table = label_embeddings(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let (lo, hi) = spec.label_len_range;
    let mut out = Vec::with_capacity(spec.num_utterances);
    for i in 0..spec.num_utterances {
        let len = rng.random_range(lo..=hi);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(1..=spec.vocab_size)).collect();
        let frames = len * spec.frames_per_label;
        let mut values = Vec::with_capacity(frames * spec.dims);
        for &k in &labels {
            for _ in 0..spec.frames_per_label {
                for &e in &table[k] {
                    let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    values.push((e as f64 + n) as f32);
                }
            }
        }
        out.push(Utterance {
            id: format!("{}-{i:05}", spec.id_prefix),
            features: FeatureMatrix::new(frames, spec.dims, values)?,
            labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_frame_recovers_labels() {
        let spec = ToyCorpusSpec {
            noise_std: 0.0,
            frames_per_label: 1,
            num_utterances: 20,
            ..ToyCorpusSpec::default()
        };
        let table = label_embeddings(&spec);
        for utt in generate_toy_corpus(&spec).unwrap() {
            assert_eq!(utt.features.frames(), utt.labels.len());
            for (t, &k) in utt.labels.iter().enumerate() {
                assert_eq!(utt.features.row(t), &table[k][..]);
                // nearest neighbour over labels 1..=V
                let nearest = (1..=spec.vocab_size)
                    .min_by(|&a, &b| {
                        let da: f32 = table[a].iter().zip(utt.features.row(t)).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f32 = table[b].iter().zip(utt.features.row(t)).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(nearest, k);
            }
        }
    }

    #[test]
    fn deterministic() {
        let spec = ToyCorpusSpec::default();
        assert_eq!(generate_toy_corpus(&spec).unwrap(), generate_toy_corpus(&spec).unwrap());
        let other = ToyCorpusSpec { sample_seed: 3, ..spec.clone() };
        assert_ne!(generate_toy_corpus(&spec).unwrap(), generate_toy_corpus(&other).unwrap());
    }

    #[test]
    fn label_histogram_is_roughly_uniform() {
        let spec = ToyCorpusSpec {
            vocab_size: 8,
            num_utterances: 200,
            label_len_range: (3, 8),
            ..ToyCorpusSpec::default()
        };
        let corpus = generate_toy_corpus(&spec).unwrap();
        let mut counts = [0usize; 9];
        for u in &corpus {
            assert!((3..=8).contains(&u.labels.len()));
            for &k in &u.labels {
                counts[k] += 1;
            }
        }
        let n: usize = counts.iter().sum();
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square, 7 degrees of freedom: P(X > 24.32) = 0.001
        assert!(chi2 < 24.32, "chi2 = {chi2}");
    }

    #[test]
    fn invalid_specs() {
        let bad = ToyCorpusSpec { vocab_size: 1, ..ToyCorpusSpec::default() };
        assert!(generate_toy_corpus(&bad).is_err());
        let bad = ToyCorpusSpec { label_len_range: (5, 3), ..ToyCorpusSpec::default() };
        assert!(generate_toy_corpus(&bad).is_err());
        let bad = ToyCorpusSpec { frames_per_label: 0, ..ToyCorpusSpec::default() };
        assert!(generate_toy_corpus(&bad).is_err());
    }
}
