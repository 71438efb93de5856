use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::logsumexp;
use crate::error::Error;

/// Log-distributions drawn from a seed keyed on `(t, prefix)`, so that
/// equal prefixes always see equal distributions.
struct TableScorer {
    frames: usize,
    vocab: usize,
    seed: u64,
    sharpness: f64,
}

impl Scorer for TableScorer {
    type State = Vec<usize>;

    fn frames(&self) -> usize {
        self.frames
    }

    fn start(&self) -> Vec<usize> {
        Vec::new()
    }

    fn advance(&self, state: &Vec<usize>, label: usize) -> crate::error::Result<Vec<usize>> {
        let mut s = state.clone();
        s.push(label);
        Ok(s)
    }

    fn log_probs(&self, t: usize, state: &Vec<usize>) -> crate::error::Result<Vec<f64>> {
        let mut key = self.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(t as u64 + 1);
        for &k in state {
            key = key.wrapping_mul(0x100_0000_01b3).wrapping_add(k as u64 + 7);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..=self.vocab).map(|_| self.sharpness * rng.random_range(-1.0..1.0)).collect();
        let z = logsumexp(&logits);
        Ok(logits.iter().map(|l| l - z).collect())
    }
}

/// Fixed per-prefix-length preferences.
struct Scripted {
    frames: usize,
    /// distribution used at prefix length `u` (clamped to the last entry)
    by_length: Vec<Vec<f64>>,
}

impl Scorer for Scripted {
    type State = usize;

    fn frames(&self) -> usize {
        self.frames
    }

    fn start(&self) -> usize {
        0
    }

    fn advance(&self, state: &usize, _label: usize) -> crate::error::Result<usize> {
        Ok(state + 1)
    }

    fn log_probs(&self, _t: usize, state: &usize) -> crate::error::Result<Vec<f64>> {
        let p = &self.by_length[(*state).min(self.by_length.len() - 1)];
        Ok(p.iter().map(|x| x.ln()).collect())
    }
}

#[test]
fn blank_only_model_outputs_nothing() {
    let s = Scripted {
        frames: 5,
        by_length: vec![vec![0.7, 0.2, 0.1]],
    };
    let h = greedy_decode(&s, 10).unwrap();
    assert!(h.tokens.is_empty());
    assert!((h.log_score - 5.0 * 0.7f64.ln()).abs() < 1e-12);
    assert!(beam_decode(&s, 8, 10).unwrap().tokens.is_empty());
}

#[test]
fn single_frame_label_then_blank() {
    let s = Scripted {
        frames: 1,
        by_length: vec![vec![0.2, 0.1, 0.7], vec![0.6, 0.3, 0.1]],
    };
    let h = greedy_decode(&s, 10).unwrap();
    assert_eq!(h.tokens, vec![2]);
    assert!((h.log_score - (0.7f64.ln() + 0.6f64.ln())).abs() < 1e-12);
}

#[test]
fn symbol_cap_forces_frame_advance() {
    let s = Scripted {
        frames: 4,
        by_length: vec![vec![0.1, 0.9]],
    };
    let h = greedy_decode(&s, 3).unwrap();
    assert_eq!(h.tokens, vec![1; 12]);
    let expected = 12.0 * 0.9f64.ln() + 4.0 * 0.1f64.ln();
    assert!((h.log_score - expected).abs() < 1e-12);
    let b = beam_decode(&s, 4, 3).unwrap();
    assert!(b.tokens.len() <= 12);
}

#[test]
fn unit_beam_is_greedy() {
    for seed in 0..100 {
        let s = TableScorer {
            frames: 1 + (seed as usize % 6),
            vocab: 1 + (seed as usize % 4),
            seed,
            sharpness: 3.0,
        };
        let g = greedy_decode(&s, 4).unwrap();
        let b = beam_decode(&s, 1, 4).unwrap();
        assert_eq!(g.tokens, b.tokens, "seed {seed}");
        assert_eq!(g.log_score, b.log_score, "seed {seed}");
    }
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..60 {
        let s = TableScorer {
            frames: rng.random_range(1..=3),
            vocab: rng.random_range(1..=3),
            seed,
            sharpness: rng.random_range(0.5..4.0),
        };
        let cap = rng.random_range(1..=2);
        let (tokens, score) = exhaustive_best(&s, cap).unwrap();
        let b = beam_decode(&s, 5000, cap).unwrap();
        assert_eq!(b.tokens, tokens, "seed {seed}");
        assert!((b.log_score - score).abs() < 1e-9, "seed {seed}: {} vs {score}", b.log_score);
    }
}

#[test]
fn beam_scores_are_log_probabilities() {
    for seed in 0..20 {
        let s = TableScorer {
            frames: 4,
            vocab: 3,
            seed,
            sharpness: 1.0,
        };
        assert!(beam_decode(&s, 8, 3).unwrap().log_score <= 0.0);
    }
}

#[test]
fn zero_beam_is_rejected() {
    let s = Scripted {
        frames: 1,
        by_length: vec![vec![0.5, 0.5]],
    };
    assert!(matches!(beam_decode(&s, 0, 2), Err(Error::Contract(_))));
}

#[test]
fn wer_examples() {
    let (r, c) = word_error_rate(&[1, 2, 3], &[1, 9, 3]).unwrap();
    assert_eq!(c.substitutions, 1);
    assert_eq!(percent(r), "33.33");
    let (r, c) = word_error_rate(&[1, 2, 3, 4], &[]).unwrap();
    assert_eq!((r, c.deletions), (1.0, 4));
    let (r, c) = word_error_rate(&[5], &[1, 2, 3]).unwrap();
    assert_eq!(c.errors(), 3);
    assert_eq!(percent(r), "300.00");
    assert_eq!(word_error_rate(&[1, 2], &[1, 2]).unwrap().0, 0.0);
    assert!(matches!(word_error_rate::<usize>(&[], &[1]), Err(Error::Contract(_))));
}

#[test]
fn sentence_errors_and_exclusions() {
    let pairs = vec![(vec![1, 2], vec![1, 2]), (vec![3], vec![4]), (vec![5, 6], vec![5, 6]), (vec![1], vec![])];
    assert_eq!(sentence_error_rate(&pairs), 0.5);
    let mut score = CorpusScore::default();
    for (r, h) in &pairs {
        score.add(r, h);
    }
    assert_eq!(score.add(&[], &[2]), None);
    assert_eq!(score.excluded, 1);
    assert_eq!(score.utterances, 4);
    assert_eq!(score.counts.reference_length, 6);
    assert!((score.wer() - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(score.ser(), 0.5);
}

proptest! {
    #[test]
    fn edit_distance_properties(r in prop::collection::vec(0usize..4, 0..9), h in prop::collection::vec(0usize..4, 0..9)) {
        let c = edit_counts(&r, &h);
        prop_assert!(c.substitutions + c.deletions <= r.len());
        prop_assert_eq!(c.reference_length, r.len());
        prop_assert_eq!(r.len() + c.insertions, h.len() + c.deletions);
        prop_assert!(c.errors() >= r.len().abs_diff(h.len()));
        prop_assert!(c.errors() <= r.len().max(h.len()));
        prop_assert_eq!(edit_counts(&r, &r).errors(), 0);
        prop_assert_eq!(edit_counts(&h, &r).errors(), c.errors());
    }
}
