//! Decoding and error-rate scoring.

mod metrics;
mod search;

#[cfg(test)]
mod tests;

pub use metrics::{edit_counts, percent, sentence_error_rate, word_error_rate, CorpusScore, ErrorCounts};
pub use search::{
    beam_decode, exhaustive_best, greedy_decode, Hypothesis, ModelScorer, ModelState, Scorer, MAX_SYMBOLS_PER_FRAME,
};

use std::fmt::Write as _;

use crate::error::Result;
use crate::frontend::{FeatureMatrix, Utterance};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub mode: SearchMode,
    pub max_symbols_per_frame: usize,
}

impl Default for DecodeOptions {
    /// Beam of 8.
    fn default() -> Self {
        DecodeOptions {
            mode: SearchMode::Beam(8),
            max_symbols_per_frame: MAX_SYMBOLS_PER_FRAME,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        DecodeOptions {
            mode: SearchMode::Greedy,
            max_symbols_per_frame: MAX_SYMBOLS_PER_FRAME,
        }
    }
}

/// Best label sequence for one utterance, with its log-score.
pub fn decode(model: &Model, features: &FeatureMatrix, opts: &DecodeOptions) -> Result<(Vec<usize>, f64)> {
    let scorer = ModelScorer::new(model, features)?;
    let hyp = match opts.mode {
        SearchMode::Greedy => greedy_decode(&scorer, opts.max_symbols_per_frame)?,
        SearchMode::Beam(width) => beam_decode(&scorer, width, opts.max_symbols_per_frame)?,
    };
    Ok((hyp.tokens, hyp.log_score))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    /// `None` for an empty reference.
    pub wer: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceResult>,
    pub score: CorpusScore,
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl EvalReport {
    pub fn wer(&self) -> f64 {
        self.score.wer()
    }

    pub fn ser(&self) -> f64 {
        self.score.ser()
    }

    /// Tab-separated per-utterance lines, then a `#`-prefixed summary.
    pub fn render(&self) -> String {
        let mut out = String::from("id\treference\thypothesis\twer\n");
        for u in &self.utterances {
            let wer = u.wer.map_or_else(|| "excluded".to_string(), percent);
            let _ = writeln!(out, "{}\t{}\t{}\t{}", u.id, join(&u.reference), join(&u.hypothesis), wer);
        }
        let _ = writeln!(out, "# corpus_wer\t{}", percent(self.wer()));
        let _ = writeln!(out, "# ser\t{}", percent(self.ser()));
        let _ = writeln!(out, "# utterances\t{}", self.score.utterances);
        let _ = writeln!(out, "# excluded_empty_reference\t{}", self.score.excluded);
        out
    }
}

/// Decodes and scores every utterance.
pub fn evaluate(model: &Model, utterances: &[Utterance], opts: &DecodeOptions) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for utt in utterances {
        let (hyp, _) = decode(model, &utt.features, opts)?;
        let wer = report.score.add(&utt.labels, &hyp);
        report.utterances.push(UtteranceResult {
            id: utt.id.clone(),
            reference: utt.labels.clone(),
            hypothesis: hyp,
            wer,
        });
    }
    Ok(report)
}
