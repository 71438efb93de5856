use crate::error::{Error, Result};

/// Edit operations of one minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors over reference length (a fraction; can exceed 1).
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_length as f64
    }

    fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_length += other.reference_length;
    }
}

/// Unit-cost Levenshtein alignment. Ties prefer substitution, then
/// deletion, then insertion, so the split into S/I/D is deterministic.
pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> ErrorCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // cost and (s, i, d) per cell, row-major (n+1) x (m+1)
    let mut cell = vec![(0usize, 0usize, 0usize, 0usize); (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        cell[at(i, 0)] = (i, 0, 0, i);
    }
    for j in 1..=m {
        cell[at(0, j)] = (j, 0, j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = cell[at(i - 1, j - 1)];
            let sub = (diag.0 + usize::from(!same), diag.1 + usize::from(!same), diag.2, diag.3);
            let up = cell[at(i - 1, j)];
            let del = (up.0 + 1, up.1, up.2, up.3 + 1);
            let left = cell[at(i, j - 1)];
            let ins = (left.0 + 1, left.1, left.2 + 1, left.3);
            let mut best = sub;
            if del.0 < best.0 {
                best = del;
            }
            if ins.0 < best.0 {
                best = ins;
            }
            cell[at(i, j)] = best;
        }
    }
    let (_, s, ins, del) = cell[at(n, m)];
    ErrorCounts {
        substitutions: s,
        insertions: ins,
        deletions: del,
        reference_length: n,
    }
}

/// Word error rate of one utterance, as a fraction. Tokens are words.
pub fn word_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<(f64, ErrorCounts)> {
    if reference.is_empty() {
        return Err(Error::Contract("WER needs a non-empty reference".into()));
    }
    let c = edit_counts(reference, hypothesis);
    Ok((c.rate(), c))
}

/// Fraction of utterances with at least one error. Empty references
/// count as erroneous only if the hypothesis is non-empty.
pub fn sentence_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let wrong = pairs.iter().filter(|(r, h)| r != h).count();
    wrong as f64 / pairs.len() as f64
}

/// Formats a fraction as a percentage with two decimals.
pub fn percent(rate: f64) -> String {
    format!("{:.2}", 100.0 * rate)
}

/// Running corpus totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusScore {
    pub counts: ErrorCounts,
    pub utterances: usize,
    pub sentence_errors: usize,
    /// Utterances with an empty reference, left out of WER and SER.
    pub excluded: usize,
}

impl CorpusScore {
    /// Adds one utterance; returns its WER, or `None` when excluded.
    pub fn add(&mut self, reference: &[usize], hypothesis: &[usize]) -> Option<f64> {
        match word_error_rate(reference, hypothesis) {
            Ok((rate, c)) => {
                self.counts.add(&c);
                self.utterances += 1;
                if c.errors() > 0 {
                    self.sentence_errors += 1;
                }
                Some(rate)
            }
            Err(_) => {
                self.excluded += 1;
                None
            }
        }
    }

    /// Corpus WER: total errors over total reference length.
    pub fn wer(&self) -> f64 {
        if self.counts.reference_length == 0 {
            return f64::NAN;
        }
        self.counts.rate()
    }

    pub fn ser(&self) -> f64 {
        if self.utterances == 0 {
            return f64::NAN;
        }
        self.sentence_errors as f64 / self.utterances as f64
    }
}
