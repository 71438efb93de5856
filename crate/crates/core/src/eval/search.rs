//! Transducer search over a [`Scorer`].

use std::collections::HashMap;

use crate::diffcore::{log_add, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, PredictorState};

/// Default cap on labels emitted within a single encoder frame.
pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

/// Something that yields `ln P(k | t, prefix)` for an utterance.
pub trait Scorer {
    /// Per-prefix cache (for a model, the prediction-network state).
    type State: Clone;

    fn frames(&self) -> usize;

    /// Start state for the empty prefix.
    fn start(&self) -> Self::State;

    /// State after appending `label` (never blank).
    fn advance(&self, state: &Self::State, label: usize) -> Result<Self::State>;

    /// Log-distribution over blank (index 0) and labels at frame `t`.
    fn log_probs(&self, t: usize, state: &Self::State) -> Result<Vec<f64>>;
}

/// A model bound to one utterance's encoder output.
pub struct ModelScorer<'m> {
    model: &'m Model,
    enc_proj: Tensor,
    temperature: f64,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    predictor: PredictorState,
    projected: Vec<f64>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, features: &crate::frontend::FeatureMatrix) -> Result<Self> {
        let enc = model.encode_eval(features)?;
        Ok(ModelScorer {
            model,
            enc_proj: model.project_encoder(&enc),
            temperature: 1.0,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }
}

impl Scorer for ModelScorer<'_> {
    type State = ModelState;

    fn frames(&self) -> usize {
        self.enc_proj.rows()
    }

    fn start(&self) -> ModelState {
        let predictor = self.model.predictor_start();
        let projected = self.model.project_predictor(&predictor);
        ModelState { predictor, projected }
    }

    fn advance(&self, state: &ModelState, label: usize) -> Result<ModelState> {
        let predictor = self.model.predictor_step(&state.predictor, label)?;
        let projected = self.model.project_predictor(&predictor);
        Ok(ModelState { predictor, projected })
    }

    fn log_probs(&self, t: usize, state: &ModelState) -> Result<Vec<f64>> {
        self.model.joint_log_probs(self.enc_proj.row(t), &state.projected, self.temperature)
    }
}

/// A decoded label sequence and its log-probability.
#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub tokens: Vec<usize>,
    /// Greedy: the single path's log-probability. Beam: the log-sum over
    /// every surviving alignment that spells `tokens`.
    pub log_score: f64,
    pub state: S,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Follows the most probable symbol at every step. A frame ends on blank,
/// or after `max_symbols` labels, in which case the blank is taken anyway
/// and its probability is charged to the path.
pub fn greedy_decode<S: Scorer>(scorer: &S, max_symbols: usize) -> Result<Hypothesis<S::State>> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_score: 0.0,
        state: scorer.start(),
    };
    for t in 0..scorer.frames() {
        let mut emitted = 0;
        loop {
            let lp = scorer.log_probs(t, &hyp.state)?;
            let k = if emitted < max_symbols { argmax(&lp) } else { 0 };
            hyp.log_score += lp[k];
            if k == 0 {
                break;
            }
            hyp.tokens.push(k);
            hyp.state = scorer.advance(&hyp.state, k)?;
            emitted += 1;
        }
    }
    Ok(hyp)
}

/// Keeps the `width` best entries of `items` by score.
fn prune<T>(items: &mut Vec<(Vec<usize>, f64, T)>, width: usize) {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.truncate(width);
}

/// Transducer beam search with prefix merging.
///
/// Within a frame the search runs in sub-steps. At each one every active
/// hypothesis either takes blank (and waits for the next frame) or
/// extends by one label. Candidates spelling the same prefix are merged by
/// log-adding their scores, separately for the waiting and the active
/// sets, and the union is cut back to `beam_size`. With `beam_size = 1`
/// this is the greedy path; with a beam wider than the number of
/// alignments nothing is pruned and each score is the exact total
/// probability of its prefix, under the same per-frame label cap.
pub fn beam_decode<S: Scorer>(scorer: &S, beam_size: usize, max_symbols: usize) -> Result<Hypothesis<S::State>> {
    if beam_size == 0 {
        return Err(Error::Contract("beam_size must be at least 1".into()));
    }
    let mut beam: Vec<(Vec<usize>, f64, S::State)> = vec![(Vec::new(), 0.0, scorer.start())];
    for t in 0..scorer.frames() {
        let mut active = std::mem::take(&mut beam);
        let mut waiting: Vec<(Vec<usize>, f64, S::State)> = Vec::new();
        let mut sub = 0;
        while !active.is_empty() {
            let mut wait_index: HashMap<Vec<usize>, usize> =
                waiting.iter().enumerate().map(|(i, h)| (h.0.clone(), i)).collect();
            let mut next: Vec<(Vec<usize>, f64, S::State)> = Vec::new();
            let mut next_index: HashMap<Vec<usize>, usize> = HashMap::new();
            for (tokens, score, state) in active {
                let lp = scorer.log_probs(t, &state)?;
                let s = score + lp[0];
                match wait_index.get(&tokens) {
                    Some(&i) => waiting[i].1 = log_add(waiting[i].1, s),
                    None => {
                        wait_index.insert(tokens.clone(), waiting.len());
                        waiting.push((tokens.clone(), s, state.clone()));
                    }
                }
                if sub >= max_symbols {
                    continue;
                }
                for (k, &l) in lp.iter().enumerate().skip(1) {
                    let s = score + l;
                    let mut ext = tokens.clone();
                    ext.push(k);
                    match next_index.get(&ext) {
                        Some(&i) => next[i].1 = log_add(next[i].1, s),
                        None => {
                            next_index.insert(ext.clone(), next.len());
                            next.push((ext, s, state.clone()));
                        }
                    }
                }
            }
            // cut the union of waiting and active candidates to the beam
            let mut pool: Vec<(Vec<usize>, f64, (bool, usize))> = waiting
                .iter()
                .enumerate()
                .map(|(i, h)| (h.0.clone(), h.1, (false, i)))
                .chain(next.iter().enumerate().map(|(i, h)| (h.0.clone(), h.1, (true, i))))
                .collect();
            prune(&mut pool, beam_size);
            let mut keep_wait = vec![false; waiting.len()];
            let mut keep_next = vec![false; next.len()];
            for (_, _, (is_next, i)) in &pool {
                if *is_next {
                    keep_next[*i] = true;
                } else {
                    keep_wait[*i] = true;
                }
            }
            waiting = waiting.into_iter().zip(keep_wait).filter(|(_, k)| *k).map(|(h, _)| h).collect();
            active = Vec::new();
            for (h, k) in next.into_iter().zip(keep_next) {
                if k {
                    // the predictor state moves only for survivors
                    let label = *h.0.last().expect("extended prefix");
                    let state = scorer.advance(&h.2, label)?;
                    active.push((h.0, h.1, state));
                }
            }
            sub += 1;
        }
        beam = waiting;
    }
    prune(&mut beam, 1);
    let (tokens, log_score, state) = beam.pop().expect("beam never empties");
    Ok(Hypothesis {
        tokens,
        log_score,
        state,
    })
}

/// Every alignment with at most `max_symbols` labels per frame, scored in
/// plain probability space and grouped by label sequence. Returns the
/// most probable sequence and its total log-probability. Exponential;
/// meant as a test oracle for tiny problems.
pub fn exhaustive_best<S: Scorer>(scorer: &S, max_symbols: usize) -> Result<(Vec<usize>, f64)> {
    let mut walker = Walker {
        scorer,
        max_symbols,
        tokens: Vec::new(),
        totals: HashMap::new(),
    };
    walker.walk(0, 0, &scorer.start(), 1.0)?;
    let (tokens, p) = walker
        .totals
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .expect("at least the empty sequence");
    Ok((tokens, p.ln()))
}

struct Walker<'a, S: Scorer> {
    scorer: &'a S,
    max_symbols: usize,
    tokens: Vec<usize>,
    totals: HashMap<Vec<usize>, f64>,
}

impl<S: Scorer> Walker<'_, S> {
    fn walk(&mut self, t: usize, emitted: usize, state: &S::State, prob: f64) -> Result<()> {
        if t == self.scorer.frames() {
            *self.totals.entry(self.tokens.clone()).or_insert(0.0) += prob;
            return Ok(());
        }
        let p: Vec<f64> = self.scorer.log_probs(t, state)?.iter().map(|l| l.exp()).collect();
        self.walk(t + 1, 0, state, prob * p[0])?;
        if emitted < self.max_symbols {
            for (k, &pk) in p.iter().enumerate().skip(1) {
                let next = self.scorer.advance(state, k)?;
                self.tokens.push(k);
                self.walk(t, emitted + 1, &next, prob * pk)?;
                self.tokens.pop();
            }
        }
        Ok(())
    }
}
