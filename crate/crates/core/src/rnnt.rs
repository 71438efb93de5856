//! Transducer loss over the output lattice.
//!
//! From node `(t, u)` a path either emits label `u+1` and moves to
//! `(t, u+1)`, or emits blank and moves to `(t+1, u)`. Every path ends by
//! emitting blank from `(T-1, U)`. The loss is the negative natural log of
//! the summed path probability, computed with a log-space forward pass; the
//! gradient comes from forward/backward occupancies.

use crate::diffcore::{log_add, logsumexp, Tape, Var};
use crate::error::{Error, Result};

pub const BLANK: usize = 0;

/// `T x (U+1) x (V+1)` grid of log-probabilities; symbol 0 is blank.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    frames: usize,
    labels: usize,
    vocab: usize,
    log_probs: Vec<f64>,
}

impl Lattice {
    /// `vocab` excludes blank, so each node holds `vocab + 1` entries.
    pub fn new(frames: usize, labels: usize, vocab: usize, log_probs: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Input("lattice needs at least one frame".into()));
        }
        if vocab == 0 {
            return Err(Error::Input("lattice needs a non-empty vocabulary".into()));
        }
        let expected = frames * (labels + 1) * (vocab + 1);
        if log_probs.len() != expected {
            return Err(Error::shape(
                "lattice",
                format!(
                    "{frames}x{}x{} lattice needs {expected} entries, got {}",
                    labels + 1,
                    vocab + 1,
                    log_probs.len()
                ),
            ));
        }
        Ok(Lattice {
            frames,
            labels,
            vocab,
            log_probs,
        })
    }

    /// Builds a normalised lattice from unnormalised scores by applying
    /// log-softmax at every node.
    pub fn from_logits(frames: usize, labels: usize, vocab: usize, logits: &[f64]) -> Result<Self> {
        let width = vocab + 1;
        let mut lp = logits.to_vec();
        for node in lp.chunks_mut(width) {
            let lse = logsumexp(node);
            for v in node.iter_mut() {
                *v -= lse;
            }
        }
        Lattice::new(frames, labels, vocab, lp)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `U`, the label count; the lattice has `U + 1` rows per frame.
    pub fn labels(&self) -> usize {
        self.labels
    }

    /// `V`, excluding blank.
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn into_log_probs(self) -> Vec<f64> {
        self.log_probs
    }

    pub fn same_dims(&self, other: &Lattice) -> bool {
        (self.frames, self.labels, self.vocab) == (other.frames, other.labels, other.vocab)
    }

    fn offset(&self, t: usize, u: usize) -> usize {
        (t * (self.labels + 1) + u) * (self.vocab + 1)
    }

    /// Log-distribution at node `(t, u)`.
    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.log_probs[o..o + self.vocab + 1]
    }

    pub fn at(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[self.offset(t, u) + k]
    }

    /// Largest `|logsumexp - 0|` over all nodes.
    pub fn normalisation_error(&self) -> f64 {
        self.log_probs
            .chunks(self.vocab + 1)
            .map(|n| logsumexp(n).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.labels {
            return Err(Error::Input(format!(
                "lattice built for {} labels, got {}",
                self.labels,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&k| k == BLANK || k > self.vocab) {
            return Err(Error::Input(format!(
                "label {bad} outside 1..={}",
                self.vocab
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossResult {
    /// `-ln P(labels | lattice)`.
    pub loss: f64,
    /// d loss / d log_probs, same layout as the lattice.
    pub grad_log_probs: Vec<f64>,
}

/// Forward variables `alpha[t][u]` (flattened), log domain.
fn forward(lat: &Lattice, labels: &[usize]) -> Vec<f64> {
    let (t_len, u1) = (lat.frames, lat.labels + 1);
    let mut alpha = vec![f64::NEG_INFINITY; t_len * u1];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[(t - 1) * u1 + u] + lat.at(t - 1, u, BLANK);
            }
            if u > 0 {
                a = log_add(a, alpha[t * u1 + u - 1] + lat.at(t, u - 1, labels[u - 1]));
            }
            alpha[t * u1 + u] = a;
        }
    }
    alpha
}

/// Backward variables `beta[t][u]`: log-probability of finishing from `(t, u)`.
fn backward(lat: &Lattice, labels: &[usize]) -> Vec<f64> {
    let (t_len, u_len) = (lat.frames, lat.labels);
    let u1 = u_len + 1;
    let mut beta = vec![f64::NEG_INFINITY; t_len * u1];
    beta[(t_len - 1) * u1 + u_len] = lat.at(t_len - 1, u_len, BLANK);
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let mut b = f64::NEG_INFINITY;
            if t + 1 < t_len {
                b = beta[(t + 1) * u1 + u] + lat.at(t, u, BLANK);
            }
            if u < u_len {
                b = log_add(b, beta[t * u1 + u + 1] + lat.at(t, u, labels[u]));
            }
            beta[t * u1 + u] = b;
        }
    }
    beta
}

/// Negative log-likelihood of `labels` under the lattice, with its gradient
/// w.r.t. every lattice entry.
pub fn rnnt_loss(lat: &Lattice, labels: &[usize]) -> Result<LossResult> {
    lat.check_labels(labels)?;
    let (t_len, u_len) = (lat.frames, lat.labels);
    let u1 = u_len + 1;
    let alpha = forward(lat, labels);
    let beta = backward(lat, labels);
    let log_z = alpha[(t_len - 1) * u1 + u_len] + lat.at(t_len - 1, u_len, BLANK);
    if !log_z.is_finite() {
        return Err(Error::NonFinite { op: "rnnt_loss" });
    }

    let mut grad = vec![0.0; lat.log_probs.len()];
    for t in 0..t_len {
        for u in 0..u1 {
            let a = alpha[t * u1 + u];
            let o = lat.offset(t, u);
            if t + 1 < t_len {
                grad[o + BLANK] = -(a + lat.at(t, u, BLANK) + beta[(t + 1) * u1 + u] - log_z).exp();
            } else if u == u_len {
                grad[o + BLANK] = -(a + lat.at(t, u, BLANK) - log_z).exp();
            }
            if u < u_len {
                let k = labels[u];
                grad[o + k] = -(a + lat.at(t, u, k) + beta[t * u1 + u + 1] - log_z).exp();
            }
        }
    }
    // tiny negative values from rounding on single-path lattices
    let loss = (-log_z).max(0.0);
    Ok(LossResult {
        loss,
        grad_log_probs: grad,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct OracleResult {
    pub loss: f64,
    pub paths: usize,
}

pub const ORACLE_MAX_FRAMES: usize = 6;
pub const ORACLE_MAX_LABELS: usize = 5;

/// Reference loss by explicit enumeration of every monotone alignment, with
/// path probabilities multiplied and summed in linear space.
pub fn enumerate_alignments_oracle(lat: &Lattice, labels: &[usize]) -> Result<OracleResult> {
    lat.check_labels(labels)?;
    if lat.frames > ORACLE_MAX_FRAMES || lat.labels > ORACLE_MAX_LABELS {
        return Err(Error::Contract(format!(
            "alignment enumeration limited to T <= {ORACLE_MAX_FRAMES}, U <= {ORACLE_MAX_LABELS}; got T = {}, U = {}",
            lat.frames, lat.labels
        )));
    }
    let mut total = 0.0;
    let mut paths = 0;
    walk(lat, labels, 0, 0, 1.0, &mut total, &mut paths);
    Ok(OracleResult {
        loss: -total.ln(),
        paths,
    })
}

fn walk(lat: &Lattice, labels: &[usize], t: usize, u: usize, prob: f64, total: &mut f64, paths: &mut usize) {
    let last_frame = t + 1 == lat.frames;
    if last_frame && u == lat.labels {
        *total += prob * lat.at(t, u, BLANK).exp();
        *paths += 1;
        return;
    }
    if !last_frame {
        walk(lat, labels, t + 1, u, prob * lat.at(t, u, BLANK).exp(), total, paths);
    }
    if u < lat.labels {
        walk(lat, labels, t, u + 1, prob * lat.at(t, u, labels[u]).exp(), total, paths);
    }
}

/// Transducer loss on a tape. `log_probs` holds the lattice as a
/// `(T*(U+1)) x (V+1)` matrix; the returned scalar backpropagates into it.
pub fn rnnt_loss_on_tape(tape: &mut Tape, log_probs: Var, frames: usize, labels: &[usize]) -> Result<(Var, f64)> {
    let lat = lattice_from_var(tape, log_probs, frames, labels.len())?;
    let res = rnnt_loss(&lat, labels)?;
    let v = tape.external_scalar(log_probs, res.loss, res.grad_log_probs)?;
    Ok((v, res.loss))
}

/// Reads a `(T*(U+1)) x (V+1)` tape value back as a lattice.
pub fn lattice_from_var(tape: &Tape, log_probs: Var, frames: usize, labels: usize) -> Result<Lattice> {
    let value = tape.value(log_probs);
    let width = value.last_dim();
    if width < 2 {
        return Err(Error::shape("rnnt_loss", "need at least blank plus one label"));
    }
    Lattice::new(frames, labels, width - 1, value.data().to_vec())
}
