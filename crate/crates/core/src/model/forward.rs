//! Differentiable forward passes on a [`Tape`].

use super::config::{DecoderConfig, EncoderConfig, ModelConfig};
use super::params::BoundParams;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;

const NORM_EPS: f64 = 1e-5;

fn layer_norm(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.gamma"));
    let b = p.var(&format!("{prefix}.beta"));
    tape.layer_norm(x, g, b, NORM_EPS)
}

fn linear(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"));
    let b = p.var(&format!("{prefix}.bias"));
    tape.linear(x, w, Some(b))
}

fn feed_forward(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, rate: f64, train: bool) -> Result<Var> {
    let h = layer_norm(tape, p, &format!("{prefix}.norm"), x)?;
    let h = linear(tape, p, &format!("{prefix}.linear1"), h)?;
    let h = tape.swish(h)?;
    let h = tape.dropout(h, rate, train)?;
    linear(tape, p, &format!("{prefix}.linear2"), h)
}

fn convolution(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = layer_norm(tape, p, &format!("{prefix}.norm"), x)?;
    let h = linear(tape, p, &format!("{prefix}.pointwise1"), h)?;
    let h = tape.glu(h)?;
    let w = p.var(&format!("{prefix}.depthwise.weight"));
    let b = p.var(&format!("{prefix}.depthwise.bias"));
    let h = tape.depthwise_conv1d_causal(h, w, b)?;
    let h = layer_norm(tape, p, &format!("{prefix}.depth_norm"), h)?;
    let h = tape.swish(h)?;
    linear(tape, p, &format!("{prefix}.pointwise2"), h)
}

fn self_attention(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, heads: usize, causal: bool) -> Result<Var> {
    let h = layer_norm(tape, p, &format!("{prefix}.norm"), x)?;
    let q = linear(tape, p, &format!("{prefix}.query"), h)?;
    let k = linear(tape, p, &format!("{prefix}.key"), h)?;
    let v = linear(tape, p, &format!("{prefix}.value"), h)?;
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, head * dh, dh)?,
                tape.slice(k, 1, head * dh, dh)?,
                tape.slice(v, 1, head * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = if causal { tape.causal_softmax(scores)? } else { tape.softmax(scores)? };
        contexts.push(tape.matmul(attn, vh)?);
    }
    let ctx = if heads == 1 { contexts[0] } else { tape.concat(&contexts, 1)? };
    linear(tape, p, &format!("{prefix}.out"), ctx)
}

/// One conformer block over a `frames x d` input:
///
/// ```text
/// x'   = x   + FF(x)
/// x''  = x'  + Conv(x')
/// x''' = x'' + MHSA(x'')
/// y    = LayerNorm(x''' + FF(x'''))
/// ```
///
/// Every sub-module is pre-normalised and ends in a linear projection, so
/// zeroing those projections reduces the block to `LayerNorm(x)`.
pub fn conformer_block_forward(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    cfg: &EncoderConfig,
    causal: bool,
    train: bool,
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(Error::shape(
            "conformer_block",
            format!("input {:?}, model_dim {}", shape, cfg.model_dim),
        ));
    }
    let rate = cfg.dropout;
    let f = feed_forward(tape, p, &format!("{prefix}.ff1"), x, rate, train)?;
    let f = tape.dropout(f, rate, train)?;
    let x1 = tape.add(x, f)?;
    let c = convolution(tape, p, &format!("{prefix}.conv"), x1)?;
    let c = tape.dropout(c, rate, train)?;
    let x2 = tape.add(x1, c)?;
    let a = self_attention(tape, p, &format!("{prefix}.mhsa"), x2, cfg.attention_heads, causal)?;
    let a = tape.dropout(a, rate, train)?;
    let x3 = tape.add(x2, a)?;
    let f = feed_forward(tape, p, &format!("{prefix}.ff2"), x3, rate, train)?;
    let f = tape.dropout(f, rate, train)?;
    let x4 = tape.add(x3, f)?;
    layer_norm(tape, p, &format!("{prefix}.final_norm"), x4)
}

/// Minimum input length: one full window of the pooling stack.
pub fn min_frames(cfg: &EncoderConfig) -> usize {
    (1usize << cfg.pooling_layers).max(1)
}

/// Streaming encoder: input projection, learned positions, conformer
/// blocks with a time max-pool after each of the first `pooling_layers`.
pub fn encode(tape: &mut Tape, p: &BoundParams, cfg: &EncoderConfig, features: &FeatureMatrix, train: bool) -> Result<Var> {
    let frames = features.frames();
    if frames < min_frames(cfg) {
        return Err(Error::Input(format!(
            "{frames} frames, the encoder needs at least {}",
            min_frames(cfg)
        )));
    }
    if frames > cfg.max_positions {
        return Err(Error::Input(format!(
            "{frames} frames exceed encoder.max_positions = {}",
            cfg.max_positions
        )));
    }
    if features.dims() != cfg.input_dim {
        return Err(Error::shape(
            "encode",
            format!("features have {} dims, encoder expects {}", features.dims(), cfg.input_dim),
        ));
    }
    let input = tape.constant(Tensor::from_parts(vec![frames, features.dims()], features.to_f64()));
    // the input projection is the one layer without dropout
    let mut x = linear(tape, p, "encoder.input", input)?;
    let pos = tape.slice(p.var("encoder.pos"), 0, 0, frames)?;
    x = tape.add(x, pos)?;
    for i in 0..cfg.num_layers {
        x = conformer_block_forward(tape, p, &format!("encoder.block{i}"), x, cfg, true, train)?;
        x = tape.dropout(x, cfg.dropout, train)?;
        if i < cfg.pooling_layers {
            x = tape.max_pool1d_time(x)?;
        }
    }
    Ok(x)
}

/// Prediction network over a label prefix. Row `u` of the result is the
/// state after reading the first `u` labels; row 0 comes from a zero input.
pub fn predict(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, labels: &[usize], train: bool) -> Result<Var> {
    check_tokens(labels, cfg.vocab_size)?;
    let j = cfg.joint_dim;
    let start = tape.constant(Tensor::zeros(&[1, j]));
    let inputs = if labels.is_empty() {
        start
    } else {
        let emb = tape.embedding(p.var("joint.embedding"), labels)?;
        tape.concat(&[start, emb], 0)?
    };
    lstm_stack(tape, p, &cfg.decoder, inputs, train)
}

pub(crate) fn check_tokens(labels: &[usize], vocab: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&k| k == 0 || k > vocab) {
        return Err(Error::Input(format!("token {bad} outside 1..={vocab}")));
    }
    Ok(())
}

fn lstm_stack(tape: &mut Tape, p: &BoundParams, cfg: &DecoderConfig, inputs: Var, train: bool) -> Result<Var> {
    let steps = tape.shape(inputs)[0];
    let h = cfg.hidden_dim;
    let mut layer_in = inputs;
    for l in 0..cfg.num_layers {
        let wx = p.var(&format!("decoder.lstm{l}.wx"));
        let wh = p.var(&format!("decoder.lstm{l}.wh"));
        let bias = p.var(&format!("decoder.lstm{l}.bias"));
        let pre = tape.linear(layer_in, wx, Some(bias))?;
        let mut hidden: Option<Var> = None;
        let mut cell: Option<Var> = None;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut z = tape.slice(pre, 0, t, 1)?;
            if let Some(hp) = hidden {
                let rec = tape.matmul(hp, wh)?;
                z = tape.add(z, rec)?;
            }
            let i_gate = tape.slice(z, 1, 0, h)?;
            let i_gate = tape.sigmoid(i_gate)?;
            let f_gate = tape.slice(z, 1, h, h)?;
            let f_gate = tape.sigmoid(f_gate)?;
            let g_gate = tape.slice(z, 1, 2 * h, h)?;
            let g_gate = tape.tanh(g_gate)?;
            let o_gate = tape.slice(z, 1, 3 * h, h)?;
            let o_gate = tape.sigmoid(o_gate)?;
            let mut c = tape.mul(i_gate, g_gate)?;
            if let Some(cp) = cell {
                let keep = tape.mul(f_gate, cp)?;
                c = tape.add(keep, c)?;
            }
            let tc = tape.tanh(c)?;
            let hn = tape.mul(o_gate, tc)?;
            hidden = Some(hn);
            cell = Some(c);
            outputs.push(hn);
        }
        let out = if steps == 1 { outputs[0] } else { tape.concat(&outputs, 0)? };
        layer_in = tape.dropout(out, cfg.dropout, train)?;
    }
    Ok(layer_in)
}

/// Joint network over every lattice node. Returns `(T * (U+1)) x (V+1)`
/// log-probabilities, row `t * (U+1) + u`.
///
/// The output projection is the transposed embedding table, so the same
/// storage feeds the prediction network and scores the outputs.
pub fn joint_lattice(tape: &mut Tape, p: &BoundParams, enc: Var, pred: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Contract(format!("temperature {temperature} must be positive")));
    }
    let e = linear(tape, p, "joint.enc_proj", enc)?;
    let q = tape.linear(pred, p.var("joint.pred_proj.weight"), None)?;
    let z = tape.broadcast_add(e, q)?;
    let z = tape.tanh(z)?;
    let mut logits = tape.matmul_nt(z, p.var("joint.embedding"))?;
    if temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / temperature)?;
    }
    tape.log_softmax(logits)
}

/// Encoder, prediction network and joint for one utterance. Returns the
/// lattice log-probs and the number of encoder frames.
pub fn forward_lattice(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    features: &FeatureMatrix,
    labels: &[usize],
    temperature: f64,
    train: bool,
) -> Result<(Var, usize)> {
    let enc = encode(tape, p, &cfg.encoder, features, train)?;
    let frames = tape.shape(enc)[0];
    let pred = predict(tape, p, cfg, labels, train)?;
    let lat = joint_lattice(tape, p, enc, pred, temperature)?;
    Ok((lat, frames))
}
