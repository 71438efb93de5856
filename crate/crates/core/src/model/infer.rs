//! Tape-free inference path used by the decoders.

use super::forward::{check_tokens, encode};
use super::Model;
use crate::diffcore::{logsumexp, sigmoid, Tape, Tensor};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;

/// Hidden and cell vectors of every LSTM layer after some label prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorState {
    hidden: Vec<Vec<f64>>,
    cell: Vec<Vec<f64>>,
}

impl PredictorState {
    /// Output of the top layer.
    pub fn output(&self) -> &[f64] {
        self.hidden.last().expect("at least one layer")
    }
}

fn vec_mat(x: &[f64], w: &Tensor, out: &mut [f64]) {
    let n = w.shape()[1];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w.data()[i * n..(i + 1) * n];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

impl Model {
    fn tensor(&self, name: &str) -> &Tensor {
        self.params()
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    /// Encoder states (`T' x d`) in eval mode.
    pub fn encode_eval(&self, features: &FeatureMatrix) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params().bind(&mut tape, false);
        let enc = encode(&mut tape, &p, &self.config().encoder, features, false)?;
        Ok(tape.value(enc).clone())
    }

    /// Applies the joint's encoder projection to every encoder frame.
    pub fn project_encoder(&self, enc: &Tensor) -> Tensor {
        let w = self.tensor("joint.enc_proj.weight");
        let b = self.tensor("joint.enc_proj.bias").data();
        let j = b.len();
        let rows = enc.rows();
        let mut out = Vec::with_capacity(rows * j);
        for t in 0..rows {
            let mut acc = b.to_vec();
            vec_mat(enc.row(t), w, &mut acc);
            out.extend_from_slice(&acc);
        }
        Tensor::from_parts(vec![rows, j], out)
    }

    /// State after the start step, i.e. for the empty prefix.
    pub fn predictor_start(&self) -> PredictorState {
        let dec = &self.config().decoder;
        let zero = PredictorState {
            hidden: vec![vec![0.0; dec.hidden_dim]; dec.num_layers],
            cell: vec![vec![0.0; dec.hidden_dim]; dec.num_layers],
        };
        self.lstm_step(&zero, &vec![0.0; self.config().joint_dim], true)
    }

    /// Advances the prediction network by one emitted label.
    pub fn predictor_step(&self, state: &PredictorState, label: usize) -> Result<PredictorState> {
        check_tokens(&[label], self.config().vocab_size)?;
        let emb = self.tensor("joint.embedding").row(label).to_vec();
        Ok(self.lstm_step(state, &emb, false))
    }

    fn lstm_step(&self, state: &PredictorState, input: &[f64], first: bool) -> PredictorState {
        let h = self.config().decoder.hidden_dim;
        let mut next = state.clone();
        let mut x = input.to_vec();
        for l in 0..self.config().decoder.num_layers {
            let mut z = self.tensor(&format!("decoder.lstm{l}.bias")).data().to_vec();
            vec_mat(&x, self.tensor(&format!("decoder.lstm{l}.wx")), &mut z);
            if !first {
                vec_mat(&state.hidden[l], self.tensor(&format!("decoder.lstm{l}.wh")), &mut z);
            }
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let g = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                let c = if first { i * g } else { f * state.cell[l][k] + i * g };
                next.cell[l][k] = c;
                next.hidden[l][k] = o * c.tanh();
            }
            x = next.hidden[l].clone();
        }
        next
    }

    /// Joint's prediction projection of a predictor output.
    pub fn project_predictor(&self, state: &PredictorState) -> Vec<f64> {
        let w = self.tensor("joint.pred_proj.weight");
        let mut out = vec![0.0; w.shape()[1]];
        vec_mat(state.output(), w, &mut out);
        out
    }

    /// Log-distribution over blank and labels for one lattice node, from
    /// already projected encoder and predictor vectors.
    pub fn joint_log_probs(&self, enc_proj: &[f64], pred_proj: &[f64], temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Contract(format!("temperature {temperature} must be positive")));
        }
        let z: Vec<f64> = enc_proj.iter().zip(pred_proj).map(|(a, b)| (a + b).tanh()).collect();
        let table = self.tensor("joint.embedding");
        let mut logits: Vec<f64> = (0..table.rows())
            .map(|k| table.row(k).iter().zip(&z).map(|(e, z)| e * z).sum::<f64>())
            .collect();
        if temperature != 1.0 {
            for l in &mut logits {
                *l /= temperature;
            }
        }
        let lse = logsumexp(&logits);
        Ok(logits.into_iter().map(|l| l - lse).collect())
    }
}
