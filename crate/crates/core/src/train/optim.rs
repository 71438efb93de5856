use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is clipped to before the update.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer constants {self:?}")));
        }
        Ok(())
    }
}

/// Update counter and Adam moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        TrainState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    /// Factor applied by clipping (1 when the norm was within bounds).
    pub clip_scale: f64,
}

/// One clipped Adam update. On a non-finite gradient nothing changes.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut TrainState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<StepStats> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} gradients, {} parameters", grads.len(), params.len()),
        ));
    }
    let mut sq = 0.0;
    for ((g, t), name) in grads.iter().zip(params.tensors()).zip(params.names()) {
        if g.len() != t.numel() {
            return Err(Error::shape(
                "optimizer_step",
                format!("gradient for `{name}` has {} entries, parameter {}", g.len(), t.numel()),
            ));
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                step: state.step,
                detail: format!("gradient of `{name}` contains {bad}"),
            });
        }
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powf(state.step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(state.step as f64);
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] * scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(StepStats {
        grad_norm: norm,
        clip_scale: scale,
    })
}
