//! Streaming conformer-transducer.

mod checkpoint;
mod config;
mod count;
mod forward;
mod infer;
mod layout;
mod params;


pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use config::{DecoderConfig, EncoderConfig, ModelConfig};
pub use count::{conformer_block_parameters, count_parameters, ParamBreakdown};
pub use forward::{conformer_block_forward, encode, forward_lattice, joint_lattice, min_frames, predict};
pub use infer::PredictorState;
pub use layout::parameter_shapes;
pub use params::{BoundParams, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// A model configuration together with its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Fresh parameters: Glorot-uniform weights, zero biases, unit norm
    /// gains, LSTM forget-gate bias 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.decoder.hidden_dim;
        for (name, shape) in parameter_shapes(&config) {
            let value = if name.ends_with(".gamma") {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with(".beta") || (name.ends_with(".bias") && !name.starts_with("decoder.")) {
                Tensor::zeros(&shape)
            } else if name.ends_with(".bias") {
                let mut b = Tensor::zeros(&shape);
                b.data_mut()[h..2 * h].fill(1.0);
                b
            } else if name == "encoder.pos" {
                params::normal(&mut rng, &shape, 0.1)
            } else if name == "joint.embedding" {
                params::normal(&mut rng, &shape, 1.0 / (shape[1] as f64).sqrt())
            } else if name.ends_with("depthwise.weight") {
                params::normal(&mut rng, &shape, 1.0 / (shape[1] as f64).sqrt())
            } else {
                params::xavier(&mut rng, shape[0], shape[1])
            };
            params.insert(name, value)?;
        }
        Ok(Model { config, params })
    }

    /// Wraps existing values after checking them against the config.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = parameter_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Integrity(format!(
                "{} tensors, config implies {}",
                params.len(),
                expected.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Integrity(format!(
                    "tensor `{got_name}` {:?} where config implies `{name}` {:?}",
                    got.shape(),
                    shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }
}
