//! Feature extraction, SpecAugment masking, the synthetic toy corpus and
//! the on-disk feature/manifest formats.

mod augment;
mod io;
mod mfcc;
mod toy;

pub use augment::{apply_masks, sample_masks, spec_augment, AugmentMasks, AugmentPolicy, Band};
pub use io::{
    read_features, read_manifest, read_raw_pcm16, write_dataset, write_features, ManifestEntry, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use mfcc::{compute_mfcc, mel_energies, mel_to_hz, hz_to_mel, FrontendConfig, MelFilterbank};
pub use toy::{generate_toy_corpus, label_embeddings, ToyCorpusSpec};

use crate::error::{Error, Result};

/// `frames x dims` feature matrix, row-major, stored at single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || dims == 0 {
            return Err(Error::Input(format!("empty feature matrix {frames}x{dims}")));
        }
        if values.len() != frames * dims {
            return Err(Error::Input(format!(
                "{frames}x{dims} features need {} values, got {}",
                frames * dims,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(FeatureMatrix { frames, dims, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.values[t * self.dims + d]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// First `frames` rows.
    pub fn truncated(&self, frames: usize) -> Result<Self> {
        if frames == 0 || frames > self.frames {
            return Err(Error::Input(format!("cannot keep {frames} of {} frames", self.frames)));
        }
        Ok(FeatureMatrix {
            frames,
            dims: self.dims,
            values: self.values[..frames * self.dims].to_vec(),
        })
    }
}

/// One labelled utterance. Labels are `1..=V`; 0 is reserved for blank.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
}
