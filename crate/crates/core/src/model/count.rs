use super::config::ModelConfig;

/// Parameter totals per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub encoder_input: u64,
    pub positions: u64,
    /// All conformer blocks together.
    pub encoder_blocks: u64,
    pub decoder: u64,
    /// Joint projections and the tied embedding, counted once.
    pub joint: u64,
    pub total: u64,
}

/// Closed-form count for one conformer block of width `d`.
pub fn conformer_block_parameters(d: u64, ff_expansion: u64, kernel: u64) -> u64 {
    let f = d * ff_expansion;
    let feed_forward = 2 * d + (d * f + f) + (f * d + d);
    let conv = 2 * d + (d * 2 * d + 2 * d) + (d * kernel + d) + 2 * d + (d * d + d);
    let attention = 2 * d + 4 * (d * d + d);
    2 * feed_forward + conv + attention + 2 * d
}

/// Exact parameter count implied by `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> ParamBreakdown {
    let e = &cfg.encoder;
    let d = e.model_dim as u64;
    let h = cfg.decoder.hidden_dim as u64;
    let j = cfg.joint_dim as u64;
    let v = cfg.vocab_size as u64;

    let encoder_input = e.input_dim as u64 * d + d;
    let positions = e.max_positions as u64 * d;
    let encoder_blocks =
        e.num_layers as u64 * conformer_block_parameters(d, e.ff_expansion as u64, e.conv_kernel as u64);
    let layers = cfg.decoder.num_layers as u64;
    // first layer reads embeddings of width j, the rest read h
    let decoder = 4 * h * (j + h + 1) + layers.saturating_sub(1) * 4 * h * (h + h + 1);
    let joint = (d * j + j) + h * j + (v + 1) * j;
    ParamBreakdown {
        encoder_input,
        positions,
        encoder_blocks,
        decoder,
        joint,
        total: encoder_input + positions + encoder_blocks + decoder + joint,
    }
}
