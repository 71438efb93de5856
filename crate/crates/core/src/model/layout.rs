use super::config::ModelConfig;

/// Ordered `(name, shape)` list of every tensor a config instantiates.
/// Linear weights are stored `in x out`.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = &cfg.encoder;
    let d = e.model_dim;
    let f = d * e.ff_expansion;
    let h = cfg.decoder.hidden_dim;
    let j = cfg.joint_dim;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));

    push("encoder.input.weight".into(), vec![e.input_dim, d]);
    push("encoder.input.bias".into(), vec![d]);
    push("encoder.pos".into(), vec![e.max_positions, d]);
    for i in 0..e.num_layers {
        let b = format!("encoder.block{i}");
        feed_forward(&mut push, &format!("{b}.ff1"), d, f);
        norm(&mut push, &format!("{b}.conv.norm"), d);
        linear(&mut push, &format!("{b}.conv.pointwise1"), d, 2 * d);
        push(format!("{b}.conv.depthwise.weight"), vec![d, e.conv_kernel]);
        push(format!("{b}.conv.depthwise.bias"), vec![d]);
        norm(&mut push, &format!("{b}.conv.depth_norm"), d);
        linear(&mut push, &format!("{b}.conv.pointwise2"), d, d);
        norm(&mut push, &format!("{b}.mhsa.norm"), d);
        for proj in ["query", "key", "value", "out"] {
            linear(&mut push, &format!("{b}.mhsa.{proj}"), d, d);
        }
        feed_forward(&mut push, &format!("{b}.ff2"), d, f);
        norm(&mut push, &format!("{b}.final_norm"), d);
    }
    for l in 0..cfg.decoder.num_layers {
        let input = if l == 0 { j } else { h };
        push(format!("decoder.lstm{l}.wx"), vec![input, 4 * h]);
        push(format!("decoder.lstm{l}.wh"), vec![h, 4 * h]);
        push(format!("decoder.lstm{l}.bias"), vec![4 * h]);
    }
    push("joint.enc_proj.weight".into(), vec![d, j]);
    push("joint.enc_proj.bias".into(), vec![j]);
    push("joint.pred_proj.weight".into(), vec![h, j]);
    push("joint.embedding".into(), vec![cfg.vocab_size + 1, j]);
    out
}

fn norm(push: &mut impl FnMut(String, Vec<usize>), prefix: &str, d: usize) {
    push(format!("{prefix}.gamma"), vec![d]);
    push(format!("{prefix}.beta"), vec![d]);
}

fn linear(push: &mut impl FnMut(String, Vec<usize>), prefix: &str, fan_in: usize, fan_out: usize) {
    push(format!("{prefix}.weight"), vec![fan_in, fan_out]);
    push(format!("{prefix}.bias"), vec![fan_out]);
}

fn feed_forward(push: &mut impl FnMut(String, Vec<usize>), prefix: &str, d: usize, f: usize) {
    norm(push, &format!("{prefix}.norm"), d);
    linear(push, &format!("{prefix}.linear1"), d, f);
    linear(push, &format!("{prefix}.linear2"), f, d);
}
