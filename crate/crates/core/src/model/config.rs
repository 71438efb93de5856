use crate::config::FlatConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Feature dimension fed to the input projection.
    pub input_dim: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub attention_heads: usize,
    pub ff_expansion: usize,
    pub conv_kernel: usize,
    /// Blocks followed by a stride-2 time max-pool, counted from the first.
    pub pooling_layers: usize,
    pub dropout: f64,
    /// Rows of the learned absolute position table (longest input in frames).
    pub max_positions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Width of the joint space and of the tied embedding table.
    pub joint_dim: usize,
    /// Output labels excluding blank.
    pub vocab_size: usize,
    pub blank_id: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 40,
            num_layers: 16,
            model_dim: 512,
            attention_heads: 4,
            ff_expansion: 4,
            conv_kernel: 15,
            pooling_layers: 3,
            dropout: 0.1,
            max_positions: 2048,
        }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: 2,
            hidden_dim: 1024,
            dropout: 0.1,
        }
    }
}

impl Default for ModelConfig {
    /// The 128M-parameter reference teacher: 16 conformer blocks of width
    /// 512 with 4 heads, two 1024-wide LSTM layers, 10026 labels.
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            joint_dim: 640,
            vocab_size: 10026,
            blank_id: 0,
        }
    }
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("{name} = {rate} outside [0, 1)")));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let positive = [
            ("encoder.input_dim", e.input_dim),
            ("encoder.num_layers", e.num_layers),
            ("encoder.model_dim", e.model_dim),
            ("encoder.attention_heads", e.attention_heads),
            ("encoder.ff_expansion", e.ff_expansion),
            ("encoder.conv_kernel", e.conv_kernel),
            ("encoder.max_positions", e.max_positions),
            ("decoder.num_layers", self.decoder.num_layers),
            ("decoder.hidden_dim", self.decoder.hidden_dim),
            ("joint_dim", self.joint_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if e.model_dim % e.attention_heads != 0 {
            return Err(Error::Config(format!(
                "encoder.model_dim {} not divisible by {} heads",
                e.model_dim, e.attention_heads
            )));
        }
        if e.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("encoder.conv_kernel {} must be odd", e.conv_kernel)));
        }
        if e.pooling_layers > e.num_layers {
            return Err(Error::Config(format!(
                "encoder.pooling_layers {} exceeds {} layers",
                e.pooling_layers, e.num_layers
            )));
        }
        if self.blank_id != 0 {
            return Err(Error::Config("blank_id must be 0".into()));
        }
        check_rate("encoder.dropout", e.dropout)?;
        check_rate("decoder.dropout", self.decoder.dropout)?;
        Ok(())
    }

    /// Overall time reduction of the encoder.
    pub fn time_reduction(&self) -> usize {
        1 << self.encoder.pooling_layers
    }

    /// Encoder output frames for `input_frames` feature frames.
    pub fn encoder_frames(&self, input_frames: usize) -> usize {
        (0..self.encoder.pooling_layers).fold(input_frames, |t, _| t / 2)
    }

    /// Reads keys (without prefix) on top of `base`, consuming them.
    pub fn from_flat(cfg: &mut FlatConfig, base: &ModelConfig) -> Result<Self> {
        let e = &base.encoder;
        let d = &base.decoder;
        let out = ModelConfig {
            encoder: EncoderConfig {
                input_dim: cfg.take_or("encoder.input_dim", e.input_dim)?,
                num_layers: cfg.take_or("encoder.num_layers", e.num_layers)?,
                model_dim: cfg.take_or("encoder.model_dim", e.model_dim)?,
                attention_heads: cfg.take_or("encoder.attention_heads", e.attention_heads)?,
                ff_expansion: cfg.take_or("encoder.ff_expansion", e.ff_expansion)?,
                conv_kernel: cfg.take_or("encoder.conv_kernel", e.conv_kernel)?,
                pooling_layers: cfg.take_or("encoder.pooling_layers", e.pooling_layers)?,
                dropout: cfg.take_or("encoder.dropout", e.dropout)?,
                max_positions: cfg.take_or("encoder.max_positions", e.max_positions)?,
            },
            decoder: DecoderConfig {
                num_layers: cfg.take_or("decoder.num_layers", d.num_layers)?,
                hidden_dim: cfg.take_or("decoder.hidden_dim", d.hidden_dim)?,
                dropout: cfg.take_or("decoder.dropout", d.dropout)?,
            },
            joint_dim: cfg.take_or("joint_dim", base.joint_dim)?,
            vocab_size: cfg.take_or("vocab_size", base.vocab_size)?,
            blank_id: cfg.take_or("blank_id", base.blank_id)?,
        };
        out.validate()?;
        Ok(out)
    }

    /// Parses a complete description; every field is required and no other
    /// key is allowed.
    pub fn from_text_strict(text: &str, prefix: &str) -> Result<Self> {
        let mut cfg = FlatConfig::parse(text)?;
        let mut section = cfg.take_section(prefix);
        for key in Self::KEYS {
            if !section.contains(key) {
                return Err(Error::Config(format!("missing key `{prefix}.{key}`")));
            }
        }
        let out = Self::from_flat(&mut section, &ModelConfig::default())?;
        section.finish(prefix)?;
        Ok(out)
    }

    pub const KEYS: [&'static str; 15] = [
        "encoder.input_dim",
        "encoder.num_layers",
        "encoder.model_dim",
        "encoder.attention_heads",
        "encoder.ff_expansion",
        "encoder.conv_kernel",
        "encoder.pooling_layers",
        "encoder.dropout",
        "encoder.max_positions",
        "decoder.num_layers",
        "decoder.hidden_dim",
        "decoder.dropout",
        "joint_dim",
        "vocab_size",
        "blank_id",
    ];

    /// Canonical text form: one `prefix.key = value` line per field in a
    /// fixed order.
    pub fn to_text(&self, prefix: &str) -> String {
        let e = &self.encoder;
        let d = &self.decoder;
        let values = [
            e.input_dim.to_string(),
            e.num_layers.to_string(),
            e.model_dim.to_string(),
            e.attention_heads.to_string(),
            e.ff_expansion.to_string(),
            e.conv_kernel.to_string(),
            e.pooling_layers.to_string(),
            format!("{:?}", e.dropout),
            e.max_positions.to_string(),
            d.num_layers.to_string(),
            d.hidden_dim.to_string(),
            format!("{:?}", d.dropout),
            self.joint_dim.to_string(),
            self.vocab_size.to_string(),
            self.blank_id.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{prefix}.{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default();
        c.encoder.dropout = 0.125;
        c.vocab_size = 8;
        let text = c.to_text("model");
        assert_eq!(ModelConfig::from_text_strict(&text, "model").unwrap(), c);
    }

    #[test]
    fn frame_reduction() {
        let c = ModelConfig::default();
        assert_eq!(c.encoder_frames(80), 10);
        assert_eq!(c.encoder_frames(98), 12);
        assert_eq!(c.time_reduction(), 8);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::default();
        c.encoder.attention_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.encoder.conv_kernel = 14;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.blank_id = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.decoder.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn strict_parse_rejects_extra_and_missing() {
        let c = ModelConfig::default();
        let extra = format!("{}model.mystery = 1\n", c.to_text("model"));
        assert!(ModelConfig::from_text_strict(&extra, "model").is_err());
        let missing: String = c.to_text("model").lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(ModelConfig::from_text_strict(&missing, "model").is_err());
    }
}
