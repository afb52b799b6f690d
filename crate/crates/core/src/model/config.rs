use crate::error::{ArithError, Result};
use crate::tasks::vocab;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    Sinusoidal,
    Learned,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Encoder reduced to token embedding plus positional encoding.
    pub squeeze_encoder: bool,
    /// Every attention sublayer removed (self and cross).
    pub no_attention: bool,
    /// Every feed-forward sublayer removed.
    pub no_ffn: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub positional_encoding: PositionalEncoding,
    pub activation: Activation,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Biases in linear maps and layer norms.
    #[serde(default = "enabled")]
    pub bias: bool,
    #[serde(default)]
    pub ablations: Ablations,
}

fn enabled() -> bool {
    true
}

impl ModelConfig {
    /// Encoder-decoder: 6+6 post-norm layers, d_model 64, 8 heads,
    /// sinusoidal positions.
    pub fn encoder_decoder() -> Self {
        Self {
            family: Family::EncoderDecoder,
            d_model: 64,
            d_ff: 256,
            num_heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            dropout: 0.1,
            positional_encoding: PositionalEncoding::Sinusoidal,
            activation: Activation::Relu,
            vocab_size: vocab::SIZE,
            max_positions: 32,
            bias: true,
            ablations: Ablations::default(),
        }
    }

    /// Decoder-only (nanoGPT-style): 6 pre-norm blocks, learned positions,
    /// no biases.
    pub fn decoder_only() -> Self {
        Self {
            family: Family::DecoderOnly,
            encoder_layers: 0,
            positional_encoding: PositionalEncoding::Learned,
            activation: Activation::Gelu,
            bias: false,
            ..Self::encoder_decoder()
        }
    }

    pub fn with_d_model(mut self, d: usize) -> Self {
        self.d_model = d;
        self.d_ff = 4 * d;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ArithError::Config(m));
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.vocab_size != vocab::SIZE {
            return bad(format!("vocab_size must be {}, got {}", vocab::SIZE, self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_positions == 0 || self.d_ff == 0 {
            return bad("max_positions and d_ff must be positive".into());
        }
        if self.family == Family::DecoderOnly {
            if self.encoder_layers != 0 {
                return bad("decoder-only models have no encoder layers".into());
            }
            if self.ablations.squeeze_encoder {
                return bad("squeeze_encoder needs an encoder".into());
            }
        }
        Ok(())
    }
}
