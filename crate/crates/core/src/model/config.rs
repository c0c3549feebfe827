use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How encoder states reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Decoder-only: the source is ignored.
    None,
    /// A residual cross-attention sublayer in every decoder block.
    CrossAttention,
    /// One sigmoid gate after the final decoder block.
    Gate,
    /// Both of the above.
    Both,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::None,
        FusionMode::CrossAttention,
        FusionMode::Gate,
        FusionMode::Both,
    ];

    pub fn uses_encoder(self) -> bool {
        self != FusionMode::None
    }

    pub fn has_cross_attention(self) -> bool {
        matches!(self, FusionMode::CrossAttention | FusionMode::Both)
    }

    pub fn has_gate(self) -> bool {
        matches!(self, FusionMode::Gate | FusionMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::CrossAttention => "cross_attention",
            FusionMode::Gate => "gate",
            FusionMode::Both => "both",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

/// Width of the gate weight α.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateGranularity {
    /// One α per step (`W: d → 1`).
    Scalar,
    /// One α per hidden dimension (`W: d → d`).
    PerDimension,
}

impl GateGranularity {
    pub fn as_str(self) -> &'static str {
        match self {
            GateGranularity::Scalar => "scalar",
            GateGranularity::PerDimension => "per_dimension",
        }
    }
}

impl fmt::Display for GateGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(GateGranularity::Scalar),
            "per_dimension" => Ok(GateGranularity::PerDimension),
            _ => Err(Error::Config(format!("unknown gate granularity {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub fusion_mode: FusionMode,
    pub gate_granularity: GateGranularity,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 32,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 64,
            max_len: 64,
            dropout_rate: 0.1,
            fusion_mode: FusionMode::Both,
            gate_granularity: GateGranularity::Scalar,
            seed: 0,
        }
    }
}

pub(crate) const CONFIG_KEYS: [&str; 11] = [
    "vocab_size",
    "d_model",
    "n_heads",
    "n_encoder_layers",
    "n_decoder_layers",
    "d_ff",
    "max_len",
    "dropout_rate",
    "fusion_mode",
    "gate_granularity",
    "seed",
];

impl ModelConfig {
    pub fn keys() -> &'static [&'static str] {
        &CONFIG_KEYS
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("max_len must be at least 2, got {}", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Value of one config key, in the text form used by checkpoints and
    /// config files.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "vocab_size" => self.vocab_size.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "n_encoder_layers" => self.n_encoder_layers.to_string(),
            "n_decoder_layers" => self.n_decoder_layers.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "max_len" => self.max_len.to_string(),
            "dropout_rate" => self.dropout_rate.to_string(),
            "fusion_mode" => self.fusion_mode.to_string(),
            "gate_granularity" => self.gate_granularity.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from text. Does not validate the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "vocab_size" => self.vocab_size = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_encoder_layers" => self.n_encoder_layers = num(key, value)?,
            "n_decoder_layers" => self.n_decoder_layers = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "fusion_mode" => self.fusion_mode = value.trim().parse()?,
            "gate_granularity" => self.gate_granularity = value.trim().parse()?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines in a fixed key order.
    pub fn to_lines(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Parses text from [`ModelConfig::to_lines`]. Every key must appear
    /// exactly once.
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut config = ModelConfig::default();
        let mut seen = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line {line:?}")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("duplicate config key {key:?}")));
            }
            config.set(key, value)?;
            seen.push(key);
        }
        if let Some(missing) = CONFIG_KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(Error::Config(format!("missing config key {missing:?}")));
        }
        config.validate()?;
        Ok(config)
    }
}
