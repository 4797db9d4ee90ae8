use crate::error::{Error, Result};
use crate::geometry::GeometryConfig;

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    pub d_g: usize,
    /// Width of the input region features.
    pub d_feat: usize,
    pub vocab_size: usize,
    /// Longest decoder prefix, and the most tokens a decode may produce.
    pub max_caption_len: usize,
    /// Gate the encoder attention with AoA; otherwise use a plain output projection.
    pub aoa_enabled: bool,
    pub eps_clamp: f64,
    pub wave_base: f64,
    /// Applied in training forward passes only.
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ffn: 128,
            d_g: 64,
            d_feat: 16,
            vocab_size: 16,
            max_caption_len: 20,
            aoa_enabled: true,
            eps_clamp: 1e-3,
            wave_base: 1000.0,
            dropout_rate: 0.0,
            seed: 7,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 14] = [
        "d_model",
        "n_heads",
        "n_enc_layers",
        "n_dec_layers",
        "d_ffn",
        "d_g",
        "d_feat",
        "vocab_size",
        "max_caption_len",
        "aoa_enabled",
        "eps_clamp",
        "wave_base",
        "dropout_rate",
        "seed",
    ];

    pub fn geometry(&self) -> GeometryConfig {
        GeometryConfig {
            d_g: self.d_g,
            wave_base: self.wave_base,
            eps_clamp: self.eps_clamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().validate()?;
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("d_feat", self.d_feat),
            ("max_caption_len", self.max_caption_len),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the four specials",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`KEYS`](Self::KEYS) order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.d_model.to_string(),
            self.n_heads.to_string(),
            self.n_enc_layers.to_string(),
            self.n_dec_layers.to_string(),
            self.d_ffn.to_string(),
            self.d_g.to_string(),
            self.d_feat.to_string(),
            self.vocab_size.to_string(),
            self.max_caption_len.to_string(),
            self.aoa_enabled.to_string(),
            self.eps_clamp.to_string(),
            self.wave_base.to_string(),
            self.dropout_rate.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    /// Sets one field from text. Returns `Ok(false)` for keys this config
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "n_enc_layers" => self.n_enc_layers = parse(key, value)?,
            "n_dec_layers" => self.n_dec_layers = parse(key, value)?,
            "d_ffn" => self.d_ffn = parse(key, value)?,
            "d_g" => self.d_g = parse(key, value)?,
            "d_feat" => self.d_feat = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_caption_len" => self.max_caption_len = parse(key, value)?,
            "aoa_enabled" => self.aoa_enabled = parse(key, value)?,
            "eps_clamp" => self.eps_clamp = parse(key, value)?,
            "wave_base" => self.wave_base = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
