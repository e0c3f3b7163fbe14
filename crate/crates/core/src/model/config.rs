use std::str::FromStr;

use crate::config::AttnConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// FFN hidden width is `ffn_mult · d_model`.
    pub ffn_mult: usize,
    pub max_seq: usize,
    /// Attention settings; `d_model`, `n_heads`, `head_dim` and
    /// `unmasked_conv` are taken from the model fields.
    pub attn: AttnConfig,
    pub seed: u64,
    pub unmasked_conv: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_heads: usize, n_layers: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            ffn_mult: 4,
            max_seq: 256,
            attn: AttnConfig::new(d_model, n_heads),
            seed: 0,
            unmasked_conv: false,
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// The per-layer attention config.
    pub fn attn_config(&self) -> AttnConfig {
        let mut a = self.attn.clone();
        a.d_model = self.d_model;
        a.n_heads = self.n_heads;
        a.head_dim = self.d_model.checked_div(self.n_heads).unwrap_or(0);
        a.unmasked_conv = self.unmasked_conv;
        a
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_mult", self.ffn_mult),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        self.attn_config().validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "vocab_size" => self.vocab_size = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "max_seq" => self.max_seq = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "unmasked_conv" => self.unmasked_conv = num(key, value)?,
            "group_size" => self.attn.group_size = num(key, value)?,
            "conv_kernel" => self.attn.conv_kernel = num(key, value)?,
            "alpha" => self.attn.alpha = num(key, value)?,
            "feature_map" => self.attn.feature_map = value.parse()?,
            "global_scale" => self.attn.global_scale = value.parse()?,
            "max_tree_depth" => self.attn.max_tree_depth = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines on top of `base`. Blank lines and
    /// `#` comments are skipped; unknown keys are errors.
    pub fn parse_with(base: Self, text: &str) -> Result<Self> {
        let mut cfg = base;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the config in the format read by [`ModelConfig::parse_with`].
    pub fn to_text(&self) -> String {
        let a = &self.attn;
        format!(
            "vocab_size = {}\nd_model = {}\nn_heads = {}\nn_layers = {}\nffn_mult = {}\n\
             max_seq = {}\nseed = {}\nunmasked_conv = {}\ngroup_size = {}\nconv_kernel = {}\n\
             alpha = {}\nfeature_map = {}\nglobal_scale = {}\nmax_tree_depth = {}\n",
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.ffn_mult,
            self.max_seq,
            self.seed,
            self.unmasked_conv,
            a.group_size,
            a.conv_kernel,
            a.alpha,
            a.feature_map,
            a.global_scale,
            a.max_tree_depth
        )
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with(Self::new(16, 64, 4, 2), s)
    }
}
