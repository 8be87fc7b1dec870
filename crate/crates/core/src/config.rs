//! Flat `key = value` run configuration.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_err, CoreError, Result};

/// How start/end distributions are turned into a token span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Independent argmaxes; falls back to `Joint` when end precedes start.
    Independent,
    /// Best `l1[s]·l2[e]` over ordered pairs inside the span window.
    #[default]
    Joint,
}

impl FromStr for DecodeMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(DecodeMode::Independent),
            "joint" => Ok(DecodeMode::Joint),
            _ => Err(CoreError::Config(format!("decode mode must be `independent` or `joint`, got `{s}`"))),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Independent => "independent",
            DecodeMode::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Frame count every feature sequence is resampled to.
    pub n: usize,
    pub d_v: usize,
    /// Highlight window extension ratio.
    pub alpha: f64,
    /// Weight of the highlight loss in the total.
    pub lambda: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_tokens: usize,
    /// Longest decodable span, in tokens.
    pub max_span_tokens: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub decode_mode: DecodeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 128,
            n: 128,
            d_v: 32,
            alpha: 0.25,
            lambda: 0.1,
            lr: 1e-3,
            warmup_steps: 100,
            clip_norm: 1.0,
            dropout: 0.1,
            weight_decay: 0.01,
            batch_size: 4,
            max_tokens: 1800,
            max_span_tokens: 64,
            max_steps: 2000,
            seed: 7,
            decode_mode: DecodeMode::Joint,
        }
    }
}

fn parse_val<V: FromStr>(key: &str, v: &str, line: usize) -> Result<V> {
    v.parse()
        .map_err(|_| CoreError::Config(format!("line {line}: bad value `{v}` for `{key}`")))
}

impl TrainConfig {
    /// Tiny configuration used for gradient certification.
    pub fn micro() -> Self {
        Self {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 32,
            n: 8,
            d_v: 4,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value;
        match key {
            "d_model" => self.d_model = parse_val(key, v, line)?,
            "n_layers" => self.n_layers = parse_val(key, v, line)?,
            "n_heads" => self.n_heads = parse_val(key, v, line)?,
            "ffn_dim" => self.ffn_dim = parse_val(key, v, line)?,
            "n" => self.n = parse_val(key, v, line)?,
            "d_v" => self.d_v = parse_val(key, v, line)?,
            "alpha" => self.alpha = parse_val(key, v, line)?,
            "lambda" => self.lambda = parse_val(key, v, line)?,
            "lr" => self.lr = parse_val(key, v, line)?,
            "warmup_steps" => self.warmup_steps = parse_val(key, v, line)?,
            "clip_norm" => self.clip_norm = parse_val(key, v, line)?,
            "dropout" => self.dropout = parse_val(key, v, line)?,
            "weight_decay" => self.weight_decay = parse_val(key, v, line)?,
            "batch_size" => self.batch_size = parse_val(key, v, line)?,
            "max_tokens" => self.max_tokens = parse_val(key, v, line)?,
            "max_span_tokens" => self.max_span_tokens = parse_val(key, v, line)?,
            "max_steps" => self.max_steps = parse_val(key, v, line)?,
            "seed" => self.seed = parse_val(key, v, line)?,
            "decode_mode" => self.decode_mode = v.parse()?,
            _ => return Err(CoreError::Config(format!("line {line}: unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Canonical text form; `parse(to_text())` gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d_model", &self.d_model);
        kv("n_layers", &self.n_layers);
        kv("n_heads", &self.n_heads);
        kv("ffn_dim", &self.ffn_dim);
        kv("n", &self.n);
        kv("d_v", &self.d_v);
        kv("alpha", &self.alpha);
        kv("lambda", &self.lambda);
        kv("lr", &self.lr);
        kv("warmup_steps", &self.warmup_steps);
        kv("clip_norm", &self.clip_norm);
        kv("dropout", &self.dropout);
        kv("weight_decay", &self.weight_decay);
        kv("batch_size", &self.batch_size);
        kv("max_tokens", &self.max_tokens);
        kv("max_span_tokens", &self.max_span_tokens);
        kv("max_steps", &self.max_steps);
        kv("seed", &self.seed);
        kv("decode_mode", &self.decode_mode);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("n", self.n),
            ("d_v", self.d_v),
            ("batch_size", self.batch_size),
            ("max_tokens", self.max_tokens),
            ("max_span_tokens", self.max_span_tokens),
            ("max_steps", self.max_steps),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::Config(format!("`{k}` must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CoreError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config("dropout must be in [0, 1)".into()));
        }
        if !(self.alpha >= -1.0 && self.alpha.is_finite()) {
            return Err(CoreError::Config("alpha must be finite and at least -1".into()));
        }
        for (k, v) in [("lambda", self.lambda), ("lr", self.lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::Config(format!("`{k}` must be finite and non-negative")));
            }
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(CoreError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Keys whose values differ between two configurations.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let a = self.to_text();
        let b = other.to_text();
        a.lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| format!("{x} (vs {})", y.split_once(" = ").map_or(y, |p| p.1)))
            .collect()
    }
}
