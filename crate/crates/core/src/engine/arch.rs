use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Shape of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_width: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub precision: Precision,
    #[serde(default = "default_eps")]
    pub norm_epsilon: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl ArchConfig {
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        mlp_width: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            mlp_width,
            vocab_size,
            max_seq_len,
            precision: Precision::Single,
            norm_epsilon: default_eps(),
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_width", self.mlp_width),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "norm_epsilon must be positive, got {}",
                self.norm_epsilon
            )));
        }
        Ok(())
    }

    /// Canonical key-sorted `key=value` lines used in checkpoint headers.
    pub fn to_header(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.header_map() {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    fn header_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("max_seq_len".into(), self.max_seq_len.to_string());
        m.insert("mlp_width".into(), self.mlp_width.to_string());
        m.insert("n_heads".into(), self.n_heads.to_string());
        m.insert("n_layers".into(), self.n_layers.to_string());
        m.insert("norm_epsilon".into(), format!("{:e}", self.norm_epsilon));
        m.insert("precision".into(), self.precision.to_string());
        m.insert("vocab_size".into(), self.vocab_size.to_string());
        m
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut last: Option<&str> = None;
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("corrupt header line {line:?}")))?;
            if last.is_some_and(|prev| prev >= k) {
                return Err(Error::Checkpoint("corrupt header: keys not sorted".into()));
            }
            last = Some(k);
            m.insert(k.to_string(), v.to_string());
        }
        let int = |key: &str| -> Result<usize> {
            m.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("corrupt header: missing {key}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("corrupt header: bad value for {key}")))
        };
        let arch = ArchConfig {
            n_layers: int("n_layers")?,
            d_model: int("d_model")?,
            n_heads: int("n_heads")?,
            mlp_width: int("mlp_width")?,
            vocab_size: int("vocab_size")?,
            max_seq_len: int("max_seq_len")?,
            precision: m
                .get("precision")
                .ok_or_else(|| Error::Checkpoint("corrupt header: missing precision".into()))?
                .parse()
                .map_err(|_| Error::Checkpoint("corrupt header: bad precision".into()))?,
            norm_epsilon: m
                .get("norm_epsilon")
                .ok_or_else(|| Error::Checkpoint("corrupt header: missing norm_epsilon".into()))?
                .parse()
                .map_err(|_| Error::Checkpoint("corrupt header: bad norm_epsilon".into()))?,
        };
        if m.len() != 8 {
            return Err(Error::Checkpoint("corrupt header: unexpected keys".into()));
        }
        arch.validate()
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        Ok(arch)
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} d={} heads={} m={} vocab={} max_seq={} {}",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.mlp_width,
            self.vocab_size,
            self.max_seq_len,
            self.precision
        )
    }
}
