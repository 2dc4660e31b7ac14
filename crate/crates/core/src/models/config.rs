use std::collections::BTreeMap;

use crate::diffusion::DiffusionProcess;
use crate::error::{Error, Result};

/// Shape of a denoiser or generator network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Sequence length `D`.
    pub seq_len: usize,
    /// Data vocabulary `K`; the output head has this many logits.
    pub vocab: usize,
    /// Embedding table rows: `K`, or `K + 1` when MASK is an input token.
    pub input_vocab: usize,
    pub embed_width: usize,
    pub hidden_width: usize,
    pub depth: usize,
    /// Number of sinusoidal time features (even).
    pub time_width: usize,
    /// Width of the Gaussian noise input; 0 disables noise conditioning.
    pub n_noise: usize,
}

impl ModelConfig {
    /// A config sized for `process` with the default widths.
    pub fn for_process(process: &DiffusionProcess, seq_len: usize) -> Self {
        Self {
            seq_len,
            vocab: process.vocab(),
            input_vocab: process.state_vocab(),
            embed_width: 16,
            hidden_width: 32,
            depth: 2,
            time_width: 8,
            n_noise: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("seq_len", self.seq_len),
            ("vocab", self.vocab),
            ("embed_width", self.embed_width),
            ("hidden_width", self.hidden_width),
            ("depth", self.depth),
            ("time_width", self.time_width),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model {name} must be >= 1")));
            }
        }
        if self.input_vocab != self.vocab && self.input_vocab != self.vocab + 1 {
            return Err(Error::InvalidArgument(format!(
                "input vocabulary {} must be {} or {}",
                self.input_vocab,
                self.vocab,
                self.vocab + 1
            )));
        }
        if !self.time_width.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time_width must be even".into()));
        }
        Ok(())
    }

    /// Whether `self` can consume states of `process`.
    pub fn matches(&self, process: &DiffusionProcess) -> bool {
        self.vocab == process.vocab() && self.input_vocab == process.state_vocab()
    }

    /// Same architecture ignoring the noise input.
    pub fn same_backbone(&self, other: &ModelConfig) -> bool {
        ModelConfig {
            n_noise: 0,
            ..self.clone()
        } == ModelConfig {
            n_noise: 0,
            ..other.clone()
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("model.seq_len", self.seq_len),
            ("model.vocab", self.vocab),
            ("model.input_vocab", self.input_vocab),
            ("model.embed_width", self.embed_width),
            ("model.hidden_width", self.hidden_width),
            ("model.depth", self.depth),
            ("model.time_width", self.time_width),
            ("model.n_noise", self.n_noise),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing header key {k}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("header key {k} is not an integer")))
        };
        let cfg = Self {
            seq_len: get("model.seq_len")?,
            vocab: get("model.vocab")?,
            input_vocab: get("model.input_vocab")?,
            embed_width: get("model.embed_width")?,
            hidden_width: get("model.hidden_width")?,
            depth: get("model.depth")?,
            time_width: get("model.time_width")?,
            n_noise: get("model.n_noise")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
