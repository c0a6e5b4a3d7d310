//! Model and training configuration. Files are flat TOML; unknown keys are
//! rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// embedding dimension
    pub d: usize,
    /// resampled points per cycle (charge half + discharge half)
    pub seq_len: usize,
    /// padded early-cycle axis
    pub s_max: usize,
    /// usable early cycles S
    pub s_cycles: usize,
    /// SOC patch length and stride
    pub patch: usize,
    pub heads: usize,
    /// number of decoder queries
    pub n_queries: usize,
    pub decoder_layers: usize,
    pub intra_layers: usize,
    pub n_mem: usize,
    pub d_ff: usize,
    pub d_ffs: usize,
    /// condition-embedding input dimension
    pub d_enc: usize,
    pub lambda_align: f64,
    pub lambda_recover: f64,
    pub dropout: f64,
    /// forecast horizon in cycles
    pub t_max: usize,

    pub socview: bool,
    pub mdpm: bool,
    pub acdecoder: bool,
    pub acattention: bool,
    pub acquery: bool,
    pub llm_embedder: bool,

    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            seq_len: 300,
            s_max: 100,
            s_cycles: 100,
            patch: 30,
            heads: 8,
            n_queries: 8,
            decoder_layers: 4,
            intra_layers: 2,
            n_mem: 64,
            d_ff: 128,
            d_ffs: 128,
            d_enc: 64,
            lambda_align: 1.0,
            lambda_recover: 1.0,
            dropout: 0.1,
            t_max: 5000,
            socview: true,
            mdpm: true,
            acdecoder: true,
            acattention: true,
            acquery: true,
            llm_embedder: false,
            lr: 1e-4,
            batch_size: 64,
            max_epochs: 300,
            patience: 30,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration that trains in seconds on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            d: 16,
            seq_len: 40,
            s_max: 40,
            s_cycles: 40,
            patch: 10,
            heads: 2,
            n_queries: 4,
            decoder_layers: 2,
            intra_layers: 2,
            n_mem: 8,
            d_ff: 32,
            d_ffs: 32,
            d_enc: 16,
            dropout: 0.0,
            t_max: 600,
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 150,
            patience: 30,
            ..ModelConfig::default()
        }
    }

    /// Number of SOC intervals, `floor((L - P) / P) + 1`.
    pub fn n_soc_tokens(&self) -> usize {
        if self.patch == 0 || self.patch > self.seq_len {
            return 0;
        }
        (self.seq_len - self.patch) / self.patch + 1
    }

    /// Length of the token sequence the decoder attends over.
    pub fn n_tokens(&self) -> usize {
        self.s_max + if self.socview { self.n_soc_tokens() } else { 0 }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads.max(1)
    }

    /// Condition prior is built at all (either mechanism on).
    pub fn uses_condition(&self) -> bool {
        self.acdecoder && (self.acquery || self.acattention)
    }

    pub fn query_prior(&self) -> bool {
        self.acdecoder && self.acquery
    }

    pub fn attention_prior(&self) -> bool {
        self.acdecoder && self.acattention
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            bad.push(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.patch == 0 || self.patch > self.seq_len {
            bad.push(format!("patch={} must be in 1..=seq_len={}", self.patch, self.seq_len));
        }
        if self.seq_len < 2 || self.seq_len % 2 != 0 {
            bad.push(format!("seq_len={} must be even and >= 2", self.seq_len));
        }
        if self.n_queries == 0 {
            bad.push("n_queries must be >= 1".into());
        }
        if self.n_mem < 2 {
            bad.push(format!("n_mem={} must be >= 2", self.n_mem));
        }
        if self.s_max == 0 || self.s_cycles == 0 || self.s_cycles > self.s_max {
            bad.push(format!("s_cycles={} must be in 1..=s_max={}", self.s_cycles, self.s_max));
        }
        if self.t_max == 0 || self.d_ff == 0 || self.d_ffs == 0 || self.d_enc == 0 {
            bad.push("t_max, d_ff, d_ffs and d_enc must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push(format!("dropout={} must be in [0, 1)", self.dropout));
        }
        if self.lambda_align < 0.0 || self.lambda_recover < 0.0 {
            bad.push("loss weights must be >= 0".into());
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            bad.push("lr, batch_size and max_epochs must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.socview = true;
        c.mdpm = true;
        c.acdecoder = true;
        c.acattention = true;
        c.acquery = true;
        c.llm_embedder = true;
        match variant {
            Variant::Full => {}
            Variant::NoSocView => c.socview = false,
            Variant::NoMdpm => c.mdpm = false,
            Variant::NoAcDecoder => {
                c.acdecoder = false;
                c.acattention = false;
                c.acquery = false;
            }
            Variant::NoAcAttention => c.acattention = false,
            Variant::NoAcQuery => c.acquery = false,
            Variant::NoLlm => c.llm_embedder = false,
        }
        c
    }
}

impl ModelConfig {
    /// Same config with the external embedder switched on or off.
    pub fn with_llm(mut self, on: bool) -> Self {
        self.llm_embedder = on;
        self
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSocView,
    NoMdpm,
    NoAcDecoder,
    NoAcAttention,
    NoAcQuery,
    NoLlm,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoSocView,
        Variant::NoMdpm,
        Variant::NoAcDecoder,
        Variant::NoAcAttention,
        Variant::NoAcQuery,
        Variant::NoLlm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSocView => "no_socview",
            Variant::NoMdpm => "no_mdpm",
            Variant::NoAcDecoder => "no_acdecoder",
            Variant::NoAcAttention => "no_acattention",
            Variant::NoAcQuery => "no_acquery",
            Variant::NoLlm => "no_llm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}
