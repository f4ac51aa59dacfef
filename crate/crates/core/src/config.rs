//! Model configuration and the flat `key = value` file format.

use std::fmt;
use std::str::FromStr;

use crate::cts::Pooling;
use crate::error::{ensure, Error, Result};
use crate::ssm::{Discretization, SsmMode};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// How token embeddings become a bag embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregator {
    /// Selective-scan blocks followed by gated attention pooling.
    #[default]
    Ssm,
    Mean,
    Max,
    Attention,
}

impl Aggregator {
    pub(crate) fn code(self) -> u8 {
        match self {
            Aggregator::Ssm => 0,
            Aggregator::Mean => 1,
            Aggregator::Max => 2,
            Aggregator::Attention => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        [Aggregator::Ssm, Aggregator::Mean, Aggregator::Max, Aggregator::Attention].get(code as usize).copied()
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssm" => Ok(Aggregator::Ssm),
            "mean" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            "attention" => Ok(Aggregator::Attention),
            other => Err(Error::Config(format!("unknown aggregator `{other}`"))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Ssm => "ssm",
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::Attention => "attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub state_dim: usize,
    pub n_blocks: usize,
    pub ssm_mode: SsmMode,
    pub discretization: Discretization,
    pub aggregator: Aggregator,
    pub attn_dim: usize,
    pub overlap: bool,
    pub cts: bool,
    pub cts_ratio: f64,
    pub local_channels: usize,
    pub aux_pooling: Pooling,
    pub aux_weight: f64,
    pub s2pe: bool,
    pub s2pe_kernel: usize,
    pub s2pe_dilation: usize,
    pub s2pe_residual: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            state_dim: 16,
            n_blocks: 2,
            ssm_mode: SsmMode::Scalar { heads: 1 },
            discretization: Discretization::Euler,
            aggregator: Aggregator::Ssm,
            attn_dim: 32,
            overlap: true,
            cts: true,
            cts_ratio: 0.3,
            local_channels: 0,
            aux_pooling: Pooling::Mean,
            aux_weight: 1.0,
            s2pe: true,
            s2pe_kernel: 3,
            s2pe_dilation: 2,
            s2pe_residual: true,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            epochs: 30,
            seed: 0,
        }
    }
}

/// Learning rate of the full-scale setting, selected by `preset = full-scale`.
pub const FULL_SCALE_LEARNING_RATE: f64 = 2e-5;

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects on/off, got `{value}`"))),
    }
}

fn flag(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

impl ModelConfig {
    /// Plain selective-scan aggregator: no overlap, no token selection, no
    /// stripe encoder.
    pub fn plain() -> Self {
        ModelConfig { overlap: false, cts: false, s2pe: false, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.d_model >= 1 && self.state_dim >= 1 && self.attn_dim >= 1, "model widths must be positive");
        ensure!(self.n_blocks >= 1 || self.aggregator != Aggregator::Ssm, "ssm aggregator needs at least one block");
        if let SsmMode::Scalar { heads } = self.ssm_mode {
            ensure!(heads >= 1 && self.d_model % heads == 0, "{} channels do not split into {heads} heads", self.d_model);
        }
        ensure!((0.0..1.0).contains(&self.cts_ratio), "cts_ratio {} outside [0, 1)", self.cts_ratio);
        ensure!(self.local_channels <= self.d_model, "local_channels {} exceeds d_model {}", self.local_channels, self.d_model);
        ensure!(self.s2pe_kernel % 2 == 1, "s2pe_kernel must be odd, got {}", self.s2pe_kernel);
        ensure!(self.s2pe_dilation >= 1, "s2pe_dilation must be ≥ 1");
        ensure!(self.aux_weight >= 0.0 && self.aux_weight.is_finite(), "aux_weight must be a finite non-negative number");
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive");
        ensure!(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay must be non-negative");
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value.parse().map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
        }
        match key {
            "preset" => match value {
                "full-scale" => self.learning_rate = FULL_SCALE_LEARNING_RATE,
                "desk" => self.learning_rate = ModelConfig::default().learning_rate,
                other => return Err(Error::Config(format!("unknown preset `{other}`"))),
            },
            "d_model" => self.d_model = num(key, value)?,
            "state_dim" => self.state_dim = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "ssm_mode" => {
                self.ssm_mode = match value {
                    "diag" => SsmMode::Diag,
                    "scalar" => SsmMode::Scalar { heads: 1 },
                    other => return Err(Error::Config(format!("unknown ssm_mode `{other}`"))),
                }
            }
            "heads" => {
                let heads = num(key, value)?;
                match &mut self.ssm_mode {
                    SsmMode::Scalar { heads: h } => *h = heads,
                    SsmMode::Diag => return Err(Error::Config("`heads` only applies to ssm_mode = scalar".into())),
                }
            }
            "discretization" => self.discretization = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "aggregator" => self.aggregator = value.parse()?,
            "attn_dim" => self.attn_dim = num(key, value)?,
            "overlap" => self.overlap = parse_flag(key, value)?,
            "cts" => self.cts = parse_flag(key, value)?,
            "cts_ratio" => self.cts_ratio = num(key, value)?,
            "local_channels" => self.local_channels = num(key, value)?,
            "aux_pooling" => self.aux_pooling = value.parse()?,
            "aux_weight" => self.aux_weight = num(key, value)?,
            "s2pe" => self.s2pe = parse_flag(key, value)?,
            "s2pe_kernel" => self.s2pe_kernel = num(key, value)?,
            "s2pe_dilation" => self.s2pe_dilation = num(key, value)?,
            "s2pe_residual" => self.s2pe_residual = parse_flag(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the file's settings, in file order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in pairs(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Canonical text form; [`ModelConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("d_model", self.d_model.to_string());
        put("state_dim", self.state_dim.to_string());
        put("n_blocks", self.n_blocks.to_string());
        match self.ssm_mode {
            SsmMode::Diag => put("ssm_mode", "diag".into()),
            SsmMode::Scalar { heads } => {
                put("ssm_mode", "scalar".into());
                put("heads", heads.to_string());
            }
        }
        put("discretization", self.discretization.to_string());
        put("aggregator", self.aggregator.to_string());
        put("attn_dim", self.attn_dim.to_string());
        put("overlap", flag(self.overlap).into());
        put("cts", flag(self.cts).into());
        put("cts_ratio", format!("{:?}", self.cts_ratio));
        put("local_channels", self.local_channels.to_string());
        put("aux_pooling", self.aux_pooling.to_string());
        put("aux_weight", format!("{:?}", self.aux_weight));
        put("s2pe", flag(self.s2pe).into());
        put("s2pe_kernel", self.s2pe_kernel.to_string());
        put("s2pe_dilation", self.s2pe_dilation.to_string());
        put("s2pe_residual", flag(self.s2pe_residual).into());
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        s
    }

    /// Short stable digest of the canonical text, for reports.
    pub fn fingerprint(&self) -> String {
        let h = self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        format!("{h:016x}")
    }
}
