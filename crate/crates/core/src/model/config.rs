use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvconf::KvConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    #[default]
    None,
    BatchMse,
    BatchKl,
    PathMse,
    PathKl,
}

impl CalibrationMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Self::None,
            "batch_mse" => Self::BatchMse,
            "batch_kl" => Self::BatchKl,
            "path_mse" => Self::PathMse,
            "path_kl" => Self::PathKl,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::BatchMse => "batch_mse",
            Self::BatchKl => "batch_kl",
            Self::PathMse => "path_mse",
            Self::PathKl => "path_kl",
        }
    }
}

/// Input groups that can be removed from the graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Baseline,
    NoEntity,
    NoCampaign,
    NoDate,
    /// Only touch kinds and positions.
    SeqOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::Baseline, Self::NoEntity, Self::NoCampaign, Self::NoDate, Self::SeqOnly];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Self::Baseline,
            "no_entity" => Self::NoEntity,
            "no_campaign" => Self::NoCampaign,
            "no_date" => Self::NoDate,
            "seq_only" => Self::SeqOnly,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::NoEntity => "No-Entity",
            Self::NoCampaign => "No-Campaign",
            Self::NoDate => "No-Date",
            Self::SeqOnly => "Seq-Only",
        }
    }

    pub fn uses_entity(self) -> bool {
        matches!(self, Self::Baseline | Self::NoCampaign | Self::NoDate)
    }

    pub fn uses_campaign(self) -> bool {
        matches!(self, Self::Baseline | Self::NoEntity | Self::NoDate)
    }

    pub fn uses_date(self) -> bool {
        matches!(self, Self::Baseline | Self::NoEntity | Self::NoCampaign)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Maximum path length N.
    pub max_len: usize,
    /// Touch-kind embedding width d_t.
    pub d_kind: usize,
    /// Campaign embedding width d_mcid, fixed by the data.
    pub d_campaign: usize,
    pub n_heads: usize,
    /// Day-gap buckets D_max.
    pub day_buckets: usize,
    pub d_member: usize,
    pub d_company: usize,
    /// Head hidden width; 0 means d_model.
    pub hidden: usize,
    /// Width of the optional advertiser slot in the head input; 0 disables it.
    pub advertiser_dim: usize,
    pub embed_std: f64,
    pub beta: f64,
    pub calibration: CalibrationMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_len: 20,
            d_kind: 8,
            d_campaign: 4,
            n_heads: 2,
            day_buckets: 90,
            d_member: 4,
            d_company: 4,
            hidden: 0,
            advertiser_dim: 0,
            embed_std: 0.1,
            beta: 0.0,
            calibration: CalibrationMode::None,
            lr: 1e-3,
            epochs: 5,
            batch_size: 256,
            val_fraction: 0.2,
            seed: 0,
            ablation: Ablation::Baseline,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.d_kind + self.d_campaign
    }

    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            self.d_model()
        } else {
            self.hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_len == 0 || self.n_heads == 0 || self.d_kind == 0 {
            return bad("max_len, n_heads and d_kind must be positive");
        }
        if !d.is_multiple_of(2) {
            return bad("d_model must be even for the positional encoding");
        }
        if !d.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by the number of heads");
        }
        if self.day_buckets == 0 {
            return bad("day_buckets must be positive");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr and batch_size must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        Ok(())
    }

    /// Reads `model.*` keys over the defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let k = |s: &str| format!("model.{s}");
        let calibration = match kv.get(&k("calibration")) {
            None => d.calibration,
            Some(s) => CalibrationMode::parse(s).ok_or_else(|| Error::Config(format!("unknown calibration mode `{s}`")))?,
        };
        let ablation = match kv.get(&k("ablation")) {
            None => d.ablation,
            Some(s) => Ablation::parse(s).ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))?,
        };
        let cfg = Self {
            max_len: kv.or(&k("max_len"), d.max_len)?,
            d_kind: kv.or(&k("d_kind"), d.d_kind)?,
            d_campaign: kv.or(&k("d_campaign"), d.d_campaign)?,
            n_heads: kv.or(&k("heads"), d.n_heads)?,
            day_buckets: kv.or(&k("day_buckets"), d.day_buckets)?,
            d_member: kv.or(&k("d_member"), d.d_member)?,
            d_company: kv.or(&k("d_company"), d.d_company)?,
            hidden: kv.or(&k("hidden"), d.hidden)?,
            advertiser_dim: kv.or(&k("advertiser_dim"), d.advertiser_dim)?,
            embed_std: kv.or(&k("embed_std"), d.embed_std)?,
            beta: kv.or(&k("beta"), d.beta)?,
            calibration,
            lr: kv.or(&k("lr"), d.lr)?,
            epochs: kv.or(&k("epochs"), d.epochs)?,
            batch_size: kv.or(&k("batch_size"), d.batch_size)?,
            val_fraction: kv.or(&k("val_fraction"), d.val_fraction)?,
            seed: kv.or(&k("seed"), d.seed)?,
            ablation,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
