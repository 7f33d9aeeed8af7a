use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{ArithOp, GenSpec, Regime};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::textnum::{NumberScheme, TokenizerOptions};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "MMD_SEED";

/// Model fields a run may override; the rest follow the scheme's desk preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_enc_layers: Option<usize>,
    pub n_dec_layers: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub num_encoder_depth: Option<usize>,
    pub num_head_depth: Option<usize>,
    pub max_seq_len: Option<usize>,
}

impl ModelOverrides {
    /// Fields of `other` that are set replace ours.
    pub fn merge(&mut self, other: &ModelOverrides) {
        macro_rules! take {
            ($($f:ident),*) => {$(if other.$f.is_some() { self.$f = other.$f; })*};
        }
        take!(d_model, n_heads, n_enc_layers, n_dec_layers, ffn_mult, num_encoder_depth, num_head_depth, max_seq_len);
    }

    pub fn resolve(&self, scheme: NumberScheme, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::desk(scheme, vocab_size);
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.n_enc_layers = self.n_enc_layers.unwrap_or(c.n_enc_layers);
        c.n_dec_layers = self.n_dec_layers.unwrap_or(c.n_dec_layers);
        c.ffn_mult = self.ffn_mult.unwrap_or(c.ffn_mult);
        c.num_encoder_depth = self.num_encoder_depth.unwrap_or(c.num_encoder_depth);
        c.num_head_depth = self.num_head_depth.unwrap_or(c.num_head_depth);
        c.max_seq_len = self.max_seq_len.unwrap_or(c.max_seq_len);
        c.validate()?;
        Ok(c)
    }
}

/// Generation settings plus the split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub regime: Regime,
    pub n_examples: Option<usize>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub max_decimals: Option<u32>,
    pub ops: Option<Vec<ArithOp>>,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            regime: Regime::NumbersOnly,
            n_examples: None,
            lo: None,
            hi: None,
            max_decimals: None,
            ops: None,
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }
}

impl DataConfig {
    pub fn gen_spec(&self, seed: u64) -> GenSpec {
        let base = GenSpec::for_regime(self.regime);
        GenSpec {
            seed,
            n_examples: self.n_examples.unwrap_or(base.n_examples),
            lo: self.lo.unwrap_or(base.lo),
            hi: self.hi.unwrap_or(base.hi),
            max_decimals: self.max_decimals.unwrap_or(base.max_decimals),
            ops: self.ops.clone().unwrap_or(base.ops.clone()),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train_frac) || !ok(self.val_frac) || self.train_frac + self.val_frac > 1.0 {
            return Err(Error::Config("split fractions must be in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

/// Everything that determines a run. `seed` is the root of all randomness:
/// it replaces the seeds inside `[train]` and the generator spec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scheme: Option<NumberScheme>,
    pub tokenizer: TokenizerOptions,
    pub paths: Paths,
    pub model: ModelOverrides,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `MMD_SEED` if set.
    pub fn apply_env(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }

    /// Makes the root seed authoritative.
    pub fn finish(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.data.validate()?;
        self.train.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_round_trip() {
        let text = r#"
seed = 9
scheme = "mmd-log"

[model]
d_model = 32

[train]
epochs = 3
lr = 0.001

[data]
regime = "text-and-numbers"
n_examples = 50
"#;
        let cfg = RunConfig::from_toml(text).unwrap().finish().unwrap();
        assert_eq!(cfg.scheme, Some(NumberScheme::MmdLog));
        assert_eq!(cfg.model.d_model, Some(32));
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
    }

    #[test]
    fn env_seed_overrides_file() {
        let mut cfg = RunConfig::from_toml("seed = 1").unwrap();
        cfg.apply_env(Some("42")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(cfg.apply_env(Some("x")).is_err());
    }
}
