//! Run configuration: named presets, TOML overrides, and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::embedder::EmbedderConfig;
use crate::error::{Error, Result};
use crate::prompt::PromptConfig;
use crate::prompt_block::AttnConfig;
use crate::residual::RpmConfig;
use crate::train::TrainConfig;

/// Switches that remove parts of the conditioning for ablation runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// All prompt conditioning; off gives the plain backbone.
    pub prompts: bool,
    /// The image-knowledge token added to the visual rows.
    pub knowledge: bool,
    /// The learnable input-conditional vectors.
    pub input_vectors: bool,
    /// The caption token.
    pub text: bool,
    /// Rebuilding the prompt from the first-pass output; off reuses the
    /// initial prompt and skips the modulator in the second pass.
    pub epm: bool,
    /// Residual prior modulation in the second pass.
    pub rpm: bool,
    /// Blocks gradients from the second pass into the first-pass output.
    pub stop_gradient: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            prompts: true,
            knowledge: true,
            input_vectors: true,
            text: true,
            epm: true,
            rpm: true,
            stop_gradient: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub embedder: EmbedderConfig,
    pub prompt: PromptConfig,
    pub rpm: RpmConfig,
    pub attn: AttnConfig,
    pub backbone: BackboneConfig,
    pub ablation: AblationConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Small model for single-machine runs.
    Desk,
    /// The full-size recipe.
    Paper,
    /// Minimal model for tests and quick ablations.
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Desk, Preset::Paper, Preset::Tiny];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
            Preset::Tiny => "tiny",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?} (expected desk, paper or tiny)")))
    }

    pub fn config(self) -> Config {
        let mut c = Config::default();
        match self {
            Preset::Paper => {
                c.backbone = BackboneConfig::paper();
                c.prompt.d = 192;
                c.train.crop = 256;
                c.train.iterations = 800_000;
            }
            Preset::Desk => {
                c.backbone = BackboneConfig::desk();
                c.prompt.d = 64;
                c.train.crop = 64;
                c.train.iterations = 2_000;
            }
            Preset::Tiny => {
                c.backbone = BackboneConfig::tiny();
                c.embedder.dim = 32;
                c.prompt.n = 4;
                c.prompt.d = 16;
                c.rpm.kernel = 3;
                c.train.crop = 32;
                c.train.iterations = 200;
            }
        }
        c
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl Config {
    /// Applies the TOML document `text` on top of `self`. A top-level
    /// `preset = "<name>"` key selects the base instead of `self`.
    pub fn with_overrides(&self, text: &str) -> Result<Config> {
        let mut over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let base = match over.as_table_mut().and_then(|t| t.remove("preset")) {
            Some(toml::Value::String(name)) => Preset::from_name(&name)?.config(),
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => self.clone(),
        };
        let mut merged = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, over);
        let cfg: Config = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &Config) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        base.with_overrides(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.prompt.n == 0 {
            return Err(Error::Config("prompt.N must be at least 1".into()));
        }
        if self.prompt.d == 0 || self.embedder.dim == 0 {
            return Err(Error::Config("prompt.D and embedder.dim must be positive".into()));
        }
        if self.rpm.kernel % 2 == 0 {
            return Err(Error::Config("rpm.kernel must be odd".into()));
        }
        if self.rpm.se_ratio == 0 {
            return Err(Error::Config("rpm.se_ratio must be positive".into()));
        }
        self.train.validate()
    }
}
