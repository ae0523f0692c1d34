use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SpectrogramConfig;
use crate::loss::{CentroidMode, LossWeights, Objective};
use crate::model::EncoderConfig;
use crate::warp::WarpPolicy;

/// Which parts of the training recipe are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub data_warping: bool,
    pub classification_loss: bool,
    pub contrastive_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            data_warping: true,
            classification_loss: true,
            contrastive_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Recordings per class in every batch.
    pub samples_per_class: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub centroid_mode: CentroidMode,
    pub ablation: Ablation,
    pub encoder: EncoderConfig,
    pub spectrogram: SpectrogramConfig,
    pub warp: WarpPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 16,
            steps: 50_000,
            learning_rate: 0.001,
            lambda: 0.5,
            seed: 250,
            checkpoint_interval: 1000,
            centroid_mode: CentroidMode::Inclusive,
            ablation: Ablation::default(),
            encoder: EncoderConfig::default(),
            spectrogram: SpectrogramConfig::default(),
            warp: WarpPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be at least 1".into()));
        }
        if !self.ablation.classification_loss && !self.ablation.contrastive_loss {
            return Err(Error::Config(
                "at least one of classification_loss and contrastive_loss must be enabled".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive and finite".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be at least 1".into()));
        }
        LossWeights { lambda: self.lambda }.validate()?;
        self.encoder.validate()?;
        self.spectrogram.validate()?;
        self.warp.validate()?;
        if self.encoder.input_bins != self.spectrogram.bins() {
            return Err(Error::Config(format!(
                "encoder.input_bins {} does not match the {} spectrogram bins",
                self.encoder.input_bins,
                self.spectrogram.bins()
            )));
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.encoder.block_count < 3 {
            w.push(format!(
                "encoder.block_count = {} is below 3; fewer blocks tend to underfit",
                self.encoder.block_count
            ));
        }
        w
    }

    /// Loss term weights implied by the ablation flags.
    pub fn objective(&self) -> Objective {
        let (g, n) = match (self.ablation.contrastive_loss, self.ablation.classification_loss) {
            (true, true) => (1.0 - self.lambda, self.lambda),
            (true, false) => (1.0, 0.0),
            (false, _) => (0.0, 1.0),
        };
        Objective {
            ge2e_weight: g,
            nll_weight: n,
            centroid_mode: self.centroid_mode,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("stored training config: {e}")))
    }

    /// Parses TOML text, then applies `key=value` overrides with dotted keys
    /// such as `ablation.data_warping=false`.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
