use std::path::{Path, PathBuf};

use cape_core::cape::CapeConfig;
use cape_core::models::{Conditioning, ModelConfig};
use cape_core::pde::DataConfig;
use cape_core::trainer::{TrainConfig, TrainMode};
use cape_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One experiment: data, model, optional attention module, training and
/// output layout. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Used when `model.conditioning` is `cape`; defaults apply if absent.
    #[serde(default)]
    pub cape: Option<CapeConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Dataset directory; `<output_dir>/data` when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub ablate: AblateConfig,
}

/// Sweep members for `ablate`; the full model is always included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    #[serde(default = "default_drops")]
    pub drops: Vec<String>,
    #[serde(default = "default_modes")]
    pub modes: Vec<TrainMode>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_checkpoint_every() -> usize {
    10
}

fn default_drops() -> Vec<String> {
    ["spectral", "conv1x1", "depthwise", "layernorm"]
        .map(String::from)
        .to_vec()
}

fn default_modes() -> Vec<TrainMode> {
    vec![TrainMode::Curriculum]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: default_output_dir(),
            data_dir: None,
            checkpoint_every: default_checkpoint_every(),
            ablate: AblateConfig::default(),
        }
    }
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            drops: default_drops(),
            modes: default_modes(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if let Some(c) = self.cape_config() {
            c.validate(self.model.channels)?;
        }
        for d in &self.run.ablate.drops {
            d.parse::<cape_core::cape::Ablation>()?;
        }
        Ok(())
    }

    /// The attention-module config the model actually uses.
    pub fn cape_config(&self) -> Option<CapeConfig> {
        (self.model.conditioning == Conditioning::Cape)
            .then(|| self.cape.clone().unwrap_or_default())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.run
            .data_dir
            .clone()
            .unwrap_or_else(|| self.run.output_dir.join("data"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        sha256_hex(compact.as_bytes())
    }

    /// SHA-256 of the data section alone, shared by every run on the same data.
    pub fn data_hash(&self) -> String {
        let compact = serde_json::to_string(&self.data).expect("config serializes");
        sha256_hex(compact.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "data": {"kind": "advection", "train_params": [0.4], "test_params": [1.0]},
        "model": {"conditioning": "cape"}
    }"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.run.checkpoint_every, 10);
        assert_eq!(c.cape_config(), Some(CapeConfig::default()));
        assert_eq!(c.data_dir(), PathBuf::from("runs/default/data"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"model\"", "\"modle\"");
        assert!(matches!(
            ExperimentConfig::from_json(&bad),
            Err(Error::Config(_))
        ));
        let nested = MINIMAL.replace("\"conditioning\"", "\"lr\": 1, \"conditioning\"");
        assert!(matches!(
            ExperimentConfig::from_json(&nested),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.data_hash(), b.data_hash());
    }

    #[test]
    fn bad_ablation_flag_fails_validation() {
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.run.ablate.drops.push("attention".into());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
