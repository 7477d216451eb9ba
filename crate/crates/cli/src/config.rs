use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use songshield::adversary::{FinetuneConfig, NesConfig};
use songshield::encoders::TrainConfig;
use songshield::metrics::SrrThresholds;
use songshield::optim::ProtectionConfig;

use crate::CliError;

/// Contents of a run configuration file. Every section is optional and
/// falls back to the library defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub train: TrainConfig,
    pub protection: ProtectionConfig,
    pub thresholds: SrrThresholds,
    pub nes: NesConfig,
    pub finetune: FinetuneConfig,
    pub attack: AttackPlan,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub encoders: Option<PathBuf>,
    pub protected: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// A waveform transform applied to every protected clip before evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    Gaussian { snr_db: f64 },
    Requantize { bits: u32 },
}

impl Transform {
    pub fn label(&self) -> (&'static str, String) {
        match self {
            Transform::Gaussian { snr_db } => ("gaussian", format!("snr_db={snr_db}")),
            Transform::Requantize { bits } => ("requantize", format!("bits={bits}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackPlan {
    pub transforms: Vec<Transform>,
    pub nes: bool,
    /// Clips the reverse-optimization adversary attacks; empty means every
    /// provided clip.
    pub nes_clips: Vec<String>,
    pub finetune: bool,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self {
            transforms: vec![Transform::Gaussian { snr_db: 30.0 }, Transform::Requantize { bits: 8 }],
            nes: false,
            nes_clips: Vec::new(),
            finetune: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Runtime(anyhow::anyhow!("reading {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        self.protection.validate()?;
        self.thresholds.validate()?;
        self.nes.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    /// Pushes the run seed into every section that draws random numbers.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.protection.seed = seed;
        self.finetune.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.protection.iterations, 1000);
        assert_eq!(cfg.thresholds.xi_i, 0.41);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[protection]\niteration = 5").is_err());
    }

    #[test]
    fn transforms_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [attack]
            transforms = [{ kind = "gaussian", snr_db = 20.0 }, { kind = "requantize", bits = 12 }]
            "#,
        )
        .unwrap();
        assert_eq!(
            cfg.attack.transforms,
            vec![Transform::Gaussian { snr_db: 20.0 }, Transform::Requantize { bits: 12 }]
        );
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").unwrap() + 8;
        let end = start + readme[start..].find("```").unwrap();
        let cfg: RunConfig = toml::from_str(&readme[start..end]).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.attack.transforms.len(), 2);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg: RunConfig = toml::from_str("[protection]\nlearning_rate = -1.0").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
    }
}
