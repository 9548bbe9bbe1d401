use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mcpersona::data::JointMode;
use mcpersona::grounding::GroundingConfig;
use mcpersona::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// A configuration or argument problem, reported with the validation exit code.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scenario: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    /// Frozen base model weights; the bundled model when absent.
    pub base_model: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            scenario: "runs/scenario".into(),
            checkpoints: "runs/checkpoints".into(),
            reports: "runs/reports".into(),
            base_model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub joint_mode: JointMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub grounding: GroundingConfig,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            grounding: GroundingConfig::default(),
            data: DataSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Invalid(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Invalid("seed list must not be empty".into()).into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Invalid("seed list contains duplicates".into()).into());
        }
        self.train.validate()?;
        self.grounding.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcpersona::trainer::InitMode;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.seeds.len(), 3);
        assert_eq!(cfg.train.k, 16);
        assert_eq!(cfg.train.epochs, 15);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml(
            "seeds = [7]\n[train]\nk = 4\ninit = \"random\"\n[grounding]\ntau = 0.5\n[data]\njoint_mode = \"appendix\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.train.k, 4);
        assert_eq!(cfg.train.init, InitMode::Random);
        assert_eq!(cfg.grounding.tau, 0.5);
        assert_eq!(cfg.data.joint_mode, JointMode::Appendix);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("seeds = []").is_err());
        assert!(RunConfig::from_toml("seeds = [1, 1]").is_err());
        assert!(RunConfig::from_toml("[train]\nepochs = 0").is_err());
        assert!(RunConfig::from_toml("[grounding]\ntau = 2.0").is_err());
        assert!(RunConfig::from_toml("[train]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("seeds = \"x\"").is_err());
    }
}
