//! Experiment configuration: one TOML file mirroring the module configs,
//! resolved against CLI overrides and content-hashed so every run directory
//! names exactly the inputs that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use glab_core::eval::FigureSpec;
use glab_core::guide::GuidanceSpec;
use glab_core::mixture::BranchParams;
use glab_core::sampler::SamplerConfig;
use glab_core::train::TrainConfig;
use glab_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSection {
    pub seed: u64,
    pub depth: u32,
    pub per_branch: usize,
    pub branch: BranchParams,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            seed: 1,
            depth: 6,
            per_branch: 8,
            branch: BranchParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub world: WorldSection,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    /// Guidance settings evaluated by `sample` (first entry) and `sweep`
    /// (all entries).
    pub guidance: Vec<GuidanceSpec>,
    pub eval: FigureSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs"),
            world: WorldSection::default(),
            train: TrainConfig::default(),
            sample: SamplerConfig::default(),
            guidance: vec![GuidanceSpec::default()],
            eval: FigureSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Validate every section before any compute starts.
    pub fn validate(&self) -> Result<()> {
        if self.world.depth < 1 || self.world.per_branch < 1 {
            return Err(Error::Config("world depth and per_branch must be >= 1".into()));
        }
        self.train.validate()?;
        self.sample.validate()?;
        for g in &self.guidance {
            g.validate()?;
        }
        self.eval.validate()?;
        if self.guidance.is_empty() {
            return Err(Error::Config("guidance list must not be empty".into()));
        }
        Ok(())
    }

    /// Content hash of the resolved configuration (first 12 hex chars of
    /// the SHA-256 of its canonical JSON form).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config is serializable");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(12);
        for b in &digest[..6] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// The run directory of this configuration: `<output_dir>/<hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.hash())
    }
}

/// Refuse to overwrite existing artifacts unless forced.
pub fn guard_overwrite(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(Error::Config(format!(
                "output {} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}
