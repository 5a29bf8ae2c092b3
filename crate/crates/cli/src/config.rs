//! Run configuration: one JSON document covering every stage, with CLI-flag
//! overrides applied on top. Everything is validated before any work starts
//! and the effective config is echoed with the output.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use linewise::estimation::RansacConfig;
use linewise::matching::MatchPolicy;
use linewise::model::ModelConfig;
use linewise::synthetic::{HomographySpec, NoiseConfig, SceneSpec};
use linewise::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Number of pairs to generate.
    pub pairs: usize,
    /// Descriptor-map stride in pixels.
    pub stride: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            pairs: 50,
            stride: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ransac: RansacConfig,
    pub scene: SceneSpec,
    pub homography: HomographySpec,
    pub noise: NoiseConfig,
    pub dataset: DatasetConfig,
    pub match_policy: MatchPolicy,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(seed) = seed_override {
            config.scene.seed = seed;
            config.homography.seed = seed.wrapping_add(1);
            config.train.seed = seed;
            config.ransac.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model config")?;
        self.train.validate().context("train config")?;
        self.scene.validate().context("scene spec")?;
        self.noise.validate().context("noise config")?;
        anyhow::ensure!(self.dataset.pairs >= 1, "dataset.pairs must be >= 1");
        anyhow::ensure!(self.dataset.stride >= 1, "dataset.stride must be >= 1");
        anyhow::ensure!(
            self.ransac.iterations >= 1,
            "ransac.iterations must be >= 1"
        );
        anyhow::ensure!(
            self.ransac.inlier_threshold_px > 0.0,
            "ransac.inlier_threshold_px must be > 0"
        );
        // The scene and model must agree on the image frame.
        anyhow::ensure!(
            self.scene.width == self.model.image_width
                && self.scene.height == self.model.image_height,
            "scene {}x{} does not match model image {}x{}",
            self.scene.width,
            self.scene.height,
            self.model.image_width,
            self.model.image_height,
        );
        Ok(())
    }

    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
