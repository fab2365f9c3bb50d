//! Stage configuration read from a TOML file. Every key is optional;
//! command-line flags override file values.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub label: LabelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub polygonize: PolygonizeSection,
    #[serde(default)]
    pub score: ScoreSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSection {
    pub tau: f64,
}

impl Default for LabelSection {
    fn default() -> Self {
        LabelSection {
            tau: fforge::labeling::DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        let d = fforge::nn::AdamConfig::default();
        AdamSection {
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub depth: usize,
    pub base_channels: usize,
    /// Side length the v1 input is resized to.
    pub input_size: usize,
    pub adam: AdamSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let net = fforge::nn::UNetConfig::default();
        TrainSection {
            epochs: 300,
            batch: 64,
            seed: 0,
            depth: net.depth,
            base_channels: net.base_channels,
            input_size: fforge::tiling::TILE,
            adam: AdamSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub threshold: f32,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            threshold: fforge::ensemble::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolygonizeSection {
    pub threshold: f32,
    pub min_area: f64,
}

impl Default for PolygonizeSection {
    fn default() -> Self {
        PolygonizeSection {
            threshold: fforge::ensemble::DEFAULT_THRESHOLD,
            min_area: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    pub iou: f64,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            iou: fforge::evaluation::DEFAULT_IOU_THRESHOLD,
        }
    }
}

/// Marks configuration problems so they map to the validation exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn load(path: Option<&Path>) -> anyhow::Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}
