use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use neurolrp::explain::ShareMode;
use neurolrp::{ArchConfig, FillParams, PhantomParams, Regime, Split, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitSel {
    Train,
    Holdout,
    All,
}

impl SplitSel {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitSel::Train => Some(Split::Train),
            SplitSel::Holdout => Some(Split::Holdout),
            SplitSel::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lrp,
    Sensitivity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_per_class: usize,
    pub regime: Regime,
    pub holdout_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_per_class: 100,
            regime: Regime::Lesion,
            holdout_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub method: Method,
    pub epsilon: f64,
    pub only_correct: bool,
    pub split: SplitSel,
    pub share_mode: ShareMode,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            method: Method::Lrp,
            epsilon: 0.001,
            only_correct: false,
            split: SplitSel::Holdout,
            share_mode: ShareMode::Positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// `axis:index`, e.g. `z:16`.
    pub slice: String,
    pub range: f64,
    pub output: String,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            slice: "z:16".into(),
            range: 0.03,
            output: "render.ppm".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parcellation: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volume: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<PathBuf>,
}

/// Everything a command needs besides its output directory. `seed` drives
/// every random draw of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomParams,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub trials: usize,
    pub evaluate_split: SplitSel,
    pub fill: FillParams,
    pub explain: ExplainConfig,
    pub top_k: usize,
    pub render: RenderConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            phantom: PhantomParams::default(),
            dataset: DatasetConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            trials: 1,
            evaluate_split: SplitSel::Holdout,
            fill: FillParams::default(),
            explain: ExplainConfig::default(),
            top_k: 30,
            render: RenderConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
