//! Resolved run configuration. The same structure is read from `--config`
//! and written back as the manifest beside every run's outputs.

use std::path::{Path, PathBuf};

use mmnd_core::approx::CompletionParams;
use mmnd_core::dataset::{IncompletenessConfig, SyntheticConfig};
use mmnd_core::eval::Strategy;
use mmnd_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub strategy: Strategy,
    pub strategies: Vec<Strategy>,
    /// Balanced sweep rates.
    pub rates: Vec<f64>,
    /// Add the 50/50, 70/30 and 30/70 cells to a sweep.
    pub unbalanced: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            strategy: Strategy::Pipeline,
            strategies: Strategy::ALL.to_vec(),
            rates: (0..8).map(|i| i as f64 / 10.0).collect(),
            unbalanced: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub points: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self { points: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub version: Option<String>,
    pub synthetic: SyntheticConfig,
    pub incompleteness: IncompletenessConfig,
    pub completion: CompletionParams,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub gradcheck: GradCheckSettings,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}

/// `<output>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// `<output>` with its extension replaced.
pub fn sibling(output: &Path, extension: &str) -> PathBuf {
    output.with_extension(extension)
}
