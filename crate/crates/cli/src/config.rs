//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use refsketch::curation::{CULL_K, CULL_ROUNDS, STYLE_K};
use refsketch::evaluation::{CyclicTarget, EVAL_RESOLUTION};
use refsketch::losses::{LAMBDA_ADV, LAMBDA_CYC, STYLE_LINE_END, STYLE_LINE_START};
use refsketch::style_pretrain::PretrainConfig;
use refsketch::training::TrainConfig;
use refsketch::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateConfig {
    pub k_cull: usize,
    pub rounds: usize,
    pub k_styles: usize,
    /// Square size images are loaded at before feature extraction.
    pub resolution: usize,
    /// Contact sheet thumbnail side.
    pub thumb: usize,
    pub vgg_weights: Option<PathBuf>,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self { k_cull: CULL_K, rounds: CULL_ROUNDS, k_styles: STYLE_K, resolution: 224, thumb: 64, vgg_weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub against: CyclicTarget,
    /// Scoring resolution; the published protocol uses 512.
    pub resolution: usize,
    /// VGG16 weights for LPIPS and, through the pooled last block, FID.
    pub vgg_weights: Option<PathBuf>,
    pub lpips_weights: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { against: CyclicTarget::FirstOutput, resolution: EVAL_RESOLUTION, vgg_weights: None, lpips_weights: None }
    }
}

/// Loss-weight schedule constants. Printed for reproduction; a file may
/// carry them back in but cannot change them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub style_line_start: f64,
    pub style_line_end: f64,
    pub lambda_cyc: f64,
    pub lambda_adv: f64,
    pub style_line_formula: String,
    pub lr_formula: String,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            style_line_start: STYLE_LINE_START,
            style_line_end: STYLE_LINE_END,
            lambda_cyc: LAMBDA_CYC,
            lambda_adv: LAMBDA_ADV,
            style_line_formula: "start - (start - end) * epoch / epochs".into(),
            lr_formula: "lr while epoch < epochs / 2, then lr * (1 - (epoch - epochs / 2) / (epochs / 2))".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub device: String,
    pub log_level: String,
    pub out_dir: PathBuf,
    pub pretrain: PretrainConfig,
    pub curate: CurateConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub schedule: Schedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            log_level: "info".into(),
            out_dir: PathBuf::from("."),
            pretrain: PretrainConfig::default(),
            curate: CurateConfig::default(),
            train: TrainConfig::default(),
            evaluate: EvaluateConfig::default(),
            schedule: Schedule::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file over the defaults. Seeds live at the top level;
    /// a section seed that disagrees with it is rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let top = value.get("seed").and_then(|v| v.as_integer());
        for section in ["pretrain", "train"] {
            let inner = value.get(section).and_then(|s| s.get("seed")).and_then(|v| v.as_integer());
            if let Some(s) = inner {
                if Some(s) != top {
                    return Err(Error::Config(format!("{section}.seed must equal the top-level seed")));
                }
            }
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schedule != Schedule::default() {
            return Err(Error::Config("the [schedule] section is fixed and cannot be changed".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::from_toml(&text)
    }

    /// Copies the run seed into the sections that consume one.
    pub fn sync_seeds(&mut self) {
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Canonical dump: sorted keys, every setting that has a value.
    pub fn dump(&self) -> Result<String> {
        let table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolves `path` under the output directory unless it is absolute.
    pub fn output(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips_and_is_sorted() {
        let cfg = RunConfig::default();
        let text = cfg.dump().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(text, cfg.dump().unwrap());
        let sections: Vec<&str> =
            text.lines().filter_map(|l| l.strip_prefix('[')).map(|l| l.trim_end_matches(']')).collect();
        let mut sorted = sections.clone();
        sorted.sort();
        assert_eq!(sections, sorted);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepochz = 3\n").is_err());
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn schedule_is_fixed() {
        let text = RunConfig::default().dump().unwrap().replace("lambda_cyc = 10.0", "lambda_cyc = 3.0");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn conflicting_section_seed_is_rejected() {
        assert!(RunConfig::from_toml("seed = 1\n[train]\nseed = 2\n").is_err());
        assert!(RunConfig::from_toml("seed = 2\n[train]\nseed = 2\n").is_ok());
    }
}
