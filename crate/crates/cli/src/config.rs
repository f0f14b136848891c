//! The single JSON run configuration.

use std::path::{Path, PathBuf};

use evdet::eval::EvalConfig;
use evdet::loss::LossConfig;
use evdet::synth::SynthConfig;
use evdet::train::TrainConfig;
use evdet::{DefaultGrid, Error, NetConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub window_duration: f64,
    pub default_duration: f64,
    pub overlap: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            window_duration: 20.0,
            default_duration: 1.0,
            overlap: 0.75,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<DefaultGrid> {
        DefaultGrid::build(self.window_duration, self.default_duration, self.overlap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub nms_iou: f64,
    /// Seconds between window starts; absent means non-overlapping windows.
    pub stride: Option<f64>,
    /// IoU criterion used to calibrate thresholds.
    pub calibration_delta: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            nms_iou: evdet::inference::DEFAULT_NMS_IOU,
            stride: None,
            calibration_delta: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Annotation labels to detect; the network numbers them 1, 2, ... in this order.
    pub labels: Vec<u32>,
    /// Records generated by `generate`.
    pub n_records: usize,
    pub network: NetConfig,
    pub grid: GridConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub detect: DetectConfig,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let grid = GridConfig::default();
        let labels = vec![1, 2];
        let network = NetConfig {
            channels: synth.channels,
            window_samples: (grid.window_duration * synth.sample_rate).round() as usize,
            blocks: 8,
            labels: labels.len(),
            defaults: 80,
        };
        Self {
            seed: 0,
            labels,
            n_records: 10,
            network,
            grid,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            detect: DetectConfig::default(),
            synth,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-section checks plus consistency between sections.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        let grid = self.grid.build()?;
        if self.labels.is_empty() || self.labels.contains(&0) {
            return bad("labels must be non-empty and exclude 0".into());
        }
        if self.network.labels != self.labels.len() {
            return bad(format!(
                "network.labels is {} but {} labels are listed",
                self.network.labels,
                self.labels.len()
            ));
        }
        let t = (self.grid.window_duration * self.synth.sample_rate).round() as usize;
        if self.network.window_samples != t {
            return bad(format!(
                "network.window_samples is {} but window_duration × sample_rate is {t}",
                self.network.window_samples
            ));
        }
        if self.train.window_duration != self.grid.window_duration {
            return bad("train.window_duration differs from grid.window_duration".into());
        }
        if self.network.defaults != grid.len() {
            return bad(format!(
                "network.defaults is {} but the grid has {}",
                self.network.defaults,
                grid.len()
            ));
        }
        if self.network.channels != self.synth.channels {
            return bad("network.channels differs from synth.channels".into());
        }
        if !(self.detect.nms_iou > 0.0 && self.detect.nms_iou <= 1.0) {
            return bad("detect.nms_iou must lie in (0, 1]".into());
        }
        if !(self.detect.calibration_delta > 0.0 && self.detect.calibration_delta <= 1.0) {
            return bad("detect.calibration_delta must lie in (0, 1]".into());
        }
        if self.n_records < 3 {
            return bad("n_records must be at least 3".into());
        }
        Ok(())
    }

    /// Applies the global seed to every seeded section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
        self
    }
}
