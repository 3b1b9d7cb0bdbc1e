use crate::CliError;
use grasp_core::augment::AugmentConfig;
use grasp_core::autodiff::LrSchedule;
use grasp_core::detector::synth::SynthConfig;
use grasp_core::detector::{NetworkConfig, TrainConfig};
use grasp_core::evaluation::{SplitKind, NEAREST_TO_CENTER_N};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "GRASP_CONFIG";

/// Training knobs; the seed comes from [`RunConfig::seed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    /// Log top-1 success on the training split after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            eval_each_epoch: t.eval_each_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub jaccard_thresholds: Vec<f64>,
    pub angle_threshold: f64,
    /// Detections below this score are dropped.
    pub score_threshold: f64,
    pub max_detections: usize,
    /// Candidate count of the nearest-to-center grasp selection.
    pub nearest_to_center_n: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            jaccard_thresholds: grasp_core::evaluation::JACCARD_SWEEP.to_vec(),
            angle_threshold: grasp_core::geometry::DEFAULT_ANGLE_THRESHOLD,
            score_threshold: 0.0,
            max_detections: 32,
            nearest_to_center_n: NEAREST_TO_CENTER_N,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory used when `--data` is not given.
    pub dataset: Option<PathBuf>,
    /// Checkpoint used when `--checkpoint` is not given.
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run needs besides its input and output paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub split: SplitKind,
    /// Share of images (image-wise) or objects (object-wise) held out for testing.
    pub test_fraction: f64,
    pub network: NetworkConfig,
    pub augment: AugmentConfig,
    pub train: TrainOptions,
    pub eval: EvalOptions,
    /// Scene generator of the `synth` command.
    pub synth: SynthConfig,
    pub synth_count: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split: SplitKind::ImageWise,
            test_fraction: 0.2,
            network: NetworkConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainOptions::default(),
            eval: EvalOptions::default(),
            synth: SynthConfig::default(),
            synth_count: 250,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the file named by [`CONFIG_ENV`], or falls back to
    /// the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.network
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.augment
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(CliError::Config("test_fraction must lie in [0, 1]".into()));
        }
        if self.eval.max_detections == 0 || self.eval.nearest_to_center_n == 0 {
            return Err(CliError::Config(
                "max_detections and nearest_to_center_n must be positive".into(),
            ));
        }
        if !(self.train.lr.base >= 0.0 && self.train.lr.factor > 0.0 && self.train.lr.every > 0) {
            return Err(CliError::Config(
                "lr needs base >= 0, factor > 0 and every > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            seed: self.seed,
            lr: self.train.lr,
            momentum: self.train.momentum,
            eval_each_epoch: self.train.eval_each_epoch,
        }
    }

    /// The documented defaults as pretty JSON.
    pub fn defaults_json() -> String {
        serde_json::to_string_pretty(&Self::default()).expect("config serializes")
    }
}
