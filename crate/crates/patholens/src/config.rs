//! Experiment configuration: one declarative TOML file binds dataset, model,
//! training, evaluation, attribution and output settings, and a single
//! global seed fans out to every stochastic component.

use crate::error::{Error, Result};
use crate::models::BackboneId;
use crate::preprocess::AugmentationPolicy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Every tunable default lives here and nowhere else.
pub mod defaults {
    pub const SEED: u64 = 42;

    // Augmentation magnitudes.
    pub const ROTATION_MAX_DEG: f64 = 15.0;
    pub const HFLIP_PROB: f64 = 0.5;
    pub const CROP_FRACTION: f64 = 0.9;
    pub const BRIGHTNESS_DELTA_MAX: f64 = 0.1;
    pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.2);

    // Dataset.
    pub const SPLIT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];
    pub const EXPECTED_CLASSES: usize = 5;

    // Training.
    pub const LEARNING_RATE: f64 = 1e-3;
    pub const LR_FLOOR: f64 = 1e-4;
    pub const BATCH_SIZE: usize = 10;
    pub const PLATEAU_FACTOR: f64 = 0.5;
    pub const PLATEAU_PATIENCE: usize = 3;

    // Evaluation.
    pub const AVERAGING: &str = "weighted";

    // Attribution.
    pub const SMOOTHGRAD_SAMPLES: usize = 25;
    pub const SMOOTHGRAD_SIGMA: f64 = 0.15;
    pub const SCORECAM_TOP_K: usize = 10;

    // Visualization.
    pub const OVERLAY_ALPHA: f64 = 0.4;

    /// Standardized model input for the pretrained backbones.
    pub const INPUT_SIZE: (usize, usize) = (299, 299);
    /// Input size of the test backbone.
    pub const TINY_INPUT_SIZE: (usize, usize) = (32, 32);

    /// Per-backbone epoch defaults.
    pub fn epochs_for(backbone: crate::models::BackboneId) -> usize {
        use crate::models::BackboneId::*;
        match backbone {
            Xception => 30,
            DenseNet201 => 25,
            ResNet101 => 35,
            InceptionV3 => 25,
            DenseNet121 => 30,
            DenseNet169 => 35,
            ResNet152 => 35,
            InceptionResNetV2 => 40,
            TinyTestNet => 10,
        }
    }

    pub fn input_size_for(backbone: crate::models::BackboneId) -> (usize, usize) {
        match backbone {
            crate::models::BackboneId::TinyTestNet => TINY_INPUT_SIZE,
            _ => INPUT_SIZE,
        }
    }
}

/// Derive a child seed from `(seed, label, index)` with SHA-256; the first
/// eight digest bytes, little-endian, become the new seed. One global seed
/// reproduces an entire run.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub manifest_path: Option<PathBuf>,
    pub split_fractions: [f64; 3],
    pub expected_classes: usize,
    /// Optional class-name subset (e.g. only the lung classes); records of
    /// other classes are dropped and indices reassigned alphabetically.
    pub include_classes: Vec<String>,
    /// Header-only image validation during scan (full decode is the default).
    pub fast_scan: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: PathBuf::new(),
            manifest_path: None,
            split_fractions: defaults::SPLIT_FRACTIONS,
            expected_classes: defaults::EXPECTED_CLASSES,
            include_classes: Vec::new(),
            fast_scan: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: String,
    pub pretrained: bool,
    /// Defaults to 299x299 (32x32 for TinyTestNet).
    pub input_size: Option<(usize, usize)>,
    pub pretrained_dir: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: "Xception".to_string(),
            pretrained: false,
            input_size: None,
            pretrained_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    /// Defaults to the per-backbone epoch table.
    pub epochs: Option<usize>,
    pub optimizer: String,
    pub schedule: String,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub freeze_backbone: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: defaults::LEARNING_RATE,
            lr_floor: defaults::LR_FLOOR,
            batch_size: defaults::BATCH_SIZE,
            epochs: None,
            optimizer: "adam".to_string(),
            schedule: "plateau".to_string(),
            plateau_factor: defaults::PLATEAU_FACTOR,
            plateau_patience: defaults::PLATEAU_PATIENCE,
            freeze_backbone: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub averaging: String,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { averaging: defaults::AVERAGING.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub smoothgrad_samples: usize,
    pub smoothgrad_sigma: f64,
    pub scorecam_top_k: usize,
    pub saliency_reduction: String,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            smoothgrad_samples: defaults::SMOOTHGRAD_SAMPLES,
            smoothgrad_sigma: defaults::SMOOTHGRAD_SIGMA,
            scorecam_top_k: defaults::SCORECAM_TOP_K,
            saliency_reduction: "max-abs".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub overlay_alpha: f64,
    pub colormap: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
            overlay_alpha: defaults::OVERLAY_ALPHA,
            colormap: "jet".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub augment: AugmentationPolicy,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub attribution: AttributionConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: defaults::SEED,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentationPolicy::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
            attribution: AttributionConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn backbone(&self) -> Result<BackboneId> {
        self.model.backbone.parse()
    }

    pub fn epochs(&self) -> Result<usize> {
        Ok(self.training.epochs.unwrap_or(defaults::epochs_for(self.backbone()?)))
    }

    pub fn input_size(&self) -> Result<(usize, usize)> {
        Ok(self.model.input_size.unwrap_or(defaults::input_size_for(self.backbone()?)))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset
            .manifest_path
            .clone()
            .unwrap_or_else(|| self.output.dir.join("manifest.tsv"))
    }

    /// Collect every range violation; all problems are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            problems.push(format!(
                "schema_version: file says {}, this build reads {}",
                self.schema_version, CONFIG_SCHEMA_VERSION
            ));
        }
        if let Err(e) = self.backbone() {
            problems.push(format!("model.backbone: {e}"));
        }
        let f = &self.dataset.split_fractions;
        if f.iter().any(|&x| x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            problems.push(format!(
                "dataset.split_fractions: must be non-negative and sum to 1, got {f:?}"
            ));
        }
        if self.dataset.expected_classes < 2 {
            problems.push("dataset.expected_classes: must be >= 2".to_string());
        }
        if let Err(e) = self.augment.validate() {
            problems.push(format!("augment: {e}"));
        }
        let t = &self.training;
        if !(t.lr_floor > 0.0 && t.learning_rate >= t.lr_floor) {
            problems.push(format!(
                "training: requires learning_rate >= lr_floor > 0, got {} and {}",
                t.learning_rate, t.lr_floor
            ));
        }
        if t.batch_size < 1 {
            problems.push("training.batch_size: must be >= 1".to_string());
        }
        if t.epochs == Some(0) {
            problems.push("training.epochs: must be >= 1".to_string());
        }
        if t.optimizer != "adam" {
            problems.push(format!(
                "training.optimizer: only \"adam\" is supported, got {:?}",
                t.optimizer
            ));
        }
        if !["plateau", "constant"].contains(&t.schedule.as_str()) {
            problems.push(format!(
                "training.schedule: expected \"plateau\" or \"constant\", got {:?}",
                t.schedule
            ));
        }
        if !(t.plateau_factor > 0.0 && t.plateau_factor < 1.0) {
            problems.push("training.plateau_factor: must be in (0, 1)".to_string());
        }
        if !["weighted", "macro", "micro"].contains(&self.evaluation.averaging.as_str()) {
            problems.push(format!(
                "evaluation.averaging: expected weighted|macro|micro, got {:?}",
                self.evaluation.averaging
            ));
        }
        let a = &self.attribution;
        if a.smoothgrad_samples < 1 {
            problems.push("attribution.smoothgrad_samples: must be >= 1".to_string());
        }
        if a.smoothgrad_sigma < 0.0 {
            problems.push("attribution.smoothgrad_sigma: must be >= 0".to_string());
        }
        if a.scorecam_top_k < 1 {
            problems.push("attribution.scorecam_top_k: must be >= 1".to_string());
        }
        if !["max-abs", "mean-abs"].contains(&a.saliency_reduction.as_str()) {
            problems.push(format!(
                "attribution.saliency_reduction: expected max-abs|mean-abs, got {:?}",
                a.saliency_reduction
            ));
        }
        if !(0.0..=1.0).contains(&self.output.overlay_alpha) {
            problems.push("output.overlay_alpha: must be in [0, 1]".to_string());
        }
        if !["jet", "viridis", "gray"].contains(&self.output.colormap.as_str()) {
            problems.push(format!(
                "output.colormap: expected jet|viridis|gray, got {:?}",
                self.output.colormap
            ));
        }
        if let Some((h, w)) = self.model.input_size {
            if h == 0 || w == 0 {
                problems.push("model.input_size: dimensions must be positive".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n  ")))
        }
    }

    /// Derived seed for the augmentation policy; the policy's own `seed`
    /// field is overwritten from the global seed at load time.
    fn apply_seed_fanout(&mut self) {
        self.augment.seed = derive_seed(self.seed, "augment", 0);
    }
}

/// Parse and validate a config file, applying all defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_config_str(&text)
}

pub fn load_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.apply_seed_fanout();
    config.validate()?;
    if config.dataset.root.as_os_str().is_empty() {
        return Err(Error::Config("dataset.root is required".into()));
    }
    Ok(config)
}

/// Canonical serialized form: fixed key order, every default made explicit.
/// `load(echo(c)) == c` and the echo is written into each run directory.
pub fn echo_config(config: &ExperimentConfig) -> Result<String> {
    let mut canonical = config.clone();
    canonical.training.epochs = Some(config.epochs()?);
    canonical.model.input_size = Some(config.input_size()?);
    canonical.dataset.manifest_path = Some(config.manifest_path());
    toml::to_string(&canonical).map_err(|e| Error::Config(e.to_string()))
}

pub fn config_digest(config: &ExperimentConfig) -> Result<String> {
    let echo = echo_config(config)?;
    let mut hasher = Sha256::new();
    hasher.update(echo.as_bytes());
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_defaults_epochs_by_backbone() {
        let c = load_config_str("[dataset]\nroot = \"data\"\n").unwrap();
        assert_eq!(c.model.backbone, "Xception");
        assert_eq!(c.epochs().unwrap(), 30);
        let c = load_config_str(
            "[dataset]\nroot = \"data\"\n[model]\nbackbone = \"InceptionResNetV2\"\n",
        )
        .unwrap();
        assert_eq!(c.epochs().unwrap(), 40);
        assert_eq!(c.input_size().unwrap(), (299, 299));
    }

    #[test]
    fn zero_batch_size_rejected() {
        let err = load_config_str("[dataset]\nroot = \"d\"\n[training]\nbatch_size = 0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("batch_size"));
    }

    #[test]
    fn unknown_key_names_key() {
        let err = load_config_str("[dataset]\nroot = \"d\"\nsplit_ratio = 0.5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("split_ratio"), "{err}");
    }

    #[test]
    fn validation_errors_are_aggregated() {
        let err = load_config_str(
            "[dataset]\nroot = \"d\"\n[training]\nbatch_size = 0\n[evaluation]\naveraging = \"median\"\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("batch_size") && err.contains("averaging"), "{err}");
    }

    #[test]
    fn echo_round_trips_and_is_canonical() {
        let a = load_config_str("[dataset]\nroot = \"data\"\n[training]\nbatch_size = 4\n").unwrap();
        let b = load_config_str("[training]\nbatch_size = 4\n[dataset]\nroot = \"data\"\n").unwrap();
        let echo_a = echo_config(&a).unwrap();
        let echo_b = echo_config(&b).unwrap();
        assert_eq!(echo_a, echo_b);
        assert!(echo_a.contains("schema_version"));
        let reloaded = load_config_str(&echo_a).unwrap();
        assert_eq!(echo_config(&reloaded).unwrap(), echo_a);
    }

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(42, "split", 0), derive_seed(42, "split", 0));
        assert_ne!(derive_seed(42, "split", 0), derive_seed(42, "split", 1));
        assert_ne!(derive_seed(42, "split", 0), derive_seed(42, "augment", 0));
        assert_ne!(derive_seed(42, "split", 0), derive_seed(43, "split", 0));
    }
}
