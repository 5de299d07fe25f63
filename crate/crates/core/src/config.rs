//! Experiment configuration (TOML).
//!
//! ```toml
//! [data]
//! source = "idx"                  # or "blobs"
//! train_images = "data/train-images-idx3-ubyte"
//! train_labels = "data/train-labels-idx1-ubyte"
//! test_images = "data/t10k-images-idx3-ubyte"
//! test_labels = "data/t10k-labels-idx1-ubyte"
//!
//! [network]
//! hidden = [1024, 1024]
//! dropout = 0.5
//!
//! [training]
//! seed = 1
//!
//! [[inference.percentiles]]
//! name = "q3"
//! alpha = 3
//! beta = 90
//!
//! [mc_dropout]
//! seed = 7
//!
//! [ensemble]
//! base_seed = 1
//!
//! [run]
//! output_dir = "out/mnist"
//! ```
//!
//! Unknown keys are rejected and every stochastic component needs an
//! explicit seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_uq::SmoothstepForm;
use crate::linalg::DEFAULT_RIDGE_SCALE;
use crate::nn::{Activation, LayerSpec, TrainParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<InferenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_dropout: Option<McDropoutConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    pub run: RunSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Idx,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Labels to hold out one at a time; all labels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl NetworkConfig {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.hidden
            .iter()
            .map(|&width| LayerSpec {
                width,
                activation: self.activation,
                dropout_rate: self.dropout,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_early_stop")]
    pub early_stop_accuracy: f64,
    pub seed: u64,
}

fn default_batch_size() -> usize {
    128
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_max_epochs() -> usize {
    50
}
fn default_early_stop() -> f64 {
    0.96
}

impl TrainingConfig {
    pub fn params(&self) -> TrainParams {
        TrainParams {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            early_stop_accuracy: self.early_stop_accuracy,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PercentilePair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_inference_threshold")]
    pub threshold: f64,
    #[serde(default = "default_ridge_scale")]
    pub ridge_scale: f64,
    #[serde(default)]
    pub smoothstep: SmoothstepForm,
    pub percentiles: Vec<PercentilePair>,
}

fn default_inference_threshold() -> f64 {
    0.5
}
fn default_ridge_scale() -> f64 {
    DEFAULT_RIDGE_SCALE
}

impl InferenceConfig {
    /// Display name of percentile pair `i` (`q1`, `q2`, ... unless named).
    pub fn pair_name(&self, i: usize) -> String {
        self.percentiles[i]
            .name
            .clone()
            .unwrap_or_else(|| format!("q{}", i + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McDropoutConfig {
    #[serde(default = "default_passes")]
    pub passes: usize,
    #[serde(default = "default_vote_threshold")]
    pub threshold: f64,
    pub seed: u64,
}

fn default_passes() -> usize {
    100
}
fn default_vote_threshold() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_members")]
    pub members: usize,
    #[serde(default = "default_vote_threshold")]
    pub threshold: f64,
    pub base_seed: u64,
}

fn default_members() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Also write every trained network (and ensemble directory) per held-out label.
    #[serde(default)]
    pub save_models: bool,
}

fn default_workers() -> usize {
    1
}
fn default_bins() -> usize {
    20
}

/// Parses and validates a configuration document.
pub fn parse_config(source: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(source).map_err(|e| Error::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Renders a configuration back to TOML.
pub fn render_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Parse(e.to_string()))
}

fn check_seed(key: &str, seed: u64) -> Result<()> {
    if seed > i64::MAX as u64 {
        return Err(Error::validation(key, "seed must fit in a signed 64-bit integer"));
    }
    Ok(())
}

fn check_unit(key: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::validation(key, format!("{v} is outside [0, 1]")));
    }
    Ok(())
}

fn require<T: Copy>(key: &str, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| Error::validation(key, "required for this data source"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::Idx => {
                for (key, v) in [
                    ("data.train_images", &d.train_images),
                    ("data.train_labels", &d.train_labels),
                    ("data.test_images", &d.test_images),
                    ("data.test_labels", &d.test_labels),
                ] {
                    if v.is_none() {
                        return Err(Error::validation(key, "required for source = \"idx\""));
                    }
                }
            }
            DataSource::Blobs => {
                let k = require("data.num_classes", d.num_classes)?;
                if k < 3 {
                    return Err(Error::validation(
                        "data.num_classes",
                        "need at least 3 classes to hold one out",
                    ));
                }
                if require("data.dim", d.dim)? == 0 {
                    return Err(Error::validation("data.dim", "must be positive"));
                }
                if require("data.train_per_class", d.train_per_class)? < 2 {
                    return Err(Error::validation("data.train_per_class", "must be at least 2"));
                }
                if require("data.test_per_class", d.test_per_class)? == 0 {
                    return Err(Error::validation("data.test_per_class", "must be positive"));
                }
                let sep = require("data.separation", d.separation)?;
                if !(sep > 0.0) || !sep.is_finite() {
                    return Err(Error::validation("data.separation", "must be positive"));
                }
                check_seed("data.seed", require("data.seed", d.seed)?)?;
                if let Some(labels) = &d.held_out_labels {
                    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
                        return Err(Error::validation(
                            "data.held_out_labels",
                            format!("label {bad} is not below num_classes = {k}"),
                        ));
                    }
                }
            }
        }
        if let Some(labels) = &d.held_out_labels {
            if labels.is_empty() {
                return Err(Error::validation("data.held_out_labels", "must not be empty"));
            }
            let mut sorted = labels.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != labels.len() {
                return Err(Error::validation("data.held_out_labels", "contains duplicates"));
            }
        }

        let n = &self.network;
        if n.hidden.is_empty() {
            return Err(Error::validation("network.hidden", "needs at least one hidden layer"));
        }
        if n.hidden.contains(&0) {
            return Err(Error::validation("network.hidden", "layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&n.dropout) {
            return Err(Error::validation("network.dropout", "must lie in [0, 1)"));
        }

        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::validation("training.batch_size", "must be positive"));
        }
        if !(t.learning_rate > 0.0) || !t.learning_rate.is_finite() {
            return Err(Error::validation("training.learning_rate", "must be positive"));
        }
        check_unit("training.early_stop_accuracy", t.early_stop_accuracy)?;
        check_seed("training.seed", t.seed)?;

        if let Some(inf) = &self.inference {
            check_unit("inference.threshold", inf.threshold)?;
            if !(inf.ridge_scale >= 0.0) || !inf.ridge_scale.is_finite() {
                return Err(Error::validation("inference.ridge_scale", "must be non-negative"));
            }
            if inf.percentiles.is_empty() {
                return Err(Error::validation(
                    "inference.percentiles",
                    "at least one (alpha, beta) pair is required",
                ));
            }
            for (i, p) in inf.percentiles.iter().enumerate() {
                if !(0.0..=100.0).contains(&p.alpha) {
                    return Err(Error::validation(
                        format!("inference.percentiles[{i}].alpha"),
                        format!("{} is outside [0, 100]", p.alpha),
                    ));
                }
                if !(0.0..=100.0).contains(&p.beta) || p.beta < p.alpha {
                    return Err(Error::validation(
                        format!("inference.percentiles[{i}].beta"),
                        format!("{} must lie in [alpha = {}, 100]", p.beta, p.alpha),
                    ));
                }
            }
            let mut names: Vec<String> = (0..inf.percentiles.len()).map(|i| inf.pair_name(i)).collect();
            names.sort();
            if names.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::validation("inference.percentiles", "pair names must be unique"));
            }
        }
        if let Some(mc) = &self.mc_dropout {
            if mc.passes == 0 {
                return Err(Error::validation("mc_dropout.passes", "must be at least 1"));
            }
            check_unit("mc_dropout.threshold", mc.threshold)?;
            check_seed("mc_dropout.seed", mc.seed)?;
        }
        if let Some(ens) = &self.ensemble {
            if ens.members < 2 {
                return Err(Error::validation("ensemble.members", "must be at least 2"));
            }
            check_unit("ensemble.threshold", ens.threshold)?;
            check_seed("ensemble.base_seed", ens.base_seed)?;
            if ens.base_seed.checked_add(ens.members as u64).map_or(true, |s| s > i64::MAX as u64) {
                return Err(Error::validation("ensemble.base_seed", "member seeds overflow"));
            }
        }
        if self.inference.is_none() && self.mc_dropout.is_none() && self.ensemble.is_none() {
            return Err(Error::validation(
                "inference",
                "at least one of [inference], [mc_dropout], [ensemble] is required",
            ));
        }
        if self.run.workers == 0 {
            return Err(Error::validation("run.workers", "must be at least 1"));
        }
        if self.run.histogram_bins == 0 {
            return Err(Error::validation("run.histogram_bins", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
source = "idx"
train_images = "d/train-images"
train_labels = "d/train-labels"
test_images = "d/test-images"
test_labels = "d/test-labels"

[network]
hidden = [1024, 1024]
dropout = 0.5

[training]
seed = 1

[[inference.percentiles]]
alpha = 0.1
beta = 50

[run]
output_dir = "out"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        let inf = cfg.inference.as_ref().unwrap();
        assert_eq!(inf.percentiles[0].alpha, 0.1);
        assert_eq!(inf.percentiles[0].beta, 50.0);
        assert_eq!(inf.threshold, 0.5);
        assert_eq!(inf.smoothstep, SmoothstepForm::Corrected);
        assert_eq!(cfg.training.batch_size, 128);
        assert_eq!(cfg.training.early_stop_accuracy, 0.96);
        assert_eq!(cfg.network.layer_specs().len(), 2);
        assert!(cfg.mc_dropout.is_none());
    }

    #[test]
    fn integer_percentiles_parse() {
        let text = MINIMAL.replace("alpha = 0.1\nbeta = 50", "alpha = 3\nbeta = 90");
        let cfg = parse_config(&text).unwrap();
        let p = &cfg.inference.unwrap().percentiles[0];
        assert_eq!((p.alpha, p.beta), (3.0, 90.0));
    }

    #[test]
    fn inverted_percentiles_name_beta() {
        let text = MINIMAL.replace("alpha = 0.1\nbeta = 50", "alpha = 50\nbeta = 10");
        match parse_config(&text) {
            Err(Error::Validation { key, .. }) => assert!(key.ends_with("beta"), "{key}"),
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("dropout = 0.5", "dropout = 0.5\nwidth = 3");
        assert!(matches!(parse_config(&text), Err(Error::Parse(_))));
        let text = format!("{MINIMAL}\n[extra]\nx = 1\n");
        assert!(matches!(parse_config(&text), Err(Error::Parse(_))));
    }

    #[test]
    fn seeds_are_mandatory() {
        let text = MINIMAL.replace("[training]\nseed = 1", "[training]\nbatch_size = 64");
        assert!(matches!(parse_config(&text), Err(Error::Parse(_))));
        let text = format!("{MINIMAL}\n[mc_dropout]\npasses = 10\n");
        assert!(matches!(parse_config(&text), Err(Error::Parse(_))));
    }

    #[test]
    fn missing_paths_and_bad_values_name_keys() {
        let text = MINIMAL.replace("test_labels = \"d/test-labels\"\n", "");
        assert!(matches!(
            parse_config(&text),
            Err(Error::Validation { ref key, .. }) if key == "data.test_labels"
        ));
        let text = format!("{MINIMAL}\n[ensemble]\nmembers = 1\nbase_seed = 3\n");
        assert!(matches!(
            parse_config(&text),
            Err(Error::Validation { ref key, .. }) if key == "ensemble.members"
        ));
        let text = format!("{MINIMAL}\n[mc_dropout]\npasses = 0\nseed = 3\n");
        assert!(matches!(
            parse_config(&text),
            Err(Error::Validation { ref key, .. }) if key == "mc_dropout.passes"
        ));
        let text = MINIMAL.replace("[run]", "[mc_dropout]\nseed = 2\nthreshold = 1.5\n\n[run]");
        assert!(matches!(
            parse_config(&text),
            Err(Error::Validation { ref key, .. }) if key == "mc_dropout.threshold"
        ));
    }

    #[test]
    fn render_round_trips() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(parse_config(&render_config(&cfg).unwrap()).unwrap(), cfg);
    }
}
