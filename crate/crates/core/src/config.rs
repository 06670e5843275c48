//! Experiment configuration: JSON in, validated and fully defaulted out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{PerturbConfig, Strategy};
use crate::detector::{DetectorConfig, DetectorVariant};
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::nn::hex_string;
use crate::synthgan::BenchmarkConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CrossGan,
    CrossCategory,
    CategorySweep,
    AblationAdv,
    AblationDetector,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::CrossGan => "cross_gan",
            ExperimentKind::CrossCategory => "cross_category",
            ExperimentKind::CategorySweep => "category_sweep",
            ExperimentKind::AblationAdv => "ablation_adv",
            ExperimentKind::AblationDetector => "ablation_detector",
        }
    }
}

fn default_arms() -> Vec<Strategy> {
    vec![Strategy::None, Strategy::Scaling, Strategy::Mixup]
}

fn default_category_counts() -> Vec<usize> {
    vec![1, 2, 4]
}

fn default_variants() -> Vec<DetectorVariant> {
    vec![DetectorVariant::Smaller, DetectorVariant::Small, DetectorVariant::Larger]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: BenchmarkConfig,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub perturb: PerturbConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Augmentation arms compared side by side.
    #[serde(default = "default_arms")]
    pub arms: Vec<Strategy>,
    /// Training category for cross-category runs; the first category if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_category: Option<String>,
    /// Numbers of training categories for the sweep.
    #[serde(default = "default_category_counts")]
    pub category_counts: Vec<usize>,
    #[serde(default = "default_variants")]
    pub variants: Vec<DetectorVariant>,
    /// Also write averaged-spectrum figures.
    #[serde(default = "yes")]
    pub figures: bool,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, seed: u64) -> Self {
        ExperimentConfig {
            experiment,
            seed,
            out_dir: None,
            dataset: BenchmarkConfig::default(),
            extractor: ExtractorConfig::default(),
            perturb: PerturbConfig::default(),
            detector: DetectorConfig::default(),
            arms: default_arms(),
            train_category: None,
            category_counts: default_category_counts(),
            variants: default_variants(),
            figures: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let at = |path: &str, e: Error| Error::Config {
            path: path.to_string(),
            message: match e {
                Error::InvalidArgument(m) => m,
                other => other.to_string(),
            },
        };
        self.dataset.validate().map_err(|e| at("dataset", e))?;
        self.extractor.validate().map_err(|e| at("extractor", e))?;
        self.perturb.validate().map_err(|e| at("perturb", e))?;
        self.detector.validate().map_err(|e| at("detector", e))?;
        if self.arms.is_empty() {
            return Err(at("arms", Error::invalid("at least one arm is required")));
        }
        if let Some(c) = &self.train_category {
            if !self.dataset.categories.iter().any(|p| &p.category_id == c) {
                return Err(at("train_category", Error::invalid(format!("unknown category `{c}`"))));
            }
        }
        let k = self.dataset.categories.len();
        if self.category_counts.is_empty() {
            return Err(at("category_counts", Error::invalid("empty category sweep")));
        }
        if let Some(&bad) = self.category_counts.iter().find(|&&n| n == 0 || n > k) {
            return Err(at(
                "category_counts",
                Error::invalid(format!("count {bad} outside 1..={k}")),
            ));
        }
        if self.variants.is_empty() {
            return Err(at("variants", Error::invalid("at least one detector variant is required")));
        }
        Ok(())
    }

    pub fn train_category(&self) -> &str {
        self.train_category
            .as_deref()
            .unwrap_or(&self.dataset.categories[0].category_id)
    }

    /// Canonical JSON, the input of [`ExperimentConfig::hash`]. The output
    /// directory is excluded so relocated runs keep their identity.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        serde_json::to_string(&c).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        hash_str(&self.canonical_json())
    }
}

pub fn hash_str(s: &str) -> String {
    hex_string(&Sha256::digest(s.as_bytes()))
}

/// Parses and validates a config. Errors name the offending JSON path.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    if text.trim().is_empty() {
        return Err(Error::Config {
            path: "$".into(),
            message: "empty config".into(),
        });
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: match e.path().to_string() {
            p if p == "." => "$".to_string(),
            p => p,
        },
        message: e.inner().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(parse_config_str(""), Err(Error::Config { .. })));
        assert!(parse_config_str("  \n").unwrap_err().is_validation());
    }

    #[test]
    fn minimal_config_is_defaulted() {
        let c = parse_config_str(r#"{"experiment": "cross_gan", "seed": 1}"#).unwrap();
        assert_eq!(c, ExperimentConfig::new(ExperimentKind::CrossGan, 1));
        assert_eq!(c.extractor.lambda_adv, 1e-4);
        assert_eq!(c.perturb.alpha0, 5.0);
        assert_eq!(c.perturb.n, 2);
        assert_eq!((c.extractor.lr_e, c.extractor.lr_d, c.detector.lr), (1e-3, 1e-3, 1e-4));
        let echoed = serde_json::to_string(&c).unwrap();
        assert_eq!(parse_config_str(&echoed).unwrap(), c);
    }

    #[test]
    fn override_round_trips() {
        let c = parse_config_str(r#"{"experiment": "cross_gan", "seed": 1, "perturb": {"alpha0": 2.5}}"#).unwrap();
        assert_eq!(c.perturb.alpha0, 2.5);
        let back = parse_config_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back.perturb.alpha0, 2.5);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn errors_name_the_path() {
        let err = parse_config_str(r#"{"experiment": "cross_gan", "seed": 1, "perturb": {"alpha00": 2}}"#).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert_eq!(path, "perturb.alpha00");
                assert!(message.contains("alpha00"), "{message}");
            }
            other => panic!("{other}"),
        }
        let err = parse_config_str(r#"{"experiment": "cross_gan", "seed": "x"}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "seed"), "{err}");
        let err = parse_config_str(r#"{"seed": 3}"#).unwrap_err();
        assert!(err.to_string().contains("experiment"), "{err}");
        let err = parse_config_str(r#"{"experiment": "cross_gan", "seed": 1, "detector": {"lr": -1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "detector"), "{err}");
        let err = parse_config_str(r#"{"experiment": "cross_gan", "seed": 1, "train_category": "moon"}"#).unwrap_err();
        assert!(err.to_string().contains("moon"));
    }

    #[test]
    fn hash_ignores_out_dir() {
        let mut a = ExperimentConfig::new(ExperimentKind::CrossGan, 1);
        let h = a.hash();
        a.out_dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), h);
        a.seed = 2;
        assert_ne!(a.hash(), h);
    }
}
