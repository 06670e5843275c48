//! Fingerprint-domain data augmentation for detectors of GAN-generated images.
//!
//! The crate contains a small tape-based autodiff engine, a synthetic
//! benchmark of procedural "real" images and fingerprinted "fake" images, the
//! fingerprint extractor with its category discriminator, Scaling and Mixup
//! perturbations, a CNN detector with accuracy and average precision metrics,
//! spectral analysis, and the experiment runner behind the `fpforge` binary.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod extractor;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod report;
pub mod spectrum;
pub mod synthgan;
pub mod tape;
pub mod tensor;

pub use augment::{Fingerprint, PerturbConfig, Strategy};
pub use config::{parse_config, ExperimentConfig, ExperimentKind};
pub use dataset::{Dataset, Label, Manifest};
pub use detector::{Detector, DetectorConfig, DetectorVariant, EvalReport};
pub use error::{Error, Result};
pub use experiment::{run_experiment, RunRecord};
pub use extractor::{Extractor, ExtractorConfig};
pub use synthgan::{BenchmarkConfig, GanProfile};
pub use image::Image;
pub use nn::{Network, ParamSet};
pub use optim::AdamState;
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
