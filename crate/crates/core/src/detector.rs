//! Binary real/fake detector, its training loop, and per-source evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentReport, Fingerprint, PerturbConfig, Strategy};
use crate::dataset::{Dataset, Label};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{accuracy, average_precision, TAU};
use crate::nn::{Activation, Layer, Network};
use crate::optim::AdamState;
use crate::synthgan::mix_seed;
use crate::tape::Tape;

const INFER_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorVariant {
    #[default]
    Small,
    Smaller,
    Larger,
}

impl DetectorVariant {
    pub fn name(self) -> &'static str {
        match self {
            DetectorVariant::Small => "small",
            DetectorVariant::Smaller => "smaller",
            DetectorVariant::Larger => "larger",
        }
    }

    fn widths(self) -> [usize; 4] {
        match self {
            DetectorVariant::Small => [16, 32, 64, 64],
            DetectorVariant::Smaller => [8, 16, 32, 32],
            DetectorVariant::Larger => [32, 64, 128, 128],
        }
    }

    /// Four stride-2 convs, global average pool, one sigmoid output.
    pub fn layers(self) -> Vec<Layer> {
        let w = self.widths();
        let mut layers = Vec::new();
        let mut c = 3;
        for &out in &w {
            layers.push(Layer::conv(c, out, 2, Activation::Relu));
            c = out;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Linear {
            in_features: c,
            out_features: 1,
            activation: Activation::Sigmoid,
        });
        layers
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub variant: DetectorVariant,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            variant: DetectorVariant::Small,
            lr: 1e-4,
            epochs: 15,
            batch_size: 8,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("detector lr, epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub variant: DetectorVariant,
    pub network: Network,
}

impl Detector {
    pub fn new(variant: DetectorVariant, seed: u64) -> Self {
        Detector {
            variant,
            network: Network::new("detector", variant.layers(), seed),
        }
    }

    /// Probability of "fake" for each image.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<f64>> {
        let refs: Vec<&Image> = images.iter().collect();
        self.predict_refs(&refs)
    }

    pub fn predict_refs(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            if let Some(bad) = chunk.iter().find(|im| im.dims().0 != 3) {
                return Err(Error::shape("detector", format!("expected 3 channels, got {:?}", bad.dims())));
            }
            let y = self.network.infer(&Image::batch(chunk)?)?;
            out.extend(y.data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }
}

/// Precomputed decomposition of the training fakes for on-the-fly
/// fingerprint augmentation with a frozen extractor.
pub struct AugmentSource<'a> {
    pub recons: &'a [Image],
    pub fingerprints: &'a [Fingerprint],
    pub config: &'a PerturbConfig,
}

#[derive(Clone, Debug)]
pub struct TrainedDetector {
    pub detector: Detector,
    /// Mean training BCE per epoch.
    pub history: Vec<f64>,
    pub augment: AugmentReport,
}

/// Trains with BCE on reals (label 0) and fakes (label 1). When `augment`
/// is given, every mini-batch's fakes are re-perturbed with fresh draws.
pub fn train_detector(
    reals: &[Image],
    fakes: &[Image],
    augment: Option<AugmentSource<'_>>,
    config: &DetectorConfig,
    seed: u64,
) -> Result<TrainedDetector> {
    config.validate()?;
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::invalid(format!(
            "detector training needs both classes, got {} reals and {} fakes",
            reals.len(),
            fakes.len()
        )));
    }
    if let Some(a) = &augment {
        a.config.validate()?;
        if a.recons.len() != fakes.len() || a.fingerprints.len() != fakes.len() {
            return Err(Error::invalid("augmentation source does not align with the fakes"));
        }
    }
    let augment = augment.filter(|a| a.config.strategy != Strategy::None);

    let mut detector = Detector::new(config.variant, mix_seed(seed, 0xDE7));
    let mut opt = AdamState::new(&detector.network.params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xBA7C));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, augment.as_ref().map_or(0, |a| a.config.seed)));
    let mut report = AugmentReport::default();

    // (is_fake, index)
    let mut order: Vec<(bool, usize)> = (0..reals.len())
        .map(|i| (false, i))
        .chain((0..fakes.len()).map(|i| (true, i)))
        .collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let fake_ids: Vec<usize> = chunk.iter().filter(|(f, _)| *f).map(|&(_, i)| i).collect();
            let augmented = match &augment {
                Some(a) => {
                    let recons: Vec<Image> = fake_ids.iter().map(|&i| a.recons[i].clone()).collect();
                    let fps: Vec<Fingerprint> = fake_ids.iter().map(|&i| a.fingerprints[i].clone()).collect();
                    let originals: Vec<Image> = fake_ids.iter().map(|&i| fakes[i].clone()).collect();
                    let out = augment_batch(&recons, &fps, &originals, a.config, &mut aug_rng)?;
                    report.perturbed += out.report.perturbed;
                    report.passthrough += out.report.passthrough;
                    report.fallback += out.report.fallback;
                    Some(out.images)
                }
                None => None,
            };
            let mut batch: Vec<&Image> = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            let mut next_fake = 0;
            for &(is_fake, i) in chunk {
                let im = match (is_fake, &augmented) {
                    (false, _) => &reals[i],
                    (true, Some(aug)) => {
                        next_fake += 1;
                        &aug[next_fake - 1]
                    }
                    (true, None) => &fakes[i],
                };
                batch.push(im);
                labels.push(if is_fake { 1.0 } else { 0.0 });
            }
            let mut tape = Tape::new();
            let bound = detector.network.bind(&mut tape, true);
            let x = tape.constant(Image::batch(&batch)?);
            let p = detector.network.apply(&mut tape, x, &bound)?;
            let loss = tape.bce(p, &labels)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            tape.backward(loss)?;
            let grads = detector.network.params.collect_grads(&tape, &bound);
            opt.step(&mut detector.network.params, &grads)?;
            total += value;
            steps += 1;
        }
        history.push(total / steps as f64);
    }
    Ok(TrainedDetector {
        detector,
        history,
        augment: report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceResult {
    pub source: String,
    pub acc: f64,
    pub ap: f64,
    pub n_fake: usize,
    pub n_real: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sources: Vec<SourceResult>,
    pub mean_acc: f64,
    pub mean_ap: f64,
    /// Free-form description of what produced the report.
    #[serde(default)]
    pub config: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn from_sources(sources: Vec<SourceResult>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("an evaluation report needs at least one source"));
        }
        let n = sources.len() as f64;
        let mean_acc = sources.iter().map(|s| s.acc).sum::<f64>() / n;
        let mean_ap = sources.iter().map(|s| s.ap).sum::<f64>() / n;
        Ok(EvalReport {
            sources,
            mean_acc,
            mean_ap,
            config: BTreeMap::new(),
        })
    }

    pub fn source(&self, id: &str) -> Option<&SourceResult> {
        self.sources.iter().find(|s| s.source == id)
    }

    /// Mean (acc, ap) over the named sources.
    pub fn mean_over<S: AsRef<str>>(&self, ids: &[S]) -> Result<(f64, f64)> {
        if ids.is_empty() {
            return Err(Error::invalid("mean over an empty source list"));
        }
        let mut acc = 0.0;
        let mut ap = 0.0;
        for id in ids {
            let s = self
                .source(id.as_ref())
                .ok_or_else(|| Error::invalid(format!("report has no source `{}`", id.as_ref())))?;
            acc += s.acc;
            ap += s.ap;
        }
        Ok((acc / ids.len() as f64, ap / ids.len() as f64))
    }
}

/// Scores one source. Reals and fakes are interleaved (real first) so that
/// a constant-score detector gets AP equal to the fake prevalence.
pub fn score_source(
    detector: &Detector,
    source: &str,
    fakes: &[&Image],
    reals: &[&Image],
) -> Result<SourceResult> {
    if fakes.is_empty() || reals.is_empty() {
        return Err(Error::invalid(format!("source `{source}` needs fakes and reals")));
    }
    let mut images = Vec::with_capacity(fakes.len() + reals.len());
    let mut labels = Vec::with_capacity(images.capacity());
    for i in 0..fakes.len().max(reals.len()) {
        if let Some(r) = reals.get(i) {
            images.push(*r);
            labels.push(false);
        }
        if let Some(f) = fakes.get(i) {
            images.push(*f);
            labels.push(true);
        }
    }
    let scores = detector.predict_refs(&images)?;
    Ok(SourceResult {
        source: source.to_string(),
        acc: accuracy(&scores, &labels, TAU)?,
        ap: average_precision(&scores, &labels)?,
        n_fake: fakes.len(),
        n_real: reals.len(),
    })
}

/// GAN ids of a split in order of first appearance.
pub fn gan_ids(test: &Dataset) -> Vec<&str> {
    let mut seen = Vec::new();
    for r in &test.manifest.records {
        if let Some(g) = r.gan_id.as_deref() {
            if !seen.contains(&g) {
                seen.push(g);
            }
        }
    }
    seen
}

/// Per-GAN scores. GAN `g`'s fakes are paired with the `p`-th block of
/// equally many test reals, `p` being `g`'s position in the test split.
pub fn cross_gan_eval<S: AsRef<str>>(detector: &Detector, test: &Dataset, gans: &[S]) -> Result<EvalReport> {
    let order = gan_ids(test);
    let reals: Vec<&Image> = test
        .records()
        .filter(|(r, _)| r.label == Label::Real)
        .map(|(_, im)| im)
        .collect();
    if reals.is_empty() {
        return Err(Error::invalid("test split has no real images"));
    }
    let mut sources = Vec::with_capacity(gans.len());
    for gan in gans {
        let gan = gan.as_ref();
        let p = order
            .iter()
            .position(|g| *g == gan)
            .ok_or_else(|| Error::invalid(format!("test split has no fakes for GAN `{gan}`")))?;
        let fakes: Vec<&Image> = test
            .records()
            .filter(|(r, _)| r.gan_id.as_deref() == Some(gan))
            .map(|(_, im)| im)
            .collect();
        let n = fakes.len();
        let paired: Vec<&Image> = (0..n).map(|j| reals[(p * n + j) % reals.len()]).collect();
        sources.push(score_source(detector, gan, &fakes, &paired)?);
    }
    EvalReport::from_sources(sources)
}

/// Per-category scores for one GAN's fakes against reals of the same category.
pub fn cross_category_eval<S: AsRef<str>>(
    detector: &Detector,
    test: &Dataset,
    gan: &str,
    categories: &[S],
) -> Result<EvalReport> {
    let mut sources = Vec::with_capacity(categories.len());
    for cat in categories {
        let cat = cat.as_ref();
        let fakes: Vec<&Image> = test
            .records()
            .filter(|(r, _)| r.gan_id.as_deref() == Some(gan) && r.category_id == cat)
            .map(|(_, im)| im)
            .collect();
        if fakes.is_empty() {
            return Err(Error::invalid(format!("test split has no `{gan}` fakes in category `{cat}`")));
        }
        let reals: Vec<&Image> = test
            .records()
            .filter(|(r, _)| r.label == Label::Real && r.category_id == cat)
            .map(|(_, im)| im)
            .take(fakes.len())
            .collect();
        sources.push(score_source(detector, cat, &fakes, &reals)?);
    }
    EvalReport::from_sources(sources)
}
