//! Stage functions shared by the CLI and the experiment runner, plus
//! content-addressed caching of stage outputs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{augment_batch, PerturbConfig, Strategy};
use crate::checkpoint;
use crate::config::{hash_str, ExperimentConfig, ExperimentKind};
use crate::dataset::{Dataset, Label};
use crate::detector::{
    cross_category_eval, cross_gan_eval, train_detector, AugmentSource, Detector, DetectorConfig, DetectorVariant,
    EvalReport, TrainedDetector,
};
use crate::error::{Error, Result};
use crate::extractor::{discriminator_accuracy, discriminator_layers, train_extractor, EpochLoss, Extractor, ExtractorConfig};
use crate::image::{psnr, Image};
use crate::nn::Network;
use crate::report::{emit_table, Table};
use crate::spectrum::{average_spectrum, export_pgm, SpectrumImage};
use crate::synthgan::{make_benchmark, mix_seed, Benchmark, BenchmarkConfig};

pub const EXTRACTOR_FILE: &str = "extractor.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const DETECTOR_FILE: &str = "detector.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
const STAGE_FILE: &str = "stage.json";
const AUGMENT_CHUNK: usize = 64;
/// Held-out images used for reconstruction and spectrum summaries.
const PROBE_IMAGES: usize = 200;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

/// Runs `compute` in `root/{stage}-{hash(key)}` unless that directory
/// already holds a finished result. A failed stage leaves its partial
/// artifacts in place.
pub fn cached<T, F>(root: &Path, stage: &'static str, key: &serde_json::Value, compute: F) -> Result<(PathBuf, T)>
where
    T: Serialize + DeserializeOwned,
    F: FnOnce(&Path) -> Result<T>,
{
    let hash = hash_str(&key.to_string());
    let dir = root.join(format!("{stage}-{}", &hash[..16]));
    let done = dir.join(STAGE_FILE);
    if done.exists() {
        return Ok((dir.clone(), read_json(&done).map_err(|e| e.in_stage(stage))?));
    }
    write(&dir.join("key.json"), to_json(key))?;
    let value = compute(&dir).map_err(|e| e.in_stage(stage))?;
    write(&done, to_json(&value))?;
    Ok((dir, value))
}

// ---- data -----------------------------------------------------------------

pub fn save_benchmark(b: &Benchmark, dir: &Path) -> Result<()> {
    b.train.save(&dir.join("train"))?;
    b.test.save(&dir.join("test"))
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    Ok(Benchmark {
        train: Dataset::load(&dir.join("train"))?,
        test: Dataset::load(&dir.join("test"))?,
    })
}

fn images_where<'a>(ds: &'a Dataset, keep: impl Fn(&crate::dataset::SampleRecord) -> bool + 'a) -> Vec<Image> {
    ds.records().filter(|(r, _)| keep(r)).map(|(_, im)| im.clone()).collect()
}

/// Images of one source: `real`, `fake`, a GAN id, or a category id.
pub fn source_images(ds: &Dataset, source: &str) -> Result<Vec<Image>> {
    let out = match source {
        "real" => images_where(ds, |r| r.label == Label::Real),
        "fake" => images_where(ds, |r| r.label == Label::Fake),
        id => {
            let by_gan = images_where(ds, |r| r.gan_id.as_deref() == Some(id));
            if by_gan.is_empty() {
                images_where(ds, |r| r.category_id == id)
            } else {
                by_gan
            }
        }
    };
    if out.is_empty() {
        return Err(Error::invalid(format!("dataset has no images for source `{source}`")));
    }
    Ok(out)
}

// ---- extractor --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSummary {
    pub adv_enabled: bool,
    pub categories: Vec<String>,
    pub history: Vec<EpochLoss>,
    /// Category accuracy of the discriminator on the training fingerprints.
    pub discriminator_accuracy: Option<f64>,
    pub checksum: String,
}

pub struct FittedExtractor {
    pub extractor: Extractor,
    pub discriminator: Option<Network>,
    pub summary: ExtractorSummary,
}

/// Category ids of the training fakes in order of first appearance.
pub fn fake_categories(train: &Dataset) -> Vec<String> {
    let mut cats: Vec<String> = Vec::new();
    for r in &train.manifest.records {
        if r.label == Label::Fake && !cats.contains(&r.category_id) {
            cats.push(r.category_id.clone());
        }
    }
    cats
}

/// Trains `E` (and `D`) on a training split. `K` is the number of categories
/// among its fakes; adversarial training is skipped when `K < 2` only if the
/// config already disables it.
pub fn fit_extractor(train: &Dataset, config: &ExtractorConfig, seed: u64) -> Result<FittedExtractor> {
    let cats = fake_categories(train);
    let reals = images_where(train, |r| r.label == Label::Real);
    let fakes: Vec<(Image, usize)> = train
        .records()
        .filter(|(r, _)| r.label == Label::Fake)
        .map(|(r, im)| (im.clone(), cats.iter().position(|c| *c == r.category_id).expect("listed")))
        .collect();
    let trained = train_extractor(&reals, &fakes, cats.len(), config, seed)?;
    let discriminator_accuracy = match &trained.discriminator {
        Some(d) => Some(discriminator_accuracy(&trained.extractor, d, &fakes)?),
        None => None,
    };
    Ok(FittedExtractor {
        summary: ExtractorSummary {
            adv_enabled: config.adv_enabled,
            categories: cats,
            history: trained.history.clone(),
            discriminator_accuracy,
            checksum: trained.extractor.checksum(),
        },
        extractor: trained.extractor,
        discriminator: trained.discriminator,
    })
}

pub fn save_extractor(fitted: &FittedExtractor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(
        &dir.join(EXTRACTOR_FILE),
        &fitted.extractor.autoencoder.params,
        json!({"kind": "extractor"}),
    )?;
    if let Some(d) = &fitted.discriminator {
        checkpoint::save(
            &dir.join(DISCRIMINATOR_FILE),
            &d.params,
            json!({"kind": "discriminator", "k": fitted.summary.categories.len()}),
        )?;
    }
    let mut csv = String::from("epoch,rec_loss,adv_loss\n");
    for h in &fitted.summary.history {
        csv.push_str(&format!("{},{:.9},{:.9}\n", h.epoch, h.rec_loss, h.adv_loss));
    }
    write(&dir.join(LOSS_FILE), csv)
}

fn check_kind(meta: &serde_json::Value, kind: &str, path: &Path) -> Result<()> {
    if meta["kind"] != kind {
        return Err(Error::Format {
            what: "checkpoint",
            message: format!("{} holds a `{}`, expected `{kind}`", path.display(), meta["kind"]),
        });
    }
    Ok(())
}

pub fn load_extractor(path: &Path) -> Result<Extractor> {
    let (params, meta) = checkpoint::load(path)?;
    check_kind(&meta, "extractor", path)?;
    let mut e = Extractor::new(0);
    e.autoencoder.load(params)?;
    Ok(e)
}

pub fn load_discriminator(path: &Path) -> Result<Network> {
    let (params, meta) = checkpoint::load(path)?;
    check_kind(&meta, "discriminator", path)?;
    let k = meta["k"].as_u64().ok_or_else(|| Error::Format {
        what: "checkpoint",
        message: "discriminator without `k`".into(),
    })? as usize;
    let mut d = Network::new("discriminator", discriminator_layers(k), 0);
    d.load(params)?;
    Ok(d)
}

// ---- augmentation and detector ----------------------------------------------

/// Writes every fake through the configured perturbation, in chunks that
/// play the role of mini-batches. Reals are copied unchanged.
pub fn perturb_dataset(ds: &Dataset, extractor: &Extractor, config: &PerturbConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let fake_ids: Vec<usize> = ds
        .manifest
        .records
        .iter()
        .filter(|r| r.label == Label::Fake)
        .map(|r| r.index)
        .collect();
    let mut out = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, config.seed));
    for chunk in fake_ids.chunks(AUGMENT_CHUNK) {
        let originals: Vec<Image> = chunk.iter().map(|&i| ds.images[i].clone()).collect();
        let (recons, fps) = extractor.decompose(&originals)?;
        let batch = augment_batch(&recons, &fps, &originals, config, &mut rng)?;
        for ((&i, im), mut rec) in chunk.iter().zip(batch.images).zip(batch.records) {
            if let crate::dataset::PerturbationRecord::Mixup { partners, .. } = &mut rec {
                for p in partners.iter_mut() {
                    *p = chunk[*p];
                }
            }
            out.images[i] = im;
            out.manifest.records[i].perturbation = Some(rec);
        }
    }
    Ok(out)
}

/// Trains a detector on a training split, re-perturbing fakes on the fly
/// when the strategy is not `none`.
pub fn fit_detector(
    train: &Dataset,
    extractor: Option<&Extractor>,
    perturb: &PerturbConfig,
    config: &DetectorConfig,
    seed: u64,
) -> Result<TrainedDetector> {
    let reals = images_where(train, |r| r.label == Label::Real);
    let fakes = images_where(train, |r| r.label == Label::Fake);
    if perturb.strategy == Strategy::None {
        return train_detector(&reals, &fakes, None, config, seed);
    }
    let extractor =
        extractor.ok_or_else(|| Error::invalid(format!("strategy `{}` needs an extractor", perturb.strategy.name())))?;
    let checksum = extractor.checksum();
    let (recons, fingerprints) = extractor.decompose(&fakes)?;
    let source = AugmentSource {
        recons: &recons,
        fingerprints: &fingerprints,
        config: perturb,
    };
    let trained = train_detector(&reals, &fakes, Some(source), config, seed)?;
    debug_assert_eq!(checksum, extractor.checksum());
    Ok(trained)
}

pub fn save_detector(detector: &Detector, path: &Path) -> Result<()> {
    checkpoint::save(
        path,
        &detector.network.params,
        json!({"kind": "detector", "variant": detector.variant.name()}),
    )
}

pub fn load_detector(path: &Path) -> Result<Detector> {
    let (params, meta) = checkpoint::load(path)?;
    check_kind(&meta, "detector", path)?;
    let variant: DetectorVariant = serde_json::from_value(meta["variant"].clone())?;
    let mut d = Detector::new(variant, 0);
    d.network.load(params)?;
    Ok(d)
}

// ---- mechanism checks --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismSummary {
    pub seen_gan: String,
    pub bin: (i64, i64),
    pub fake_peak_to_median: f64,
    pub real_peak_to_median: f64,
    pub mixup_median_psnr: f64,
    pub scaling_spectrum_distance: f64,
    pub mixup_spectrum_distance: f64,
    pub reconstruction_psnr: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub struct Mechanism {
    pub summary: MechanismSummary,
    /// `(name, spectrum)` panels for figures.
    pub spectra: Vec<(String, SpectrumImage)>,
}

/// Spectral and visual checks of the augmentation on held-out seen-GAN fakes.
pub fn mechanism(
    bench: &BenchmarkConfig,
    test: &Dataset,
    extractor: &Extractor,
    perturb: &PerturbConfig,
    seed: u64,
) -> Result<Mechanism> {
    let seen = bench.seen[0].clone();
    let profile = bench.gan(&seen).expect("validated");
    let bin = profile.characteristic_bin(bench.side);
    let fakes: Vec<Image> = source_images(test, &seen)?.into_iter().take(PROBE_IMAGES).collect();
    let reals: Vec<Image> = source_images(test, "real")?.into_iter().take(PROBE_IMAGES).collect();
    let (recons, fps) = extractor.decompose(&fakes)?;
    let mut variants = Vec::new();
    for strategy in [Strategy::Scaling, Strategy::Mixup] {
        let cfg = PerturbConfig {
            strategy,
            apply_prob: 1.0,
            ..perturb.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xF16));
        let mut images = Vec::with_capacity(fakes.len());
        for ((r, f), o) in recons
            .chunks(AUGMENT_CHUNK)
            .zip(fps.chunks(AUGMENT_CHUNK))
            .zip(fakes.chunks(AUGMENT_CHUNK))
        {
            images.extend(augment_batch(r, f, o, &cfg, &mut rng)?.images);
        }
        variants.push(images);
    }
    let fake_spec = average_spectrum(&fakes)?;
    let real_spec = average_spectrum(&reals)?;
    let scaling_spec = average_spectrum(&variants[0])?;
    let mixup_spec = average_spectrum(&variants[1])?;
    let mixup_median_psnr = median(fakes.iter().zip(&variants[1]).map(|(a, b)| psnr(a, b)).collect());
    let (real_recons, _) = extractor.decompose(&reals)?;
    let reconstruction_psnr = reals.iter().zip(&real_recons).map(|(a, b)| psnr(a, b)).sum::<f64>() / reals.len() as f64;
    let summary = MechanismSummary {
        seen_gan: seen.clone(),
        bin,
        fake_peak_to_median: fake_spec.peak_to_median(bin.0, bin.1),
        real_peak_to_median: real_spec.peak_to_median(bin.0, bin.1),
        mixup_median_psnr,
        scaling_spectrum_distance: scaling_spec.relative_log_distance(&fake_spec),
        mixup_spectrum_distance: mixup_spec.relative_log_distance(&fake_spec),
        reconstruction_psnr,
    };
    let mut spectra = vec![("real".to_string(), real_spec), (seen.clone(), fake_spec)];
    spectra.push((format!("{seen}-scaling"), scaling_spec));
    spectra.push((format!("{seen}-mixup"), mixup_spec));
    for g in bench.unseen() {
        let imgs: Vec<Image> = source_images(test, &g.gan_id)?.into_iter().take(PROBE_IMAGES).collect();
        spectra.push((g.gan_id.clone(), average_spectrum(&imgs)?));
    }
    Ok(Mechanism { summary, spectra })
}

// ---- experiments ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub arm: Strategy,
    pub variant: DetectorVariant,
    pub adv_enabled: bool,
    pub train_categories: Vec<String>,
    pub report: EvalReport,
    /// Mean (acc, ap) over the seen GANs, for cross-GAN rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen: Option<(f64, f64)>,
    pub detector_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<Row>,
    pub extractors: Vec<ExtractorSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mechanism: Option<MechanismSummary>,
    pub table: Table,
}

impl ExperimentReport {
    pub fn row(&self, name: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<PathBuf>,
    pub report: ExperimentReport,
}

pub fn version_string() -> String {
    let base = format!("v{}", env!("CARGO_PKG_VERSION"));
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("{base}-g{d}"),
        None => base,
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    cache: PathBuf,
    bench: Benchmark,
    artifacts: Vec<PathBuf>,
}

impl Runner<'_> {
    fn data_key(&self) -> serde_json::Value {
        json!({"dataset": self.config.dataset, "seed": self.config.seed})
    }

    fn extractor(&mut self, categories: &[String], adv: bool) -> Result<(FittedExtractor, PathBuf)> {
        let cfg = ExtractorConfig {
            adv_enabled: adv,
            ..self.config.extractor.clone()
        };
        let key = json!({"data": self.data_key(), "extractor": cfg, "categories": categories});
        let train = self.train_subset(categories);
        let seed = mix_seed(self.config.seed, 1);
        let (dir, summary) = cached(&self.cache, "train-extractor", &key, |dir| {
            let fitted = fit_extractor(&train, &cfg, seed)?;
            save_extractor(&fitted, dir)?;
            Ok(fitted.summary)
        })?;
        let extractor = load_extractor(&dir.join(EXTRACTOR_FILE))?;
        if extractor.checksum() != summary.checksum {
            return Err(Error::Format {
                what: "cached extractor",
                message: format!("checksum mismatch in {}", dir.display()),
            });
        }
        let discriminator = match adv {
            true => Some(load_discriminator(&dir.join(DISCRIMINATOR_FILE))?),
            false => None,
        };
        self.artifacts.push(dir.join(EXTRACTOR_FILE));
        Ok((
            FittedExtractor {
                extractor,
                discriminator,
                summary,
            },
            dir,
        ))
    }

    fn train_subset(&self, categories: &[String]) -> Dataset {
        self.bench.train.filter(|r| categories.contains(&r.category_id))
    }

    #[allow(clippy::too_many_arguments)]
    fn detector(
        &mut self,
        ext: &FittedExtractor,
        ext_dir: &Path,
        categories: &[String],
        arm: Strategy,
        variant: DetectorVariant,
    ) -> Result<(Detector, Vec<f64>)> {
        let perturb = PerturbConfig {
            strategy: arm,
            ..self.config.perturb.clone()
        };
        let det_cfg = DetectorConfig {
            variant,
            ..self.config.detector.clone()
        };
        let key = json!({
            "data": self.data_key(),
            "extractor": ext.summary.checksum,
            "categories": categories,
            "perturb": perturb,
            "detector": det_cfg,
        });
        let train = self.train_subset(categories);
        let seed = mix_seed(self.config.seed, 2);
        let before = ext.extractor.checksum();
        let (dir, history) = cached(&self.cache, "train-detector", &key, |dir| {
            let trained = fit_detector(&train, Some(&ext.extractor), &perturb, &det_cfg, seed)?;
            save_detector(&trained.detector, &dir.join(DETECTOR_FILE))?;
            Ok(trained.history)
        })?;
        if ext.extractor.checksum() != before || load_extractor(&ext_dir.join(EXTRACTOR_FILE))?.checksum() != before {
            return Err(Error::Format {
                what: "extractor",
                message: "parameters changed during detector training".into(),
            });
        }
        self.artifacts.push(dir.join(DETECTOR_FILE));
        Ok((load_detector(&dir.join(DETECTOR_FILE))?, history))
    }
}

fn row_name(parts: &[String]) -> String {
    parts.iter().filter(|s| !s.is_empty()).cloned().collect::<Vec<_>>().join(" / ")
}

/// Executes the configured experiment under `out`. `report.json` depends
/// only on the config; timestamps and paths go to `run.json`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    config.validate()?;
    let started_at = now();
    let cache = out.join("cache");
    let data_key = json!({"dataset": config.dataset, "seed": config.seed});
    let (data_dir, _) = cached(&cache, "gen-data", &data_key, |dir| {
        let b = make_benchmark(&config.dataset, config.seed)?;
        save_benchmark(&b, dir)?;
        Ok(json!({"train": b.train.len(), "test": b.test.len()}))
    })?;
    let bench = load_benchmark(&data_dir).map_err(|e| e.in_stage("gen-data"))?;
    let mut runner = Runner {
        config,
        cache,
        bench,
        artifacts: vec![data_dir.join("train"), data_dir.join("test")],
    };

    let all_cats: Vec<String> = config.dataset.categories.iter().map(|c| c.category_id.clone()).collect();
    let all_gans: Vec<String> = config.dataset.gans.iter().map(|g| g.gan_id.clone()).collect();
    let unseen: Vec<String> = config.dataset.unseen().map(|g| g.gan_id.clone()).collect();
    let seen = config.dataset.seen.clone();
    let variant = config.detector.variant;
    let method = config.perturb.strategy;

    let mut rows = Vec::new();
    let mut extractors = Vec::new();
    let mut mech_extractor = None;

    let cross_gan_row = |runner: &mut Runner,
                         ext: &FittedExtractor,
                         dir: &Path,
                         cats: &[String],
                         arm: Strategy,
                         variant: DetectorVariant,
                         name: String|
     -> Result<Row> {
        let (det, history) = runner.detector(ext, dir, cats, arm, variant)?;
        let mut report = cross_gan_eval(&det, &runner.bench.test, &all_gans).map_err(|e| e.in_stage("evaluate"))?;
        report.config.insert("arm".into(), json!(arm));
        report.config.insert("variant".into(), json!(variant));
        Ok(Row {
            name,
            arm,
            variant,
            adv_enabled: ext.summary.adv_enabled,
            train_categories: cats.to_vec(),
            seen: Some(report.mean_over(&seen)?),
            unseen: if unseen.is_empty() { None } else { Some(report.mean_over(&unseen)?) },
            report,
            detector_history: history,
        })
    };

    match config.experiment {
        ExperimentKind::CrossGan => {
            let (ext, dir) = runner.extractor(&all_cats, config.extractor.adv_enabled)?;
            for &arm in &config.arms {
                rows.push(cross_gan_row(&mut runner, &ext, &dir, &all_cats, arm, variant, arm.name().into())?);
            }
            extractors.push(ext.summary.clone());
            mech_extractor = Some(ext.extractor);
        }
        ExperimentKind::CrossCategory => {
            let (ext, dir) = runner.extractor(&all_cats, config.extractor.adv_enabled)?;
            let train_cat = vec![config.train_category().to_string()];
            let rest: Vec<String> = all_cats.iter().filter(|c| **c != train_cat[0]).cloned().collect();
            if rest.is_empty() {
                return Err(Error::invalid("cross-category evaluation needs at least two categories"));
            }
            for &arm in &config.arms {
                let (det, history) = runner.detector(&ext, &dir, &train_cat, arm, variant)?;
                let mut report = cross_category_eval(&det, &runner.bench.test, &seen[0], &rest)
                    .map_err(|e| e.in_stage("evaluate"))?;
                report.config.insert("arm".into(), json!(arm));
                report.config.insert("gan".into(), json!(seen[0]));
                rows.push(Row {
                    name: arm.name().into(),
                    arm,
                    variant,
                    adv_enabled: ext.summary.adv_enabled,
                    train_categories: train_cat.clone(),
                    report,
                    seen: None,
                    unseen: None,
                    detector_history: history,
                });
            }
            extractors.push(ext.summary.clone());
            mech_extractor = Some(ext.extractor);
        }
        ExperimentKind::CategorySweep => {
            for &count in &config.category_counts {
                let cats = all_cats[..count].to_vec();
                // a single category leaves the discriminator nothing to separate
                let adv = config.extractor.adv_enabled && count >= 2;
                let (ext, dir) = runner.extractor(&cats, adv)?;
                for &arm in &config.arms {
                    let name = row_name(&[format!("{count} cat"), arm.name().into()]);
                    rows.push(cross_gan_row(&mut runner, &ext, &dir, &cats, arm, variant, name)?);
                }
                extractors.push(ext.summary.clone());
                if count == all_cats.len() {
                    mech_extractor = Some(ext.extractor);
                }
            }
        }
        ExperimentKind::AblationAdv => {
            for adv in [true, false] {
                let (ext, dir) = runner.extractor(&all_cats, adv)?;
                let name = if adv { "with L_adv" } else { "without L_adv" };
                rows.push(cross_gan_row(&mut runner, &ext, &dir, &all_cats, method, variant, name.into())?);
                extractors.push(ext.summary.clone());
                if adv {
                    mech_extractor = Some(ext.extractor);
                }
            }
        }
        ExperimentKind::AblationDetector => {
            let (ext, dir) = runner.extractor(&all_cats, config.extractor.adv_enabled)?;
            for &v in &config.variants {
                for &arm in &config.arms {
                    let name = row_name(&[v.name().into(), arm.name().into()]);
                    rows.push(cross_gan_row(&mut runner, &ext, &dir, &all_cats, arm, v, name)?);
                }
            }
            extractors.push(ext.summary.clone());
            mech_extractor = Some(ext.extractor);
        }
    }

    let table = {
        let named: Vec<(&str, &EvalReport)> = rows.iter().map(|r| (r.name.as_str(), &r.report)).collect();
        emit_table(&named)?
    };

    let mechanism = match (&mech_extractor, config.figures) {
        (Some(e), true) => {
            let m = mechanism(&config.dataset, &runner.bench.test, e, &config.perturb, config.seed)
                .map_err(|err| err.in_stage("spectrum"))?;
            for (name, spec) in &m.spectra {
                let path = out.join("figures").join(format!("spectrum-{name}.pgm"));
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                export_pgm(spec, &path)?;
                runner.artifacts.push(path);
            }
            Some(m.summary)
        }
        _ => None,
    };

    let report = ExperimentReport {
        experiment: config.experiment,
        config_hash: config.hash(),
        seed: config.seed,
        rows,
        extractors,
        mechanism,
        table,
    };
    for (file, body) in [
        ("report.json", to_json(&report)),
        ("table.txt", report.table.to_text()),
        ("table.json", report.table.to_json() + "\n"),
        ("config.json", to_json(config)),
    ] {
        let path = out.join(file);
        write(&path, body)?;
        runner.artifacts.push(path);
    }
    let record = RunRecord {
        config_hash: report.config_hash.clone(),
        version: version_string(),
        started_at,
        finished_at: now(),
        config: config.clone(),
        artifacts: runner.artifacts,
        report,
    };
    write(&out.join("run.json"), to_json(&record))?;
    Ok(record)
}
