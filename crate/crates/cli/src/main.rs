use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fpforge::detector::{cross_category_eval, cross_gan_eval, gan_ids};
use fpforge::experiment::{
    fit_detector, fit_extractor, load_extractor, perturb_dataset, save_benchmark, save_detector, save_extractor,
    source_images, DETECTOR_FILE,
};
use fpforge::report::emit_table;
use fpforge::spectrum::{average_spectrum, export_pgm};
use fpforge::synthgan::make_benchmark;
use fpforge::{
    parse_config, run_experiment, Dataset, DetectorVariant, Error, ExperimentConfig, ExperimentKind, Result, Strategy,
};

#[derive(Parser)]
#[command(name = "fpforge", version, about = "Fingerprint-domain augmentation for GAN image detectors")]
struct Cli {
    /// Experiment config (JSON). Stage commands read their settings from it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    None,
    Scaling,
    Mixup,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::None => Strategy::None,
            StrategyArg::Scaling => Strategy::Scaling,
            StrategyArg::Mixup => Strategy::Mixup,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Small,
    Smaller,
    Larger,
}

impl From<VariantArg> for DetectorVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Small => DetectorVariant::Small,
            VariantArg::Smaller => DetectorVariant::Smaller,
            VariantArg::Larger => DetectorVariant::Larger,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupBy {
    Gan,
    Category,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into OUT/train and OUT/test.
    GenData,
    /// Train the fingerprint extractor on a training split.
    TrainExtractor {
        #[arg(long)]
        data: PathBuf,
        /// Disable the category discriminator branch.
        #[arg(long)]
        no_adv: bool,
    },
    /// Write a copy of a dataset with every fake's fingerprint perturbed.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Train the real/fake detector, optionally with augmentation.
    TrainDetector {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Score a detector per GAN (or per category of one GAN).
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long, value_enum, default_value = "gan")]
        by: GroupBy,
        /// GAN whose fakes are split by category with `--by category`.
        #[arg(long)]
        gan: Option<String>,
    },
    /// Averaged high-pass spectrum of one source as a PGM.
    Spectrum {
        #[arg(long)]
        data: PathBuf,
        /// `real`, `fake`, a GAN id or a category id.
        #[arg(long)]
        source: String,
        /// PGM path; defaults to OUT/spectrum-SOURCE.pgm.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also dump the log-magnitude grid as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a full experiment from --config.
    Experiment,
}

struct Context {
    config: ExperimentConfig,
    out: PathBuf,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        }),
        None => Ok(()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn context(cli: &Cli) -> Result<Context> {
    let mut config = match &cli.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::new(ExperimentKind::CrossGan, 0),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Context { config, out })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let ctx = context(&cli)?;
    let cfg = &ctx.config;
    let out = &ctx.out;
    match cli.command {
        Command::GenData => {
            let b = make_benchmark(&cfg.dataset, cfg.seed)?;
            save_benchmark(&b, out)?;
            println!("wrote {} train and {} test images to {}", b.train.len(), b.test.len(), out.display());
        }
        Command::TrainExtractor { data, no_adv } => {
            let train = Dataset::load(&data)?;
            let mut ecfg = cfg.extractor.clone();
            ecfg.adv_enabled &= !no_adv;
            let fitted = fit_extractor(&train, &ecfg, cfg.seed)?;
            save_extractor(&fitted, out)?;
            write(&out.join("extractor.json"), serde_json::to_string_pretty(&fitted.summary)?)?;
            if let Some(acc) = fitted.summary.discriminator_accuracy {
                println!("discriminator category accuracy {acc:.3}");
            }
            println!("wrote extractor to {}", out.display());
        }
        Command::Perturb {
            data,
            extractor,
            strategy,
        } => {
            let ds = Dataset::load(&data)?;
            let e = load_extractor(&extractor)?;
            let mut pcfg = cfg.perturb.clone();
            if let Some(s) = strategy {
                pcfg.strategy = s.into();
            }
            let perturbed = perturb_dataset(&ds, &e, &pcfg, cfg.seed)?;
            perturbed.save(out)?;
            println!("wrote {} images to {}", perturbed.len(), out.display());
        }
        Command::TrainDetector {
            data,
            extractor,
            strategy,
            variant,
        } => {
            let train = Dataset::load(&data)?;
            let mut pcfg = cfg.perturb.clone();
            pcfg.strategy = strategy.map_or(Strategy::None, Into::into);
            let mut dcfg = cfg.detector.clone();
            if let Some(v) = variant {
                dcfg.variant = v.into();
            }
            let e = extractor.as_deref().map(load_extractor).transpose()?;
            let trained = fit_detector(&train, e.as_ref(), &pcfg, &dcfg, cfg.seed)?;
            save_detector(&trained.detector, &out.join(DETECTOR_FILE))?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in trained.history.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.9}\n"));
            }
            write(&out.join("history.csv"), csv)?;
            println!("wrote detector to {}", out.join(DETECTOR_FILE).display());
        }
        Command::Evaluate {
            data,
            detector,
            by,
            gan,
        } => {
            let test = Dataset::load(&data)?;
            let det = fpforge::experiment::load_detector(&detector)?;
            let report = match by {
                GroupBy::Gan => {
                    let gans: Vec<String> = gan_ids(&test).into_iter().map(String::from).collect();
                    cross_gan_eval(&det, &test, &gans)?
                }
                GroupBy::Category => {
                    let gan = gan.ok_or_else(|| Error::InvalidArgument("--by category needs --gan".into()))?;
                    let mut cats: Vec<String> = Vec::new();
                    for r in &test.manifest.records {
                        if r.gan_id.as_deref() == Some(gan.as_str()) && !cats.contains(&r.category_id) {
                            cats.push(r.category_id.clone());
                        }
                    }
                    cross_category_eval(&det, &test, &gan, &cats)?
                }
            };
            let name = detector.display().to_string();
            let table = emit_table(&[(name.as_str(), &report)])?;
            write(&out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            write(&out.join("table.txt"), table.to_text())?;
            print!("{}", table.to_text());
        }
        Command::Spectrum {
            data,
            source,
            output,
            csv,
        } => {
            let ds = Dataset::load(&data)?;
            let images = source_images(&ds, &source)?;
            let spec = average_spectrum(&images)?;
            let path = output.unwrap_or_else(|| out.join(format!("spectrum-{source}.pgm")));
            ensure_parent(&path)?;
            export_pgm(&spec, &path)?;
            if let Some(csv) = csv {
                write(&csv, spec.to_csv())?;
            }
            println!("wrote {}", path.display());
        }
        Command::Experiment => {
            if cli.config.is_none() {
                return Err(Error::InvalidArgument("`experiment` needs --config".into()));
            }
            let record = run_experiment(cfg, out)?;
            print!("{}", record.report.table.to_text());
            println!("report: {}", out.join("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
