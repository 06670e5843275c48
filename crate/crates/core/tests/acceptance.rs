//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `FPFORGE_ACCEPT=1,2,3` restricts the run to selected criteria and
//! `FPFORGE_ACCEPT_DIR` keeps the experiment outputs in a fixed directory
//! (stages found there are reused).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fpforge::experiment::{load_extractor, mechanism, ExperimentReport, EXTRACTOR_FILE};
use fpforge::{run_experiment, ExperimentConfig, ExperimentKind, RunRecord};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    passed: bool,
    detail: String,
}

fn judge(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: ok,
        detail: detail.into(),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    xs[xs.len() / 2]
}

fn within(elapsed: Duration, budget_s: u64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s <= budget_s as f64, format!("{s:.1}s of {budget_s}s"))
}

struct Workspace {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

impl Workspace {
    fn new() -> Self {
        match std::env::var_os("FPFORGE_ACCEPT_DIR") {
            Some(dir) => Workspace {
                root: PathBuf::from(dir),
                _tmp: None,
            },
            None => {
                let tmp = tempfile::tempdir().expect("temp dir");
                Workspace {
                    root: tmp.path().to_path_buf(),
                    _tmp: Some(tmp),
                }
            }
        }
    }

    /// One output directory per seed; experiments on the same seed share
    /// cached stages (data, extractor).
    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    fn run(&self, kind: ExperimentKind, seed: u64) -> RunRecord {
        let config = ExperimentConfig::new(kind, seed);
        let dir = self.seed_dir(seed).join(format!("{kind:?}").to_lowercase());
        let cache_home = self.seed_dir(seed);
        run_shared(&config, &dir, &cache_home)
    }
}

/// Runs an experiment whose `cache/` is shared with sibling experiments.
fn run_shared(config: &ExperimentConfig, dir: &Path, cache_home: &Path) -> RunRecord {
    std::fs::create_dir_all(dir).unwrap();
    let shared = cache_home.join("cache");
    std::fs::create_dir_all(&shared).unwrap();
    let link = dir.join("cache");
    if !link.exists() {
        std::os::unix::fs::symlink(&shared, &link).unwrap();
    }
    run_experiment(config, dir).unwrap()
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    common::grad::full_suite();
    let (ok, time) = within(t.elapsed(), 30);
    judge(ok, format!("all ops and joint objective within tolerance, {time}"))
}

fn algebra_suite() -> Outcome {
    let t = Instant::now();
    common::oracles::algebra_suite();
    let (ok, time) = within(t.elapsed(), 5);
    judge(ok, format!("identities hold, {time}"))
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let worst = common::oracles::metric_oracle(1000);
    let (ok, time) = within(t.elapsed(), 5);
    judge(ok && worst <= 1e-12, format!("max |AP - oracle| {worst:e}, {time}"))
}

fn fft_oracle() -> Outcome {
    let t = Instant::now();
    let e = common::oracles::fft_oracle();
    let (ok, time) = within(t.elapsed(), 5);
    judge(
        ok && e.vs_direct <= 1e-6 && e.parseval_rel <= 1e-5 && e.round_trip <= 1e-4,
        format!(
            "direct {:.1e}, Parseval {:.1e}, round trip {:.1e}, {time}",
            e.vs_direct, e.parseval_rel, e.round_trip
        ),
    )
}

struct CrossGanStats {
    seen_acc_min: f64,
    none_acc: f64,
    none_ap: f64,
    gains: Vec<(String, f64, f64)>,
}

fn cross_gan_stats(report: &ExperimentReport) -> CrossGanStats {
    let none = report.row("none").expect("none arm");
    let (none_acc, none_ap) = none.unseen.expect("unseen GANs");
    let seen_acc_min = report
        .rows
        .iter()
        .map(|r| r.seen.expect("seen GAN").0)
        .fold(f64::INFINITY, f64::min);
    let gains = ["scaling", "mixup"]
        .iter()
        .map(|arm| {
            let (acc, ap) = report.row(arm).expect("augmented arm").unseen.unwrap();
            (arm.to_string(), acc - none_acc, ap - none_ap)
        })
        .collect();
    CrossGanStats {
        seen_acc_min,
        none_acc,
        none_ap,
        gains,
    }
}

fn cross_gan(ws: &Workspace) -> Outcome {
    let t = Instant::now();
    let stats: Vec<CrossGanStats> = SEEDS
        .iter()
        .map(|&s| cross_gan_stats(&ws.run(ExperimentKind::CrossGan, s).report))
        .collect();
    let elapsed = t.elapsed();
    let med = |f: &dyn Fn(&CrossGanStats) -> f64| median(stats.iter().map(f).collect());
    let none_acc = med(&|s| s.none_acc);
    let none_ap = med(&|s| s.none_ap);
    let seen = med(&|s| s.seen_acc_min);
    let mut ok = none_acc <= 0.75 && seen >= 0.95;
    let mut detail = format!("none unseen acc {:.1} ap {:.1}", 100.0 * none_acc, 100.0 * none_ap);
    for (i, arm) in ["scaling", "mixup"].iter().enumerate() {
        let dacc = med(&|s| s.gains[i].1);
        let dap = med(&|s| s.gains[i].2);
        ok &= dacc >= 0.10 && dap >= 0.05;
        detail += &format!("; {arm} +{:.1} acc +{:.1} ap", 100.0 * dacc, 100.0 * dap);
    }
    detail += &format!(
        "; min seen acc {:.1}; {:.0}s for 3 seeds",
        100.0 * seen,
        elapsed.as_secs_f64()
    );
    judge(ok, detail)
}

fn cross_category(ws: &Workspace) -> Outcome {
    let mut per_arm: Vec<(String, Vec<f64>)> = Vec::new();
    for &s in &SEEDS {
        let report = ws.run(ExperimentKind::CrossCategory, s).report;
        for row in &report.rows {
            if row.name == "none" {
                continue;
            }
            match per_arm.iter_mut().find(|(n, _)| *n == row.name) {
                Some((_, v)) => v.push(row.report.mean_acc),
                None => per_arm.push((row.name.clone(), vec![row.report.mean_acc])),
            }
        }
    }
    let mut ok = !per_arm.is_empty();
    let mut parts = Vec::new();
    for (name, accs) in per_arm {
        let m = median(accs);
        ok &= m >= 0.95;
        parts.push(format!("{name} acc {:.1}", 100.0 * m));
    }
    judge(ok, parts.join("; "))
}

fn ablation_adv(ws: &Workspace) -> Outcome {
    let report = ws.run(ExperimentKind::AblationAdv, SEEDS[0]).report;
    let with = report.extractors.iter().find(|e| e.adv_enabled).expect("adversarial extractor");
    let acc = with.discriminator_accuracy.expect("discriminator accuracy");
    let k = with.categories.len() as f64;
    let bound = 1.0 / k + 0.25;
    let means: Vec<f64> = report.rows.iter().map(|r| r.report.mean_acc).collect();
    judge(
        acc <= bound,
        format!(
            "discriminator accuracy {acc:.3} (bound {bound:.3}); mean acc with/without {:.1}/{:.1}, delta {:+.1}",
            100.0 * means[0],
            100.0 * means[1],
            100.0 * (means[0] - means[1])
        ),
    )
}

fn mechanism_checks(ws: &Workspace) -> Outcome {
    let record = ws.run(ExperimentKind::CrossGan, SEEDS[0]);
    let ext_path = record
        .artifacts
        .iter()
        .find(|p| p.ends_with(EXTRACTOR_FILE))
        .expect("extractor artifact");
    let extractor = load_extractor(ext_path).unwrap();
    let data = record.artifacts.iter().find(|p| p.ends_with("test")).expect("test split");
    let test = fpforge::Dataset::load(data).unwrap();
    let t = Instant::now();
    let m = mechanism(&record.config.dataset, &test, &extractor, &record.config.perturb, record.config.seed)
        .unwrap()
        .summary;
    let (in_time, time) = within(t.elapsed(), 120);
    let ok = in_time
        && m.mixup_median_psnr >= 30.0
        && m.scaling_spectrum_distance >= 0.05
        && m.mixup_spectrum_distance >= 0.05
        && m.fake_peak_to_median >= 10.0
        && m.real_peak_to_median < 3.0;
    judge(
        ok,
        format!(
            "mixup PSNR {:.1} dB; spectrum distance scaling {:.3} mixup {:.3}; peak/median fake {:.1} real {:.2}; {time}",
            m.mixup_median_psnr,
            m.scaling_spectrum_distance,
            m.mixup_spectrum_distance,
            m.fake_peak_to_median,
            m.real_peak_to_median
        ),
    )
}

fn determinism(ws: &Workspace) -> Outcome {
    ws.run(ExperimentKind::CrossGan, SEEDS[0]);
    let a = ws.seed_dir(SEEDS[0]).join("crossgan").join("report.json");
    // a fresh directory with its own cache recomputes every stage
    let fresh = ws.root.join("determinism");
    let config = ExperimentConfig::new(ExperimentKind::CrossGan, SEEDS[0]);
    run_experiment(&config, &fresh).unwrap();
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(fresh.join("report.json")).unwrap());
    judge(x == y, format!("report.json {} bytes, identical: {}", x.len(), x == y))
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("FPFORGE_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let ws = Workspace::new();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "gradient suite", Box::new(gradient_suite)),
        (2, "algebra suite", Box::new(algebra_suite)),
        (3, "metric oracle", Box::new(metric_oracle)),
        (4, "FFT oracle", Box::new(fft_oracle)),
        (5, "cross-GAN generalisation", Box::new(|| cross_gan(&ws))),
        (6, "cross-category generalisation", Box::new(|| cross_category(&ws))),
        (7, "category discriminator ablation", Box::new(|| ablation_adv(&ws))),
        (8, "mechanism checks", Box::new(|| mechanism_checks(&ws))),
        (9, "determinism", Box::new(|| determinism(&ws))),
    ];
    let mut failed = 0;
    for (id, name, check) in &criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(id)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome {
                passed: false,
                detail: format!("panicked: {msg}"),
            }
        });
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("criterion {id} [{verdict}] {name}: {}", outcome.detail);
        failed += usize::from(!outcome.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
