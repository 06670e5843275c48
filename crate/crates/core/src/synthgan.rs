//! Deterministic synthetic benchmark: procedural "real" images in several
//! categories, and "fakes" carrying generator-specific periodic fingerprints.

use std::collections::HashSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::spectrum::{fft2d_complex, ifft2d};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Checkerboard,
    SineGrid,
    BlockUpsampleResidual,
}

/// Stand-in for one generator architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanProfile {
    pub gan_id: String,
    pub pattern: PatternKind,
    pub period_px: usize,
    #[serde(default)]
    pub phase: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub orientation: f64,
}

impl GanProfile {
    pub fn validate(&self, side: usize) -> Result<()> {
        let err = |m: String| Error::invalid(format!("GAN profile `{}`: {m}", self.gan_id));
        if !(self.amplitude > 0.0 && self.amplitude <= 0.1) {
            return Err(err(format!("amplitude {} outside (0, 0.1]", self.amplitude)));
        }
        if self.period_px < 2 || self.period_px > side / 4 {
            return Err(err(format!("period {} outside [2, {}]", self.period_px, side / 4)));
        }
        if self.pattern == PatternKind::Checkerboard && self.period_px % 2 != 0 {
            return Err(err("checkerboard period must be even".into()));
        }
        Ok(())
    }

    /// Signed `(fy, fx)` frequency bin where this profile's energy peaks.
    pub fn characteristic_bin(&self, side: usize) -> (i64, i64) {
        let f = side as f64 / self.period_px as f64;
        match self.pattern {
            PatternKind::Checkerboard => (f.round() as i64, f.round() as i64),
            PatternKind::SineGrid => (
                (f * self.orientation.sin()).round() as i64,
                (f * self.orientation.cos()).round() as i64,
            ),
            PatternKind::BlockUpsampleResidual => (0, f.round() as i64),
        }
    }
}

/// Parameters of one procedural image category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryProfile {
    pub category_id: String,
    /// Gaussian low-pass cutoff of the texture field, in cycles per image.
    pub cutoff: f64,
    /// Base RGB colour.
    pub palette: [f64; 3],
    pub blob_count: usize,
    /// Standard deviation of per-pixel sensor grain.
    #[serde(default = "default_grain")]
    pub grain: f64,
}

fn default_grain() -> f64 {
    0.015
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub side: usize,
    pub categories: Vec<CategoryProfile>,
    pub gans: Vec<GanProfile>,
    /// GANs whose fakes appear in the training split.
    pub seen: Vec<String>,
    /// Reals and fakes each, in the training split.
    pub train_per_class: usize,
    /// Fakes per GAN in the test split, matched by as many reals.
    pub test_per_gan: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            side: 64,
            categories: default_categories(),
            gans: default_gans(),
            seen: vec!["gan-a".into()],
            train_per_class: 500,
            test_per_gan: 200,
        }
    }
}

pub fn default_categories() -> Vec<CategoryProfile> {
    let cat = |id: &str, cutoff, palette, blob_count| CategoryProfile {
        category_id: id.into(),
        cutoff,
        palette,
        blob_count,
        grain: default_grain(),
    };
    vec![
        cat("meadow", 1.0, [0.35, 0.55, 0.30], 2),
        cat("dusk", 1.5, [0.55, 0.40, 0.50], 3),
        cat("dune", 2.0, [0.65, 0.55, 0.40], 1),
        cat("slate", 2.5, [0.40, 0.45, 0.55], 3),
    ]
}

pub fn default_gans() -> Vec<GanProfile> {
    let gan = |id: &str, pattern, period_px, orientation| GanProfile {
        gan_id: id.into(),
        pattern,
        period_px,
        phase: 0.0,
        amplitude: 0.02,
        orientation,
    };
    vec![
        gan("gan-a", PatternKind::Checkerboard, 2, 0.0),
        gan("gan-b", PatternKind::Checkerboard, 4, 0.0),
        gan("gan-c", PatternKind::SineGrid, 4, 0.0),
        gan("gan-d", PatternKind::Checkerboard, 8, 0.0),
        gan("gan-e", PatternKind::SineGrid, 5, PI / 4.0),
    ]
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 || !self.side.is_power_of_two() {
            return Err(Error::invalid(format!("image side {} must be a power of two >= 8", self.side)));
        }
        if self.categories.is_empty() {
            return Err(Error::invalid("benchmark needs at least one category"));
        }
        let mut ids = HashSet::new();
        for c in &self.categories {
            if !ids.insert(c.category_id.as_str()) {
                return Err(Error::invalid(format!("duplicate category_id `{}`", c.category_id)));
            }
        }
        let mut gans = HashSet::new();
        for g in &self.gans {
            g.validate(self.side)?;
            if !gans.insert(g.gan_id.as_str()) {
                return Err(Error::invalid(format!("duplicate gan_id `{}`", g.gan_id)));
            }
        }
        if self.seen.is_empty() {
            return Err(Error::invalid("at least one seen GAN is required"));
        }
        for s in &self.seen {
            if !gans.contains(s.as_str()) {
                return Err(Error::invalid(format!("seen GAN `{s}` is not a configured profile")));
            }
        }
        Ok(())
    }

    pub fn gan(&self, id: &str) -> Option<&GanProfile> {
        self.gans.iter().find(|g| g.gan_id == id)
    }

    pub fn unseen(&self) -> impl Iterator<Item = &GanProfile> {
        self.gans.iter().filter(|g| !self.seen.contains(&g.gan_id))
    }
}

/// SplitMix64 finaliser used to derive independent per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn str_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Unit-variance Gaussian-filtered noise field.
fn lowpass_field(rng: &mut impl Rng, side: usize, cutoff: f64) -> Vec<f64> {
    let noise: Vec<Complex64> = (0..side * side).map(|_| Complex64::new(gaussian(rng), 0.0)).collect();
    let mut f = fft2d_complex(&noise).expect("power-of-two side");
    let s = side as i64;
    for y in 0..side {
        let fy = if (y as i64) < s / 2 { y as i64 } else { y as i64 - s } as f64;
        for x in 0..side {
            let fx = if (x as i64) < s / 2 { x as i64 } else { x as i64 - s } as f64;
            let r2 = fy * fy + fx * fx;
            f[y * side + x] *= (-0.5 * r2 / (cutoff * cutoff)).exp();
        }
    }
    let field: Vec<f64> = ifft2d(&f).expect("power-of-two side").iter().map(|z| z.re).collect();
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64;
    let sd = var.sqrt().max(1e-12);
    field.iter().map(|v| (v - mean) / sd).collect()
}

/// Procedural real image: palette + low-pass texture + soft blobs + grain.
pub fn gen_real(category: &CategoryProfile, seed: u64, side: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, str_hash(&category.category_id)));
    let luminance = lowpass_field(&mut rng, side, category.cutoff);
    let chroma: Vec<Vec<f64>> = (0..3).map(|_| lowpass_field(&mut rng, side, category.cutoff)).collect();

    let mut planes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            (0..side * side)
                .map(|i| category.palette[c] + 0.12 * luminance[i] + 0.04 * chroma[c][i])
                .collect()
        })
        .collect();

    let s = side as f64;
    for _ in 0..category.blob_count {
        let cy = rng.gen_range(0.0..s);
        let cx = rng.gen_range(0.0..s);
        let radius = rng.gen_range(s / 12.0..s / 5.0);
        let tint: [f64; 3] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let w = (-0.5 * d2 / (radius * radius)).exp();
                if w < 1e-4 {
                    continue;
                }
                for (c, plane) in planes.iter_mut().enumerate() {
                    plane[y * side + x] += tint[c] * w;
                }
            }
        }
    }

    let mut data = Vec::with_capacity(3 * side * side);
    for plane in &planes {
        for &v in plane {
            data.push((v + category.grain * gaussian(&mut rng)).clamp(0.0, 1.0) as f32);
        }
    }
    Image::from_vec(3, side, side, data).expect("3 x side x side")
}

/// Zero-mean single-plane fingerprint pattern for `profile` on `image`.
pub fn fingerprint_pattern(image: &Image, profile: &GanProfile) -> Vec<f64> {
    let (c, h, w) = image.dims();
    let amp = profile.amplitude;
    let p = profile.period_px as f64;
    match profile.pattern {
        PatternKind::Checkerboard => {
            let cell = (profile.period_px / 2).max(1) as i64;
            let shift = (profile.phase / (2.0 * PI) * p).round() as i64;
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let parity = ((x + shift).div_euclid(cell) + (y + shift).div_euclid(cell)).rem_euclid(2);
                    out.push(if parity == 0 { amp } else { -amp });
                }
            }
            out
        }
        PatternKind::SineGrid => {
            let (sin, cos) = profile.orientation.sin_cos();
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 * cos + y as f64 * sin;
                    out.push(amp * (2.0 * PI * u / p + profile.phase).sin());
                }
            }
            // off-axis waves do not tile the grid exactly
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            out.iter_mut().for_each(|v| *v -= mean);
            out
        }
        PatternKind::BlockUpsampleResidual => {
            // Residual between the channel-mean image and its
            // decimate-then-nearest-upsample copy, rescaled to `amp` RMS.
            let block = profile.period_px;
            let mut gray = vec![0.0f64; h * w];
            for ch in 0..c {
                for (i, g) in gray.iter_mut().enumerate() {
                    *g += image.data()[ch * h * w + i] as f64 / c as f64;
                }
            }
            let mut r: Vec<f64> = (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    gray[i] - gray[(y / block * block) * w + x / block * block]
                })
                .collect();
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let rms = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
            let k = if rms > 1e-12 { amp / rms } else { 0.0 };
            for v in &mut r {
                *v = (*v - mean) * k;
            }
            r
        }
    }
}

/// `clamp(image + pattern, 0, 1)` with the pattern shared by all channels.
pub fn embed_fingerprint(image: &Image, profile: &GanProfile) -> Image {
    embed_scaled(image, profile, 1.0)
}

pub(crate) fn embed_scaled(image: &Image, profile: &GanProfile, scale: f64) -> Image {
    let (c, h, w) = image.dims();
    let pattern = fingerprint_pattern(image, profile);
    let mut out = image.clone();
    for ch in 0..c {
        for (i, v) in out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().enumerate() {
            *v = (*v as f64 + scale * pattern[i]).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Train and test splits of the benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub test: Dataset,
}

struct Job {
    label: Label,
    category: usize,
    gan: Option<usize>,
    seed: u64,
}

const TRAIN_TAG: u64 = 1;
const TEST_TAG: u64 = 2;

fn materialise(config: &BenchmarkConfig, split: &str, jobs: Vec<Job>) -> Result<Dataset> {
    let images: Vec<Image> = jobs
        .par_iter()
        .map(|j| {
            let content = gen_real(&config.categories[j.category], j.seed, config.side);
            match j.gan {
                Some(g) => embed_fingerprint(&content, &config.gans[g]),
                None => content,
            }
        })
        .collect();
    let mut ds = Dataset::new(split, config.side, Some(config.clone()));
    for (j, im) in jobs.iter().zip(images) {
        ds.push(
            j.label,
            &config.categories[j.category].category_id,
            j.gan.map(|g| config.gans[g].gan_id.as_str()),
            j.seed,
            im,
        )?;
    }
    Ok(ds)
}

/// Builds the benchmark as a pure function of `(config, seed)`.
///
/// Train: `train_per_class` reals and as many fakes from the seen GANs,
/// categories round-robin. Test: for every GAN, `test_per_gan` fakes followed
/// by `test_per_gan` reals.
pub fn make_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    config.validate()?;
    let k = config.categories.len();
    let seen: Vec<usize> = config
        .seen
        .iter()
        .map(|s| config.gans.iter().position(|g| &g.gan_id == s).expect("validated"))
        .collect();

    let split_seed = |tag: u64, i: usize| mix_seed(mix_seed(seed, tag), i as u64);
    let mut jobs = Vec::with_capacity(2 * config.train_per_class);
    for i in 0..config.train_per_class {
        jobs.push(Job {
            label: Label::Real,
            category: i % k,
            gan: None,
            seed: split_seed(TRAIN_TAG, jobs.len()),
        });
    }
    for i in 0..config.train_per_class {
        jobs.push(Job {
            label: Label::Fake,
            category: i % k,
            gan: Some(seen[(i / k) % seen.len()]),
            seed: split_seed(TRAIN_TAG, jobs.len()),
        });
    }
    let train = materialise(config, "train", jobs)?;

    let mut jobs = Vec::with_capacity(2 * config.test_per_gan * config.gans.len());
    for g in 0..config.gans.len() {
        for i in 0..config.test_per_gan {
            jobs.push(Job {
                label: Label::Fake,
                category: i % k,
                gan: Some(g),
                seed: split_seed(TEST_TAG, jobs.len()),
            });
        }
        for i in 0..config.test_per_gan {
            jobs.push(Job {
                label: Label::Real,
                category: i % k,
                gan: None,
                seed: split_seed(TEST_TAG, jobs.len()),
            });
        }
    }
    let test = materialise(config, "test", jobs)?;
    Ok(Benchmark { train, test })
}
