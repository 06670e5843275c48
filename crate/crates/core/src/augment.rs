//! Fingerprint-domain perturbations (Scaling, Mixup) and recomposition.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PerturbationRecord;
use crate::error::{Error, Result};
use crate::image::Image;

/// Tolerance on the Mixup ratio sum.
pub const BETA_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Scaling,
    Mixup,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Scaling => "scaling",
            Strategy::Mixup => "mixup",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub strategy: Strategy,
    pub alpha0: f64,
    /// Scalings with `|alpha| < alpha_min` are redrawn. 0 keeps the plain
    /// uniform draw.
    pub alpha_min: f64,
    pub n: usize,
    pub apply_prob: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            strategy: Strategy::Scaling,
            alpha0: 5.0,
            alpha_min: 0.0,
            n: 2,
            apply_prob: 0.8,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::invalid(format!("alpha0 must be > 0, got {}", self.alpha0)));
        }
        if !(0.0..self.alpha0).contains(&self.alpha_min) {
            return Err(Error::invalid(format!(
                "alpha_min must lie in [0, alpha0), got {}",
                self.alpha_min
            )));
        }
        if self.n < 2 {
            return Err(Error::invalid(format!("mixup n must be >= 2, got {}", self.n)));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::invalid(format!("apply_prob must lie in [0, 1], got {}", self.apply_prob)));
        }
        Ok(())
    }
}

/// A residual `x - E(x)`, same shape as the image it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint(Image);

impl Fingerprint {
    pub fn new(image: Image) -> Self {
        Fingerprint(image)
    }

    pub fn residual(image: &Image, recon: &Image) -> Self {
        let data = image.data().iter().zip(recon.data()).map(|(a, b)| a - b).collect();
        let (c, h, w) = image.dims();
        Fingerprint(Image::from_vec(c, h, w, data).expect("dims taken from image"))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn mean_abs(&self) -> f64 {
        let d = self.0.data();
        d.iter().map(|v| v.abs() as f64).sum::<f64>() / d.len() as f64
    }
}

pub fn perturb_scaling(fp: &Fingerprint, alpha: f64) -> Result<Fingerprint> {
    if !alpha.is_finite() {
        return Err(Error::invalid(format!("scaling factor must be finite, got {alpha}")));
    }
    let mut out = fp.0.clone();
    for v in out.data_mut() {
        *v = (*v as f64 * alpha) as f32;
    }
    Ok(Fingerprint(out))
}

/// Uniform on `[-alpha0, alpha0]`.
pub fn sample_alpha<R: Rng + ?Sized>(alpha0: f64, rng: &mut R) -> f64 {
    rng.gen_range(-alpha0..=alpha0)
}

/// Uniform on `[-alpha0, alpha0]` excluding `(-alpha_min, alpha_min)`.
pub fn sample_alpha_excluding<R: Rng + ?Sized>(alpha0: f64, alpha_min: f64, rng: &mut R) -> f64 {
    if alpha_min <= 0.0 {
        return sample_alpha(alpha0, rng);
    }
    let magnitude = rng.gen_range(alpha_min..=alpha0);
    if rng.gen_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

pub fn perturb_mixup(fps: &[&Fingerprint], betas: &[f64]) -> Result<Fingerprint> {
    if fps.len() < 2 || fps.len() != betas.len() {
        return Err(Error::invalid(format!(
            "mixup needs n >= 2 fingerprints with one ratio each, got {} and {}",
            fps.len(),
            betas.len()
        )));
    }
    let total: f64 = betas.iter().sum();
    if (total - 1.0).abs() > BETA_SUM_TOL || betas.iter().any(|b| !b.is_finite()) {
        return Err(Error::invalid(format!("mixup ratios must sum to 1, got {total}")));
    }
    let first = fps[0].image();
    if let Some(bad) = fps.iter().find(|f| !f.image().same_dims(first)) {
        return Err(Error::shape(
            "mixup",
            format!("{:?} vs {:?}", bad.image().dims(), first.dims()),
        ));
    }
    let mut acc = vec![0.0f64; first.data().len()];
    for (fp, &b) in fps.iter().zip(betas) {
        for (a, &v) in acc.iter_mut().zip(fp.image().data()) {
            *a += b * v as f64;
        }
    }
    let (c, h, w) = first.dims();
    Ok(Fingerprint(Image::from_vec(c, h, w, acc.into_iter().map(|v| v as f32).collect())?))
}

/// `clamp(recon + fp, 0, 1)`.
pub fn recompose(recon: &Image, fp: &Fingerprint) -> Result<Image> {
    if !recon.same_dims(fp.image()) {
        return Err(Error::shape(
            "recompose",
            format!("{:?} vs {:?}", recon.dims(), fp.image().dims()),
        ));
    }
    let data = recon
        .data()
        .iter()
        .zip(fp.image().data())
        .map(|(r, f)| (r + f).clamp(0.0, 1.0))
        .collect();
    let (c, h, w) = recon.dims();
    Image::from_vec(c, h, w, data)
}

/// Uniform draw from the probability simplex of dimension `n`.
pub fn dirichlet_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    let mut betas: Vec<f64> = e.iter().map(|v| v / total).collect();
    // put the rounding residue on the last ratio so the sum is 1 to the ulp
    let head: f64 = betas[..n - 1].iter().sum();
    betas[n - 1] = 1.0 - head;
    betas
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub perturbed: usize,
    pub passthrough: usize,
    /// Mixup samples left untouched because the batch had fewer than `n`.
    pub fallback: usize,
}

pub struct AugmentedBatch {
    pub images: Vec<Image>,
    pub records: Vec<PerturbationRecord>,
    pub report: AugmentReport,
}

/// Replaces each fake's fingerprint, with probability `apply_prob`, by its
/// configured perturbation and recomposes it onto the reconstruction.
/// Mixup mixes a sample's own fingerprint with `n - 1` distinct partners
/// drawn from the rest of the batch.
pub fn augment_batch<R: Rng + ?Sized>(
    recons: &[Image],
    fps: &[Fingerprint],
    originals: &[Image],
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    config.validate()?;
    if recons.len() != fps.len() || originals.len() != fps.len() {
        return Err(Error::invalid("augment_batch needs aligned recon/fingerprint/original lists"));
    }
    let mut images = Vec::with_capacity(fps.len());
    let mut records = Vec::with_capacity(fps.len());
    let mut report = AugmentReport::default();
    for i in 0..fps.len() {
        let apply = config.strategy != Strategy::None && rng.gen_bool(config.apply_prob);
        let perturbed = match (apply, config.strategy) {
            (true, Strategy::Scaling) => {
                let alpha = sample_alpha_excluding(config.alpha0, config.alpha_min, rng);
                Some((perturb_scaling(&fps[i], alpha)?, PerturbationRecord::Scaling { alpha }))
            }
            (true, Strategy::Mixup) if fps.len() >= config.n => {
                let mut members = vec![i];
                members.extend(
                    sample(rng, fps.len() - 1, config.n - 1)
                        .into_iter()
                        .map(|j| if j >= i { j + 1 } else { j }),
                );
                let betas = dirichlet_uniform(config.n, rng);
                let refs: Vec<&Fingerprint> = members.iter().map(|&j| &fps[j]).collect();
                let mixed = perturb_mixup(&refs, &betas)?;
                Some((mixed, PerturbationRecord::Mixup {
                    betas,
                    partners: members[1..].to_vec(),
                }))
            }
            (true, Strategy::Mixup) => {
                report.fallback += 1;
                None
            }
            _ => None,
        };
        match perturbed {
            Some((fp, rec)) => {
                images.push(recompose(&recons[i], &fp)?);
                records.push(rec);
                report.perturbed += 1;
            }
            None => {
                images.push(originals[i].clone());
                records.push(PerturbationRecord::Passthrough);
                report.passthrough += 1;
            }
        }
    }
    Ok(AugmentedBatch {
        images,
        records,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fp(values: &[f32]) -> Fingerprint {
        Fingerprint::new(Image::from_vec(1, 1, values.len(), values.to_vec()).unwrap())
    }

    #[test]
    fn scaling_examples() {
        let f = fp(&[0.01, -0.5, 0.25]);
        assert_eq!(perturb_scaling(&f, 1.0).unwrap(), f);
        assert!(perturb_scaling(&f, 0.0).unwrap().image().data().iter().all(|&v| v == 0.0));
        assert!((perturb_scaling(&f, -2.0).unwrap().image().data()[0] + 0.02).abs() < 1e-9);
        assert!(perturb_scaling(&f, f64::NAN).is_err());
        assert!(perturb_scaling(&f, f64::INFINITY).is_err());
    }

    #[test]
    fn alpha_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_alpha(5.0, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
        assert!(xs.iter().cloned().fold(f64::INFINITY, f64::min) < -4.9);
        assert!(xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > 4.9);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            assert_eq!(sample_alpha(5.0, &mut a), sample_alpha(5.0, &mut b));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!((0..1000).all(|_| sample_alpha_excluding(5.0, 1.0, &mut rng).abs() >= 1.0));
    }

    #[test]
    fn mixup_examples() {
        let a = fp(&[1.0, 0.2]);
        let b = fp(&[-1.0, 0.4]);
        assert_eq!(perturb_mixup(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        assert_eq!(perturb_mixup(&[&a, &a], &[0.3, 0.7]).unwrap(), a);
        let m = perturb_mixup(&[&a, &b], &[0.3, 0.7]).unwrap();
        assert!((m.image().data()[0] + 0.4).abs() < 1e-7);
        assert!(perturb_mixup(&[&a, &b], &[0.3, 0.6]).is_err());
        assert!(perturb_mixup(&[&a], &[1.0]).is_err());
        assert!(perturb_mixup(&[&a, &fp(&[1.0])], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn recompose_examples() {
        let recon = Image::filled(3, 2, 2, 0.9);
        let f = Fingerprint::new(Image::filled(3, 2, 2, 0.3));
        assert!(recompose(&recon, &f).unwrap().data().iter().all(|&v| v == 1.0));
        let zero = Fingerprint::new(Image::filled(3, 2, 2, 0.0));
        assert_eq!(recompose(&recon, &zero).unwrap(), recon);
        assert!(recompose(&recon, &fp(&[0.0])).is_err());
    }

    #[test]
    fn dirichlet_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..6 {
            let b = dirichlet_uniform(n, &mut rng);
            assert!((b.iter().sum::<f64>() - 1.0).abs() <= BETA_SUM_TOL);
            assert!(b.iter().all(|&v| v >= 0.0));
        }
    }

    fn batch() -> (Vec<Image>, Vec<Fingerprint>, Vec<Image>) {
        let originals: Vec<Image> = (0..4).map(|i| Image::filled(3, 4, 4, 0.2 + 0.1 * i as f32)).collect();
        let recons: Vec<Image> = originals.iter().map(|_| Image::filled(3, 4, 4, 0.25)).collect();
        let fps = originals.iter().zip(&recons).map(|(x, r)| Fingerprint::residual(x, r)).collect();
        (recons, fps, originals)
    }

    #[test]
    fn augment_batch_contracts() {
        let (recons, fps, originals) = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let off = PerturbConfig {
            apply_prob: 0.0,
            ..PerturbConfig::default()
        };
        let out = augment_batch(&recons, &fps, &originals, &off, &mut rng).unwrap();
        assert_eq!(out.images, originals);
        assert_eq!(out.report.passthrough, 4);

        let mixup = PerturbConfig {
            strategy: Strategy::Mixup,
            apply_prob: 1.0,
            ..PerturbConfig::default()
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_batch(&recons, &fps, &originals, &mixup, &mut rng).unwrap()
        };
        let (a, b) = (run(2), run(2));
        assert_eq!(a.images, b.images);
        assert_eq!(a.records, b.records);
        for (i, r) in a.records.iter().enumerate() {
            match r {
                PerturbationRecord::Mixup { partners, .. } => assert!(!partners.contains(&i)),
                other => panic!("{other:?}"),
            }
        }

        let tiny = augment_batch(&recons[..1], &fps[..1], &originals[..1], &mixup, &mut rng).unwrap();
        assert_eq!(tiny.report.fallback, 1);
        assert_eq!(tiny.images[0], originals[0]);
    }

    #[test]
    fn config_validation() {
        assert!(PerturbConfig::default().validate().is_ok());
        for bad in [
            PerturbConfig { alpha0: 0.0, ..Default::default() },
            PerturbConfig { n: 1, ..Default::default() },
            PerturbConfig { apply_prob: 1.5, ..Default::default() },
            PerturbConfig { alpha_min: 6.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
