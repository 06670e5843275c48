//! Autoencoder fingerprint extractor trained with a reconstruction loss on
//! reals and, through a gradient reversal layer, against a category
//! discriminator on fake-image fingerprints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Fingerprint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Activation, Layer, Network};
use crate::optim::AdamState;
use crate::synthgan::mix_seed;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Images per inference chunk.
const INFER_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub lambda_adv: f64,
    pub lr_e: f64,
    pub lr_d: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adv_enabled: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            lambda_adv: 1e-4,
            lr_e: 1e-3,
            lr_d: 1e-3,
            epochs: 8,
            batch_size: 8,
            adv_enabled: true,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::invalid(format!("lambda_adv must be >= 0, got {}", self.lambda_adv)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("extractor epochs and batch_size must be positive"));
        }
        if !(self.lr_e > 0.0 && self.lr_d > 0.0) {
            return Err(Error::invalid("extractor learning rates must be positive"));
        }
        Ok(())
    }
}

/// Three stride-2 conv stages down to `side/8`, then three
/// upsample + conv stages back, ending in a sigmoid.
pub fn autoencoder_layers() -> Vec<Layer> {
    use Activation::*;
    vec![
        Layer::conv(3, 16, 2, Relu),
        Layer::conv(16, 32, 2, Relu),
        Layer::conv(32, 64, 2, Relu),
        Layer::Upsample2x,
        Layer::conv(64, 32, 1, Relu),
        Layer::Upsample2x,
        Layer::conv(32, 16, 1, Relu),
        Layer::Upsample2x,
        Layer::conv(16, 3, 1, Sigmoid),
    ]
}

/// Category discriminator producing `k` logits.
pub fn discriminator_layers(k: usize) -> Vec<Layer> {
    use Activation::*;
    vec![
        Layer::conv(3, 16, 2, Relu),
        Layer::conv(16, 32, 2, Relu),
        Layer::conv(32, 64, 2, Relu),
        Layer::GlobalAvgPool,
        Layer::Linear {
            in_features: 64,
            out_features: k,
            activation: Identity,
        },
    ]
}

/// A frozen autoencoder `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub autoencoder: Network,
}

impl Extractor {
    pub fn new(seed: u64) -> Self {
        Extractor {
            autoencoder: Network::new("extractor", autoencoder_layers(), seed),
        }
    }

    fn check(&self, image: &Image) -> Result<()> {
        let (c, h, w) = image.dims();
        if c != 3 || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "extractor",
                format!("needs 3 channels and sides divisible by 8, got {c}x{h}x{w}"),
            ));
        }
        Ok(())
    }

    /// `E(x)` for every image, in order.
    pub fn reconstruct(&self, images: &[Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            for im in chunk {
                self.check(im)?;
            }
            let refs: Vec<&Image> = chunk.iter().collect();
            let batch = Image::batch(&refs)?;
            out.extend(Image::unbatch(&self.autoencoder.infer(&batch)?)?);
        }
        Ok(out)
    }

    /// `F = x - E(x)`.
    pub fn extract_fingerprint(&self, image: &Image) -> Result<Fingerprint> {
        let recon = self.reconstruct(std::slice::from_ref(image))?;
        Ok(Fingerprint::residual(image, &recon[0]))
    }

    /// Reconstructions and fingerprints for a whole set of images.
    pub fn decompose(&self, images: &[Image]) -> Result<(Vec<Image>, Vec<Fingerprint>)> {
        let recon = self.reconstruct(images)?;
        let fps = images.iter().zip(&recon).map(|(x, r)| Fingerprint::residual(x, r)).collect();
        Ok((recon, fps))
    }

    pub fn checksum(&self) -> String {
        self.autoencoder.params.checksum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub rec_loss: f64,
    pub adv_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedExtractor {
    pub extractor: Extractor,
    pub discriminator: Option<Network>,
    pub history: Vec<EpochLoss>,
}

impl TrainedExtractor {
    /// `epoch,rec_loss,adv_loss` rows with a header line.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,rec_loss,adv_loss\n");
        for h in &self.history {
            out.push_str(&format!("{},{:.9},{:.9}\n", h.epoch, h.rec_loss, h.adv_loss));
        }
        out
    }
}

/// Losses and per-parameter gradients of one joint extractor step.
pub struct StepOutcome<T: Element> {
    pub rec_loss: f64,
    pub adv_loss: f64,
    pub grads_e: Vec<Vec<T>>,
    pub grads_d: Vec<Vec<T>>,
}

/// One forward/backward pass of `L_rec + lambda * L_adv` where `L_adv` sees
/// the fingerprints through a gradient reversal layer. `D` descends on the
/// adversarial term while `E` receives its negation.
pub fn extractor_step<T: Element>(
    autoencoder: &Network<T>,
    discriminator: Option<&Network<T>>,
    reals: Tensor<T>,
    fakes: Option<(Tensor<T>, &[usize])>,
    lambda_adv: f64,
) -> Result<StepOutcome<T>> {
    let mut tape = Tape::new();
    let e = autoencoder.bind(&mut tape, true);
    let xr = tape.constant(reals);
    let recon = autoencoder.apply(&mut tape, xr, &e)?;
    let rec = tape.mse(recon, xr)?;
    let mut loss = rec;
    let mut adv_loss = 0.0;
    let mut d_bound = Vec::new();
    if let (Some(disc), Some((xf, labels))) = (discriminator, fakes) {
        d_bound = disc.bind(&mut tape, true);
        let xf = tape.constant(xf);
        let recon_f = autoencoder.apply(&mut tape, xf, &e)?;
        let fp = tape.sub(xf, recon_f)?;
        let reversed = tape.grl(fp);
        let logits = disc.apply(&mut tape, reversed, &d_bound)?;
        let adv = tape.softmax_ce(logits, labels)?;
        adv_loss = tape.value(adv).item().as_f64();
        let weighted = tape.scale(adv, lambda_adv);
        loss = tape.add(rec, weighted)?;
    }
    tape.backward(loss)?;
    let grads_d = match discriminator {
        Some(d) if !d_bound.is_empty() => d.params.collect_grads(&tape, &d_bound),
        _ => Vec::new(),
    };
    Ok(StepOutcome {
        rec_loss: tape.value(rec).item().as_f64(),
        adv_loss,
        grads_e: autoencoder.params.collect_grads(&tape, &e),
        grads_d,
    })
}

/// Trains `E` (and `D` when adversarial training is on).
///
/// `fakes` carries category labels in `[0, k)`. Each step draws one real
/// batch and one fake batch; fake batches cycle when the sets differ in size.
pub fn train_extractor(
    reals: &[Image],
    fakes: &[(Image, usize)],
    k: usize,
    config: &ExtractorConfig,
    seed: u64,
) -> Result<TrainedExtractor> {
    config.validate()?;
    if reals.is_empty() {
        return Err(Error::invalid("extractor training needs real images"));
    }
    if config.adv_enabled {
        if k < 2 {
            return Err(Error::invalid(format!(
                "adversarial extractor training needs K >= 2 categories, got {k}"
            )));
        }
        if fakes.is_empty() {
            return Err(Error::invalid("adversarial extractor training needs fake images"));
        }
        if let Some((_, bad)) = fakes.iter().find(|(_, c)| *c >= k) {
            return Err(Error::invalid(format!("fake category label {bad} out of range [0, {k})")));
        }
    }

    let mut extractor = Extractor::new(mix_seed(seed, 0xE));
    let mut disc = config
        .adv_enabled
        .then(|| Network::new("discriminator", discriminator_layers(k), mix_seed(seed, 0xD)));
    let mut opt_e = AdamState::new(&extractor.autoencoder.params, config.lr_e);
    let mut opt_d = disc.as_ref().map(|d| AdamState::new(&d.params, config.lr_d));
    // separate streams so the real-batch order does not depend on the fakes
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED));
    let mut fake_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xFA4E));

    let mut real_order: Vec<usize> = (0..reals.len()).collect();
    let mut fake_order: Vec<usize> = (0..fakes.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let bs = config.batch_size;
    for epoch in 0..config.epochs {
        real_order.shuffle(&mut rng);
        fake_order.shuffle(&mut fake_rng);
        let (mut rec_sum, mut adv_sum, mut steps) = (0.0, 0.0, 0usize);
        for (step, chunk) in real_order.chunks(bs).enumerate() {
            let xr: Vec<&Image> = chunk.iter().map(|&i| &reals[i]).collect();
            let xr = Image::batch(&xr)?;
            let fake_batch = match &disc {
                Some(_) => {
                    let idx: Vec<usize> = (0..bs).map(|j| fake_order[(step * bs + j) % fake_order.len()]).collect();
                    let imgs: Vec<&Image> = idx.iter().map(|&i| &fakes[i].0).collect();
                    let labels: Vec<usize> = idx.iter().map(|&i| fakes[i].1).collect();
                    Some((Image::batch(&imgs)?, labels))
                }
                None => None,
            };
            let out = extractor_step(
                &extractor.autoencoder,
                disc.as_ref(),
                xr,
                fake_batch.as_ref().map(|(t, l)| (t.clone(), l.as_slice())),
                config.lambda_adv,
            )?;
            if !out.rec_loss.is_finite() || !out.adv_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            opt_e.step(&mut extractor.autoencoder.params, &out.grads_e)?;
            if let (Some(d), Some(opt)) = (disc.as_mut(), opt_d.as_mut()) {
                opt.step(&mut d.params, &out.grads_d)?;
            }
            rec_sum += out.rec_loss;
            adv_sum += out.adv_loss;
            steps += 1;
        }
        history.push(EpochLoss {
            epoch,
            rec_loss: rec_sum / steps as f64,
            adv_loss: adv_sum / steps as f64,
        });
    }
    Ok(TrainedExtractor {
        extractor,
        discriminator: disc,
        history,
    })
}

/// Fraction of fakes whose fingerprint category `D` predicts correctly.
pub fn discriminator_accuracy(extractor: &Extractor, discriminator: &Network, fakes: &[(Image, usize)]) -> Result<f64> {
    if fakes.is_empty() {
        return Err(Error::invalid("no fakes to score"));
    }
    let mut correct = 0usize;
    for chunk in fakes.chunks(INFER_CHUNK) {
        let imgs: Vec<Image> = chunk.iter().map(|(im, _)| im.clone()).collect();
        let (_, fps) = extractor.decompose(&imgs)?;
        let refs: Vec<&Image> = fps.iter().map(Fingerprint::image).collect();
        let logits = discriminator.infer(&Image::batch(&refs)?)?;
        let k = logits.shape()[1];
        for (row, (_, label)) in logits.data().chunks(k).zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            correct += usize::from(pred == *label);
        }
    }
    Ok(correct as f64 / fakes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgan::{default_categories, gen_real};

    fn images(n: usize, side: usize) -> Vec<Image> {
        let cats = default_categories();
        (0..n).map(|i| gen_real(&cats[i % cats.len()], i as u64, side)).collect()
    }

    #[test]
    fn output_shape_matches_input() {
        let e = Extractor::new(1);
        let x = images(3, 32);
        let r = e.reconstruct(&x).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|im| im.dims() == (3, 32, 32)));
        assert!(r.iter().flat_map(|im| im.data()).all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(e.reconstruct(&x).unwrap(), r);
    }

    #[test]
    fn rejects_incompatible_shape() {
        let e = Extractor::new(1);
        assert!(e.extract_fingerprint(&Image::filled(3, 12, 12, 0.5)).is_err());
        assert!(e.extract_fingerprint(&Image::filled(1, 16, 16, 0.5)).is_err());
    }

    #[test]
    fn fingerprint_plus_reconstruction_is_identity() {
        let e = Extractor::new(2);
        let x = images(2, 16);
        let (recon, fps) = e.decompose(&x).unwrap();
        for ((xi, ri), fi) in x.iter().zip(&recon).zip(&fps) {
            for ((a, b), c) in xi.data().iter().zip(ri.data()).zip(fi.image().data()) {
                assert!((a - (b + c)).abs() <= 1e-6);
            }
            assert!(fi.image().data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn single_category_adversarial_rejected() {
        let x = images(4, 16);
        let fakes: Vec<(Image, usize)> = x.iter().map(|im| (im.clone(), 0)).collect();
        let err = train_extractor(&x, &fakes, 1, &ExtractorConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("K >= 2"));
    }

    #[test]
    fn lambda_zero_matches_plain_reconstruction() {
        let x = images(8, 16);
        let fakes: Vec<(Image, usize)> = x.iter().enumerate().map(|(i, im)| (im.clone(), i % 2)).collect();
        let base = ExtractorConfig {
            epochs: 2,
            batch_size: 4,
            ..ExtractorConfig::default()
        };
        let plain = train_extractor(&x, &[], 2, &ExtractorConfig { adv_enabled: false, ..base.clone() }, 9).unwrap();
        let zero = train_extractor(&x, &fakes, 2, &ExtractorConfig { lambda_adv: 0.0, ..base }, 9).unwrap();
        let a = &plain.extractor.autoencoder.params;
        let b = &zero.extractor.autoencoder.params;
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert!(pa.tensor.max_abs_diff(&pb.tensor) <= 1e-6, "{}", pa.name);
        }
        for (ha, hb) in plain.history.iter().zip(&zero.history) {
            assert_eq!(ha.rec_loss, hb.rec_loss);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let x = images(8, 16);
        let fakes: Vec<(Image, usize)> = x.iter().enumerate().map(|(i, im)| (im.clone(), i % 2)).collect();
        let cfg = ExtractorConfig {
            epochs: 2,
            batch_size: 4,
            ..ExtractorConfig::default()
        };
        let a = train_extractor(&x, &fakes, 2, &cfg, 3).unwrap();
        let b = train_extractor(&x, &fakes, 2, &cfg, 3).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.extractor, b.extractor);
        assert!(a.history_csv().starts_with("epoch,rec_loss,adv_loss\n0,"));
    }
}
