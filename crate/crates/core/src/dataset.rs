//! On-disk datasets: `manifest.json` plus `data.f32`, raw little-endian
//! CHW images concatenated in record order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthgan::BenchmarkConfig;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }
}

/// How an augmented fake was derived from the original.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase", deny_unknown_fields)]
pub enum PerturbationRecord {
    Scaling { alpha: f64 },
    Mixup { betas: Vec<f64>, partners: Vec<usize> },
    Passthrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub label: Label,
    pub category_id: String,
    pub gan_id: Option<String>,
    pub seed: u64,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub side: usize,
    pub channels: usize,
    pub split: String,
    pub records: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkConfig>,
}

impl Manifest {
    pub fn record_bytes(&self) -> u64 {
        (self.channels * self.side * self.side * 4) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Format {
            what: "manifest",
            message,
        };
        if self.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        let span = self.record_bytes();
        let mut next_free = 0u64;
        for (i, r) in self.records.iter().enumerate() {
            if i > 0 && r.offset < next_free {
                return Err(bad(format!("record {} at offset {} overlaps its predecessor", r.index, r.offset)));
            }
            next_free = r.offset + span;
            match (r.label, &r.gan_id) {
                (Label::Fake, None) => return Err(bad(format!("fake record {} has no gan_id", r.index))),
                (Label::Real, Some(g)) => {
                    return Err(bad(format!("real record {} carries gan_id {g}", r.index)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// A manifest with its decoded images, index-aligned with `manifest.records`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn new(split: &str, side: usize, benchmark: Option<BenchmarkConfig>) -> Self {
        Dataset {
            manifest: Manifest {
                version: MANIFEST_VERSION,
                side,
                channels: 3,
                split: split.to_string(),
                records: Vec::new(),
                benchmark,
            },
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(
        &mut self,
        label: Label,
        category_id: &str,
        gan_id: Option<&str>,
        seed: u64,
        image: Image,
    ) -> Result<()> {
        let (c, h, w) = image.dims();
        if (c, h, w) != (self.manifest.channels, self.manifest.side, self.manifest.side) {
            return Err(Error::shape(
                "dataset",
                format!("image {:?} in a {}x{} dataset", (c, h, w), self.manifest.side, self.manifest.side),
            ));
        }
        let index = self.manifest.records.len();
        self.manifest.records.push(SampleRecord {
            index,
            label,
            category_id: category_id.to_string(),
            gan_id: gan_id.map(str::to_string),
            seed,
            offset: index as u64 * self.manifest.record_bytes(),
            perturbation: None,
        });
        self.images.push(image);
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = (&SampleRecord, &Image)> {
        self.manifest.records.iter().zip(&self.images)
    }

    /// New dataset keeping records that satisfy `keep`, re-indexed.
    pub fn filter(&self, keep: impl Fn(&SampleRecord) -> bool) -> Dataset {
        let mut out = Dataset {
            manifest: Manifest {
                records: Vec::new(),
                ..self.manifest.clone()
            },
            images: Vec::new(),
        };
        for (r, im) in self.records() {
            if keep(r) {
                let mut rec = r.clone();
                rec.index = out.manifest.records.len();
                rec.offset = rec.index as u64 * out.manifest.record_bytes();
                out.manifest.records.push(rec);
                out.images.push(im.clone());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.manifest.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(self.images.len() * self.manifest.record_bytes() as usize);
        for im in &self.images {
            for v in im.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let data_path = dir.join(DATA_FILE);
        fs::write(&data_path, blob).map_err(|e| Error::io(&data_path, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw)?;
        manifest.validate()?;
        let data_path = dir.join(DATA_FILE);
        let blob = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let span = manifest.record_bytes() as usize;
        let (c, s) = (manifest.channels, manifest.side);
        let images = manifest
            .records
            .iter()
            .map(|r| {
                let start = r.offset as usize;
                let raw = blob.get(start..start + span).ok_or_else(|| Error::Format {
                    what: "dataset blob",
                    message: format!("record {} at {start} past end {}", r.index, blob.len()),
                })?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                Image::from_vec(c, s, s, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, images })
    }
}
