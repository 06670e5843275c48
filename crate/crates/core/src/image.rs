//! CHW float images and binary PPM/PGM codecs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `channels x height x width` image, row-major, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max)
    }

    /// Stacks images into an NCHW tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor<f32>> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
        let mut data = Vec::with_capacity(first.data.len() * images.len());
        for im in images {
            if !im.same_dims(first) {
                return Err(Error::shape("batch", format!("{:?} vs {:?}", im.dims(), first.dims())));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(vec![images.len(), first.channels, first.height, first.width], data)
    }

    /// Splits an NCHW tensor back into images.
    pub fn unbatch(t: &Tensor<f32>) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape("unbatch", format!("expected NCHW, got {s:?}")));
        }
        let len = s[1] * s[2] * s[3];
        Ok(t.data()
            .chunks(len)
            .map(|c| Image {
                channels: s[1],
                height: s[2],
                width: s[3],
                data: c.to_vec(),
            })
            .collect())
    }
}

/// Peak signal-to-noise ratio in dB for a peak value of 1.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Binary PPM (P6, 8-bit) of a 3-channel image, rounding to nearest.
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims();
    if c != 3 {
        return Err(Error::invalid(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_u8(image.get(ch, y, x)));
            }
        }
    }
    Ok(out)
}

/// Decodes binary P5/P6 with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Format {
        what: "PNM",
        message: m.to_string(),
    };
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    let channels = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let parse = |t: &str| t.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = bytes.get(pos..pos + channels * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let mut image = Image::filled(channels, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                image.set(ch, y, x, body[(y * w + x) * channels + ch] as f32 / 255.0);
            }
        }
    }
    Ok(image)
}
