//! Radix-2 2-D FFT, high-pass residuals and averaged log-magnitude spectra.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::image::Image;

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::invalid(format!("FFT size {n} is not a power of two")));
    }
    Ok(())
}

fn twiddles(n: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

/// In-place iterative radix-2 transform with precomputed twiddles
/// (`tw[k] = exp(-+2 pi i k / n)`), unnormalised.
fn fft1d(buf: &mut [Complex64], tw: &[Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * tw[k * stride];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn transform2d(data: &mut [Complex64], side: usize, inverse: bool) {
    let tw = twiddles(side, inverse);
    for row in data.chunks_mut(side) {
        fft1d(row, &tw);
    }
    let mut col = vec![Complex64::default(); side];
    for x in 0..side {
        for y in 0..side {
            col[y] = data[y * side + x];
        }
        fft1d(&mut col, &tw);
        for y in 0..side {
            data[y * side + x] = col[y];
        }
    }
}

fn side_of(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len {
        return Err(Error::invalid(format!("{len} values do not form a square grid")));
    }
    check_pow2(side)?;
    Ok(side)
}

/// Unnormalised forward DFT of a square, row-major real grid.
pub fn fft2d(channel: &[f64]) -> Result<Vec<Complex64>> {
    let side = side_of(channel.len())?;
    let mut data: Vec<Complex64> = channel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform2d(&mut data, side, false);
    Ok(data)
}

pub fn fft2d_complex(input: &[Complex64]) -> Result<Vec<Complex64>> {
    let side = side_of(input.len())?;
    let mut data = input.to_vec();
    transform2d(&mut data, side, false);
    Ok(data)
}

/// Inverse of [`fft2d`], including the `1/S^2` normalisation.
pub fn ifft2d(spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
    let side = side_of(spectrum.len())?;
    let mut data = spectrum.to_vec();
    transform2d(&mut data, side, true);
    let norm = 1.0 / (side * side) as f64;
    for v in &mut data {
        *v *= norm;
    }
    Ok(data)
}

/// `x - box_blur3(x)` per channel, with edge-replicated borders.
pub fn high_pass(image: &Image) -> Image {
    let (c, h, w) = image.dims();
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += plane[yy * w + xx] as f64;
                    }
                }
                dst[y * w + x] = (plane[y * w + x] as f64 - acc / 9.0) as f32;
            }
        }
    }
    Image::from_vec(c, h, w, out).expect("same dims")
}

/// Mean high-pass FFT magnitude over a set of images, DC-centred.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumImage {
    pub side: usize,
    /// Linear magnitudes, row-major, DC at `(side/2, side/2)`.
    pub magnitude: Vec<f64>,
}

impl SpectrumImage {
    /// `log(1 + |F|)` grid used for display and distances.
    pub fn log_magnitude(&self) -> Vec<f64> {
        self.magnitude.iter().map(|m| m.ln_1p()).collect()
    }

    /// Index into the centred grid for signed frequency `(fy, fx)`.
    pub fn bin_index(&self, fy: i64, fx: i64) -> usize {
        let s = self.side as i64;
        let y = (fy + s / 2).rem_euclid(s) as usize;
        let x = (fx + s / 2).rem_euclid(s) as usize;
        y * self.side + x
    }

    pub fn at(&self, fy: i64, fx: i64) -> f64 {
        self.magnitude[self.bin_index(fy, fx)]
    }

    /// Magnitude at `(fy, fx)` divided by the median off-DC magnitude.
    pub fn peak_to_median(&self, fy: i64, fx: i64) -> f64 {
        let dc = self.bin_index(0, 0);
        let mut rest: Vec<f64> = self
            .magnitude
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != dc)
            .map(|(_, &m)| m)
            .collect();
        rest.sort_by(f64::total_cmp);
        let median = rest[rest.len() / 2];
        self.at(fy, fx) / median.max(f64::MIN_POSITIVE)
    }

    /// Signed frequency of the largest off-DC magnitude.
    pub fn off_dc_argmax(&self) -> (i64, i64) {
        let dc = self.bin_index(0, 0);
        let (idx, _) = self
            .magnitude
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != dc)
            .fold((0, f64::NEG_INFINITY), |best, (i, &m)| if m > best.1 { (i, m) } else { best });
        let s = self.side as i64;
        ((idx / self.side) as i64 - s / 2, (idx % self.side) as i64 - s / 2)
    }

    /// `||log A - log B|| / ||log A||`.
    pub fn relative_log_distance(&self, other: &SpectrumImage) -> f64 {
        let a = self.log_magnitude();
        let b = other.log_magnitude();
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        num / den.max(f64::MIN_POSITIVE)
    }

    /// Min-max normalised 8-bit grey levels of the log spectrum.
    pub fn to_gray8(&self) -> Vec<u8> {
        let log = self.log_magnitude();
        let lo = log.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        log.iter()
            .map(|&v| {
                if range > 0.0 {
                    ((v - lo) / range * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.log_magnitude().chunks(self.side) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Per image: high-pass, per-channel FFT magnitude, channel mean. Then the
/// pixelwise mean over images (summed in list order), DC shifted to centre.
pub fn average_spectrum<'a, I>(images: I) -> Result<SpectrumImage>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut acc: Vec<f64> = Vec::new();
    let mut dims = None;
    let mut count = 0usize;
    for image in images {
        let (c, h, w) = image.dims();
        if h != w {
            return Err(Error::invalid(format!("spectrum needs square images, got {h}x{w}")));
        }
        match dims {
            None => {
                check_pow2(h)?;
                dims = Some((c, h, w));
                acc = vec![0.0; h * w];
            }
            Some(d) if d != (c, h, w) => {
                return Err(Error::shape("average_spectrum", format!("{:?} vs {:?}", (c, h, w), d)));
            }
            _ => {}
        }
        let hp = high_pass(image);
        for ch in hp.data().chunks(h * w) {
            let plane: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
            let f = fft2d(&plane)?;
            for (a, z) in acc.iter_mut().zip(&f) {
                *a += z.norm() / c as f64;
            }
        }
        count += 1;
    }
    let (_, side, _) = dims.ok_or_else(|| Error::invalid("average_spectrum of an empty image list"))?;
    let mut magnitude = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let sy = (y + side / 2) % side;
            let sx = (x + side / 2) % side;
            magnitude[sy * side + sx] = acc[y * side + x] / count as f64;
        }
    }
    Ok(SpectrumImage { side, magnitude })
}

/// Binary PGM (P5) of the min-max normalised log spectrum.
pub fn encode_pgm(spec: &SpectrumImage) -> Vec<u8> {
    crate::image::encode_pgm(spec.side, spec.side, &spec.to_gray8())
}

pub fn export_pgm(spec: &SpectrumImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(spec)).map_err(|e| Error::io(path, e))
}
