//! Raw forward/backward kernels on flat NCHW buffers. No shape validation
//! happens here; the tape checks shapes before calling in.

use rayon::prelude::*;

use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col<T: Element>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let k = g.kernel;
    image.fill(T::zero());
    for c in 0..g.in_channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    out.par_chunks_mut(g.out_channels * plane)
        .zip(input.par_chunks(in_len))
        .for_each_init(
            || vec![T::zero(); patch * plane],
            |cols, (dst, image)| {
                im2col(g, image, cols);
                for (o, row) in dst.chunks_mut(plane).enumerate() {
                    row.fill(bias[o]);
                }
                T::gemm(
                    g.out_channels,
                    patch,
                    plane,
                    T::one(),
                    weight,
                    patch as isize,
                    1,
                    cols,
                    plane as isize,
                    1,
                    T::one(),
                    dst,
                    plane as isize,
                    1,
                );
            },
        );
    out
}

pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of a conv2d w.r.t. input, weight and bias. Per-sample weight
/// gradients are reduced in batch order so results do not depend on threading.
pub fn conv2d_backward<T: Element>(g: &ConvGeometry, input: &[T], weight: &[T], grad_out: &[T]) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let mut grad_input = vec![T::zero(); input.len()];

    let partial_weights: Vec<Vec<T>> = grad_input
        .par_chunks_mut(in_len)
        .zip(input.par_chunks(in_len))
        .zip(grad_out.par_chunks(out_len))
        .map(|((dx, image), dy)| {
            let mut cols = vec![T::zero(); patch * plane];
            im2col(g, image, &mut cols);
            let mut dw = vec![T::zero(); g.out_channels * patch];
            // dW = dY (O x P) * cols^T (P x CKK)
            T::gemm(
                g.out_channels,
                plane,
                patch,
                T::one(),
                dy,
                plane as isize,
                1,
                &cols,
                1,
                plane as isize,
                T::zero(),
                &mut dw,
                patch as isize,
                1,
            );
            // dcols = W^T (CKK x O) * dY (O x P)
            T::gemm(
                patch,
                g.out_channels,
                plane,
                T::one(),
                weight,
                1,
                patch as isize,
                dy,
                plane as isize,
                1,
                T::zero(),
                &mut cols,
                plane as isize,
                1,
            );
            col2im(g, &cols, dx);
            dw
        })
        .collect();

    let mut grad_weight = vec![T::zero(); g.out_channels * patch];
    for dw in &partial_weights {
        for (acc, v) in grad_weight.iter_mut().zip(dw) {
            *acc += *v;
        }
    }
    let mut grad_bias = vec![T::zero(); g.out_channels];
    for dy in grad_out.chunks(out_len) {
        for (o, row) in dy.chunks(plane).enumerate() {
            grad_bias[o] += row.iter().copied().sum::<T>();
        }
    }
    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

/// `(n, c, h, w)` to `(n, c, 2h, 2w)`, replicating each pixel into a 2x2 block.
pub fn upsample2x_forward<T: Element>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for (src, dst) in input.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Element>(grad_out: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad = vec![T::zero(); planes * h * w];
    for (src, dst) in grad_out.chunks(oh * ow).zip(grad.chunks_mut(h * w)) {
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    grad
}

/// `y = x W^T + b` for `x: (n, in)`, `W: (out, in)`.
pub fn linear_forward<T: Element>(x: &[T], weight: &[T], bias: &[T], n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    T::gemm(
        n,
        fan_in,
        fan_out,
        T::one(),
        x,
        fan_in as isize,
        1,
        weight,
        1,
        fan_in as isize,
        T::one(),
        &mut y,
        fan_out as isize,
        1,
    );
    y
}

pub fn linear_backward<T: Element>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * fan_in];
    T::gemm(
        n,
        fan_out,
        fan_in,
        T::one(),
        grad_out,
        fan_out as isize,
        1,
        weight,
        fan_in as isize,
        1,
        T::zero(),
        &mut dx,
        fan_in as isize,
        1,
    );
    let mut dw = vec![T::zero(); fan_out * fan_in];
    T::gemm(
        fan_out,
        n,
        fan_in,
        T::one(),
        grad_out,
        1,
        fan_out as isize,
        x,
        fan_in as isize,
        1,
        T::zero(),
        &mut dw,
        fan_in as isize,
        1,
    );
    let mut db = vec![T::zero(); fan_out];
    for row in grad_out.chunks(fan_out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    (dx, dw, db)
}
