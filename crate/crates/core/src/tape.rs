//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs already live on the tape, so
//! node order is a topological order and backward is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Element, Tensor};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Upsample2x(Var),
    Relu(Var),
    Sigmoid(Var),
    Grl(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Bce {
        pred: Var,
        labels: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// fills a gradient for it.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.needs_grad(v));
        let mut value = Tensor::new(shape, data).expect("kernel output matches its shape");
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input, OIKK weight, O bias; got {xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        if ws[2] != ws[3] || ws[1] != xs[1] || bs[0] != ws[0] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} incompatible with weight {ws:?} / bias {bs:?} at stride {stride}"),
            ));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} larger than padded input {}x{}", ws[2], xs[2] + 2 * pad, xs[3] + 2 * pad),
            ));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let shape = vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("upsample_nearest2x", format!("need at least 2 dims, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let out = kernels::upsample2x_forward(self.value(input).data(), planes, h, w);
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        Ok(self.push(shape, out, Op::Upsample2x(input), &[input]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Sigmoid(x), &[x])
    }

    /// Gradient reversal: identity forward, negated gradient backward.
    pub fn grl(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (shape, out) = (t.shape().to_vec(), t.data().to_vec());
        self.push(shape, out, Op::Grl(x), &[x])
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ta.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let k = T::of(factor);
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * k).collect();
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Scale(x, k), &[x])
    }

    /// `(n, c, h, w)` to `(n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected NCHW, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let inv = T::of(1.0 / plane as f64);
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(vec![s[0], s[1]], out, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x: (n, in)`, `weight: (out, in)`, `bias: (out)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let out = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            fan_in,
            fan_out,
        );
        Ok(self.push(vec![n, fan_out], out, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push(Vec::new(), vec![m], Op::Mean(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, diff) = self.binary("mse", a, b, |x, y| (x - y) * (x - y))?;
        let m = diff.iter().copied().sum::<T>() / T::of(diff.len() as f64);
        Ok(self.push(Vec::new(), vec![m], Op::Mse(a, b), &[a, b]))
    }

    /// Binary cross-entropy on probabilities, averaged over elements.
    pub fn bce(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.numel() != labels.len() {
            return Err(Error::shape("bce", format!("{} predictions, {} labels", t.numel(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(format!("bce label {bad} not in {{0, 1}}")));
        }
        let eps = T::of(PROB_EPS);
        let one = T::one();
        let labels: Vec<T> = labels.iter().map(|&y| T::of(y)).collect();
        let total: T = t
            .data()
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let p = p.max(eps).min(one - eps);
                -(y * p.ln() + (one - y) * (one - p).ln())
            })
            .sum();
        let loss = total / T::of(labels.len() as f64);
        Ok(self.push(Vec::new(), vec![loss], Op::Bce { pred, labels }, &[pred]))
    }

    /// Softmax cross-entropy for `logits: (n, k)` and class indices, batch-averaged.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_ce", format!("logits {s:?} for {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("class label {bad} out of range [0, {k})")));
        }
        let eps = T::of(PROB_EPS);
        let mut probs = Vec::with_capacity(s[0] * k);
        let mut total = T::zero();
        for (row, &y) in self.value(logits).data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            let start = probs.len();
            probs.extend(exps.iter().map(|&e| e / z));
            total += -probs[start + y].max(eps).ln();
        }
        let loss = total / T::of(labels.len() as f64);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        let node = &mut self.nodes[v.0].value;
        if !node.requires_grad {
            return;
        }
        match node.grad() {
            Some(g) => {
                let summed = g.iter().zip(&contribution).map(|(&a, &b)| a + b).collect();
                node.set_grad(summed).expect("gradient shape");
            }
            None => node.set_grad(contribution).expect("gradient shape"),
        }
    }

    /// Populates gradients of the scalar `loss` w.r.t. every node that
    /// requires one. Previous gradients are discarded first, so calling this
    /// twice yields identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !self.needs_grad(loss) {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].value.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for (input, contribution) in self.local_grads(idx, &grad) {
                self.accumulate(input, contribution);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn local_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    &geom,
                    self.value(input).data(),
                    self.value(weight).data(),
                    g,
                );
                out.push((input, grads.input));
                out.push((weight, grads.weight));
                out.push((bias, grads.bias));
            }
            &Op::Upsample2x(x) => {
                let s = self.shape(x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = s[..s.len() - 2].iter().product();
                let dx = kernels::upsample2x_backward(g, planes, h, w);
                out.push((x, dx));
            }
            &Op::Relu(x) => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((x, dx));
            }
            &Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &d)| d * s * (T::one() - s))
                    .collect();
                out.push((x, dx));
            }
            &Op::Grl(x) => {
                let dx = g.iter().map(|&d| -d).collect();
                out.push((x, dx));
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|&d| -d).collect()));
            }
            &Op::Mul(a, b) => {
                let da = self.value(b).data().iter().zip(g).map(|(&y, &d)| y * d).collect();
                let db = self.value(a).data().iter().zip(g).map(|(&x, &d)| x * d).collect();
                out.push((a, da));
                out.push((b, db));
            }
            &Op::Scale(x, k) => {
                let dx = g.iter().map(|&d| d * k).collect();
                out.push((x, dx));
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let plane = s[2] * s[3];
                let inv = T::of(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(plane * g.len());
                for &d in g {
                    dx.extend(std::iter::repeat_n(d * inv, plane));
                }
                out.push((x, dx));
            }
            &Op::Linear { input, weight, bias } => {
                let (n, fan_in) = (self.shape(input)[0], self.shape(input)[1]);
                let fan_out = self.shape(weight)[0];
                let (dx, dw, db) = kernels::linear_backward(
                    self.value(input).data(),
                    self.value(weight).data(),
                    g,
                    n,
                    fan_in,
                    fan_out,
                );
                out.push((input, dx));
                out.push((weight, dw));
                out.push((bias, db));
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                out.push((x, vec![g[0]; n]));
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                out.push((x, vec![g[0] / T::of(n as f64); n]));
            }
            &Op::Mse(a, b) => {
                let n = T::of(self.value(a).numel() as f64);
                let k = T::of(2.0) * g[0] / n;
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| k * (x - y))
                    .collect();
                let db = da.iter().map(|&v| -v).collect();
                out.push((a, da));
                out.push((b, db));
            }
            Op::Bce { pred, labels } => {
                let pred = *pred;
                let eps = T::of(PROB_EPS);
                let one = T::one();
                let scale = g[0] / T::of(labels.len() as f64);
                let dp = self
                    .value(pred)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        let p = p.max(eps).min(one - eps);
                        scale * ((one - y) / (one - p) - y / p)
                    })
                    .collect();
                out.push((pred, dp));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let logits = *logits;
                let k = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &y) in labels.iter().enumerate() {
                    dl[row * k + y] -= scale;
                }
                out.push((logits, dl));
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
