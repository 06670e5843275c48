//! Parameter storage and the small sequential networks used for the
//! extractor, the category discriminator and the detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered, named parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Element = f32> {
    entries: Vec<NamedTensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Records every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(e.tensor.clone())
                } else {
                    tape.constant(e.tensor.clone())
                }
            })
            .collect()
    }

    /// Gradients of bound parameters after `tape.backward`; zeros where a
    /// parameter did not influence the loss.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &[Var]) -> Vec<Vec<T>> {
        self.entries
            .iter()
            .zip(bound)
            .map(|(e, &v)| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); e.tensor.numel()])
            })
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    },
    Upsample2x,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        activation: Activation,
    },
}

impl Layer {
    pub fn conv(in_channels: usize, out_channels: usize, stride: usize, activation: Activation) -> Self {
        Layer::Conv {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            activation,
        }
    }
}

/// A feed-forward stack of layers with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Element = f32> {
    layers: Vec<Layer>,
    pub params: ParamSet<T>,
}

impl<T: Element> Network<T> {
    /// Kaiming-uniform weights, zero biases, deterministic in `seed`.
    pub fn new(prefix: &str, layers: Vec<Layer>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (i, layer) in layers.iter().enumerate() {
            let (wshape, fan_in, out) = match *layer {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels,
                ),
                Layer::Linear {
                    in_features,
                    out_features,
                    ..
                } => (vec![out_features, in_features], in_features, out_features),
                Layer::Upsample2x | Layer::GlobalAvgPool => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = wshape.iter().product();
            let w = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
            params.push(format!("{prefix}.{i}.weight"), Tensor::new(wshape, w).expect("weight shape"));
            params.push(format!("{prefix}.{i}.bias"), Tensor::zeros(vec![out]));
        }
        Network { layers, params }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Replaces parameters, e.g. with ones loaded from a checkpoint.
    pub fn load(&mut self, params: ParamSet<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Format {
                what: "parameter set",
                message: format!("expected {} tensors, got {}", self.params.len(), params.len()),
            });
        }
        for (want, got) in self.params.iter().zip(params.iter()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::Format {
                    what: "parameter set",
                    message: format!(
                        "expected `{}` {:?}, got `{}` {:?}",
                        want.name,
                        want.tensor.shape(),
                        got.name,
                        got.tensor.shape()
                    ),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    /// Applies the stack using parameters previously bound with [`Network::bind`].
    pub fn apply(&self, tape: &mut Tape<T>, mut x: Var, bound: &[Var]) -> Result<Var> {
        let mut p = 0;
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv {
                    kernel,
                    stride,
                    activation,
                    ..
                } => {
                    let y = tape.conv2d(x, bound[p], bound[p + 1], stride, kernel / 2)?;
                    p += 2;
                    activate(tape, y, activation)
                }
                Layer::Upsample2x => tape.upsample_nearest2x(x)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Linear { activation, .. } => {
                    let y = tape.linear(x, bound[p], bound[p + 1])?;
                    p += 2;
                    activate(tape, y, activation)
                }
            };
        }
        Ok(x)
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.apply(&mut tape, x, &bound)?;
        Ok(tape.value(y).clone())
    }
}

fn activate<T: Element>(tape: &mut Tape<T>, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}
