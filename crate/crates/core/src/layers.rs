//! Stateful layers: named parameters, forward caches and gradient accumulation.

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::ops::{self, ConvParams, ConvSpec, LinearParams, Mode};
use crate::seed;
use crate::tensor::{Element, Shape, Tensor};

/// Trainable weights versus bookkeeping buffers (batch-norm running averages).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

/// Read-only view of one named tensor.
pub struct ParamRef<'a, T: Element> {
    pub name: &'a str,
    pub tensor: &'a Tensor<T>,
    pub kind: ParamKind,
    pub frozen: bool,
}

/// Mutable view of one named tensor.
pub struct ParamMut<'a, T: Element> {
    pub name: &'a str,
    pub tensor: &'a mut Tensor<T>,
    pub kind: ParamKind,
    pub frozen: bool,
}

/// Anything that owns named tensors.
pub trait Parameterized<T: Element> {
    fn visit(&self, f: &mut dyn FnMut(ParamRef<'_, T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamMut<'_, T>));
    fn set_frozen(&mut self, frozen: bool);

    /// Number of trainable scalars.
    fn weight_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |p| {
            if p.kind == ParamKind::Weight {
                total += p.tensor.len();
            }
        });
        total
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.tensor.clear_grad());
    }
}

pub(crate) fn he_normal<T: Element>(shape: Shape, fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut rng = seed::rng(seed::derive_named(seed, name));
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(dist.sample(&mut rng)))
}

/// Convolution without bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Element = f32> {
    name: String,
    pub params: ConvParams<T>,
    frozen: bool,
    input: Option<Tensor<T>>,
}

impl<T: Element> Conv2d<T> {
    /// He-normal (fan-in) initialized convolution named `<prefix>.weight`.
    pub fn new(prefix: &str, spec: ConvSpec, seed: u64) -> Self {
        let name = format!("{prefix}.weight");
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let weight = he_normal(spec.weight_shape(), fan_in, seed, &name);
        Conv2d {
            name,
            params: ConvParams {
                spec,
                weight,
                bias: None,
            },
            frozen: false,
            input: None,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        self.params.spec
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::conv2d(x, &self.params)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor<T>, need_input: bool) -> Result<Option<Tensor<T>>> {
        let x = self.input.as_ref().expect("Conv2d::backward called before forward");
        let need_weight = !self.frozen;
        if !need_input && !need_weight {
            return Ok(None);
        }
        let g = ops::conv2d_backward_select(x, &self.params, upstream, need_input, need_weight)?;
        if need_weight {
            self.params.weight.accumulate_grad(g.weight.data());
        }
        Ok(need_input.then_some(g.input))
    }
}

impl<T: Element> Parameterized<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamRef<'_, T>)) {
        f(ParamRef {
            name: &self.name,
            tensor: &self.params.weight,
            kind: ParamKind::Weight,
            frozen: self.frozen,
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        f(ParamMut {
            name: &self.name,
            tensor: &mut self.params.weight,
            kind: ParamKind::Weight,
            frozen: self.frozen,
        });
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

/// Batch normalization with affine parameters and running averages.
///
/// A frozen layer always normalizes with its running averages, so neither its
/// parameters nor its statistics change during training.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Element = f32> {
    names: [String; 4],
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    frozen: bool,
    cache: Option<ops::BnCache<T>>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(prefix: &str, channels: usize, gamma_init: T) -> Self {
        let shape = Shape::new(channels, 1, 1, 1);
        BatchNorm2d {
            names: ["weight", "bias", "running_mean", "running_var"].map(|s| format!("{prefix}.{s}")),
            gamma: Tensor::full(shape, gamma_init),
            beta: Tensor::zeros(shape),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, T::one()),
            frozen: false,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn effective_mode(&self, mode: Mode) -> Mode {
        if self.frozen {
            Mode::Eval
        } else {
            mode
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mode = self.effective_mode(mode);
        let (y, cache) = ops::batch_norm(
            x,
            self.gamma.data(),
            self.beta.data(),
            self.running_mean.data_mut(),
            self.running_var.data_mut(),
            mode,
        )?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().expect("BatchNorm2d::backward called before forward");
        let g = ops::batch_norm_backward(cache, self.gamma.data(), upstream)?;
        if !self.frozen {
            self.gamma.accumulate_grad(&g.gamma);
            self.beta.accumulate_grad(&g.beta);
        }
        Ok(g.input)
    }
}

impl<T: Element> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamRef<'_, T>)) {
        let tensors = [&self.gamma, &self.beta, &self.running_mean, &self.running_var];
        for (i, (name, tensor)) in self.names.iter().zip(tensors).enumerate() {
            f(ParamRef {
                name,
                tensor,
                kind: if i < 2 { ParamKind::Weight } else { ParamKind::Buffer },
                frozen: self.frozen,
            });
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        let tensors = [&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var];
        for (i, (name, tensor)) in self.names.iter().zip(tensors).enumerate() {
            f(ParamMut {
                name,
                tensor,
                kind: if i < 2 { ParamKind::Weight } else { ParamKind::Buffer },
                frozen: self.frozen,
            });
        }
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

/// Fully connected layer over flattened samples.
#[derive(Clone, Debug)]
pub struct Linear<T: Element = f32> {
    names: [String; 2],
    pub params: LinearParams<T>,
    frozen: bool,
    input: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialization for weight and bias.
    pub fn new(prefix: &str, in_features: usize, out_features: usize, seed: u64) -> Self {
        let names = ["weight", "bias"].map(|s| format!("{prefix}.{s}"));
        let bound = 1.0 / (in_features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let init = |shape: Shape, name: &str| {
            let mut rng = seed::rng(seed::derive_named(seed, name));
            Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(dist.sample(&mut rng)))
        };
        let weight = init(Shape::new(out_features, in_features, 1, 1), &names[0]);
        let bias = init(Shape::new(out_features, 1, 1, 1), &names[1]);
        Linear {
            names,
            params: LinearParams { weight, bias },
            frozen: false,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::fully_connected(x, &self.params)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().expect("Linear::backward called before forward");
        let g = ops::fully_connected_backward(x, &self.params, upstream)?;
        if !self.frozen {
            self.params.weight.accumulate_grad(g.weight.data());
            self.params.bias.accumulate_grad(&g.bias);
        }
        Ok(g.input)
    }
}

impl<T: Element> Parameterized<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamRef<'_, T>)) {
        for (name, tensor) in self.names.iter().zip([&self.params.weight, &self.params.bias]) {
            f(ParamRef {
                name,
                tensor,
                kind: ParamKind::Weight,
                frozen: self.frozen,
            });
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        for (name, tensor) in self.names.iter().zip([&mut self.params.weight, &mut self.params.bias]) {
            f(ParamMut {
                name,
                tensor,
                kind: ParamKind::Weight,
                frozen: self.frozen,
            });
        }
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}
