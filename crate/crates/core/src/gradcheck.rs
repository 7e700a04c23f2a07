//! Central-difference gradient checking in 64-bit precision.
//!
//! Each checkable op is reduced to the scalar `L = sum(r * op(inputs))` for a fixed
//! random projection `r` (the loss op uses its own scalar). Analytic gradients come
//! from one backward pass with upstream `r`; numeric gradients perturb individual
//! entries by `+-h`. Probes whose perturbation flips a ReLU mask or a max-pool
//! winner are re-drawn, since the derivative does not exist across those kinks.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::blocks::{BlockKind, BlockSpec, ResidualBlock};
use crate::layers::{ParamKind, Parameterized};
use crate::ops::{self, ConvParams, ConvSpec, LinearParams, Mode};
use crate::seed;
use crate::tensor::{Shape, Tensor};

/// Per-tensor result of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub entries: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// An op instance evaluated in `f64` whose inputs can be perturbed.
pub trait GradCheckable {
    fn name(&self) -> String;
    /// Names of the probe-able tensors.
    fn tensor_names(&self) -> Vec<String>;
    fn tensor_len(&self, tensor: usize) -> usize;
    fn add_to(&mut self, tensor: usize, index: usize, delta: f64);
    /// Forward pass reduced to a scalar.
    fn loss(&mut self) -> f64;
    /// Gradients of [`GradCheckable::loss`] for every tensor, in `tensor_names` order.
    fn analytic(&mut self) -> Vec<Vec<f64>>;
    /// Fingerprint of the non-smooth decisions (activation masks, pooling winners)
    /// made by the last `loss` call.
    fn kink_signature(&self) -> u64 {
        0
    }
}

fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Random values bounded away from zero.
fn signed_away_from_zero(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn mask_hash<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f64>>) -> u64 {
    let mut h = DefaultHasher::new();
    for t in tensors {
        for v in t.data() {
            (*v > 0.0).hash(&mut h);
        }
    }
    h.finish()
}

/// Runs a check with a fixed probe-selection seed.
pub fn grad_check(op: &mut dyn GradCheckable, probe_count: usize, h: f64) -> GradCheckReport {
    grad_check_seeded(op, probe_count, h, 0)
}

pub fn grad_check_seeded(op: &mut dyn GradCheckable, probe_count: usize, h: f64, seed: u64) -> GradCheckReport {
    let mut rng = seed::rng(seed);
    op.loss();
    let base_sig = op.kink_signature();
    let analytic = op.analytic();
    let mut entries = Vec::new();
    for (t, name) in op.tensor_names().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..op.tensor_len(t)).collect();
        order.shuffle(&mut rng);
        let mut probes = 0;
        let mut worst: f64 = 0.0;
        for idx in order {
            if probes == probe_count {
                break;
            }
            op.add_to(t, idx, h);
            let plus = op.loss();
            let sig_plus = op.kink_signature();
            op.add_to(t, idx, -2.0 * h);
            let minus = op.loss();
            let sig_minus = op.kink_signature();
            op.add_to(t, idx, h);
            if sig_plus != base_sig || sig_minus != base_sig {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[t][idx], numeric));
            probes += 1;
        }
        entries.push(ParamError {
            name,
            probes,
            max_rel_error: worst,
        });
    }
    GradCheckReport {
        op: op.name(),
        max_rel_error: entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max),
        entries,
    }
}

/// Convolution with respect to input and weights.
pub struct ConvCheck {
    x: Tensor<f64>,
    params: ConvParams<f64>,
    r: Tensor<f64>,
}

impl ConvCheck {
    pub fn new(spec: ConvSpec, input: Shape, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let x = random_tensor(input, &mut rng);
        let params = ConvParams {
            spec,
            weight: random_tensor(spec.weight_shape(), &mut rng),
            bias: Some((0..spec.out_channels).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        };
        let out = spec.output_shape(input).expect("valid conv geometry");
        let r = random_tensor(out, &mut rng);
        ConvCheck { x, params, r }
    }
}

impl GradCheckable for ConvCheck {
    fn name(&self) -> String {
        let s = self.params.spec;
        format!("conv2d k={} s={} d={} pad={}", s.kernel.0, s.stride, s.dilation, s.padding)
    }
    fn tensor_names(&self) -> Vec<String> {
        vec!["input".into(), "weight".into(), "bias".into()]
    }
    fn tensor_len(&self, t: usize) -> usize {
        [self.x.len(), self.params.weight.len(), self.params.spec.out_channels][t]
    }
    fn add_to(&mut self, t: usize, i: usize, d: f64) {
        match t {
            0 => self.x.data_mut()[i] += d,
            1 => self.params.weight.data_mut()[i] += d,
            _ => self.params.bias.as_mut().unwrap()[i] += d,
        }
    }
    fn loss(&mut self) -> f64 {
        project(&ops::conv2d(&self.x, &self.params).unwrap(), &self.r)
    }
    fn analytic(&mut self) -> Vec<Vec<f64>> {
        let g = ops::conv2d_backward(&self.x, &self.params, &self.r).unwrap();
        vec![g.input.into_data(), g.weight.into_data(), g.bias.unwrap()]
    }
}

/// Batch normalization in either mode.
pub struct BatchNormCheck {
    x: Tensor<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    mode: Mode,
    r: Tensor<f64>,
}

impl BatchNormCheck {
    pub fn new(input: Shape, mode: Mode, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let x = random_tensor(input, &mut rng);
        let c = input.c;
        BatchNormCheck {
            x,
            gamma: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            running_mean: (0..c).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            running_var: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
            mode,
            r: random_tensor(input, &mut rng),
        }
    }

    fn run(&self) -> (Tensor<f64>, ops::BnCache<f64>) {
        let (mut rm, mut rv) = (self.running_mean.clone(), self.running_var.clone());
        ops::batch_norm(&self.x, &self.gamma, &self.beta, &mut rm, &mut rv, self.mode).unwrap()
    }
}

impl GradCheckable for BatchNormCheck {
    fn name(&self) -> String {
        format!("batch_norm {:?}", self.mode).to_lowercase()
    }
    fn tensor_names(&self) -> Vec<String> {
        vec!["input".into(), "gamma".into(), "beta".into()]
    }
    fn tensor_len(&self, t: usize) -> usize {
        [self.x.len(), self.gamma.len(), self.beta.len()][t]
    }
    fn add_to(&mut self, t: usize, i: usize, d: f64) {
        match t {
            0 => self.x.data_mut()[i] += d,
            1 => self.gamma[i] += d,
            _ => self.beta[i] += d,
        }
    }
    fn loss(&mut self) -> f64 {
        project(&self.run().0, &self.r)
    }
    fn analytic(&mut self) -> Vec<Vec<f64>> {
        let (_, cache) = self.run();
        let g = ops::batch_norm_backward(&cache, &self.gamma, &self.r).unwrap();
        vec![g.input.into_data(), g.gamma, g.beta]
    }
}

pub struct ReluCheck {
    x: Tensor<f64>,
    r: Tensor<f64>,
    last: Tensor<f64>,
}

impl ReluCheck {
    pub fn new(input: Shape, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        ReluCheck {
            x: signed_away_from_zero(input, &mut rng),
            r: random_tensor(input, &mut rng),
            last: Tensor::zeros(input),
        }
    }
}

impl GradCheckable for ReluCheck {
    fn name(&self) -> String {
        "relu".into()
    }
    fn tensor_names(&self) -> Vec<String> {
        vec!["input".into()]
    }
    fn tensor_len(&self, _: usize) -> usize {
        self.x.len()
    }
    fn add_to(&mut self, _: usize, i: usize, d: f64) {
        self.x.data_mut()[i] += d;
    }
    fn loss(&mut self) -> f64 {
        self.last = ops::relu(&self.x);
        project(&self.last, &self.r)
    }
    fn analytic(&mut self) -> Vec<Vec<f64>> {
        let y = ops::relu(&self.x);
        vec![ops::relu_backward(&y, &self.r).unwrap().into_data()]
    }
    fn kink_signature(&self) -> u64 {
        mask_hash([&self.last])
    }
}

pub struct MaxPoolCheck {
    x: Tensor<f64>,
    r: Tensor<f64>,
    argmax: Vec<usize>,
}

impl MaxPoolCheck {
    pub fn new(input: Shape, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        // distinct values at least 0.05 apart
        let mut values: Vec<f64> = (0..input.numel()).map(|i| i as f64 * 0.05 - 1.0).collect();
        values.shuffle(&mut rng);
        let x = Tensor::from_vec(input, values).unwrap();
        let out = Shape::new(input.n, input.c, input.h / 2, input.w / 2);
        MaxPoolCheck {
            x,
            r: random_tensor(out, &mut rng),
            argmax: Vec::new(),
        }
    }
}

impl GradCheckable for MaxPoolCheck {
    fn name(&self) -> String {
        "max_pool2x2".into()
    }
    fn tensor_names(&self) -> Vec<String> {
        vec!["input".into()]
    }
    fn tensor_len(&self, _: usize) -> usize {
        self.x.len()
    }
    fn add_to(&mut self, _: usize, i: usize, d: f64) {
        self.x.data_mut()[i] += d;
    }
    fn loss(&mut self) -> f64 {
        let p = ops::max_pool2x2(&self.x).unwrap();
        self.argmax = p.argmax;
        project(&p.output, &self.r)
    }
    fn analytic(&mut self) -> Vec<Vec<f64>> {
        let p = ops::max_pool2x2(&self.x).unwrap();
        vec![ops::max_pool2x2_backward(self.x.shape(), &p.argmax, &self.r).unwrap().into_data()]
    }
    fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.argmax.hash(&mut h);
        h.finish()
    }
}

pub struct GapCheck {
    x: Tensor<f64>,
    r: Tensor<f64>,
}

impl GapCheck {
    pub fn new(input: Shape, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        GapCheck {
            x: random_tensor(input, &mut rng),
            r: random_tensor(Shape::new(input.n, input.c, 1, 1), &mut rng),
        }
    }
}

impl GradCheckable for GapCheck {
    fn name(&self) -> String {
        "global_avg_pool".into()
    }
    fn tensor_names(&self) -> Vec<String> {
        vec!["input".into()]
    }
    fn tensor_len(&self, _: usize) -> usize {
        self.x.len()
    }
    fn add_to(&mut self, _: usize, i: usize, d: f64) {
        self.x.data_mut()[i] += d;
    }
    fn loss(&mut self) -> f64 {
        project(&ops::global_avg_pool(&self.x), &self.r)
    }
    fn analytic(&mut self) -> Vec<Vec<f64>> {
        vec![ops::global_avg_pool_backward(self.x.shape(), &self.r).unwrap().into_data()]
    }
}

pub struct LinearCheck {
    x: Tensor<f64>,
    params: LinearParams<f64>,
    r: Tensor<f64>,
}

impl LinearCheck {
    pub fn new(batch: usize, in_features: usize, out_features: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        LinearCheck {
            x: random_tensor(Shape::new(batch, in_features, 1, 1), &mut rng),
            params: LinearParams {
                weight: random_tensor(Shape::new(out_features, in_features, 1, 1), &mut rng),
                bias: random_tensor(Shape::new(out_features, 1, 1, 1), &mut rng),
            },
            r: random_tensor(Shape::new(batch, out_features, 1, 1), &mut rng),
        }
    }
}

impl GradCheckable for LinearCheck {
    fn name(&self) -> String {
        "fully_connected".into()
    }
    fn tensor_names(&self) -> Vec<String> {
        vec!["input".into(), "weight".into(), "bias".into()]
    }
    fn tensor_len(&self, t: usize) -> usize {
        [self.x.len(), self.params.weight.len(), self.params.bias.len()][t]
    }
    fn add_to(&mut self, t: usize, i: usize, d: f64) {
        match t {
            0 => self.x.data_mut()[i] += d,
            1 => self.params.weight.data_mut()[i] += d,
            _ => self.params.bias.data_mut()[i] += d,
        }
    }
    fn loss(&mut self) -> f64 {
        project(&ops::fully_connected(&self.x, &self.params).unwrap(), &self.r)
    }
    fn analytic(&mut self) -> Vec<Vec<f64>> {
        let g = ops::fully_connected_backward(&self.x, &self.params, &self.r).unwrap();
        vec![g.input.into_data(), g.weight.into_data(), g.bias]
    }
}

pub struct SoftmaxCrossEntropyCheck {
    logits: Tensor<f64>,
    labels: Vec<usize>,
}

impl SoftmaxCrossEntropyCheck {
    pub fn new(batch: usize, classes: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        SoftmaxCrossEntropyCheck {
            logits: Tensor::from_fn(Shape::new(batch, classes, 1, 1), |_, _, _, _| rng.gen_range(-3.0..3.0)),
            labels: (0..batch).map(|_| rng.gen_range(0..classes)).collect(),
        }
    }
}

impl GradCheckable for SoftmaxCrossEntropyCheck {
    fn name(&self) -> String {
        "softmax_cross_entropy".into()
    }
    fn tensor_names(&self) -> Vec<String> {
        vec!["logits".into()]
    }
    fn tensor_len(&self, _: usize) -> usize {
        self.logits.len()
    }
    fn add_to(&mut self, _: usize, i: usize, d: f64) {
        self.logits.data_mut()[i] += d;
    }
    fn loss(&mut self) -> f64 {
        ops::softmax_cross_entropy(&self.logits, &self.labels).unwrap().0
    }
    fn analytic(&mut self) -> Vec<Vec<f64>> {
        vec![ops::softmax_cross_entropy(&self.logits, &self.labels).unwrap().1.into_data()]
    }
}

/// A full residual block in train mode, checked against its input and every weight.
pub struct BlockCheck {
    block: ResidualBlock<f64>,
    x: Tensor<f64>,
    r: Tensor<f64>,
    names: Vec<String>,
    last_sig: u64,
}

impl BlockCheck {
    pub fn new(spec: BlockSpec, input: Shape, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut block = ResidualBlock::new("block", spec, seed).expect("valid block spec");
        // randomize every weight (including the zero-initialized last gamma)
        block.visit_mut(&mut |p| {
            if p.kind == ParamKind::Weight {
                let is_gamma = p.name.ends_with(".weight") && p.tensor.shape().c == 1 && p.name.contains(".bn");
                for v in p.tensor.data_mut() {
                    *v = if is_gamma { rng.gen_range(0.5..1.5) } else { rng.gen_range(-0.5..0.5) };
                }
            }
        });
        let x = random_tensor(input, &mut rng);
        let out = {
            let mut probe = block.clone();
            probe.forward(&x, Mode::Train).expect("valid block input").shape()
        };
        let mut names = vec!["input".to_string()];
        block.visit(&mut |p| {
            if p.kind == ParamKind::Weight {
                names.push(p.name.to_string());
            }
        });
        BlockCheck {
            block,
            x,
            r: random_tensor(out, &mut rng),
            names,
            last_sig: 0,
        }
    }

    fn with_weight(&mut self, t: usize, f: &mut dyn FnMut(&mut Tensor<f64>)) {
        let mut k = 0;
        self.block.visit_mut(&mut |p| {
            if p.kind == ParamKind::Weight {
                k += 1;
                if k == t {
                    f(p.tensor);
                }
            }
        });
    }
}

impl GradCheckable for BlockCheck {
    fn name(&self) -> String {
        format!("block {}", self.block.spec())
    }
    fn tensor_names(&self) -> Vec<String> {
        self.names.clone()
    }
    fn tensor_len(&self, t: usize) -> usize {
        if t == 0 {
            return self.x.len();
        }
        let mut len = 0;
        let mut k = 0;
        self.block.visit(&mut |p| {
            if p.kind == ParamKind::Weight {
                k += 1;
                if k == t {
                    len = p.tensor.len();
                }
            }
        });
        len
    }
    fn add_to(&mut self, t: usize, i: usize, d: f64) {
        if t == 0 {
            self.x.data_mut()[i] += d;
        } else {
            self.with_weight(t, &mut |w| w.data_mut()[i] += d);
        }
    }
    fn loss(&mut self) -> f64 {
        let y = self.block.forward(&self.x, Mode::Train).unwrap();
        self.last_sig = mask_hash(self.block.activations());
        project(&y, &self.r)
    }
    fn analytic(&mut self) -> Vec<Vec<f64>> {
        self.block.zero_grad();
        self.block.forward(&self.x, Mode::Train).unwrap();
        let dx = self.block.backward(&self.r, true).unwrap().unwrap();
        let mut out = vec![dx.into_data()];
        self.block.visit(&mut |p| {
            if p.kind == ParamKind::Weight {
                out.push(p.tensor.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.len()]));
            }
        });
        out
    }
    fn kink_signature(&self) -> u64 {
        self.last_sig
    }
}

/// Checks every differentiable op and one Basic and one Bottleneck block.
pub fn standard_suite(probe_count: usize, h: f64, seed: u64) -> Vec<GradCheckReport> {
    let mut ops: Vec<Box<dyn GradCheckable>> = vec![
        Box::new(ConvCheck::new(ConvSpec::same(2, 3, 3, 1, 1), Shape::new(2, 2, 6, 6), seed)),
        Box::new(ConvCheck::new(ConvSpec::same(2, 3, 3, 1, 2), Shape::new(2, 2, 7, 7), seed + 1)),
        Box::new(ConvCheck::new(ConvSpec::same(2, 2, 3, 2, 1), Shape::new(1, 2, 8, 8), seed + 2)),
        Box::new(ConvCheck::new(ConvSpec::new(3, 4, 7, 2, 1, 3), Shape::new(1, 3, 10, 10), seed + 3)),
        Box::new(ConvCheck::new(ConvSpec::new(3, 4, 1, 2, 1, 0), Shape::new(2, 3, 6, 6), seed + 4)),
        Box::new(BatchNormCheck::new(Shape::new(4, 3, 3, 3), Mode::Train, seed + 5)),
        Box::new(BatchNormCheck::new(Shape::new(2, 3, 3, 3), Mode::Eval, seed + 6)),
        Box::new(ReluCheck::new(Shape::new(2, 3, 4, 4), seed + 7)),
        Box::new(MaxPoolCheck::new(Shape::new(2, 2, 6, 6), seed + 8)),
        Box::new(GapCheck::new(Shape::new(2, 3, 4, 5), seed + 9)),
        Box::new(LinearCheck::new(3, 5, 4, seed + 10)),
        Box::new(SoftmaxCrossEntropyCheck::new(4, 6, seed + 11)),
        Box::new(BlockCheck::new(BlockSpec::new(BlockKind::Basic, 4, 4, 1, 1), Shape::new(1, 4, 6, 6), seed + 12)),
        Box::new(BlockCheck::new(BlockSpec::new(BlockKind::Basic, 4, 8, 2, 1), Shape::new(2, 4, 6, 6), seed + 13)),
        Box::new(BlockCheck::new(BlockSpec::new(BlockKind::Basic, 4, 4, 1, 2), Shape::new(1, 4, 6, 6), seed + 14)),
        Box::new(BlockCheck::new(BlockSpec::new(BlockKind::Bottleneck, 4, 16, 1, 1), Shape::new(2, 4, 5, 5), seed + 15)),
        Box::new(BlockCheck::new(BlockSpec::new(BlockKind::Bottleneck, 8, 8, 1, 2), Shape::new(2, 8, 5, 5), seed + 16)),
    ];
    ops.iter_mut().map(|op| grad_check_seeded(op.as_mut(), probe_count, h, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_essentially_exact() {
        let mut op = LinearCheck::new(3, 5, 4, 1);
        let r = grad_check(&mut op, 20, 1e-3);
        assert!(r.max_rel_error <= 1e-7, "{r:?}");
    }

    #[test]
    fn dilated_conv_within_tolerance() {
        let mut op = ConvCheck::new(ConvSpec::same(1, 1, 3, 1, 2), Shape::new(1, 1, 5, 5), 2);
        let r = grad_check(&mut op, 25, 1e-3);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        assert_eq!(r.entries.len(), 3);
    }

    #[test]
    fn batch_norm_train_within_tolerance() {
        let mut op = BatchNormCheck::new(Shape::new(4, 3, 2, 2), Mode::Train, 3);
        let r = grad_check(&mut op, 30, 1e-3);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Broken(LinearCheck);
        impl GradCheckable for Broken {
            fn name(&self) -> String {
                "broken".into()
            }
            fn tensor_names(&self) -> Vec<String> {
                self.0.tensor_names()
            }
            fn tensor_len(&self, t: usize) -> usize {
                self.0.tensor_len(t)
            }
            fn add_to(&mut self, t: usize, i: usize, d: f64) {
                self.0.add_to(t, i, d)
            }
            fn loss(&mut self) -> f64 {
                self.0.loss()
            }
            fn analytic(&mut self) -> Vec<Vec<f64>> {
                let mut g = self.0.analytic();
                g[1].iter_mut().for_each(|v| *v *= 1.01);
                g
            }
        }
        let r = grad_check(&mut Broken(LinearCheck::new(2, 3, 2, 4)), 6, 1e-3);
        assert!(r.max_rel_error > 5e-3);
    }

    #[test]
    fn report_max_is_max_of_entries() {
        let mut op = ConvCheck::new(ConvSpec::same(2, 2, 3, 1, 1), Shape::new(1, 2, 4, 4), 5);
        let r = grad_check(&mut op, 10, 1e-3);
        let m = r.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
        assert_eq!(r.max_rel_error, m);
        assert!(r.entries.iter().all(|e| e.probes > 0));
    }
}
