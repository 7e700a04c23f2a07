//! Residual building blocks: `out = relu(F(x) + shortcut(x))`.
//!
//! The shortcut is the identity when input and output shapes agree and a
//! strided 1x1 convolution followed by batch norm otherwise. Dilation applies to
//! the 3x3 convolutions only; stride sits on the (first) 3x3 convolution.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, ParamMut, ParamRef, Parameterized};
use crate::ops::{self, ConvSpec, Mode};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand with the 3x3 at `out / 4` channels.
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Projection {
    Identity,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_planes: usize,
    pub out_planes: usize,
    pub stride: usize,
    pub dilation: usize,
    pub projection: Projection,
}

impl BlockSpec {
    /// Builds a spec with the projection implied by the shapes.
    pub fn new(kind: BlockKind, in_planes: usize, out_planes: usize, stride: usize, dilation: usize) -> Self {
        let projection = if in_planes != out_planes || stride != 1 {
            Projection::Linear
        } else {
            Projection::Identity
        };
        BlockSpec {
            kind,
            in_planes,
            out_planes,
            stride,
            dilation,
            projection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("block stride {} not in {{1,2}}", self.stride)));
        }
        if self.dilation == 0 {
            return Err(Error::Config("block dilation must be positive".into()));
        }
        let needs_linear = self.in_planes != self.out_planes || self.stride != 1;
        if needs_linear != (self.projection == Projection::Linear) {
            return Err(Error::Config(format!("projection {:?} inconsistent with {self}", self.projection)));
        }
        if self.kind == BlockKind::Bottleneck && self.out_planes % 4 != 0 {
            return Err(Error::Config(format!("bottleneck out planes {} not divisible by 4", self.out_planes)));
        }
        Ok(())
    }

    /// Width of the 3x3 convolution.
    pub fn mid_planes(&self) -> usize {
        match self.kind {
            BlockKind::Basic => self.out_planes,
            BlockKind::Bottleneck => self.out_planes / 4,
        }
    }

    /// Convolutions of the residual branch in order.
    pub fn residual_convs(&self) -> Vec<ConvSpec> {
        let (d, s, mid) = (self.dilation, self.stride, self.mid_planes());
        match self.kind {
            BlockKind::Basic => vec![
                ConvSpec::same(self.in_planes, self.out_planes, 3, s, d),
                ConvSpec::same(self.out_planes, self.out_planes, 3, 1, d),
            ],
            BlockKind::Bottleneck => vec![
                ConvSpec::same(self.in_planes, mid, 1, 1, 1),
                ConvSpec::same(mid, mid, 3, s, d),
                ConvSpec::same(mid, self.out_planes, 1, 1, 1),
            ],
        }
    }

    pub fn shortcut_conv(&self) -> Option<ConvSpec> {
        (self.projection == Projection::Linear).then(|| ConvSpec::new(self.in_planes, self.out_planes, 1, self.stride, 1, 0))
    }

    /// Trainable scalar count: conv weights plus two per batch-norm channel.
    pub fn param_count(&self) -> usize {
        let bn = |c: usize| 2 * c;
        let branch: usize = self
            .residual_convs()
            .iter()
            .map(|c| c.weight_count() + bn(c.out_channels))
            .sum();
        let shortcut = self.shortcut_conv().map_or(0, |c| c.weight_count() + bn(c.out_channels));
        branch + shortcut
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            BlockKind::Basic => "Basic",
            BlockKind::Bottleneck => "Bottleneck",
        };
        write!(f, "{kind}({},{}) s={} d={}", self.in_planes, self.out_planes, self.stride, self.dilation)
    }
}

/// A residual block with its layers and forward caches.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Element = f32> {
    spec: BlockSpec,
    pub convs: Vec<Conv2d<T>>,
    pub bns: Vec<BatchNorm2d<T>>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    /// ReLU outputs inside the branch, then the block output.
    acts: Vec<Tensor<T>>,
}

impl<T: Element> ResidualBlock<T> {
    /// Layers are named `<prefix>.conv{i}`, `<prefix>.bn{i}` and
    /// `<prefix>.downsample.{conv,bn}`. The last batch norm of the branch starts
    /// with `gamma = 0` so a fresh block computes `relu(shortcut(x))`.
    pub fn new(prefix: &str, spec: BlockSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let convs_spec = spec.residual_convs();
        let last = convs_spec.len() - 1;
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for (i, cs) in convs_spec.iter().enumerate() {
            convs.push(Conv2d::new(&format!("{prefix}.conv{}", i + 1), *cs, seed));
            let gamma = if i == last { T::zero() } else { T::one() };
            bns.push(BatchNorm2d::new(&format!("{prefix}.bn{}", i + 1), cs.out_channels, gamma));
        }
        let shortcut = spec.shortcut_conv().map(|cs| {
            (
                Conv2d::new(&format!("{prefix}.downsample.conv"), cs, seed),
                BatchNorm2d::new(&format!("{prefix}.downsample.bn"), cs.out_channels, T::one()),
            )
        });
        Ok(ResidualBlock {
            spec,
            convs,
            bns,
            shortcut,
            acts: Vec::new(),
        })
    }

    pub fn spec(&self) -> BlockSpec {
        self.spec
    }

    /// ReLU outputs recorded by the last forward pass, ending with the block output.
    pub fn activations(&self) -> &[Tensor<T>] {
        &self.acts
    }

    /// The residual branch `F(x)` (before the addition).
    pub fn residual_branch(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.acts.clear();
        let last = self.convs.len() - 1;
        let mut h = x.clone();
        for i in 0..=last {
            h = self.convs[i].forward(&h)?;
            h = self.bns[i].forward(&h, mode)?;
            if i < last {
                h = ops::relu(&h);
                self.acts.push(h.clone());
            }
        }
        Ok(h)
    }

    pub fn shortcut_path(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match &mut self.shortcut {
            None => Ok(x.clone()),
            Some((conv, bn)) => {
                let h = conv.forward(x)?;
                bn.forward(&h, mode)
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape().c != self.spec.in_planes {
            return Err(Error::dim(format!("block {}", self.spec), "c", self.spec.in_planes, x.shape().c));
        }
        let f = self.residual_branch(x, mode)?;
        let s = self.shortcut_path(x, mode)?;
        let out = ops::relu(&f.add(&s)?);
        self.acts.push(out.clone());
        Ok(out)
    }

    /// Backpropagates through both branches, accumulating parameter gradients.
    /// Returns the input gradient when `need_input` is set.
    pub fn backward(&mut self, upstream: &Tensor<T>, need_input: bool) -> Result<Option<Tensor<T>>> {
        let out = self.acts.last().expect("ResidualBlock::backward called before forward");
        let d_out = ops::relu_backward(out, upstream)?;

        let last = self.convs.len() - 1;
        let mut d = d_out.clone();
        let mut d_branch = None;
        for i in (0..=last).rev() {
            d = self.bns[i].backward(&d)?;
            let need = i > 0 || need_input;
            match self.convs[i].backward(&d, need)? {
                Some(dx) if i > 0 => d = ops::relu_backward(&self.acts[i - 1], &dx)?,
                Some(dx) => d_branch = Some(dx),
                None => {}
            }
        }

        let d_short = match &mut self.shortcut {
            None => need_input.then_some(d_out),
            Some((conv, bn)) => {
                let ds = bn.backward(&d_out)?;
                conv.backward(&ds, need_input)?
            }
        };

        match (d_branch, d_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b)?;
                Ok(Some(a))
            }
            _ => Ok(None),
        }
    }
}

impl<T: Element> Parameterized<T> for ResidualBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamRef<'_, T>)) {
        for (c, b) in self.convs.iter().zip(&self.bns) {
            c.visit(f);
            b.visit(f);
        }
        if let Some((c, b)) = &self.shortcut {
            c.visit(f);
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        for (c, b) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            c.visit_mut(f);
            b.visit_mut(f);
        }
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.convs.iter_mut().for_each(|c| c.set_frozen(frozen));
        self.bns.iter_mut().for_each(|b| b.set_frozen(frozen));
        if let Some((c, b)) = &mut self.shortcut {
            c.set_frozen(frozen);
            b.set_frozen(frozen);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamKind;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(block: &mut ResidualBlock<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        block.visit_mut(&mut |p| {
            if p.kind == ParamKind::Weight {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        });
    }

    fn random_input(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn projection_iff_shape_changes() {
        assert_eq!(BlockSpec::new(BlockKind::Basic, 64, 64, 1, 1).projection, Projection::Identity);
        assert_eq!(BlockSpec::new(BlockKind::Basic, 64, 128, 2, 1).projection, Projection::Linear);
        assert_eq!(BlockSpec::new(BlockKind::Basic, 64, 64, 2, 1).projection, Projection::Linear);
        assert_eq!(BlockSpec::new(BlockKind::Bottleneck, 64, 256, 1, 1).projection, Projection::Linear);
        let mut bad = BlockSpec::new(BlockKind::Basic, 64, 64, 1, 1);
        bad.projection = Projection::Linear;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_residual_weights_give_relu_of_input() {
        let spec = BlockSpec::new(BlockKind::Basic, 3, 3, 1, 1);
        let mut b = ResidualBlock::<f64>::new("b", spec, 0).unwrap();
        b.visit_mut(&mut |p| {
            if p.name.contains(".conv") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let x = random_input(Shape::new(2, 3, 4, 4), 1);
        let y = b.forward(&x, Mode::Train).unwrap();
        assert_eq!(y, ops::relu(&x));
    }

    #[test]
    fn bottleneck_64_256_keeps_56() {
        let spec = BlockSpec::new(BlockKind::Bottleneck, 64, 256, 1, 1);
        let mut b = ResidualBlock::<f32>::new("b", spec, 0).unwrap();
        let y = b.forward(&Tensor::full(Shape::new(1, 64, 56, 56), 0.1), Mode::Eval).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 256, 56, 56));
    }

    #[test]
    fn forward_equals_hand_composed_ops() {
        let spec = BlockSpec::new(BlockKind::Basic, 64, 64, 1, 1);
        let mut b = ResidualBlock::<f64>::new("b", spec, 3).unwrap();
        randomize(&mut b, 4);
        let x = random_input(Shape::new(1, 64, 8, 8), 5);
        let reference = {
            let bn = |x: &Tensor<f64>, layer: &crate::layers::BatchNorm2d<f64>| {
                let (mut rm, mut rv) = (layer.running_mean.data().to_vec(), layer.running_var.data().to_vec());
                ops::batch_norm(x, layer.gamma.data(), layer.beta.data(), &mut rm, &mut rv, Mode::Train).unwrap().0
            };
            let h = ops::relu(&bn(&ops::conv2d_direct(&x, &b.convs[0].params).unwrap(), &b.bns[0]));
            let h = bn(&ops::conv2d_direct(&h, &b.convs[1].params).unwrap(), &b.bns[1]);
            ops::relu(&h.add(&x).unwrap())
        };
        let y = b.forward(&x, Mode::Train).unwrap();
        for (a, r) in y.data().iter().zip(reference.data()) {
            assert!((a - r).abs() <= 1e-9 * r.abs().max(1.0));
        }
    }

    #[test]
    fn identity_block_residual_identity_is_exact() {
        let spec = BlockSpec::new(BlockKind::Basic, 4, 4, 1, 1);
        let mut b = ResidualBlock::<f64>::new("b", spec, 1).unwrap();
        randomize(&mut b, 2);
        let x = random_input(Shape::new(2, 4, 5, 5), 3);
        let y = b.forward(&x, Mode::Eval).unwrap();
        let f = b.residual_branch(&x, Mode::Eval).unwrap();
        let expected = ops::relu(&f.add(&x).unwrap());
        assert_eq!(y, expected);
    }

    #[test]
    fn center_tap_kernels_make_dilation_irrelevant() {
        let s1 = BlockSpec::new(BlockKind::Basic, 4, 4, 1, 1);
        let s2 = BlockSpec::new(BlockKind::Basic, 4, 4, 1, 2);
        let mut b1 = ResidualBlock::<f64>::new("b", s1, 0).unwrap();
        randomize(&mut b1, 8);
        b1.visit_mut(&mut |p| {
            if p.name.contains(".conv") {
                let s = p.tensor.shape();
                for o in 0..s.n {
                    for c in 0..s.c {
                        for h in 0..3 {
                            for w in 0..3 {
                                if (h, w) != (1, 1) {
                                    p.tensor.set(o, c, h, w, 0.0);
                                }
                            }
                        }
                    }
                }
            }
        });
        let mut b2 = ResidualBlock::<f64>::new("b", s2, 0).unwrap();
        let mut weights = Vec::new();
        b1.visit(&mut |p| weights.push(p.tensor.clone()));
        let mut it = weights.into_iter();
        b2.visit_mut(&mut |p| *p.tensor = it.next().unwrap());
        let x = random_input(Shape::new(1, 4, 7, 7), 9);
        let y1 = b1.forward(&x, Mode::Train).unwrap();
        let y2 = b2.forward(&x, Mode::Train).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12).max(b.abs()));
        }
    }

    #[test]
    fn identity_zero_residual_gradient_passes_through() {
        let spec = BlockSpec::new(BlockKind::Basic, 2, 2, 1, 1);
        let mut b = ResidualBlock::<f64>::new("b", spec, 0).unwrap();
        b.visit_mut(&mut |p| {
            if p.name.contains(".conv") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, h, w| 0.5 + (c + h + w) as f64);
        b.forward(&x, Mode::Train).unwrap();
        let up = random_input(x.shape(), 4);
        let dx = b.backward(&up, true).unwrap().unwrap();
        assert_eq!(dx, up);
    }

    #[test]
    fn stride_two_projection_grad_shapes() {
        let spec = BlockSpec::new(BlockKind::Basic, 3, 6, 2, 1);
        let mut b = ResidualBlock::<f64>::new("b", spec, 0).unwrap();
        let x = random_input(Shape::new(2, 3, 6, 6), 1);
        let y = b.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 6, 3, 3));
        let dx = b.backward(&Tensor::full(y.shape(), 1.0), true).unwrap().unwrap();
        assert_eq!(dx.shape(), x.shape());
        b.visit(&mut |p| {
            if p.kind == ParamKind::Weight {
                assert_eq!(p.tensor.grad().map(|g| g.len()), Some(p.tensor.len()), "{}", p.name);
            }
        });
    }

    #[test]
    fn param_count_matches_built_block() {
        for spec in [
            BlockSpec::new(BlockKind::Basic, 64, 64, 1, 1),
            BlockSpec::new(BlockKind::Basic, 64, 128, 2, 1),
            BlockSpec::new(BlockKind::Basic, 256, 512, 1, 2),
            BlockSpec::new(BlockKind::Bottleneck, 64, 256, 1, 1),
            BlockSpec::new(BlockKind::Bottleneck, 256, 512, 2, 1),
        ] {
            let b = ResidualBlock::<f32>::new("b", spec, 0).unwrap();
            assert_eq!(b.weight_count(), spec.param_count(), "{spec}");
        }
        // Basic(IN,OUT) = 9*IN*OUT + 9*OUT*OUT + 2*(2*OUT) [+ IN*OUT + 2*OUT]
        let (i, o) = (64usize, 128usize);
        let analytic = 9 * i * o + 9 * o * o + 4 * o + i * o + 2 * o;
        assert_eq!(BlockSpec::new(BlockKind::Basic, i, o, 2, 1).param_count(), analytic);
        assert_eq!(BlockSpec::new(BlockKind::Basic, o, o, 1, 1).param_count(), 18 * o * o + 4 * o);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut b = ResidualBlock::<f32>::new("b", BlockSpec::new(BlockKind::Basic, 4, 4, 1, 1), 0).unwrap();
        let err = b.forward(&Tensor::zeros(Shape::new(1, 3, 4, 4)), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "c", .. }));
    }
}
