//! The two-pathway residual network: a shared stem and trunk (conv1..conv4_x)
//! feeding a strided pathway (conv5_1_x) and a dilated one (conv5_2_x), whose
//! pooled outputs are concatenated into one representation for a single FC head.

mod checkpoint;
mod config;
mod inspect;

use std::collections::BTreeSet;

pub use checkpoint::{Checkpoint, LoadSummary, CHECKPOINT_VERSION};
pub use config::{parse_groups, Depth, Group, GroupPlan, NetworkConfig, Pathways, MIN_INPUT};
pub use inspect::{inspect, receptive_field, ArchitectureReport, GroupRow};

use crate::blocks::ResidualBlock;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Linear, ParamMut, ParamRef, Parameterized};
use crate::ops::{self, Mode};
use crate::tensor::{Element, Shape, Tensor};

/// Concatenated global-average-pooled pathway outputs, `(n, D, 1, 1)`.
#[derive(Clone, Debug)]
pub struct Representation<T: Element = f32> {
    pub features: Tensor<T>,
    /// Index where the second pathway starts (equals the first pathway's width).
    pub boundary: usize,
}

#[derive(Clone, Debug)]
struct Stage<T: Element> {
    group: Group,
    blocks: Vec<ResidualBlock<T>>,
}

#[derive(Clone, Debug, Default)]
struct StemCache<T: Element> {
    relu_out: Option<Tensor<T>>,
    argmax: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Element = f32> {
    config: NetworkConfig,
    seed: u64,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    trunk: Vec<Stage<T>>,
    pathways: Vec<Stage<T>>,
    fc: Linear<T>,
    frozen: BTreeSet<Group>,
    stem_cache: StemCache<T>,
    pathway_shapes: Vec<Shape>,
}

impl<T: Element> Network<T> {
    /// Builds a freshly initialized network. Each parameter's initial value
    /// depends only on `seed` and its name.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stem = config.stem_spec();
        let stage = |plan: GroupPlan| -> Result<Stage<T>> {
            let blocks = plan
                .blocks
                .iter()
                .enumerate()
                .map(|(i, spec)| ResidualBlock::new(&format!("{}.{i}", plan.group.prefix()), *spec, seed))
                .collect::<Result<_>>()?;
            Ok(Stage {
                group: plan.group,
                blocks,
            })
        };
        let trunk = config.trunk_plan().into_iter().map(stage).collect::<Result<_>>()?;
        let pathways = config.pathway_plan().into_iter().map(stage).collect::<Result<_>>()?;
        let fc = Linear::new(config.fc_prefix(), config.representation_len(), config.num_classes, seed);
        Ok(Network {
            stem_conv: Conv2d::new("conv1.conv", stem, seed),
            stem_bn: BatchNorm2d::new("conv1.bn", stem.out_channels, T::one()),
            config,
            seed,
            trunk,
            pathways,
            fc,
            frozen: BTreeSet::new(),
            stem_cache: StemCache::default(),
            pathway_shapes: Vec::new(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let (h, w) = self.config.input_size;
        Shape::new(batch, 3, h, w)
    }

    /// Freezes exactly `groups` (previous freezes are cleared). Frozen groups
    /// keep their parameters and batch-norm statistics fixed during training.
    pub fn set_freeze(&mut self, groups: &[Group]) -> Result<()> {
        if let Some(g) = groups.iter().find(|g| !self.config.has_group(**g)) {
            return Err(Error::Config(format!("group {g} is not part of a network with pathways={}", self.config.pathways)));
        }
        self.frozen = groups.iter().copied().collect();
        let frozen = self.frozen.clone();
        let is = |g: Group| frozen.contains(&g);
        self.stem_conv.set_frozen(is(Group::Conv1));
        self.stem_bn.set_frozen(is(Group::Conv1));
        for stage in self.trunk.iter_mut().chain(self.pathways.iter_mut()) {
            let f = is(stage.group);
            stage.blocks.iter_mut().for_each(|b| b.set_frozen(f));
        }
        self.fc.set_frozen(is(Group::Fc));
        Ok(())
    }

    pub fn frozen_groups(&self) -> Vec<Group> {
        self.frozen.iter().copied().collect()
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    /// Groups present in this network, in forward order.
    pub fn groups(&self) -> Vec<Group> {
        Group::ALL.into_iter().filter(|g| self.config.has_group(*g)).collect()
    }

    /// Pooled representation of a batch, stopping before the FC head.
    pub fn forward_features(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Representation<T>> {
        let s = x.shape();
        let (h, w) = self.config.input_size;
        if s.c != 3 {
            return Err(Error::dim("network input", "c", 3, s.c));
        }
        if s.h != h {
            return Err(Error::dim("network input", "h", h, s.h));
        }
        if s.w != w {
            return Err(Error::dim("network input", "w", w, s.w));
        }

        let y = self.stem_conv.forward(x)?;
        let y = ops::relu(&self.stem_bn.forward(&y, mode)?);
        let pooled = ops::max_pool2x2(&y)?;
        self.stem_cache = StemCache {
            relu_out: Some(y),
            argmax: pooled.argmax,
        };

        let mut h = pooled.output;
        for stage in &mut self.trunk {
            for block in &mut stage.blocks {
                h = block.forward(&h, mode)?;
            }
        }

        let mut pooled = Vec::with_capacity(self.pathways.len());
        self.pathway_shapes.clear();
        for stage in &mut self.pathways {
            let mut p = h.clone();
            for block in &mut stage.blocks {
                p = block.forward(&p, mode)?;
            }
            self.pathway_shapes.push(p.shape());
            pooled.push(ops::global_avg_pool(&p));
        }
        let refs: Vec<&Tensor<T>> = pooled.iter().collect();
        Ok(Representation {
            features: Tensor::concat_channels(&refs)?,
            boundary: self.config.pathway_boundary(),
        })
    }

    /// Logits `(n, classes, 1, 1)`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let rep = self.forward_features(x, mode)?;
        self.fc.forward(&rep.features)
    }

    /// Inference-mode representation (batch norm uses running statistics).
    pub fn extract_representation(&mut self, x: &Tensor<T>) -> Result<Representation<T>> {
        self.forward_features(x, Mode::Eval)
    }

    /// Backpropagates logit gradients from the last `forward`, accumulating
    /// gradients of all unfrozen parameters. Stops at the earliest trainable group.
    pub fn backward(&mut self, d_logits: &Tensor<T>) -> Result<()> {
        let earliest = Group::ALL
            .into_iter()
            .filter(|g| self.config.has_group(*g) && !self.frozen.contains(g))
            .map(Group::stage)
            .min();
        let Some(earliest) = earliest else {
            return Ok(());
        };
        let d_feat = self.fc.backward(d_logits)?;
        if earliest == Group::Fc.stage() {
            return Ok(());
        }

        let widths: Vec<usize> = self.pathway_shapes.iter().map(|s| s.c).collect();
        let parts = d_feat.split_channels(&widths)?;
        let trunk_needed = earliest < Group::Conv5_1.stage();
        let mut d_trunk: Option<Tensor<T>> = None;
        for ((stage, part), shape) in self.pathways.iter_mut().zip(parts).zip(&self.pathway_shapes) {
            if !trunk_needed && self.frozen.contains(&stage.group) {
                continue;
            }
            let d = ops::global_avg_pool_backward(*shape, &part)?;
            if let Some(dx) = backward_stage(stage, d, trunk_needed)? {
                match &mut d_trunk {
                    Some(acc) => acc.add_assign(&dx)?,
                    None => d_trunk = Some(dx),
                }
            }
        }

        let mut d = match d_trunk {
            Some(d) => d,
            None => return Ok(()),
        };
        for stage in self.trunk.iter_mut().rev() {
            let need = earliest < stage.group.stage();
            match backward_stage(stage, d, need)? {
                Some(dx) => d = dx,
                None => return Ok(()),
            }
        }

        let relu_out = self.stem_cache.relu_out.as_ref().expect("Network::backward called before forward");
        let d = ops::max_pool2x2_backward(relu_out.shape(), &self.stem_cache.argmax, &d)?;
        let d = ops::relu_backward(relu_out, &d)?;
        let d = self.stem_bn.backward(&d)?;
        self.stem_conv.backward(&d, false)?;
        Ok(())
    }

    /// Names of every stored tensor (weights and buffers), in visit order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.to_string()));
        names
    }
}

fn backward_stage<T: Element>(stage: &mut Stage<T>, upstream: Tensor<T>, need_input: bool) -> Result<Option<Tensor<T>>> {
    let mut d = upstream;
    for (i, block) in stage.blocks.iter_mut().enumerate().rev() {
        match block.backward(&d, i > 0 || need_input)? {
            Some(dx) => d = dx,
            None => return Ok(None),
        }
    }
    Ok(Some(d))
}

impl<T: Element> Parameterized<T> for Network<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamRef<'_, T>)) {
        self.stem_conv.visit(f);
        self.stem_bn.visit(f);
        for stage in self.trunk.iter().chain(&self.pathways) {
            stage.blocks.iter().for_each(|b| b.visit(f));
        }
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.stem_conv.visit_mut(f);
        self.stem_bn.visit_mut(f);
        for stage in self.trunk.iter_mut().chain(self.pathways.iter_mut()) {
            stage.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        }
        self.fc.visit_mut(f);
    }

    fn set_frozen(&mut self, frozen: bool) {
        let groups = if frozen { self.groups() } else { Vec::new() };
        self.set_freeze(&groups).expect("groups of this network");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamKind;
    use rand::Rng;

    fn small(pathways: Pathways) -> NetworkConfig {
        NetworkConfig::new(Depth::D18, 3).with_input(64).with_width(0.125).with_pathways(pathways)
    }

    fn random_input(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = crate::seed::rng(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn representation_lengths() {
        let mut net = Network::<f32>::build(small(Pathways::Both), 1).unwrap();
        let x = random_input(net.input_shape(2), 2);
        let rep = net.extract_representation(&x).unwrap();
        assert_eq!(rep.features.shape(), Shape::new(2, 128, 1, 1));
        assert_eq!(rep.boundary, 64);
        let logits = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), Shape::new(2, 3, 1, 1));
    }

    #[test]
    fn wrong_input_size_is_dimension_error() {
        let mut net = Network::<f32>::build(small(Pathways::Both), 1).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 64, 96));
        match net.forward(&x, Mode::Eval) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let mut net = Network::<f32>::build(small(Pathways::Both), 4).unwrap();
        let x = random_input(net.input_shape(2), 5);
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut net = Network::<f32>::build(small(Pathways::Both), 4).unwrap();
        net.set_freeze(&[Group::Conv1, Group::Conv2, Group::Conv3]).unwrap();
        let x = random_input(net.input_shape(2), 5);
        let logits = net.forward(&x, Mode::Train).unwrap();
        let (_, d) = ops::softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        net.backward(&d).unwrap();
        net.visit(&mut |p| {
            if p.kind != ParamKind::Weight {
                return;
            }
            let g = Group::of_param(p.name).unwrap();
            let has_grad = p.tensor.grad().is_some();
            assert_eq!(has_grad, g >= Group::Conv4, "{}", p.name);
        });
    }

    #[test]
    fn unknown_freeze_group_is_config_error() {
        let mut net = Network::<f32>::build(small(Pathways::Conv51Only), 4).unwrap();
        assert!(matches!(net.set_freeze(&[Group::Conv5_2]), Err(Error::Config(_))));
    }

    #[test]
    fn fc_head_name_depends_on_pathways() {
        let both = Network::<f32>::build(small(Pathways::Both), 0).unwrap();
        let single = Network::<f32>::build(small(Pathways::Conv51Only), 0).unwrap();
        assert!(both.param_names().iter().any(|n| n == "fc_tp.weight"));
        assert!(single.param_names().iter().any(|n| n == "fc.weight"));
    }

    #[test]
    fn shared_parameters_have_identical_initialization() {
        let both = Network::<f32>::build(small(Pathways::Both), 9).unwrap();
        let single = Network::<f32>::build(small(Pathways::Conv51Only), 9).unwrap();
        let mut a = std::collections::HashMap::new();
        single.visit(&mut |p| {
            a.insert(p.name.to_string(), p.tensor.data().to_vec());
        });
        let mut shared = 0;
        both.visit(&mut |p| {
            if let Some(v) = a.get(p.name) {
                assert_eq!(v.as_slice(), p.tensor.data(), "{}", p.name);
                shared += 1;
            }
        });
        assert_eq!(shared, a.len() - 2);
    }
}
