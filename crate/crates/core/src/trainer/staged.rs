//! Three-phase transfer schedule: pretrain a standard single-pathway network,
//! learn the dilated pathway on top of the frozen trunk, then assemble both
//! pathways and fine-tune the later groups on the target task.

use super::{train, TrainConfig, TrainReport};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::network::{Checkpoint, Group, Network, NetworkConfig, Pathways};
use crate::seed;

#[derive(Clone, Debug)]
pub struct StagedConfig {
    /// Depth, width and input size; pathways and class counts are set per phase.
    pub network: NetworkConfig,
    pub seed: u64,
    pub pretrain: TrainConfig,
    /// Defaults to freezing conv1..conv4_x.
    pub pathway: TrainConfig,
    /// Defaults to freezing conv1..conv3_x, i.e. fine-tuning the groups after conv3_x.
    pub finetune: TrainConfig,
}

impl StagedConfig {
    pub fn new(network: NetworkConfig, seed: u64, base: TrainConfig) -> Self {
        StagedConfig {
            network,
            seed,
            pretrain: TrainConfig {
                freeze: Vec::new(),
                ..base.clone()
            },
            pathway: TrainConfig {
                freeze: vec![Group::Conv1, Group::Conv2, Group::Conv3, Group::Conv4],
                ..base.clone()
            },
            finetune: TrainConfig {
                freeze: vec![Group::Conv1, Group::Conv2, Group::Conv3],
                ..base
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhaseRecord {
    pub name: &'static str,
    pub frozen: Vec<Group>,
    /// State after initialization and transfer, before any update.
    pub before: Checkpoint,
    pub after: Checkpoint,
    pub report: TrainReport,
}

impl PhaseRecord {
    /// Names of tensors in frozen groups whose bits changed during the phase.
    pub fn frozen_changes(&self) -> Vec<String> {
        self.before
            .entries
            .iter()
            .filter(|(name, _)| Group::of_param(name).is_some_and(|g| self.frozen.contains(&g)))
            .filter(|(name, t)| self.after.get(name).is_none_or(|a| a.data() != t.data()))
            .map(|(name, _)| name.clone())
            .collect()
    }
}

pub struct StagedOutcome {
    pub phases: Vec<PhaseRecord>,
    pub network: Network<f32>,
}

fn run_phase(name: &'static str, net: &mut Network<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<PhaseRecord> {
    net.set_freeze(&cfg.freeze)?;
    let before = net.to_checkpoint(0);
    let report = train(net, data, cfg)?;
    Ok(PhaseRecord {
        name,
        frozen: cfg.freeze.clone(),
        before,
        after: net.to_checkpoint(cfg.epochs),
        report,
    })
}

pub fn staged_training(cfg: &StagedConfig, surrogate: &Dataset, target: &Dataset) -> Result<StagedOutcome> {
    let with = |pathways: Pathways, classes: usize| NetworkConfig {
        pathways,
        num_classes: classes,
        ..cfg.network.clone()
    };

    let mut single = Network::build(with(Pathways::Conv51Only, surrogate.num_classes()), seed::derive(cfg.seed, 1))?;
    let pretrain = run_phase("pretrain", &mut single, surrogate, &cfg.pretrain)?;

    let mut dilated = Network::build(with(Pathways::Conv52Only, surrogate.num_classes()), seed::derive(cfg.seed, 2))?;
    let mut trunk = pretrain.after.clone();
    trunk.retain_groups(&[Group::Conv1, Group::Conv2, Group::Conv3, Group::Conv4]);
    dilated.load_checkpoint(&trunk, false)?;
    let pathway = run_phase("pathway", &mut dilated, surrogate, &cfg.pathway)?;

    let mut both = Network::build(with(Pathways::Both, target.num_classes()), seed::derive(cfg.seed, 3))?;
    let mut first = pretrain.after.clone();
    first.retain_groups(&[Group::Conv1, Group::Conv2, Group::Conv3, Group::Conv4, Group::Conv5_1]);
    both.load_checkpoint(&first, false)?;
    let mut second = pathway.after.clone();
    second.retain_groups(&[Group::Conv5_2]);
    both.load_checkpoint(&second, false)?;
    let finetune = run_phase("finetune", &mut both, target, &cfg.finetune)?;

    Ok(StagedOutcome {
        phases: vec![pretrain, pathway, finetune],
        network: both,
    })
}
