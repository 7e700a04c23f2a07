use std::fmt;
use std::str::FromStr;

use crate::blocks::{BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Depth {
    D18,
    D34,
    D50,
    D101,
}

impl Depth {
    pub const ALL: [Depth; 4] = [Depth::D18, Depth::D34, Depth::D50, Depth::D101];

    pub fn from_layers(layers: u32) -> Result<Self> {
        match layers {
            18 => Ok(Depth::D18),
            34 => Ok(Depth::D34),
            50 => Ok(Depth::D50),
            101 => Ok(Depth::D101),
            other => Err(Error::Config(format!("unsupported depth {other} (expected 18, 34, 50 or 101)"))),
        }
    }

    pub fn layers(self) -> u32 {
        match self {
            Depth::D18 => 18,
            Depth::D34 => 34,
            Depth::D50 => 50,
            Depth::D101 => 101,
        }
    }

    /// Blocks in conv2_x, conv3_x, conv4_x and each conv5 pathway.
    pub fn block_counts(self) -> [usize; 4] {
        match self {
            Depth::D18 => [2, 2, 2, 2],
            Depth::D34 | Depth::D50 => [3, 4, 6, 3],
            Depth::D101 => [3, 4, 23, 3],
        }
    }

    pub fn block_kind(self) -> BlockKind {
        match self {
            Depth::D18 | Depth::D34 => BlockKind::Basic,
            Depth::D50 | Depth::D101 => BlockKind::Bottleneck,
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.layers())
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = s.trim().parse().map_err(|_| Error::Config(format!("invalid depth '{s}'")))?;
        Depth::from_layers(n)
    }
}

/// Which conv5 pathways are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pathways {
    Both,
    /// The standard single-pathway ResNet.
    Conv51Only,
    Conv52Only,
}

impl Pathways {
    pub fn groups(self) -> &'static [Group] {
        match self {
            Pathways::Both => &[Group::Conv5_1, Group::Conv5_2],
            Pathways::Conv51Only => &[Group::Conv5_1],
            Pathways::Conv52Only => &[Group::Conv5_2],
        }
    }
}

impl fmt::Display for Pathways {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pathways::Both => "both",
            Pathways::Conv51Only => "5_1",
            Pathways::Conv52Only => "5_2",
        })
    }
}

impl FromStr for Pathways {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "both" => Ok(Pathways::Both),
            "5_1" | "conv5_1" | "conv5_1_only" => Ok(Pathways::Conv51Only),
            "5_2" | "conv5_2" | "conv5_2_only" => Ok(Pathways::Conv52Only),
            other => Err(Error::Config(format!("unknown pathways '{other}' (expected both, 5_1 or 5_2)"))),
        }
    }
}

/// Parameter groups, in forward order. Freezing works at this granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Conv1,
    Conv2,
    Conv3,
    Conv4,
    Conv5_1,
    Conv5_2,
    Fc,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Conv1,
        Group::Conv2,
        Group::Conv3,
        Group::Conv4,
        Group::Conv5_1,
        Group::Conv5_2,
        Group::Fc,
    ];

    /// Name prefix of the group's parameters. The head is `fc` or `fc_tp`
    /// depending on the pathways, see [`NetworkConfig::fc_prefix`].
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Conv1 => "conv1",
            Group::Conv2 => "conv2_x",
            Group::Conv3 => "conv3_x",
            Group::Conv4 => "conv4_x",
            Group::Conv5_1 => "conv5_1_x",
            Group::Conv5_2 => "conv5_2_x",
            Group::Fc => "fc",
        }
    }

    /// Label used in architecture tables.
    pub fn label(self) -> &'static str {
        match self {
            Group::Conv1 => "conv1+pool1",
            Group::Fc => "fc",
            g => g.prefix(),
        }
    }

    /// Position along the forward path; both pathways share a stage.
    pub(crate) fn stage(self) -> usize {
        match self {
            Group::Conv1 => 0,
            Group::Conv2 => 1,
            Group::Conv3 => 2,
            Group::Conv4 => 3,
            Group::Conv5_1 | Group::Conv5_2 => 4,
            Group::Fc => 5,
        }
    }

    /// Group owning a parameter name.
    pub fn of_param(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        match head {
            "fc" | "fc_tp" => Some(Group::Fc),
            _ => Group::ALL.into_iter().find(|g| g.prefix() == head),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let g = match t {
            "conv1" | "conv1+pool1" | "pool1" => Group::Conv1,
            "conv2" | "conv2_x" => Group::Conv2,
            "conv3" | "conv3_x" => Group::Conv3,
            "conv4" | "conv4_x" => Group::Conv4,
            "conv5_1" | "conv5_1_x" | "5_1" => Group::Conv5_1,
            "conv5_2" | "conv5_2_x" | "5_2" => Group::Conv5_2,
            "fc" | "fc_tp" => Group::Fc,
            _ => return Err(Error::Config(format!("unknown group '{t}'"))),
        };
        Ok(g)
    }
}

/// Parses a comma separated group list; an empty string is the empty set.
pub fn parse_groups(s: &str) -> Result<Vec<Group>> {
    let mut groups: Vec<Group> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    groups.sort();
    groups.dedup();
    Ok(groups)
}

/// Blocks of one residual group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPlan {
    pub group: Group,
    pub blocks: Vec<BlockSpec>,
}

impl GroupPlan {
    pub fn out_planes(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_planes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub depth: Depth,
    pub num_classes: usize,
    /// (height, width) of the network input.
    pub input_size: (usize, usize),
    pub width_multiplier: f64,
    pub pathways: Pathways,
}

pub const MIN_INPUT: usize = 64;

impl NetworkConfig {
    pub fn new(depth: Depth, num_classes: usize) -> Self {
        NetworkConfig {
            depth,
            num_classes,
            input_size: (224, 224),
            width_multiplier: 1.0,
            pathways: Pathways::Both,
        }
    }

    pub fn with_input(mut self, size: usize) -> Self {
        self.input_size = (size, size);
        self
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width_multiplier = width;
        self
    }

    pub fn with_pathways(mut self, pathways: Pathways) -> Self {
        self.pathways = pathways;
        self
    }

    /// Scaled channel count, a multiple of 4 and at least 4.
    pub fn channels(&self, base: usize) -> usize {
        let scaled = (base as f64 * self.width_multiplier / 4.0).round() as usize * 4;
        scaled.max(4)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::Config(format!("width multiplier {} not in (0, 1]", self.width_multiplier)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let (h, w) = self.input_size;
        // Every group needs at least two pixels of output along each axis.
        let strides = [
            (Group::Conv1, 4),
            (Group::Conv2, 4),
            (Group::Conv3, 8),
            (Group::Conv4, 16),
            (Group::Conv5_1, 32),
            (Group::Conv5_2, 16),
        ];
        for (group, stride) in strides {
            if h < 2 * stride || w < 2 * stride {
                return Err(Error::Config(format!(
                    "input {h}x{w} too small for group {}: needs at least {}x{} (minimum input {MIN_INPUT})",
                    group.label(),
                    2 * stride,
                    2 * stride
                )));
            }
        }
        let (sh, sw) = self.stem_spec().output_hw(h, w)?;
        if sh % 2 != 0 || sw % 2 != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} gives an odd {sh}x{sw} map before the 2x2 max-pooling of group conv1+pool1"
            )));
        }
        Ok(())
    }

    /// The 7x7 stride-2 stem convolution.
    pub fn stem_spec(&self) -> ConvSpec {
        ConvSpec::new(3, self.channels(64), 7, 2, 1, 3)
    }

    fn group_blocks(&self, in_planes: usize, base: usize, count: usize, stride: usize, dilation: usize) -> Vec<BlockSpec> {
        let kind = self.depth.block_kind();
        let out = match kind {
            BlockKind::Basic => self.channels(base),
            BlockKind::Bottleneck => self.channels(4 * base),
        };
        (0..count)
            .map(|i| {
                let (inp, s) = if i == 0 { (in_planes, stride) } else { (out, 1) };
                BlockSpec::new(kind, inp, out, s, dilation)
            })
            .collect()
    }

    /// The shared trunk conv2_x..conv4_x.
    pub fn trunk_plan(&self) -> Vec<GroupPlan> {
        let counts = self.depth.block_counts();
        let mut plans = Vec::new();
        let mut planes = self.channels(64);
        for (i, (group, base, stride)) in [(Group::Conv2, 64, 1), (Group::Conv3, 128, 2), (Group::Conv4, 256, 2)]
            .into_iter()
            .enumerate()
        {
            let blocks = self.group_blocks(planes, base, counts[i], stride, 1);
            planes = blocks.last().expect("nonempty group").out_planes;
            plans.push(GroupPlan { group, blocks });
        }
        plans
    }

    /// The active conv5 pathways, conv5_1_x first. Both consume conv4_x.
    pub fn pathway_plan(&self) -> Vec<GroupPlan> {
        let trunk_out = self.trunk_plan().last().expect("three trunk groups").out_planes();
        let n5 = self.depth.block_counts()[3];
        self.pathways
            .groups()
            .iter()
            .map(|&group| {
                let (stride, dilation) = if group == Group::Conv5_1 { (2, 1) } else { (1, 2) };
                GroupPlan {
                    group,
                    blocks: self.group_blocks(trunk_out, 512, n5, stride, dilation),
                }
            })
            .collect()
    }

    /// Length of the concatenated pooled representation.
    pub fn representation_len(&self) -> usize {
        self.pathway_plan().iter().map(GroupPlan::out_planes).sum()
    }

    /// Index where the second pathway's features start (the first pathway's width).
    pub fn pathway_boundary(&self) -> usize {
        self.pathway_plan()[0].out_planes()
    }

    pub fn fc_prefix(&self) -> &'static str {
        match self.pathways {
            Pathways::Both => "fc_tp",
            _ => "fc",
        }
    }

    pub fn has_group(&self, group: Group) -> bool {
        match group {
            Group::Conv5_1 | Group::Conv5_2 => self.pathways.groups().contains(&group),
            _ => true,
        }
    }

    /// Canonical one-line description, also the input of [`NetworkConfig::hash`].
    pub fn describe(&self) -> String {
        format!(
            "depth={} width={} classes={} input={}x{} pathways={}",
            self.depth, self.width_multiplier, self.num_classes, self.input_size.0, self.input_size.1, self.pathways
        )
    }

    pub fn hash(&self) -> u64 {
        seed::derive_named(0, &self.describe())
    }
}
