//! Static architecture report: output sizes, dilations, receptive fields and
//! parameter counts per group, computed from the configuration alone.

use std::fmt;

use super::config::{Group, NetworkConfig};
use crate::error::Result;
use crate::ops::ConvSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    pub group: Group,
    pub blocks: usize,
    pub channels: usize,
    pub output: (usize, usize),
    pub dilation: usize,
    /// Receptive field (pixels) of one output activation on the input image.
    pub receptive_field: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureReport {
    pub config: NetworkConfig,
    pub rows: Vec<GroupRow>,
    pub fc_params: usize,
    pub total_params: usize,
}

impl ArchitectureReport {
    pub fn row(&self, group: Group) -> Option<&GroupRow> {
        self.rows.iter().find(|r| r.group == group)
    }
}

/// Receptive field and jump (cumulative stride) after a chain of `(kernel, stride, dilation)` layers.
pub fn receptive_field(layers: &[(usize, usize, usize)]) -> (usize, usize) {
    layers.iter().fold((1, 1), |(rf, jump), &(k, s, d)| {
        let k_eff = (k - 1) * d + 1;
        (rf + (k_eff - 1) * jump, jump * s)
    })
}

fn layer(spec: &ConvSpec) -> (usize, usize, usize) {
    (spec.kernel.0, spec.stride, spec.dilation)
}

pub fn inspect(config: &NetworkConfig) -> Result<ArchitectureReport> {
    config.validate()?;
    let mut rows = Vec::new();

    let stem = config.stem_spec();
    let (h, w) = stem.output_hw(config.input_size.0, config.input_size.1)?;
    let mut chain = vec![layer(&stem), (2, 2, 1)];
    rows.push(GroupRow {
        group: Group::Conv1,
        blocks: 0,
        channels: stem.out_channels,
        output: (h / 2, w / 2),
        dilation: 1,
        receptive_field: receptive_field(&chain).0,
        params: stem.weight_count() + 2 * stem.out_channels,
    });

    let walk = |plan: &super::GroupPlan, chain: &mut Vec<(usize, usize, usize)>, mut hw: (usize, usize)| -> Result<GroupRow> {
        for block in &plan.blocks {
            for conv in block.residual_convs() {
                hw = conv.output_hw(hw.0, hw.1)?;
                chain.push(layer(&conv));
            }
        }
        Ok(GroupRow {
            group: plan.group,
            blocks: plan.blocks.len(),
            channels: plan.out_planes(),
            output: hw,
            dilation: plan.blocks[0].dilation,
            receptive_field: receptive_field(chain).0,
            params: plan.blocks.iter().map(|b| b.param_count()).sum(),
        })
    };

    let mut hw = (h / 2, w / 2);
    for plan in config.trunk_plan() {
        let row = walk(&plan, &mut chain, hw)?;
        hw = row.output;
        rows.push(row);
    }
    for plan in config.pathway_plan() {
        let mut branch = chain.clone();
        rows.push(walk(&plan, &mut branch, hw)?);
    }

    let fc_params = (config.representation_len() + 1) * config.num_classes;
    let total_params = rows.iter().map(|r| r.params).sum::<usize>() + fc_params;
    Ok(ArchitectureReport {
        config: config.clone(),
        rows,
        fc_params,
        total_params,
    })
}

impl fmt::Display for ArchitectureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.config.describe())?;
        writeln!(
            f,
            "{:<12} {:>6} {:>8} {:>9} {:>8} {:>6} {:>12}",
            "group", "blocks", "channels", "output", "dilation", "rf", "params"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>6} {:>8} {:>9} {:>8} {:>6} {:>12}",
                r.group.label(),
                r.blocks,
                r.channels,
                format!("{}x{}", r.output.0, r.output.1),
                r.dilation,
                r.receptive_field,
                r.params
            )?;
        }
        writeln!(f, "{:<12} {:>62}", self.config.fc_prefix(), self.fc_params)?;
        write!(f, "{:<12} {:>62}", "total", self.total_params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Depth, Pathways};

    #[test]
    fn composition_rule_examples() {
        assert_eq!(receptive_field(&[(3, 1, 1), (3, 1, 1)]), (5, 1));
        assert_eq!(receptive_field(&[(3, 1, 2)]), (5, 1));
        assert_eq!(receptive_field(&[(2, 2, 1), (3, 1, 1)]), (6, 2));
    }

    #[test]
    fn dilated_pathway_sees_more() {
        for depth in Depth::ALL {
            let r = inspect(&NetworkConfig::new(depth, 10)).unwrap();
            let a = r.row(Group::Conv5_1).unwrap().receptive_field;
            let b = r.row(Group::Conv5_2).unwrap().receptive_field;
            assert!(b > a, "depth {depth}: {b} <= {a}");
        }
    }

    #[test]
    fn single_pathway_report_has_one_conv5_row() {
        let c = NetworkConfig::new(Depth::D18, 10).with_pathways(Pathways::Conv52Only);
        let r = inspect(&c).unwrap();
        assert!(r.row(Group::Conv5_1).is_none());
        assert_eq!(r.row(Group::Conv5_2).unwrap().output, (14, 14));
        assert!(r.to_string().contains("conv5_2_x"));
    }
}
