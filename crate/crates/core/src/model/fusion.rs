//! Multi-dilation fusion head: parallel dilated 3×3 convs, each reduced by two
//! 1×1 convs to the output channel count, summed element-wise.

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::{ConvGeometry, Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionBranch {
    pub rate: usize,
    pub dilated_weight: Tensor,
    pub dilated_bias: Tensor,
    pub reduce_weight: Tensor,
    pub reduce_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BranchNodes {
    pub rate: usize,
    pub dilated_weight: NodeId,
    pub dilated_bias: NodeId,
    pub reduce_weight: NodeId,
    pub reduce_bias: NodeId,
    pub out_weight: NodeId,
    pub out_bias: NodeId,
}

impl FusionBranch {
    pub fn init(rate: usize, in_ch: usize, width: usize, reduce: usize, out: usize, rng: &mut impl Rng) -> Self {
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        Self {
            rate,
            dilated_weight: Tensor::randn(vec![width, in_ch, 3, 3], he(in_ch * 9), rng),
            dilated_bias: Tensor::zeros(vec![width]),
            reduce_weight: Tensor::randn(vec![reduce, width, 1, 1], he(width), rng),
            reduce_bias: Tensor::zeros(vec![reduce]),
            out_weight: Tensor::randn(vec![out, reduce, 1, 1], (1.0 / reduce as f64).sqrt(), rng),
            out_bias: Tensor::zeros(vec![out]),
        }
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BranchNodes {
        BranchNodes {
            rate: self.rate,
            dilated_weight: graph.leaf(self.dilated_weight.clone(), trainable),
            dilated_bias: graph.leaf(self.dilated_bias.clone(), trainable),
            reduce_weight: graph.leaf(self.reduce_weight.clone(), trainable),
            reduce_bias: graph.leaf(self.reduce_bias.clone(), trainable),
            out_weight: graph.leaf(self.out_weight.clone(), trainable),
            out_bias: graph.leaf(self.out_bias.clone(), trainable),
        }
    }
}

/// One branch: dilated conv, ReLU, 1×1, ReLU, 1×1.
pub fn branch_forward(graph: &mut Graph, features: NodeId, b: &BranchNodes) -> Result<NodeId> {
    let h = graph.conv2d(features, b.dilated_weight, ConvGeometry::new(1, b.rate, b.rate))?;
    let h = graph.add_bias(h, b.dilated_bias)?;
    let h = graph.relu(h);
    let h = graph.conv2d(h, b.reduce_weight, ConvGeometry::new(1, 1, 0))?;
    let h = graph.add_bias(h, b.reduce_bias)?;
    let h = graph.relu(h);
    let h = graph.conv2d(h, b.out_weight, ConvGeometry::new(1, 1, 0))?;
    graph.add_bias(h, b.out_bias)
}

pub fn fusion_head_forward(graph: &mut Graph, features: NodeId, branches: &[BranchNodes]) -> Result<NodeId> {
    ensure!(!branches.is_empty(), InvalidArgument, "fusion head needs at least one dilation rate");
    let mut acc: Option<NodeId> = None;
    for b in branches {
        let out = branch_forward(graph, features, b)?;
        acc = Some(match acc {
            None => out,
            Some(prev) => {
                if graph.shape(prev) != graph.shape(out) {
                    return Err(Error::ShapeMismatch(format!(
                        "fusion branch (rate {}) produced {:?}, expected {:?}",
                        b.rate,
                        graph.shape(out),
                        graph.shape(prev)
                    )));
                }
                graph.add(prev, out)?
            }
        });
    }
    Ok(acc.expect("at least one branch"))
}
