//! Gradient verification suite: every differentiable op plus the full model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{fusion_head_forward, nonlocal_forward, ConnNet, FusionBranch, NonLocalBlock, NonLocalNodes};
use crate::model::{BranchNodes, PredictorConfig};
use crate::tensor::{grad_check, ConvGeometry, GradCheckOptions, GradCheckReport, Graph, NodeId, Tensor};

/// Threshold every check must stay under.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn weighted(g: &mut Graph, y: NodeId, w: &Tensor) -> Result<NodeId> {
    let c = g.constant(w.clone());
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

struct Suite {
    opts: GradCheckOptions,
    rng: ChaCha8Rng,
    out: Vec<CheckOutcome>,
}

impl Suite {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::uniform(shape.to_vec(), lo, hi, &mut self.rng)
    }

    /// Checks `op` composed with a random weighted sum of its output.
    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor>, op: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    {
        let mut probe = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let y = op(&mut probe, &ids)?;
        let w = Tensor::uniform(probe.shape(y).to_vec(), -1.0, 1.0, &mut self.rng);
        let report = grad_check(
            |g, ids| {
                let y = op(g, ids)?;
                weighted(g, y, &w)
            },
            &inputs,
            &self.opts,
        )?;
        self.out.push(CheckOutcome {
            name: name.to_string(),
            report,
        });
        Ok(())
    }
}

/// Runs the per-op checks and the whole-model checks (with and without the
/// non-local block) for `config` on `1×3×8×8` inputs.
pub fn gradcheck_suite(config: &PredictorConfig, seed: u64, eps: f64) -> Result<Vec<CheckOutcome>> {
    let mut s = Suite {
        opts: GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };

    let x = s.uniform(&[1, 3, 8, 8], -1.0, 1.0);
    let k = s.uniform(&[4, 3, 3, 3], -1.0, 1.0);
    s.op("conv2d", vec![x.clone(), k.clone()], |g, i| g.conv2d(i[0], i[1], ConvGeometry::new(1, 1, 1)))?;
    s.op("conv2d_dilated", vec![x.clone(), k.clone()], |g, i| {
        g.conv2d(i[0], i[1], ConvGeometry::new(1, 2, 2))
    })?;
    s.op("conv2d_stride2_same", vec![x.clone(), k.clone()], |g, i| {
        g.conv2d(i[0], i[1], ConvGeometry::same(2, 1, 3, 8, 8))
    })?;
    let kt = s.uniform(&[3, 2, 4, 4], -1.0, 1.0);
    s.op("conv_transpose2d", vec![x.clone(), kt], |g, i| g.conv_transpose2d(i[0], i[1], 2, 1))?;
    let b = s.uniform(&[3], -1.0, 1.0);
    s.op("add_bias", vec![x.clone(), b], |g, i| g.add_bias(i[0], i[1]))?;
    s.op("bilinear_resize", vec![x.clone()], |g, i| g.bilinear_resize(i[0], 13, 5))?;

    let a = s.uniform(&[4, 5], -2.0, 2.0);
    let c = s.uniform(&[4, 5], -2.0, 2.0);
    let pos = s.uniform(&[4, 5], 0.1, 3.0);
    s.op("add", vec![a.clone(), c.clone()], |g, i| g.add(i[0], i[1]))?;
    s.op("mul", vec![a.clone(), c.clone()], |g, i| g.mul(i[0], i[1]))?;
    s.op("mul_scalar", vec![a.clone(), Tensor::scalar(0.3)], |g, i| g.mul(i[0], i[1]))?;
    s.op("scale", vec![a.clone()], |g, i| Ok(g.scale(i[0], -2.5)))?;
    s.op("relu", vec![a.clone()], |g, i| Ok(g.relu(i[0])))?;
    s.op("sigmoid", vec![a.clone()], |g, i| Ok(g.sigmoid(i[0])))?;
    s.op("exp", vec![a.clone()], |g, i| Ok(g.exp(i[0])))?;
    s.op("log", vec![pos], |g, i| Ok(g.log(i[0])))?;
    s.op("sum", vec![a.clone()], |g, i| Ok(g.sum(i[0])))?;
    s.op("mean", vec![a.clone()], |g, i| Ok(g.mean(i[0])))?;
    let m = s.uniform(&[5, 3], -1.0, 1.0);
    s.op("matmul", vec![a.clone(), m], |g, i| g.matmul(i[0], i[1]))?;
    let b3a = s.uniform(&[2, 3, 4], -1.0, 1.0);
    let b3b = s.uniform(&[2, 4, 2], -1.0, 1.0);
    s.op("batched_matmul", vec![b3a.clone(), b3b], |g, i| g.matmul(i[0], i[1]))?;
    s.op("transpose_reshape", vec![b3a.clone()], |g, i| {
        let t = g.transpose(i[0])?;
        g.reshape(t, vec![4, 6])
    })?;
    s.op("softmax", vec![b3a], |g, i| g.softmax(i[0]))?;
    let target = Tensor::from_fn(vec![4, 5], |i| (i % 3 == 0) as u8 as f64);
    s.op("bce_with_logits", vec![a], move |g, i| g.bce_with_logits(i[0], &target))?;

    let feat = s.uniform(&[1, 4, 5, 5], -1.0, 1.0);
    let block = NonLocalBlock::init(4, &mut s.rng);
    s.op(
        "nonlocal_block",
        vec![feat.clone(), block.theta, block.phi, block.g, block.z],
        |g, i| {
            let w = NonLocalNodes {
                theta: i[1],
                phi: i[2],
                g: i[3],
                z: i[4],
            };
            Ok(nonlocal_forward(g, i[0], w)?.output)
        },
    )?;
    let mut b1 = FusionBranch::init(1, 4, 3, 4, 2, &mut s.rng);
    let mut b2 = FusionBranch::init(2, 4, 3, 4, 2, &mut s.rng);
    for b in [&mut b1, &mut b2] {
        for bias in [&mut b.dilated_bias, &mut b.reduce_bias, &mut b.out_bias] {
            *bias = Tensor::uniform(bias.shape().to_vec(), -0.1, 0.1, &mut s.rng);
        }
    }
    let mut inputs = vec![feat];
    for b in [&b1, &b2] {
        inputs.extend([
            b.dilated_weight.clone(),
            b.dilated_bias.clone(),
            b.reduce_weight.clone(),
            b.reduce_bias.clone(),
            b.out_weight.clone(),
            b.out_bias.clone(),
        ]);
    }
    s.op("fusion_head", inputs, |g, i| {
        let branch = |rate, o: usize| BranchNodes {
            rate,
            dilated_weight: i[o],
            dilated_bias: i[o + 1],
            reduce_weight: i[o + 2],
            reduce_bias: i[o + 3],
            out_weight: i[o + 4],
            out_bias: i[o + 5],
        };
        fusion_head_forward(g, i[0], &[branch(1, 1), branch(2, 7)])
    })?;

    for use_nonlocal in [true, false] {
        let cfg = PredictorConfig {
            use_nonlocal,
            ..config.clone()
        };
        let name = if use_nonlocal { "connnet_mini+nonlocal" } else { "connnet_mini" };
        let report = model_gradcheck(&cfg, seed, &s.opts)?;
        s.out.push(CheckOutcome {
            name: name.to_string(),
            report,
        });
    }
    Ok(s.out)
}

/// Cross-entropy of the full model on a random `1×3×8×8` image and random
/// binary target, differentiated w.r.t. the image and every parameter.
///
/// Biases are drawn from U(-0.1, 0.1) instead of zero so that no ReLU input
/// sits exactly on the kink, where central differences are meaningless.
pub fn model_gradcheck(config: &PredictorConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = ConnNet::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let image = Tensor::uniform(vec![1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let out_ch = config.out_channels();
    let target = Tensor::from_fn(vec![1, out_ch, 8, 8], |_| rand::Rng::random_bool(&mut rng, 0.4) as u8 as f64);
    let mut inputs = vec![image];
    for (name, t) in model.named_params() {
        inputs.push(if name.ends_with(".bias") {
            Tensor::uniform(t.shape().to_vec(), -0.1, 0.1, &mut rng)
        } else {
            t.clone()
        });
    }
    grad_check(
        |g, ids| {
            let bound = model.bind_nodes(&ids[1..])?;
            let y = model.forward(g, ids[0], &bound)?;
            g.bce_with_logits(y, &target)
        },
        &inputs,
        opts,
    )
}
