//! ConnNet-mini: conv backbone, optional non-local block, multi-dilation
//! fusion head and learned ×4 upsampling back to input resolution.

mod fusion;
mod nonlocal;

pub use fusion::{branch_forward, fusion_head_forward, BranchNodes, FusionBranch};
pub use nonlocal::{inner_channels, nonlocal_forward, NonLocalBlock, NonLocalNodes, NonLocalOutput};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::PatternKind;
use crate::tensor::{ConvGeometry, Graph, NodeId, Tensor};

/// Backbone strides; the product is the encoder's downsampling factor.
pub const BACKBONE_STRIDES: [usize; 4] = [1, 2, 1, 2];
const UPSAMPLE_KERNEL: usize = 4;

/// What the network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Head {
    /// One logit per neighbor channel of the pattern.
    Connectivity { pattern: PatternKind },
    /// A single saliency logit per pixel.
    Segmentation,
}

impl Head {
    pub fn out_channels(self) -> usize {
        match self {
            Head::Connectivity { pattern } => pattern.channel_count(),
            Head::Segmentation => 1,
        }
    }

    pub fn pattern(self) -> Option<PatternKind> {
        match self {
            Head::Connectivity { pattern } => Some(pattern),
            Head::Segmentation => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Two stride-2 transposed convolutions, then bilinear to the exact size.
    TransposedConv,
    /// A single bilinear resize.
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub head: Head,
    /// Output widths of the four backbone blocks.
    pub widths: Vec<usize>,
    pub use_nonlocal: bool,
    /// The non-local block runs after this many backbone blocks (1..=4).
    pub nonlocal_depth: usize,
    pub fusion_rates: Vec<usize>,
    /// Width of each dilated 3×3 branch conv.
    pub branch_width: usize,
    /// Width of the first 1×1 reduction; `None` means 4 × output channels.
    pub reduce_width: Option<usize>,
    pub upsample: Upsample,
    /// Training input size `[height, width]`.
    pub input_size: [usize; 2],
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            head: Head::Connectivity {
                pattern: PatternKind::N8,
            },
            widths: vec![16, 32, 32, 64],
            use_nonlocal: true,
            nonlocal_depth: 3,
            fusion_rates: vec![1, 2, 4, 6],
            branch_width: 32,
            reduce_width: None,
            upsample: Upsample::TransposedConv,
            input_size: [64, 64],
        }
    }
}

impl PredictorConfig {
    /// Dilation rates used by the full-size model.
    pub const FULL_SIZE_RATES: [usize; 4] = [6, 12, 18, 24];

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.widths.len() == BACKBONE_STRIDES.len() && self.widths.iter().all(|&w| w >= 1),
            InvalidArgument,
            "widths must list {} positive channel counts, got {:?}",
            BACKBONE_STRIDES.len(),
            self.widths
        );
        ensure!(
            (1..=BACKBONE_STRIDES.len()).contains(&self.nonlocal_depth),
            InvalidArgument,
            "nonlocal_depth {} outside 1..={}",
            self.nonlocal_depth,
            BACKBONE_STRIDES.len()
        );
        ensure!(
            !self.fusion_rates.is_empty() && self.fusion_rates.iter().all(|&r| r >= 1),
            InvalidArgument,
            "fusion_rates must be a non-empty list of positive rates"
        );
        ensure!(self.branch_width >= 1, InvalidArgument, "branch_width must be positive");
        ensure!(self.reduce_width != Some(0), InvalidArgument, "reduce_width must be positive");
        ensure!(self.input_size.iter().all(|&s| s >= 1), InvalidArgument, "input_size must be positive");
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.head.out_channels()
    }

    pub fn reduce_channels(&self) -> usize {
        self.reduce_width.unwrap_or(4 * self.out_channels())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Weight and bias of a convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvNodes {
    weight: NodeId,
    bias: NodeId,
}

/// Bilinear-interpolation kernel for a stride-2, 4×4 transposed convolution.
fn bilinear_upsample_kernel(channels: usize) -> Tensor {
    let k = UPSAMPLE_KERNEL;
    let factor = k.div_ceil(2) as f64;
    let center = factor - 0.5;
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / factor;
    let mut t = Tensor::zeros(vec![channels, channels, k, k]);
    for c in 0..channels {
        for i in 0..k {
            for j in 0..k {
                t.data_mut()[((c * channels + c) * k + i) * k + j] = tap(i) * tap(j);
            }
        }
    }
    t
}

/// Parameters registered on a graph, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    backbone: Vec<ConvNodes>,
    nonlocal: Option<NonLocalNodes>,
    fusion: Vec<BranchNodes>,
    upsample: Vec<ConvNodes>,
    order: Vec<NodeId>,
}

impl BoundModel {
    /// Parameter nodes in the same order as [`ConnNet::named_params`].
    pub fn params(&self) -> &[NodeId] {
        &self.order
    }

    pub fn nonlocal(&self) -> Option<NonLocalNodes> {
        self.nonlocal
    }
}

/// The connectivity (or segmentation) predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnNet {
    config: PredictorConfig,
    backbone: Vec<ConvLayer>,
    nonlocal: Option<NonLocalBlock>,
    fusion: Vec<FusionBranch>,
    upsample: Vec<ConvLayer>,
}

impl ConnNet {
    /// He-normal convolutions, zero biases, bilinear-initialized upsampling.
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::new();
        let mut cin = 3;
        for &w in &config.widths {
            backbone.push(ConvLayer {
                weight: Tensor::randn(vec![w, cin, 3, 3], (2.0 / (cin * 9) as f64).sqrt(), &mut rng),
                bias: Tensor::zeros(vec![w]),
            });
            cin = w;
        }
        let nonlocal = config
            .use_nonlocal
            .then(|| NonLocalBlock::init(config.widths[config.nonlocal_depth - 1], &mut rng));
        let out = config.out_channels();
        let fusion = config
            .fusion_rates
            .iter()
            .map(|&rate| FusionBranch::init(rate, cin, config.branch_width, config.reduce_channels(), out, &mut rng))
            .collect();
        let upsample = match config.upsample {
            Upsample::TransposedConv => (0..2)
                .map(|_| ConvLayer {
                    weight: bilinear_upsample_kernel(out),
                    bias: Tensor::zeros(vec![out]),
                })
                .collect(),
            Upsample::Bilinear => Vec::new(),
        };
        Ok(Self {
            config,
            backbone,
            nonlocal,
            fusion,
            upsample,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn nonlocal_block(&self) -> Option<&NonLocalBlock> {
        self.nonlocal.as_ref()
    }

    pub fn nonlocal_block_mut(&mut self) -> Option<&mut NonLocalBlock> {
        self.nonlocal.as_mut()
    }

    pub fn fusion_branches(&self) -> &[FusionBranch] {
        &self.fusion
    }

    /// Canonical `(name, tensor)` list; checkpoints and optimizers use this order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        if let Some(nl) = &self.nonlocal {
            out.push(("nonlocal.theta".into(), &nl.theta));
            out.push(("nonlocal.phi".into(), &nl.phi));
            out.push(("nonlocal.g".into(), &nl.g));
            out.push(("nonlocal.z".into(), &nl.z));
        }
        for (i, b) in self.fusion.iter().enumerate() {
            out.push((format!("fusion.{i}.dilated.weight"), &b.dilated_weight));
            out.push((format!("fusion.{i}.dilated.bias"), &b.dilated_bias));
            out.push((format!("fusion.{i}.reduce.weight"), &b.reduce_weight));
            out.push((format!("fusion.{i}.reduce.bias"), &b.reduce_bias));
            out.push((format!("fusion.{i}.out.weight"), &b.out_weight));
            out.push((format!("fusion.{i}.out.bias"), &b.out_bias));
        }
        for (i, l) in self.upsample.iter().enumerate() {
            out.push((format!("upsample.{i}.weight"), &l.weight));
            out.push((format!("upsample.{i}.bias"), &l.bias));
        }
        out
    }

    /// Mutable tensors in [`named_params`](Self::named_params) order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(nl) = &mut self.nonlocal {
            out.extend([&mut nl.theta, &mut nl.phi, &mut nl.g, &mut nl.z]);
        }
        for b in &mut self.fusion {
            out.extend([
                &mut b.dilated_weight,
                &mut b.dilated_bias,
                &mut b.reduce_weight,
                &mut b.reduce_bias,
                &mut b.out_weight,
                &mut b.out_bias,
            ]);
        }
        for l in &mut self.upsample {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Names of parameters that belong to the convolutional backbone.
    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.")
    }

    /// Rebuilds a model from named tensors, requiring an exact name/shape match.
    pub fn from_named(config: PredictorConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut supplied: HashMap<String, Tensor> = HashMap::with_capacity(named.len());
        for (name, t) in named {
            if supplied.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name:?} in checkpoint")));
            }
        }
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = supplied
                .remove(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks tensor {name:?} required by the config")))?;
            ensure!(
                t.shape() == slot.shape(),
                ShapeMismatch,
                "tensor {name:?} has shape {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            );
            *slot = t;
        }
        if let Some(extra) = supplied.keys().min() {
            return Err(Error::ShapeMismatch(format!("checkpoint tensor {extra:?} is not used by the config")));
        }
        Ok(model)
    }

    /// Registers every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let ids: Vec<NodeId> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect();
        self.bind_nodes(&ids).expect("ids were created from this model")
    }

    /// Wires already-registered parameter nodes (canonical order) into the
    /// model structure.
    pub fn bind_nodes(&self, ids: &[NodeId]) -> Result<BoundModel> {
        let expected = self.named_params().len();
        ensure!(ids.len() == expected, ShapeMismatch, "model needs {expected} parameter nodes, got {}", ids.len());
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("length checked");
        let backbone = self
            .backbone
            .iter()
            .map(|_| ConvNodes {
                weight: next(),
                bias: next(),
            })
            .collect();
        let nonlocal = self.nonlocal.as_ref().map(|_| NonLocalNodes {
            theta: next(),
            phi: next(),
            g: next(),
            z: next(),
        });
        let fusion = self
            .fusion
            .iter()
            .map(|b| BranchNodes {
                rate: b.rate,
                dilated_weight: next(),
                dilated_bias: next(),
                reduce_weight: next(),
                reduce_bias: next(),
                out_weight: next(),
                out_bias: next(),
            })
            .collect();
        let upsample = self
            .upsample
            .iter()
            .map(|_| ConvNodes {
                weight: next(),
                bias: next(),
            })
            .collect();
        Ok(BoundModel {
            backbone,
            nonlocal,
            fusion,
            upsample,
            order: ids.to_vec(),
        })
    }

    /// Full forward pass from an `N×3×H×W` image node to `N×C×H×W` logits.
    pub fn forward(&self, g: &mut Graph, image: NodeId, p: &BoundModel) -> Result<NodeId> {
        let s = g.shape(image).to_vec();
        ensure!(s.len() == 4 && s[1] == 3, ShapeMismatch, "expected an N×3×H×W image, got {s:?}");
        let (h, w) = (s[2], s[3]);
        let mut x = image;
        for (i, (layer, &stride)) in p.backbone.iter().zip(&BACKBONE_STRIDES).enumerate() {
            let geom = if stride == 1 {
                ConvGeometry::new(1, 1, 1)
            } else {
                let fs = g.shape(x);
                ConvGeometry::same(stride, 1, 3, fs[2], fs[3])
            };
            x = g.conv2d(x, layer.weight, geom)?;
            x = g.add_bias(x, layer.bias)?;
            x = g.relu(x);
            if let (Some(nl), true) = (p.nonlocal, i + 1 == self.config.nonlocal_depth) {
                x = nonlocal_forward(g, x, nl)?.output;
            }
        }
        x = fusion_head_forward(g, x, &p.fusion)?;
        for layer in &p.upsample {
            x = g.conv_transpose2d(x, layer.weight, 2, 1)?;
            x = g.add_bias(x, layer.bias)?;
        }
        let fs = g.shape(x);
        if (fs[2], fs[3]) != (h, w) {
            x = g.bilinear_resize(x, h, w)?;
        }
        Ok(x)
    }

    /// Raw logits for an `N×3×H×W` image tensor.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let p = self.bind(&mut g, false);
        let y = self.forward(&mut g, x, &p)?;
        let out = g.value(y);
        if !out.is_finite() {
            return Err(Error::NonFinite("model produced non-finite logits".into()));
        }
        Ok(out.clone())
    }
}
