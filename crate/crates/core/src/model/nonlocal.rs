//! Embedded-Gaussian non-local block.
//!
//! For positions `i, j` of an `H×W` map: `y_i = Σ_j softmax_j(θ(x_i)ᵀ φ(x_j)) g(x_j)`
//! and `z_i = W_z y_i + x_i`, with θ, φ, g, W_z realized as bias-free 1×1 convolutions.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::tensor::{ConvGeometry, Graph, NodeId, Tensor};

/// Weights of one block: θ, φ, g map `d → inner`, W_z maps `inner → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalBlock {
    pub theta: Tensor,
    pub phi: Tensor,
    pub g: Tensor,
    pub z: Tensor,
}

/// The same four weights as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct NonLocalNodes {
    pub theta: NodeId,
    pub phi: NodeId,
    pub g: NodeId,
    pub z: NodeId,
}

/// Intermediate nodes exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct NonLocalOutput {
    /// `N×HW×HW` row-stochastic attention.
    pub attention: NodeId,
    /// Aggregated global relations, `N×inner×H×W`.
    pub relations: NodeId,
    /// Residual output, same shape as the input.
    pub output: NodeId,
}

/// Embedding width used for a `d`-channel input.
pub fn inner_channels(d: usize) -> usize {
    (d / 2).max(1)
}

impl NonLocalBlock {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let inner = inner_channels(d);
        let emb_std = (1.0 / d as f64).sqrt();
        Self {
            theta: Tensor::randn(vec![inner, d, 1, 1], emb_std, rng),
            phi: Tensor::randn(vec![inner, d, 1, 1], emb_std, rng),
            g: Tensor::randn(vec![inner, d, 1, 1], emb_std, rng),
            z: Tensor::randn(vec![d, inner, 1, 1], 0.1 * (1.0 / inner as f64).sqrt(), rng),
        }
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> NonLocalNodes {
        NonLocalNodes {
            theta: graph.leaf(self.theta.clone(), trainable),
            phi: graph.leaf(self.phi.clone(), trainable),
            g: graph.leaf(self.g.clone(), trainable),
            z: graph.leaf(self.z.clone(), trainable),
        }
    }

    /// Runs the block on a standalone graph and returns the output tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let xi = graph.constant(x.clone());
        let w = self.bind(&mut graph, false);
        let out = nonlocal_forward(&mut graph, xi, w)?;
        Ok(graph.value(out.output).clone())
    }
}

pub fn nonlocal_forward(graph: &mut Graph, x: NodeId, w: NonLocalNodes) -> Result<NonLocalOutput> {
    let s = graph.shape(x).to_vec();
    ensure!(s.len() == 4, ShapeMismatch, "non-local block expects N×d×H×W, got {s:?}");
    let (n, d, h, wd) = (s[0], s[1], s[2], s[3]);
    let inner = graph.shape(w.theta)[0];
    ensure!(
        graph.shape(w.theta) == [inner, d, 1, 1]
            && graph.shape(w.phi) == [inner, d, 1, 1]
            && graph.shape(w.g) == [inner, d, 1, 1]
            && graph.shape(w.z) == [d, inner, 1, 1],
        ShapeMismatch,
        "non-local weights do not match {d} input channels"
    );
    let hw = h * wd;
    let pointwise = ConvGeometry::new(1, 1, 0);

    let theta = graph.conv2d(x, w.theta, pointwise)?;
    let theta = graph.reshape(theta, vec![n, inner, hw])?;
    let theta_t = graph.transpose(theta)?; // N×HW×inner
    let phi = graph.conv2d(x, w.phi, pointwise)?;
    let phi = graph.reshape(phi, vec![n, inner, hw])?; // N×inner×HW
    let logits = graph.matmul(theta_t, phi)?; // N×HW×HW
    if !graph.value(logits).is_finite() {
        return Err(crate::Error::NonFinite("non-local affinities overflowed".into()));
    }
    let attention = graph.softmax(logits)?;

    let g = graph.conv2d(x, w.g, pointwise)?;
    let g = graph.reshape(g, vec![n, inner, hw])?;
    let g_t = graph.transpose(g)?; // N×HW×inner
    let y = graph.matmul(attention, g_t)?; // N×HW×inner
    let y = graph.transpose(y)?;
    let relations = graph.reshape(y, vec![n, inner, h, wd])?;

    let wz = graph.conv2d(relations, w.z, pointwise)?;
    let output = graph.add(wz, x)?;
    Ok(NonLocalOutput {
        attention,
        relations,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inner_width() {
        assert_eq!(inner_channels(64), 32);
        assert_eq!(inner_channels(5), 2);
        assert_eq!(inner_channels(1), 1);
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = NonLocalBlock::init(6, &mut rng);
        block.z = Tensor::zeros(block.z.shape().to_vec());
        let x = Tensor::uniform(vec![2, 6, 4, 3], -1.0, 1.0, &mut rng);
        assert_eq!(block.apply(&x).unwrap(), x);
    }

    #[test]
    fn rejects_mismatched_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = NonLocalBlock::init(4, &mut rng);
        let x = Tensor::zeros(vec![1, 6, 2, 2]);
        assert!(block.apply(&x).is_err());
    }
}
