use super::kernels::{self, ConvDims, ConvGeometry};
use super::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, dims: ConvDims },
    ConvTranspose2d { input: NodeId, kernel: NodeId, dims: ConvDims },
    AddBias { input: NodeId, bias: NodeId },
    Bilinear { input: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log { input: NodeId, lo: f64, hi: f64 },
    Bmm(NodeId, NodeId),
    TransposeLast(NodeId),
    Reshape(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Bce { logits: NodeId, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in execution order, so the node list is
/// already a topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// Lower clamp applied before logarithms in the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-7;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    fn conv_dims(&self, input: NodeId, kernel: NodeId, geom: ConvGeometry, transposed: bool) -> Result<ConvDims> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        ensure!(xs.len() == 4 && ks.len() == 4, ShapeMismatch, "conv expects rank-4 input and kernel, got {xs:?} and {ks:?}");
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ks[2], ks[3]);
        if transposed {
            ensure!(ks[0] == cin, ShapeMismatch, "transposed kernel {ks:?} expects {} input channels, got {cin}", ks[0]);
            let (oh, ow) = geom.transposed_output_size(h, w, kh, kw)?;
            Ok(ConvDims {
                n,
                cin,
                cout: ks[1],
                h,
                w,
                oh,
                ow,
                kh,
                kw,
                geom,
            })
        } else {
            ensure!(ks[1] == cin, ShapeMismatch, "kernel {ks:?} expects {} input channels, got {cin}", ks[1]);
            let (oh, ow) = geom.output_size(h, w, kh, kw)?;
            Ok(ConvDims {
                n,
                cin,
                cout: ks[0],
                h,
                w,
                oh,
                ow,
                kh,
                kw,
                geom,
            })
        }
    }

    /// Cross-correlation of `N×Cin×H×W` input with a `Cout×Cin×kh×kw` kernel.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let dims = self.conv_dims(input, kernel, geom, false)?;
        let out = kernels::conv2d_forward(&dims, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(vec![dims.n, dims.cout, dims.oh, dims.ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, dims }, &[input, kernel]))
    }

    /// Fractionally strided convolution; kernel is `Cin×Cout×kh×kw`.
    pub fn conv_transpose2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let dims = self.conv_dims(input, kernel, ConvGeometry::new(stride, 1, padding), true)?;
        let out = kernels::conv_transpose2d_forward(&dims, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(vec![dims.n, dims.cout, dims.oh, dims.ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { input, kernel, dims }, &[input, kernel]))
    }

    /// Adds a per-channel bias to an `N×C×H×W` tensor.
    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias);
        ensure!(xs.len() == 4 && bs == [xs[1]], ShapeMismatch, "bias {bs:?} does not match channels of {xs:?}");
        let plane = xs[2] * xs[3];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let v = b[i % xs[1]];
            chunk.iter_mut().for_each(|x| *x += v);
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::AddBias { input, bias }, &[input, bias]))
    }

    /// Align-corners=false bilinear resize of the two trailing axes.
    pub fn bilinear_resize(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        ensure!(xs.len() >= 2, ShapeMismatch, "resize needs at least two axes, got {xs:?}");
        ensure!(out_h >= 1 && out_w >= 1, InvalidArgument, "resize target must be at least 1x1");
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = xs[..xs.len() - 2].iter().product();
        let out = kernels::bilinear_forward(planes, h, w, out_h, out_w, self.value(input).data());
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Bilinear { input }, &[input]))
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || (sb.len() == 1 && sb.rank() == 0) {
            Ok(sa.shape().to_vec())
        } else if sa.len() == 1 && sa.rank() == 0 {
            Ok(sb.shape().to_vec())
        } else {
            Err(Error::ShapeMismatch(format!(
                "cannot combine {:?} with {:?} (only scalar or matching shapes)",
                sa.shape(),
                sb.shape()
            )))
        }
    }

    fn zip_map(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let shape = self.binary_shapes(a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        Tensor::new(shape, (0..n).map(|i| f(pick(va, i), pick(vb, i))).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_map(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_map(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let x = self.value(a);
        let v = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(v, op, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            Op::Log {
                input: a,
                lo: 0.0,
                hi: f64::INFINITY,
            },
            f64::ln,
        )
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Log { input: a, lo, hi }, |x| x.clamp(lo, hi).ln())
    }

    /// Batched matrix product `B×m×k · B×k×n`; rank-2 operands are a batch of one.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            sa.len() == sb.len() && (sa.len() == 2 || sa.len() == 3),
            ShapeMismatch,
            "matmul expects two rank-2 or two rank-3 tensors, got {sa:?} and {sb:?}"
        );
        let r = sa.len();
        let batch = if r == 3 { sa[0] } else { 1 };
        ensure!(r == 2 || sb[0] == batch, ShapeMismatch, "batch sizes differ: {sa:?} vs {sb:?}");
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        ensure!(sb[r - 2] == k, ShapeMismatch, "inner dimensions differ: {sa:?} vs {sb:?}");
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &va[bi * m * k..(bi + 1) * m * k],
                false,
                &vb[bi * k * n..(bi + 1) * k * n],
                false,
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Bmm(a, b), &[a, b]))
    }

    /// Swaps the two trailing axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        ensure!(s.len() == 2 || s.len() == 3, ShapeMismatch, "transpose expects rank 2 or 3, got {s:?}");
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let out = transpose_last(self.value(a).data(), m, n);
        let mut shape = s;
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::TransposeLast(a), &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Softmax over the last axis (max-shifted).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        ensure!(x.rank() >= 1, ShapeMismatch, "softmax needs at least one axis");
        let n = *x.shape().last().unwrap_or(&1);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax produced non-finite values".into()));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a binary target,
    /// with probabilities clamped to `[1e-7, 1 - 1e-7]` inside the logarithms.
    /// The gradient w.r.t. the logits is `(sigmoid(z) - y) / numel`.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: &Tensor) -> Result<NodeId> {
        let z = self.value(logits);
        ensure!(
            z.shape() == target.shape(),
            ShapeMismatch,
            "logits {:?} vs target {:?}",
            z.shape(),
            target.shape()
        );
        ensure!(
            target.data().iter().all(|&y| y == 0.0 || y == 1.0),
            InvalidArgument,
            "cross-entropy target must be binary"
        );
        let mut acc = 0.0;
        for (&zi, &yi) in z.data().iter().zip(target.data()) {
            let p = sigmoid(zi).clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            acc += yi * p.ln() + (1.0 - yi) * (1.0 - p).ln();
        }
        let loss = -acc / z.len() as f64;
        let target = target.data().to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logits, target }, &[logits]))
    }

    /// Reverse pass from a scalar root. Only nodes that depend on a
    /// `requires_grad` leaf receive gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        ensure!(
            self.value(root).len() == 1,
            ShapeMismatch,
            "backward root must be a scalar, got {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Vec<f64>) {
        if !self.wants(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.data.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor {
                    shape: self.shape(id).to_vec(),
                    data: delta,
                })
            }
        }
    }

    /// Gradient for a binary-op operand that may have been broadcast from a scalar.
    fn reduce_to(&self, id: NodeId, full: Vec<f64>) -> Vec<f64> {
        if self.value(id).len() == 1 && full.len() != 1 {
            vec![full.iter().sum()]
        } else {
            full
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gy = g.data();
        let y = node.value.data();
        let map1 = |a: NodeId, f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..self.value(a).len()).map(f).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, dims } => {
                let (dx, dk) = kernels::conv2d_backward(
                    dims,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gy,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk);
                }
            }
            Op::ConvTranspose2d { input, kernel, dims } => {
                let (dx, dk) = kernels::conv_transpose2d_backward(
                    dims,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gy,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk);
                }
            }
            Op::AddBias { input, bias } => {
                self.accumulate(grads, *input, gy.to_vec());
                if self.wants(*bias) {
                    let s = self.shape(*input);
                    let (c, plane) = (s[1], s[2] * s[3]);
                    let mut db = vec![0.0; c];
                    for (i, chunk) in gy.chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Bilinear { input } => {
                if self.wants(*input) {
                    let xs = self.shape(*input);
                    let r = xs.len();
                    let planes = xs[..r - 2].iter().product();
                    let ys = node.value.shape();
                    let dx = kernels::bilinear_backward(planes, xs[r - 2], xs[r - 1], ys[r - 2], ys[r - 1], gy);
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        let d = self.reduce_to(id, gy.to_vec());
                        self.accumulate(grads, id, d);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(id) {
                        let o = self.value(other).data();
                        let full = gy
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g * if o.len() == 1 { o[0] } else { o[i] })
                            .collect();
                        let d = self.reduce_to(id, full);
                        self.accumulate(grads, id, d);
                    }
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, gy.iter().map(|g| g * f).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, map1(*a, &|i| if x[i] > 0.0 { gy[i] } else { 0.0 }));
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, map1(*a, &|i| gy[i] * y[i] * (1.0 - y[i]))),
            Op::Exp(a) => self.accumulate(grads, *a, map1(*a, &|i| gy[i] * y[i])),
            Op::Log { input, lo, hi } => {
                let x = self.value(*input).data();
                self.accumulate(
                    grads,
                    *input,
                    map1(*input, &|i| if x[i] >= *lo && x[i] <= *hi { gy[i] / x[i] } else { 0.0 }),
                );
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let batch = if r == 3 { sa[0] } else { 1 };
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &gy[bi * m * n..(bi + 1) * m * n],
                            false,
                            &vb[bi * k * n..(bi + 1) * k * n],
                            true,
                            0.0,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va[bi * m * k..(bi + 1) * m * k],
                            true,
                            &gy[bi * m * n..(bi + 1) * m * n],
                            false,
                            0.0,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::TransposeLast(a) => {
                let s = node.value.shape();
                let r = s.len();
                self.accumulate(grads, *a, transpose_last(gy, s[r - 2], s[r - 1]));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gy.to_vec()),
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => self.accumulate(grads, *a, vec![gy[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gy[0] / n as f64; n]);
            }
            Op::Bce { logits, target } => {
                let z = self.value(*logits).data();
                let scale = gy[0] / z.len() as f64;
                let d = z.iter().zip(target).map(|(&zi, &yi)| (sigmoid(zi) - yi) * scale).collect();
                self.accumulate(grads, *logits, d);
            }
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_last(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}
