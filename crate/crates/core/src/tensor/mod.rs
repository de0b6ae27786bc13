//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every forward operation is appended to a [`Tape`]; inputs of a node always
//! precede it, so a single reverse sweep over the node list propagates
//! gradients. The tape is rebuilt per forward pass and never mutated by
//! [`Tape::backward`], which returns gradients in a separate [`Gradients`]
//! store. All arithmetic is 64-bit.

mod conv;
pub mod gradcheck;

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    // The scalar is recorded for tape dumps; backward passes grads through.
    AddScalar(TensorId, #[allow(dead_code)] f64),
    Exp(TensorId),
    Relu(TensorId),
    LeakyRelu(TensorId, f64),
    Matmul(TensorId, TensorId),
    /// Row-broadcast bias add: [R, C] + [C].
    AddRow(TensorId, TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: TensorId,
        // Recorded for tape dumps; backward replays `argmax` instead.
        #[allow(dead_code)]
        window: usize,
        /// Flat input index of the (first-occurrence) max per output cell.
        argmax: Vec<usize>,
    },
    /// 3x3 bilinear patch sampling averaged to one value per channel,
    /// differentiable in both the feature map and the sample centers.
    RoiPool {
        map: TensorId,
        centers: TensorId,
    },
    Sum(TensorId),
    Mean(TensorId),
    Reshape(TensorId),
    ConcatCols(TensorId, TensorId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Inputs of node `i` always have index `< i`, so reverse iteration is a
/// valid topological order for backpropagation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to the given tensor.
    /// `None` for tensors recorded as constants.
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a differentiable leaf (parameter or input under training).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, value, true)
    }

    /// Record a non-differentiable constant (targets, fixed matrices, noise).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[TensorId]) -> TensorId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(op, value, requires_grad)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Op::Add(a, b), Tensor { shape, data }, &[a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Op::Sub(a, b), Tensor { shape, data }, &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Op::Mul(a, b), Tensor { shape, data }, &[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let data = self.nodes[a.0].value.data.iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(Op::Scale(a, factor), Tensor { shape, data }, &[a])
    }

    pub fn add_scalar(&mut self, a: TensorId, offset: f64) -> TensorId {
        let data = self.nodes[a.0].value.data.iter().map(|x| x + offset).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(Op::AddScalar(a, offset), Tensor { shape, data }, &[a])
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].value.data.iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(Op::Exp(a), Tensor { shape, data }, &[a])
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].value.data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(Op::Relu(a), Tensor { shape, data }, &[a])
    }

    pub fn leaky_relu(&mut self, a: TensorId, alpha: f64) -> TensorId {
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { alpha * x })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_op(Op::LeakyRelu(a, alpha), Tensor { shape, data }, &[a])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::invalid(format!(
                "matmul: incompatible shapes {ash:?} x {bsh:?}"
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = matmul_raw(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n);
        Ok(self.push_op(
            Op::Matmul(a, b),
            Tensor {
                shape: vec![m, n],
                data,
            },
            &[a, b],
        ))
    }

    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a), self.shape(bias));
        if ash.len() != 2 || bsh != [ash[1]] {
            return Err(Error::invalid(format!(
                "add_row: shape {ash:?} + {bsh:?}"
            )));
        }
        let (rows, cols) = (ash[0], ash[1]);
        let bias_data = &self.nodes[bias.0].value.data;
        let mut data = self.nodes[a.0].value.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias_data[c];
            }
        }
        Ok(self.push_op(
            Op::AddRow(a, bias),
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            &[a, bias],
        ))
    }

    /// x[R, In] * w[In, Out] + b[Out].
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Normalize over the channel axis (axis 1) at every remaining position,
    /// then apply per-channel gain and offset. Accepts [R, C] or [N, C, ...].
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() < 2 {
            return Err(Error::invalid("layer_norm: input must have >= 2 axes"));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm: eps must be positive"));
        }
        let channels = xsh[1];
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::invalid(format!(
                "layer_norm: gamma/beta must have shape [{channels}]"
            )));
        }
        let inner: usize = xsh[2..].iter().product();
        let outer = xsh[0];
        let xd = &self.nodes[x.0].value.data;
        let gd = &self.nodes[gamma.0].value.data;
        let bd = &self.nodes[beta.0].value.data;
        let mut out = vec![0.0; xd.len()];
        for n in 0..outer {
            for p in 0..inner {
                let base = n * channels * inner + p;
                let mut mean = 0.0;
                for c in 0..channels {
                    mean += xd[base + c * inner];
                }
                mean /= channels as f64;
                let mut var = 0.0;
                for c in 0..channels {
                    let d = xd[base + c * inner] - mean;
                    var += d * d;
                }
                var /= channels as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for c in 0..channels {
                    let norm = (xd[base + c * inner] - mean) * inv_std;
                    out[base + c * inner] = gd[c] * norm + bd[c];
                }
            }
        }
        Ok(self.push_op(
            Op::LayerNorm { x, gamma, beta, eps },
            Tensor {
                shape: xsh,
                data: out,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- convolution stack ----

    /// Cross-correlation with zero padding.
    /// input [N, C, H, W], kernel [F, C, kh, kw], bias [F].
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (value, shape) = conv::conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
            stride,
            padding,
        )?;
        Ok(self.push_op(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            Tensor { shape, data: value },
            &[input, kernel, bias],
        ))
    }

    /// Non-overlapping max pooling; gradient routes to the first-occurrence
    /// argmax in row-major order.
    pub fn maxpool2d(&mut self, input: TensorId, window: usize) -> Result<TensorId> {
        let (value, shape, argmax) = conv::maxpool_forward(&self.nodes[input.0].value, window)?;
        Ok(self.push_op(
            Op::MaxPool2d {
                input,
                window,
                argmax,
            },
            Tensor { shape, data: value },
            &[input],
        ))
    }

    /// Average of a 3x3 bilinear sample grid spanning +-1 feature-map pixel
    /// around each center. map [C, H, W] (or [1, C, H, W]), centers [M, 2]
    /// normalized to [0,1]^2. Output [M, C]. Sample coordinates are clamped
    /// to the valid pixel-center range.
    pub fn roi_pool(&mut self, map: TensorId, centers: TensorId) -> Result<TensorId> {
        let (value, shape) =
            conv::roi_pool_forward(&self.nodes[map.0].value, &self.nodes[centers.0].value)?;
        Ok(self.push_op(
            Op::RoiPool { map, centers },
            Tensor { shape, data: value },
            &[map, centers],
        ))
    }

    // ---- reductions & shape ----

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push_op(Op::Sum(a), Tensor::scalar(total), &[a])
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.numel() as f64;
        let total: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push_op(Op::Mean(a), Tensor::scalar(total / n), &[a])
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::invalid(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let data = self.nodes[a.0].value.data.clone();
        Ok(self.push_op(Op::Reshape(a), Tensor { shape, data }, &[a]))
    }

    /// Concatenate two matrices column-wise: [R, A] ++ [R, B] -> [R, A+B].
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[0] != bsh[0] {
            return Err(Error::invalid(format!(
                "concat_cols: shape {ash:?} ++ {bsh:?}"
            )));
        }
        let (rows, ca, cb) = (ash[0], ash[1], bsh[1]);
        let ad = &self.nodes[a.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        Ok(self.push_op(
            Op::ConcatCols(a, b),
            Tensor {
                shape: vec![rows, ca + cb],
                data,
            },
            &[a, b],
        ))
    }

    // ---- composite losses / sampling ----

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.same_shape(pred, target, "mse")?;
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// KL divergence of N(mu, exp(logvar)) from the unit Gaussian:
    /// -1/2 sum(1 + logvar - mu^2 - exp(logvar)).
    pub fn kl_unit_gaussian(&mut self, mu: TensorId, logvar: TensorId) -> Result<TensorId> {
        self.same_shape(mu, logvar, "kl_unit_gaussian")?;
        let mu_sq = self.mul(mu, mu)?;
        let var = self.exp(logvar);
        let t = self.add_scalar(logvar, 1.0);
        let t = self.sub(t, mu_sq)?;
        let t = self.sub(t, var)?;
        let s = self.sum(t);
        Ok(self.scale(s, -0.5))
    }

    /// z = mu + exp(logvar / 2) * eps, with `eps` recorded as a constant.
    pub fn reparameterize(
        &mut self,
        mu: TensorId,
        logvar: TensorId,
        eps: TensorId,
    ) -> Result<TensorId> {
        self.same_shape(mu, logvar, "reparameterize")?;
        self.same_shape(mu, eps, "reparameterize eps")?;
        let half = self.scale(logvar, 0.5);
        let std = self.exp(half);
        let noise = self.mul(std, eps)?;
        self.add(mu, noise)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// across fan-out; leaves not on any path to the root keep zero gradient.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![0.0; n.value.numel()])
                } else {
                    None
                }
            })
            .collect();
        if grads[root.0].is_none() {
            // Root built purely from constants; nothing to propagate.
            return Ok(Gradients { grads });
        }
        grads[root.0].as_mut().unwrap()[0] = 1.0;

        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            // Take the buffer out to sidestep aliasing with input grads.
            let g = grads[i].take().unwrap();
            self.backward_step(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_step(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]| {
            if let Some(buf) = grads[id.0].as_mut() {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                if let Some(buf) = grads[b.0].as_mut() {
                    for (x, d) in buf.iter_mut().zip(g) {
                        *x -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                if grads[a.0].is_some() {
                    let da = zip_map(g, bd, |x, y| x * y);
                    acc(grads, *a, &da);
                }
                if grads[b.0].is_some() {
                    let db = zip_map(g, ad, |x, y| x * y);
                    acc(grads, *b, &db);
                }
            }
            Op::Scale(a, f) => {
                if grads[a.0].is_some() {
                    let da: Vec<f64> = g.iter().map(|x| x * f).collect();
                    acc(grads, *a, &da);
                }
            }
            Op::AddScalar(a, _) => acc(grads, *a, g),
            Op::Exp(a) => {
                if grads[a.0].is_some() {
                    let da = zip_map(g, &node.value.data, |x, y| x * y);
                    acc(grads, *a, &da);
                }
            }
            Op::Relu(a) => {
                if grads[a.0].is_some() {
                    let xd = &self.nodes[a.0].value.data;
                    let da = zip_map(g, xd, |x, v| if v > 0.0 { x } else { 0.0 });
                    acc(grads, *a, &da);
                }
            }
            Op::LeakyRelu(a, alpha) => {
                if grads[a.0].is_some() {
                    let xd = &self.nodes[a.0].value.data;
                    let da = zip_map(g, xd, |x, v| if v > 0.0 { x } else { alpha * x });
                    acc(grads, *a, &da);
                }
            }
            Op::Matmul(a, b) => {
                let ash = &self.nodes[a.0].value.shape;
                let bsh = &self.nodes[b.0].value.shape;
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                let (ad, bd) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                if grads[a.0].is_some() {
                    // dA[i,k] = sum_j g[i,j] * B[k,j]
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + kk] = s;
                        }
                    }
                    acc(grads, *a, &da);
                }
                if grads[b.0].is_some() {
                    // dB[k,j] = sum_i A[i,k] * g[i,j]
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    acc(grads, *b, &db);
                }
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, g);
                if grads[bias.0].is_some() {
                    let cols = self.nodes[bias.0].value.numel();
                    let rows = node.value.numel() / cols;
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    acc(grads, *bias, &db);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.layer_norm_backward(*x, *gamma, *beta, *eps, g, grads);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (dx, dk, db) = conv::conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[kernel.0].value,
                    g,
                    *stride,
                    *padding,
                );
                acc(grads, *input, &dx);
                acc(grads, *kernel, &dk);
                acc(grads, *bias, &db);
            }
            Op::MaxPool2d { input, argmax, .. } => {
                if let Some(buf) = grads[input.0].as_mut() {
                    for (out_idx, &in_idx) in argmax.iter().enumerate() {
                        buf[in_idx] += g[out_idx];
                    }
                }
            }
            Op::RoiPool { map, centers } => {
                let (dmap, dcenters) = conv::roi_pool_backward(
                    &self.nodes[map.0].value,
                    &self.nodes[centers.0].value,
                    g,
                );
                acc(grads, *map, &dmap);
                acc(grads, *centers, &dcenters);
            }
            Op::Sum(a) => {
                if let Some(buf) = grads[a.0].as_mut() {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(buf) = grads[a.0].as_mut() {
                    let scale = 1.0 / buf.len() as f64;
                    for b in buf.iter_mut() {
                        *b += g[0] * scale;
                    }
                }
            }
            Op::Reshape(a) => acc(grads, *a, g),
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.shape[1];
                let cb = self.nodes[b.0].value.shape[1];
                let rows = self.nodes[a.0].value.shape[0];
                if let Some(buf) = grads[a.0].as_mut() {
                    for r in 0..rows {
                        for c in 0..ca {
                            buf[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                }
                if let Some(buf) = grads[b.0].as_mut() {
                    for r in 0..rows {
                        for c in 0..cb {
                            buf[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                }
            }
        }
    }

    fn layer_norm_backward(
        &self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xsh = &self.nodes[x.0].value.shape;
        let channels = xsh[1];
        let inner: usize = xsh[2..].iter().product();
        let outer = xsh[0];
        let xd = &self.nodes[x.0].value.data;
        let gd = &self.nodes[gamma.0].value.data;

        let mut dx = vec![0.0; xd.len()];
        let mut dgamma = vec![0.0; channels];
        let mut dbeta = vec![0.0; channels];
        let cn = channels as f64;

        for n in 0..outer {
            for p in 0..inner {
                let base = n * channels * inner + p;
                let mut mean = 0.0;
                for c in 0..channels {
                    mean += xd[base + c * inner];
                }
                mean /= cn;
                let mut var = 0.0;
                for c in 0..channels {
                    let d = xd[base + c * inner] - mean;
                    var += d * d;
                }
                var /= cn;
                let inv_std = 1.0 / (var + eps).sqrt();

                // dy_hat = g * gamma; dx = inv_std * (dy_hat - mean(dy_hat) - x_hat * mean(dy_hat * x_hat))
                let mut sum_dyh = 0.0;
                let mut sum_dyh_xh = 0.0;
                for c in 0..channels {
                    let idx = base + c * inner;
                    let xh = (xd[idx] - mean) * inv_std;
                    let dyh = g[idx] * gd[c];
                    sum_dyh += dyh;
                    sum_dyh_xh += dyh * xh;
                    dgamma[c] += g[idx] * xh;
                    dbeta[c] += g[idx];
                }
                let mean_dyh = sum_dyh / cn;
                let mean_dyh_xh = sum_dyh_xh / cn;
                for c in 0..channels {
                    let idx = base + c * inner;
                    let xh = (xd[idx] - mean) * inv_std;
                    dx[idx] = inv_std * (g[idx] * gd[c] - mean_dyh - xh * mean_dyh_xh);
                }
            }
        }
        let acc = |grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]| {
            if let Some(buf) = grads[id.0].as_mut() {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
        };
        acc(grads, x, &dx);
        acc(grads, gamma, &dgamma);
        acc(grads, beta, &dbeta);
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// A[m,k] * B[k,n] row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}
