//! Tape-ordered computation graph with reverse-mode backward.

use crate::{Error, Result};

use super::kernels::{col2im_add, conv_out_extent, gemm, im2col, softmax_rows, ConvGeom};
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Forward-pass mode; selects batch vs running statistics in batchnorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Gelu,
}

/// Running statistics owned by a batchnorm layer. The graph reads them in
/// inference mode and updates them (momentum blend of batch statistics) in
/// training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }
}

enum Payload {
    Leaf,
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        /// Softmax matrices, one `L x L` block per batch item.
        attn: Vec<f64>,
    },
    Activation {
        x: NodeId,
        kind: Activation,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Statistics actually used in the forward pass (batch stats when
        /// training, running stats when inferring).
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        train: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    Sum {
        x: NodeId,
    },
}

struct Node {
    payload: Payload,
    tensor: Tensor,
}

/// A forward tape. Nodes are appended in construction order, which is a
/// topological order by construction; backward walks it in exact reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not receive a gradient (data, targets, constants).
    pub fn input(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.push(Payload::Leaf, t)
    }

    /// Leaf that accumulates a gradient (weights, biases).
    pub fn param(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(true);
        self.push(Payload::Leaf, t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, payload: Payload, tensor: Tensor) -> NodeId {
        self.nodes.push(Node { payload, tensor });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, payload: Payload, mut tensor: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires = inputs.iter().any(|i| self.nodes[i.0].tensor.requires_grad());
        tensor.set_requires_grad(requires);
        self.push(payload, tensor)
    }

    fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// `y[n,o] = b[o] + sum_i x[n,i] w[i,o]`
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.dims(x), self.dims(w), self.dims(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape(
                "dense",
                format!("expected x[B,I], w[I,O], b[O]; got x{:?} w{:?} b{:?}", xs, ws, bs),
            ));
        }
        let (bsz, i) = (xs[0], xs[1]);
        let (wi, o) = (ws[0], ws[1]);
        if i != wi || bs[0] != o {
            return Err(Error::shape(
                "dense",
                format!("inner extents disagree: x{:?} w{:?} b{:?}", xs, ws, bs),
            ));
        }
        let mut out = vec![0.0; bsz * o];
        gemm(
            bsz,
            i,
            o,
            1.0,
            self.nodes[x.0].tensor.data(),
            false,
            self.nodes[w.0].tensor.data(),
            false,
            0.0,
            &mut out,
        );
        let bias = self.nodes[b.0].tensor.data();
        for row in out.chunks_mut(o) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let t = Tensor::from_vec(&[bsz, o], out)?;
        Ok(self.push_op(Payload::Dense { x, w, b }, t, &[x, w, b]))
    }

    /// Cross-correlation of `x[B,C,H,W]` with `k[F,C,kh,kw]` plus bias `b[F]`.
    ///
    /// Odd kernels only. With `stride == 1` and `padding == dilation*(kh-1)/2`
    /// the spatial extents are preserved.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride < 1 || dilation < 1 {
            return Err(Error::InvalidArg(format!(
                "conv2d: stride and dilation must be >= 1, got {stride}/{dilation}"
            )));
        }
        let (xs, ks, bs) = (self.dims(x), self.dims(k), self.dims(b));
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("expected x[B,C,H,W], k[F,C,kh,kw], b[F]; got x{:?} k{:?} b{:?}", xs, ks, bs),
            ));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArg(format!("conv2d: kernel extents must be odd, got {kh}x{kw}")));
        }
        if kc != c || bs[0] != f {
            return Err(Error::shape(
                "conv2d",
                format!("channel extents disagree: x{:?} k{:?} b{:?}", xs, ks, bs),
            ));
        }
        let out_h = conv_out_extent(h, kh, stride, dilation, padding)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel does not fit: x{:?} k{:?}", xs, ks)))?;
        let out_w = conv_out_extent(w, kw, stride, dilation, padding)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel does not fit: x{:?} k{:?}", xs, ks)))?;
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            dilation,
            padding,
            out_h,
            out_w,
        };
        let patch = geom.patch_len();
        let ol = geom.out_len();
        let mut out = vec![0.0; bsz * f * ol];
        let mut cols = vec![0.0; ol * patch];
        let xin = self.nodes[x.0].tensor.data();
        let kflat = self.nodes[k.0].tensor.data();
        let bias = self.nodes[b.0].tensor.data();
        let img = c * h * w;
        for n in 0..bsz {
            im2col(&xin[n * img..(n + 1) * img], &geom, &mut cols);
            let y = &mut out[n * f * ol..(n + 1) * f * ol];
            // y[F, outHW] = k[F, patch] * cols^T
            gemm(f, patch, ol, 1.0, kflat, false, &cols, true, 0.0, y);
            for fi in 0..f {
                let bv = bias[fi];
                for v in &mut y[fi * ol..(fi + 1) * ol] {
                    *v += bv;
                }
            }
        }
        let t = Tensor::from_vec(&[bsz, f, out_h, out_w], out)?;
        Ok(self.push_op(Payload::Conv2d { x, k, b, geom }, t, &[x, k, b]))
    }

    /// Scaled dot-product attention: `softmax(Q K^T / sqrt(d)) V` per batch
    /// item. Inputs are `[B, L, d]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let (qs, ks, vs) = (self.dims(q), self.dims(k), self.dims(v));
        if qs.len() != 3 || qs != ks || qs != vs {
            return Err(Error::shape(
                "attention",
                format!("expected matching [B,L,d]; got q{:?} k{:?} v{:?}", qs, ks, vs),
            ));
        }
        let (bsz, l, d) = (qs[0], qs[1], qs[2]);
        if d == 0 {
            return Err(Error::InvalidArg("attention: d must be >= 1".into()));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = vec![0.0; bsz * l * l];
        let mut out = vec![0.0; bsz * l * d];
        let (qd, kd, vd) = (
            self.nodes[q.0].tensor.data(),
            self.nodes[k.0].tensor.data(),
            self.nodes[v.0].tensor.data(),
        );
        for n in 0..bsz {
            let qb = &qd[n * l * d..(n + 1) * l * d];
            let kb = &kd[n * l * d..(n + 1) * l * d];
            let vb = &vd[n * l * d..(n + 1) * l * d];
            let ab = &mut attn[n * l * l..(n + 1) * l * l];
            gemm(l, d, l, scale, qb, false, kb, true, 0.0, ab);
            softmax_rows(ab, l, l);
            let yb = &mut out[n * l * d..(n + 1) * l * d];
            gemm(l, l, d, 1.0, ab, false, vb, false, 0.0, yb);
        }
        let t = Tensor::from_vec(&[bsz, l, d], out)?;
        Ok(self.push_op(Payload::Attention { q, k, v, attn }, t, &[q, k, v]))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        if let Activation::LeakyRelu(alpha) = kind {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidArg(format!(
                    "leaky_relu: alpha must lie in (0,1), got {alpha}"
                )));
            }
        }
        let xt = &self.nodes[x.0].tensor;
        let out: Vec<f64> = xt.data().iter().map(|&v| act_value(kind, v)).collect();
        let t = Tensor::from_vec(xt.shape(), out)?;
        Ok(self.push_op(Payload::Activation { x, kind }, t, &[x]))
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        self.activation(x, Activation::LeakyRelu(alpha))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Gelu)
    }

    /// Per-channel batch normalization of `x[B,C,H,W]`.
    ///
    /// Training mode normalizes by batch statistics (requires `B >= 2`) and
    /// blends them into `state`; inference mode applies the running affine
    /// map.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: Mode,
        state: &mut BatchNormState,
    ) -> Result<NodeId> {
        let xs = self.dims(x);
        if xs.len() != 4 {
            return Err(Error::shape("batchnorm", format!("expected x[B,C,H,W], got {:?}", xs)));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "gamma/beta must be [{}], got {:?}/{:?}",
                    c,
                    self.dims(gamma),
                    self.dims(beta)
                ),
            ));
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("running stats sized {} for {} channels", state.running_mean.len(), c),
            ));
        }
        let train = mode == Mode::Train;
        if train && bsz < 2 {
            return Err(Error::InvalidArg(
                "batchnorm: training mode requires batch size >= 2 (variance undefined)".into(),
            ));
        }
        let plane = h * w;
        let n_per_c = (bsz * plane) as f64;
        let xd = self.nodes[x.0].tensor.data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for n in 0..bsz {
                    let base = (n * c + ci) * plane;
                    for &v in &xd[base..base + plane] {
                        s += v;
                    }
                }
                let m = s / n_per_c;
                let mut sq = 0.0;
                for n in 0..bsz {
                    let base = (n * c + ci) * plane;
                    for &v in &xd[base..base + plane] {
                        sq += (v - m) * (v - m);
                    }
                }
                mean[ci] = m;
                var[ci] = sq / n_per_c;
            }
            for ci in 0..c {
                state.running_mean[ci] =
                    (1.0 - state.momentum) * state.running_mean[ci] + state.momentum * mean[ci];
                state.running_var[ci] =
                    (1.0 - state.momentum) * state.running_var[ci] + state.momentum * var[ci];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let g = self.nodes[gamma.0].tensor.data();
        let be = self.nodes[beta.0].tensor.data();
        let mut out = vec![0.0; xd.len()];
        for n in 0..bsz {
            for ci in 0..c {
                let rstd = 1.0 / (var[ci] + state.eps).sqrt();
                let base = (n * c + ci) * plane;
                for i in 0..plane {
                    out[base + i] = g[ci] * (xd[base + i] - mean[ci]) * rstd + be[ci];
                }
            }
        }
        let eps = state.eps;
        let t = Tensor::from_vec(xs, out)?;
        Ok(self.push_op(
            Payload::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                train,
            },
            t,
            &[x, gamma, beta],
        ))
    }

    /// Normalization over the trailing axis of `x[..., D]` with per-feature
    /// scale and shift.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.dims(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("layernorm", "rank-0 input".to_string()))?;
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gamma/beta must be [{}], got {:?}/{:?}",
                    d,
                    self.dims(gamma),
                    self.dims(beta)
                ),
            ));
        }
        let xd = self.nodes[x.0].tensor.data();
        let rows = xd.len() / d;
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        let g = self.nodes[gamma.0].tensor.data();
        let be = self.nodes[beta.0].tensor.data();
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let rs = 1.0 / (v + eps).sqrt();
            mean[r] = m;
            rstd[r] = rs;
            for i in 0..d {
                out[r * d + i] = g[i] * (row[i] - m) * rs + be[i];
            }
        }
        let t = Tensor::from_vec(&xs, out)?;
        Ok(self.push_op(
            Payload::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            t,
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let t = self.nodes[x.0].tensor.reshaped(new_shape)?;
        Ok(self.push_op(Payload::Reshape { x }, t, &[x]))
    }

    /// Axis permutation; `perm` maps output axis -> input axis.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let xs = self.dims(x).to_vec();
        let rank = xs.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation of 0..{}", perm, rank),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let out = permute_data(self.nodes[x.0].tensor.data(), &xs, perm);
        let t = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push_op(
            Payload::Permute {
                x,
                perm: perm.to_vec(),
            },
            t,
            &[x],
        ))
    }

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .tensor
            .data()
            .iter()
            .zip(self.nodes[b.0].tensor.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.dims(a).to_vec().as_slice(), out)?;
        Ok(self.push_op(Payload::Add { a, b }, t, &[a, b]))
    }

    /// Mean squared error over all elements; returns a scalar node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.dims(pred) != self.dims(target) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.dims(pred), self.dims(target)),
            ));
        }
        let p = self.nodes[pred.0].tensor.data();
        let t = self.nodes[target.0].tensor.data();
        let n = p.len() as f64;
        let v = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let out = Tensor::scalar(v);
        Ok(self.push_op(Payload::Mse { pred, target }, out, &[pred, target]))
    }

    /// Sum of all elements; returns a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].tensor.data().iter().sum::<f64>();
        self.push_op(Payload::Sum { x }, Tensor::scalar(v), &[x])
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss` node. Gradients accumulate on
    /// every node with `requires_grad` on the path.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.dims(loss)
            )));
        }
        if !self.nodes[loss.0].tensor.requires_grad() {
            return Ok(()); // nothing on the tape depends on a parameter
        }
        self.nodes[loss.0].tensor.seed_grad_ones();
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].tensor.grad().is_none() {
                continue;
            }
            let contributions = self.node_backward(idx);
            for (target, delta) in contributions {
                self.nodes[target].tensor.accumulate_grad(&delta);
            }
        }
        Ok(())
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad()
    }

    /// Gradient contributions of node `idx` to its inputs. Pure reads; the
    /// caller applies the accumulation.
    fn node_backward(&self, idx: usize) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[idx];
        let dy = node.tensor.grad().expect("checked by caller");
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        match &node.payload {
            Payload::Leaf => {}
            Payload::Dense { x, w, b } => {
                let xs = self.dims(*x);
                let (bsz, i) = (xs[0], xs[1]);
                let o = self.dims(*w)[1];
                if self.requires(*x) {
                    let mut dx = vec![0.0; bsz * i];
                    gemm(bsz, o, i, 1.0, dy, false, self.nodes[w.0].tensor.data(), true, 0.0, &mut dx);
                    out.push((x.0, dx));
                }
                if self.requires(*w) {
                    let mut dw = vec![0.0; i * o];
                    gemm(i, bsz, o, 1.0, self.nodes[x.0].tensor.data(), true, dy, false, 0.0, &mut dw);
                    out.push((w.0, dw));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; o];
                    for row in dy.chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((b.0, db));
                }
            }
            Payload::Conv2d { x, k, b, geom } => {
                let xs = self.dims(*x);
                let (bsz, f) = (xs[0], self.dims(*k)[0]);
                let patch = geom.patch_len();
                let ol = geom.out_len();
                let img = geom.channels * geom.height * geom.width;
                let xd = self.nodes[x.0].tensor.data();
                let kd = self.nodes[k.0].tensor.data();
                let need_x = self.requires(*x);
                let need_k = self.requires(*k);
                let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
                let mut dk = if need_k { vec![0.0; kd.len()] } else { Vec::new() };
                let mut cols = vec![0.0; ol * patch];
                let mut dcols = vec![0.0; ol * patch];
                for n in 0..bsz {
                    let dyb = &dy[n * f * ol..(n + 1) * f * ol];
                    if need_k {
                        im2col(&xd[n * img..(n + 1) * img], geom, &mut cols);
                        // dk[F, patch] += dy_b[F, outHW] * cols[outHW, patch]
                        gemm(f, ol, patch, 1.0, dyb, false, &cols, false, 1.0, &mut dk);
                    }
                    if need_x {
                        // dcols[outHW, patch] = dy_b^T[outHW, F] * k[F, patch]
                        gemm(ol, f, patch, 1.0, dyb, true, kd, false, 0.0, &mut dcols);
                        col2im_add(&dcols, geom, &mut dx[n * img..(n + 1) * img]);
                    }
                }
                if need_x {
                    out.push((x.0, dx));
                }
                if need_k {
                    out.push((k.0, dk));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; f];
                    for n in 0..bsz {
                        for fi in 0..f {
                            let base = (n * f + fi) * ol;
                            db[fi] += dy[base..base + ol].iter().sum::<f64>();
                        }
                    }
                    out.push((b.0, db));
                }
            }
            Payload::Attention { q, k, v, attn } => {
                let qs = self.dims(*q);
                let (bsz, l, d) = (qs[0], qs[1], qs[2]);
                let scale = 1.0 / (d as f64).sqrt();
                let qd = self.nodes[q.0].tensor.data();
                let kd = self.nodes[k.0].tensor.data();
                let vd = self.nodes[v.0].tensor.data();
                let mut dq = vec![0.0; qd.len()];
                let mut dkk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut da = vec![0.0; l * l];
                let mut ds = vec![0.0; l * l];
                for n in 0..bsz {
                    let span = n * l * d..(n + 1) * l * d;
                    let ab = &attn[n * l * l..(n + 1) * l * l];
                    let dyb = &dy[span.clone()];
                    // dV = A^T dY
                    gemm(l, l, d, 1.0, ab, true, dyb, false, 0.0, &mut dv[span.clone()]);
                    // dA = dY V^T
                    gemm(l, d, l, 1.0, dyb, false, &vd[span.clone()], true, 0.0, &mut da);
                    // dS = A .* (dA - rowsum(dA .* A))
                    for r in 0..l {
                        let arow = &ab[r * l..(r + 1) * l];
                        let darow = &da[r * l..(r + 1) * l];
                        let dot: f64 = arow.iter().zip(darow).map(|(a, g)| a * g).sum();
                        for c in 0..l {
                            ds[r * l + c] = arow[c] * (darow[c] - dot);
                        }
                    }
                    // dQ = scale * dS K ; dK = scale * dS^T Q
                    gemm(l, l, d, scale, &ds, false, &kd[span.clone()], false, 0.0, &mut dq[span.clone()]);
                    gemm(l, l, d, scale, &ds, true, &qd[span.clone()], false, 0.0, &mut dkk[span.clone()]);
                }
                if self.requires(*q) {
                    out.push((q.0, dq));
                }
                if self.requires(*k) {
                    out.push((k.0, dkk));
                }
                if self.requires(*v) {
                    out.push((v.0, dv));
                }
            }
            Payload::Activation { x, kind } => {
                if self.requires(*x) {
                    let xd = self.nodes[x.0].tensor.data();
                    let yd = node.tensor.data();
                    let dx: Vec<f64> = dy
                        .iter()
                        .zip(xd.iter().zip(yd))
                        .map(|(&g, (&xi, &yi))| g * act_deriv(*kind, xi, yi))
                        .collect();
                    out.push((x.0, dx));
                }
            }
            Payload::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                train,
            } => {
                let xs = self.dims(*x);
                let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let n_per_c = (bsz * plane) as f64;
                let xd = self.nodes[x.0].tensor.data();
                let g = self.nodes[gamma.0].tensor.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for n in 0..bsz {
                    for ci in 0..c {
                        let rstd = 1.0 / (var[ci] + eps).sqrt();
                        let base = (n * c + ci) * plane;
                        for i in 0..plane {
                            let xhat = (xd[base + i] - mean[ci]) * rstd;
                            let dyi = dy[base + i];
                            dgamma[ci] += dyi * xhat;
                            dbeta[ci] += dyi;
                            sum_dy[ci] += dyi;
                            sum_dy_xhat[ci] += dyi * xhat;
                        }
                    }
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for n in 0..bsz {
                        for ci in 0..c {
                            let rstd = 1.0 / (var[ci] + eps).sqrt();
                            let base = (n * c + ci) * plane;
                            if *train {
                                for i in 0..plane {
                                    let xhat = (xd[base + i] - mean[ci]) * rstd;
                                    dx[base + i] = g[ci]
                                        * rstd
                                        * (dy[base + i]
                                            - sum_dy[ci] / n_per_c
                                            - xhat * sum_dy_xhat[ci] / n_per_c);
                                }
                            } else {
                                for i in 0..plane {
                                    dx[base + i] = g[ci] * rstd * dy[base + i];
                                }
                            }
                        }
                    }
                    out.push((x.0, dx));
                }
                if self.requires(*gamma) {
                    out.push((gamma.0, dgamma));
                }
                if self.requires(*beta) {
                    out.push((beta.0, dbeta));
                }
            }
            Payload::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = *self.dims(*x).last().unwrap();
                let xd = self.nodes[x.0].tensor.data();
                let g = self.nodes[gamma.0].tensor.data();
                let rows = xd.len() / d;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xd.len()];
                for r in 0..rows {
                    let base = r * d;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in 0..d {
                        let xhat = (xd[base + i] - mean[r]) * rstd[r];
                        let dxhat = dy[base + i] * g[i];
                        dgamma[i] += dy[base + i] * xhat;
                        dbeta[i] += dy[base + i];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for i in 0..d {
                        let xhat = (xd[base + i] - mean[r]) * rstd[r];
                        let dxhat = dy[base + i] * g[i];
                        dx[base + i] = rstd[r] * (dxhat - m1 - xhat * m2);
                    }
                }
                if self.requires(*x) {
                    out.push((x.0, dx));
                }
                if self.requires(*gamma) {
                    out.push((gamma.0, dgamma));
                }
                if self.requires(*beta) {
                    out.push((beta.0, dbeta));
                }
            }
            Payload::Reshape { x } => {
                if self.requires(*x) {
                    out.push((x.0, dy.to_vec()));
                }
            }
            Payload::Permute { x, perm } => {
                if self.requires(*x) {
                    // inverse permutation maps the gradient back
                    let mut inv = vec![0usize; perm.len()];
                    for (out_axis, &in_axis) in perm.iter().enumerate() {
                        inv[in_axis] = out_axis;
                    }
                    let dx = permute_data(dy, node.tensor.shape(), &inv);
                    out.push((x.0, dx));
                }
            }
            Payload::Add { a, b } => {
                if self.requires(*a) {
                    out.push((a.0, dy.to_vec()));
                }
                if self.requires(*b) {
                    out.push((b.0, dy.to_vec()));
                }
            }
            Payload::Mse { pred, target } => {
                let p = self.nodes[pred.0].tensor.data();
                let t = self.nodes[target.0].tensor.data();
                let scale = dy[0] * 2.0 / p.len() as f64;
                if self.requires(*pred) {
                    let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                    out.push((pred.0, dp));
                }
                if self.requires(*target) {
                    let dt: Vec<f64> = p.iter().zip(t).map(|(a, b)| -scale * (a - b)).collect();
                    out.push((target.0, dt));
                }
            }
            Payload::Sum { x } => {
                if self.requires(*x) {
                    out.push((x.0, vec![dy[0]; self.nodes[x.0].tensor.numel()]));
                }
            }
        }
        out
    }
}

fn act_value(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::LeakyRelu(a) => {
            if x > 0.0 {
                x
            } else {
                a * x
            }
        }
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Tanh => x.tanh(),
        Activation::Gelu => {
            // tanh form of the Gaussian error linear unit
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
    }
}

/// Derivative of the activation given input `x` and forward output `y`.
fn act_deriv(kind: Activation, x: f64, y: f64) -> f64 {
    match kind {
        Activation::LeakyRelu(a) => {
            if x > 0.0 {
                1.0
            } else {
                a
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Tanh => 1.0 - y * y,
        Activation::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
    }
}

const GELU_A: f64 = 0.044715;
// sqrt(2/pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

fn permute_data(src: &[f64], src_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = src_shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src_off = 0;
        for (axis, &i) in idx.iter().enumerate() {
            src_off += i * src_strides[perm[axis]];
        }
        *slot = src[src_off];
        // odometer increment over the output shape
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_weight() {
        let mut g = Graph::new();
        let x = g.input(tensor2(1, 2, &[1.0, 2.0]));
        let w = g.param(tensor2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = g.param(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_hand_arithmetic() {
        // x=[[1,2]], W=[[3,5],[4,6]], b=[1,1] -> [[1*3+2*4+1, 1*5+2*6+1]] = [[12,18]]
        let mut g = Graph::new();
        let x = g.input(tensor2(1, 2, &[1.0, 2.0]));
        let w = g.param(tensor2(2, 2, &[3.0, 5.0, 4.0, 6.0]));
        let b = g.param(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[12.0, 18.0]);
    }

    #[test]
    fn dense_shape_mismatch_is_diagnosed() {
        let mut g = Graph::new();
        let x = g.input(tensor2(1, 3, &[1.0, 2.0, 3.0]));
        let w = g.param(tensor2(2, 2, &[3.0, 5.0, 4.0, 6.0]));
        let b = g.param(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let err = g.dense(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dense") && msg.contains('3'), "{msg}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap());
        let k = g.param(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.param(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = g.conv2d(x, k, b, 1, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_ones_kernel_counts_neighbors() {
        // 3x3 ones kernel over 3x3 ones input, padding 1: center sees 9 taps,
        // corners see 4.
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let k = g.param(Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let b = g.param(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = g.conv2d(x, k, b, 1, 1, 1).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(d[corner], 4.0);
        }
    }

    #[test]
    fn conv_dilation_scatters_impulse() {
        // Delta input, dilated 3x3 kernel: the impulse response reproduces the
        // kernel at stride-2 taps around the center.
        let n = 9;
        let mut data = vec![0.0; n * n];
        data[4 * n + 4] = 1.0; // center impulse
        let kernel: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, n, n], data).unwrap());
        let k = g.param(Tensor::from_vec(&[1, 1, 3, 3], kernel.clone()).unwrap());
        let b = g.param(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = g.conv2d(x, k, b, 1, 2, 2).unwrap();
        let d = g.value(y).data();
        assert_eq!(g.value(y).shape(), &[1, 1, n, n]);
        // Cross-correlation flips the kernel in the impulse response.
        for i in 0..3 {
            for j in 0..3 {
                let oy = 4 + 2 - 2 * i as isize;
                let ox = 4 + 2 - 2 * j as isize;
                let got = d[(oy * n as isize + ox) as usize];
                assert_eq!(got, kernel[i * 3 + j], "tap {i},{j}");
            }
        }
        // everything else zero
        let total: f64 = d.iter().sum();
        assert_eq!(total, kernel.iter().sum::<f64>());
    }

    #[test]
    fn conv_rejects_bad_stride_dilation() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 3, 3]));
        let k = g.param(Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.param(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, k, b, 0, 1, 1).is_err());
        assert!(g.conv2d(x, k, b, 1, 0, 1).is_err());
    }

    #[test]
    fn conv_same_padding_preserves_extent() {
        for (h, w, kk, dil) in [(8, 8, 3, 1), (5, 7, 3, 2), (9, 4, 5, 1)] {
            let pad = dil * (kk - 1) / 2;
            let mut g = Graph::new();
            let x = g.input(Tensor::zeros(&[2, 3, h, w]));
            let k = g.param(Tensor::zeros(&[4, 3, kk, kk]));
            let b = g.param(Tensor::zeros(&[4]));
            let y = g.conv2d(x, k, b, 1, dil, pad).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 4, h, w]);
        }
    }

    #[test]
    fn attention_single_token_returns_v() {
        let mut g = Graph::new();
        let q = g.input(Tensor::from_vec(&[1, 1, 4], vec![3.0, -1.0, 2.0, 0.5]).unwrap());
        let k = g.input(Tensor::from_vec(&[1, 1, 4], vec![-2.0, 1.0, 9.0, 4.0]).unwrap());
        let v = g.input(Tensor::from_vec(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.attention(q, k, v).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn attention_concentrates_on_dominant_key() {
        // One key with much larger norm aligned with the query dominates the
        // softmax row; verify against a directly computed softmax.
        let l = 3;
        let d = 2;
        let q: Vec<f64> = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut k = vec![0.1, 0.0, 0.2, 0.0, 0.1, 0.0];
        k[2] = 30.0; // token 1 dominates
        let v: Vec<f64> = vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0];
        let mut g = Graph::new();
        let qn = g.input(Tensor::from_vec(&[1, l, d], q.clone()).unwrap());
        let kn = g.input(Tensor::from_vec(&[1, l, d], k.clone()).unwrap());
        let vn = g.input(Tensor::from_vec(&[1, l, d], v.clone()).unwrap());
        let y = g.attention(qn, kn, vn).unwrap();
        // direct reference
        let scale = 1.0 / (d as f64).sqrt();
        for r in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|c| scale * (q[r * d] * k[c * d] + q[r * d + 1] * k[c * d + 1]))
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for col in 0..d {
                let expect: f64 = (0..l).map(|c| exps[c] / z * v[c * d + col]).sum();
                let got = g.value(y).data()[r * d + col];
                assert!((got - expect).abs() < 1e-12, "row {r} col {col}: {got} vs {expect}");
            }
        }
        // concentration: output rows are close to v[token 1]
        let out = g.value(y).data();
        assert!((out[0] - 2.0).abs() < 1e-6 && (out[1] - 20.0).abs() < 1e-6);
    }

    #[test]
    fn attention_rejects_zero_d() {
        let mut g = Graph::new();
        let t = Tensor::zeros(&[1, 2, 1]);
        let q = g.input(t.clone());
        let k = g.input(t.clone());
        let bad = g.input(Tensor::zeros(&[1, 2, 2]));
        assert!(g.attention(q, k, bad).is_err());
        // d == 0 cannot be constructed through from_vec (zero extent), so the
        // shape primitive itself guards the contract.
        assert!(Tensor::from_vec(&[1, 2, 0], vec![]).is_err());
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[3], vec![0.0, -1.0, 2.0]).unwrap());
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let l = g.leaky_relu(x, 0.3).unwrap();
        assert!((g.value(l).data()[1] + 0.3).abs() < 1e-15);
        assert_eq!(g.value(l).data()[2], 2.0);
    }

    #[test]
    fn leaky_relu_alpha_domain() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(g.leaky_relu(x, 0.0).is_err());
        assert!(g.leaky_relu(x, 1.0).is_err());
        assert!(g.leaky_relu(x, 0.5).is_ok());
    }

    #[test]
    fn batchnorm_constant_input_yields_beta() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[4, 2, 3, 3], 7.5));
        let gamma = g.param(Tensor::filled(&[2], 1.0));
        let beta = g.param(Tensor::from_vec(&[2], vec![0.25, -0.5]).unwrap());
        let mut st = BatchNormState::new(2, 0.1, 1e-5);
        let y = g.batchnorm(x, gamma, beta, Mode::Train, &mut st).unwrap();
        let d = g.value(y).data();
        for n in 0..4 {
            for (ci, expect) in [0.25, -0.5].iter().enumerate() {
                let base = (n * 2 + ci) * 9;
                for i in 0..9 {
                    assert!((d[base + i] - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn batchnorm_rejects_batch_of_one_in_train() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let gamma = g.param(Tensor::filled(&[2], 1.0));
        let beta = g.param(Tensor::zeros(&[2]));
        let mut st = BatchNormState::new(2, 0.1, 1e-5);
        assert!(g.batchnorm(x, gamma, beta, Mode::Train, &mut st).is_err());
        assert!(g.batchnorm(x, gamma, beta, Mode::Infer, &mut st).is_ok());
    }

    #[test]
    fn batchnorm_normalizes_large_batch() {
        use rand::Rng;
        let mut rng = crate::util::derive_rng(99, 0);
        let b = 64;
        let plane = 16;
        let data: Vec<f64> = (0..b * plane).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[b, 1, 4, 4], data).unwrap());
        let gamma = g.param(Tensor::filled(&[1], 1.0));
        let beta = g.param(Tensor::zeros(&[1]));
        let mut st = BatchNormState::new(1, 0.1, 1e-5);
        let y = g.batchnorm(x, gamma, beta, Mode::Train, &mut st).unwrap();
        let d = g.value(y).data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn batchnorm_infer_is_deterministic_affine() {
        let mut st = BatchNormState::new(1, 0.1, 1e-5);
        st.running_mean[0] = 0.5;
        st.running_var[0] = 4.0;
        let run = |v: f64| {
            let mut g = Graph::new();
            let x = g.input(Tensor::filled(&[1, 1, 2, 2], v));
            let gamma = g.param(Tensor::filled(&[1], 2.0));
            let beta = g.param(Tensor::filled(&[1], 1.0));
            let mut s = st.clone();
            let y = g.batchnorm(x, gamma, beta, Mode::Infer, &mut s).unwrap();
            g.value(y).data()[0]
        };
        // affine: f(v) = 2*(v-0.5)/sqrt(4+eps) + 1
        let a = (run(3.0) - run(1.0)) / 2.0;
        let c = run(0.0);
        for v in [-2.0, 0.25, 5.0] {
            assert!((run(v) - (a * v + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), t.data());
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let theta = Tensor::from_vec(&[4], vec![0.5, -1.5, 2.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let p = g.param(theta.clone());
        let sq = {
            // x*x via mse against zero scaled: use mul-free route: mse(x,0)*n = sum(x^2)
            let zero = g.input(Tensor::zeros(&[4]));
            let m = g.mse(p, zero).unwrap();
            m
        };
        g.backward(sq).unwrap();
        let grad = g.grad(p).unwrap();
        for (gi, ti) in grad.iter().zip(theta.data()) {
            // d/dx mean(x^2) = 2x/n
            assert!((gi - 2.0 * ti / 4.0).abs() < 1e-12);
        }
    }
}
