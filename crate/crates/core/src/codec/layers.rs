//! Shared trainable layers and the forward-pass context.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormState, Graph, Mode, NodeId, Tensor};
use crate::Result;

use super::{BN_MOMENTUM, NORM_EPS};

/// Side-channel threaded through a forward pass.
///
/// In training mode every weight enters the graph as a gradient-bearing
/// parameter and is recorded in `bindings` (declaration order, matching the
/// optimizer's parameter walk); batchnorm layers stage their running-stat
/// updates here so the pass itself can take `&self`.
pub(crate) struct ForwardCtx {
    pub mode: Mode,
    pub bindings: Vec<(String, NodeId)>,
    pub bn_updates: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ForwardCtx {
    pub fn new(mode: Mode) -> Self {
        ForwardCtx {
            mode,
            bindings: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    fn bind(&mut self, g: &mut Graph, name: &str, t: &Tensor) -> NodeId {
        match self.mode {
            Mode::Train => {
                let id = g.param(t.clone());
                self.bindings.push((name.to_string(), id));
                id
            }
            Mode::Infer => g.input(t.clone()),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect();
    Tensor::from_vec(shape, data).expect("static shape")
}

#[derive(Clone)]
pub(crate) struct DenseLayer {
    pub name: String,
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    pub fn new(name: impl Into<String>, rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            name: name.into(),
            w: glorot(rng, &[in_dim, out_dim], in_dim, out_dim),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    /// Apply to `[B, in]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let w = ctx.bind(g, &format!("{}.w", self.name), &self.w);
        let b = ctx.bind(g, &format!("{}.b", self.name), &self.b);
        g.dense(x, w, b)
    }

    /// Apply per token: `[B, L, in] -> [B, L, out]`.
    pub fn forward_tokens(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[b * l, d])?;
        let y = self.forward(g, flat, ctx)?;
        let out_dim = self.b.shape()[0];
        g.reshape(y, &[b, l, out_dim])
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.b", self.name), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

#[derive(Clone)]
pub(crate) struct Conv2dLayer {
    pub name: String,
    pub k: Tensor,
    pub b: Tensor,
    pub dilation: usize,
}

impl Conv2dLayer {
    /// 3x3 same-padding convolution at the given dilation.
    pub fn new(
        name: impl Into<String>,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        dilation: usize,
    ) -> Self {
        Conv2dLayer {
            name: name.into(),
            k: glorot(rng, &[out_ch, in_ch, 3, 3], in_ch * 9, out_ch * 9),
            b: Tensor::zeros(&[out_ch]),
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let k = ctx.bind(g, &format!("{}.k", self.name), &self.k);
        let b = ctx.bind(g, &format!("{}.b", self.name), &self.b);
        g.conv2d(x, k, b, 1, self.dilation, self.dilation)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.k", self.name), &self.k);
        f(&format!("{}.b", self.name), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.k", self.name), &mut self.k);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

#[derive(Clone)]
pub(crate) struct BatchNorm2dLayer {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BatchNormState,
}

impl BatchNorm2dLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2dLayer {
            name: name.into(),
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            state: BatchNormState::new(channels, BN_MOMENTUM, NORM_EPS),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let gamma = ctx.bind(g, &format!("{}.gamma", self.name), &self.gamma);
        let beta = ctx.bind(g, &format!("{}.beta", self.name), &self.beta);
        let mut st = self.state.clone();
        let y = g.batchnorm(x, gamma, beta, ctx.mode, &mut st)?;
        if ctx.mode == Mode::Train {
            ctx.bn_updates.push((st.running_mean, st.running_var));
        }
        Ok(y)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }
}

#[derive(Clone)]
pub(crate) struct LayerNormLayer {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormLayer {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNormLayer {
            name: name.into(),
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let gamma = ctx.bind(g, &format!("{}.gamma", self.name), &self.gamma);
        let beta = ctx.bind(g, &format!("{}.beta", self.name), &self.beta);
        g.layernorm(x, gamma, beta, NORM_EPS)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }
}
