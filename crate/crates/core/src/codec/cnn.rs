//! CNN family: convolutional feature extraction with residual refinement.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::Result;

use super::layers::{BatchNorm2dLayer, Conv2dLayer, DenseLayer, ForwardCtx};
use super::spec::ModelSpec;
use super::LEAKY_ALPHA;

#[derive(Clone)]
pub(crate) struct ConvBn {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2dLayer,
}

impl ConvBn {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, dilation: usize) -> Self {
        ConvBn {
            conv: Conv2dLayer::new(format!("{name}.conv"), rng, in_ch, out_ch, dilation),
            bn: BatchNorm2dLayer::new(format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let y = self.conv.forward(g, x, ctx)?;
        self.bn.forward(g, y, ctx)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Residual refinement block: 2 -> 8 -> 16 -> 2 channels, identity skip.
#[derive(Clone)]
struct RefineBlock {
    a: ConvBn,
    b: ConvBn,
    c: ConvBn,
}

impl RefineBlock {
    fn new(name: &str, rng: &mut ChaCha8Rng) -> Self {
        RefineBlock {
            a: ConvBn::new(&format!("{name}.a"), rng, 2, 8, 1),
            b: ConvBn::new(&format!("{name}.b"), rng, 8, 16, 1),
            c: ConvBn::new(&format!("{name}.c"), rng, 16, 2, 1),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let t = self.a.forward(g, x, ctx)?;
        let t = g.leaky_relu(t, LEAKY_ALPHA)?;
        let t = self.b.forward(g, t, ctx)?;
        let t = g.leaky_relu(t, LEAKY_ALPHA)?;
        let t = self.c.forward(g, t, ctx)?;
        let t = g.add(x, t)?;
        g.leaky_relu(t, LEAKY_ALPHA)
    }
}

#[derive(Clone)]
pub(crate) struct CnnNet {
    n_delay: usize,
    n_angle: usize,
    enc: ConvBn,
    enc_fc: DenseLayer,
    dec_fc: DenseLayer,
    blocks: Vec<RefineBlock>,
}

impl CnnNet {
    pub fn new(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        let input = spec.input_dim();
        let cw = spec.codeword_length();
        let enc = ConvBn::new("encoder.head", rng, 2, 2, 1);
        let enc_fc = DenseLayer::new("encoder.fc", rng, input, cw);
        let dec_fc = DenseLayer::new("decoder.fc", rng, cw, input);
        let blocks = (0..spec.knobs.refine_blocks)
            .map(|i| RefineBlock::new(&format!("decoder.block{i}"), rng))
            .collect();
        CnnNet {
            n_delay: spec.n_delay,
            n_angle: spec.n_angle,
            enc,
            enc_fc,
            dec_fc,
            blocks,
        }
    }

    pub fn encode(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let b = g.value(x).shape()[0];
        let t = self.enc.forward(g, x, ctx)?;
        let t = g.leaky_relu(t, LEAKY_ALPHA)?;
        let flat = g.reshape(t, &[b, 2 * self.n_delay * self.n_angle])?;
        self.enc_fc.forward(g, flat, ctx)
    }

    pub fn decode(&self, g: &mut Graph, c: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let b = g.value(c).shape()[0];
        let t = self.dec_fc.forward(g, c, ctx)?;
        let mut x = g.reshape(t, &[b, 2, self.n_delay, self.n_angle])?;
        for block in &self.blocks {
            x = block.forward(g, x, ctx)?;
        }
        g.sigmoid(x)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.enc.visit(f);
        self.enc_fc.visit(f);
        self.dec_fc.visit(f);
        for b in &self.blocks {
            b.a.visit(f);
            b.b.visit(f);
            b.c.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.enc.visit_mut(f);
        self.enc_fc.visit_mut(f);
        self.dec_fc.visit_mut(f);
        for b in &mut self.blocks {
            b.a.visit_mut(f);
            b.b.visit_mut(f);
            b.c.visit_mut(f);
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm2dLayer)) {
        f(&mut self.enc.bn);
        for b in &mut self.blocks {
            f(&mut b.a.bn);
            f(&mut b.b.bn);
            f(&mut b.c.bn);
        }
    }

    pub fn visit_bn(&self, f: &mut dyn FnMut(&BatchNorm2dLayer)) {
        f(&self.enc.bn);
        for b in &self.blocks {
            f(&b.a.bn);
            f(&b.b.bn);
            f(&b.c.bn);
        }
    }
}
