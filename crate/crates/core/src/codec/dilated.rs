//! Dilated-CNN family: refinement blocks with parallel dilation branches.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::Result;

use super::cnn::ConvBn;
use super::layers::{BatchNorm2dLayer, DenseLayer, ForwardCtx};
use super::spec::ModelSpec;
use super::LEAKY_ALPHA;

/// One dilation branch: 2 -> width -> 2 channels at a fixed dilation.
#[derive(Clone)]
struct Branch {
    a: ConvBn,
    b: ConvBn,
}

impl Branch {
    fn new(name: &str, rng: &mut ChaCha8Rng, width: usize, dilation: usize) -> Self {
        Branch {
            a: ConvBn::new(&format!("{name}.a"), rng, 2, width, dilation),
            b: ConvBn::new(&format!("{name}.b"), rng, width, 2, dilation),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let t = self.a.forward(g, x, ctx)?;
        let t = g.leaky_relu(t, LEAKY_ALPHA)?;
        self.b.forward(g, t, ctx)
    }
}

/// Branches at dilations 1, 2, 3 summed before the identity skip.
#[derive(Clone)]
struct RefineBlock {
    branches: Vec<Branch>,
}

impl RefineBlock {
    fn new(name: &str, rng: &mut ChaCha8Rng, width: usize) -> Self {
        let branches = (1..=3)
            .map(|d| Branch::new(&format!("{name}.dil{d}"), rng, width, d))
            .collect();
        RefineBlock { branches }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for br in &self.branches {
            let y = br.forward(g, x, ctx)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, y)?,
                None => y,
            });
        }
        let t = g.add(x, acc.expect("at least one branch"))?;
        g.leaky_relu(t, LEAKY_ALPHA)
    }
}

#[derive(Clone)]
pub(crate) struct DilatedNet {
    n_delay: usize,
    n_angle: usize,
    enc: ConvBn,
    enc_fc: DenseLayer,
    dec_fc: DenseLayer,
    blocks: Vec<RefineBlock>,
}

impl DilatedNet {
    pub fn new(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        let input = spec.input_dim();
        let cw = spec.codeword_length();
        let enc = ConvBn::new("encoder.head", rng, 2, 2, 1);
        let enc_fc = DenseLayer::new("encoder.fc", rng, input, cw);
        let dec_fc = DenseLayer::new("decoder.fc", rng, cw, input);
        let blocks = (0..spec.knobs.refine_blocks)
            .map(|i| RefineBlock::new(&format!("decoder.block{i}"), rng, spec.knobs.dilated_branch_width))
            .collect();
        DilatedNet {
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
            for br in &b.branches {
                br.a.visit(f);
                br.b.visit(f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.enc.visit_mut(f);
        self.enc_fc.visit_mut(f);
        self.dec_fc.visit_mut(f);
        for b in &mut self.blocks {
            for br in &mut b.branches {
                br.a.visit_mut(f);
                br.b.visit_mut(f);
            }
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm2dLayer)) {
        f(&mut self.enc.bn);
        for b in &mut self.blocks {
            for br in &mut b.branches {
                f(&mut br.a.bn);
                f(&mut br.b.bn);
            }
        }
    }

    pub fn visit_bn(&self, f: &mut dyn FnMut(&BatchNorm2dLayer)) {
        f(&self.enc.bn);
        for b in &self.blocks {
            for br in &b.branches {
                f(&br.a.bn);
                f(&br.b.bn);
            }
        }
    }
}
