//! MLP family: linear encoder, dense refinement decoder.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::Result;

use super::layers::{DenseLayer, ForwardCtx};
use super::spec::ModelSpec;
use super::LEAKY_ALPHA;

#[derive(Clone)]
struct RefineBlock {
    narrow: DenseLayer,
    wide: DenseLayer,
}

#[derive(Clone)]
pub(crate) struct MlpNet {
    n_delay: usize,
    n_angle: usize,
    enc_fc: DenseLayer,
    dec_fc: DenseLayer,
    blocks: Vec<RefineBlock>,
}

impl MlpNet {
    pub fn new(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        let input = spec.input_dim();
        let cw = spec.codeword_length();
        let width = spec.knobs.mlp_refine_width;
        let enc_fc = DenseLayer::new("encoder.fc", rng, input, cw);
        let dec_fc = DenseLayer::new("decoder.fc", rng, cw, input);
        let blocks = (0..spec.knobs.refine_blocks)
            .map(|i| RefineBlock {
                narrow: DenseLayer::new(format!("decoder.block{i}.narrow"), rng, input, width),
                wide: DenseLayer::new(format!("decoder.block{i}.wide"), rng, width, input),
            })
            .collect();
        MlpNet {
            n_delay: spec.n_delay,
            n_angle: spec.n_angle,
            enc_fc,
            dec_fc,
            blocks,
        }
    }

    pub fn encode(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let b = g.value(x).shape()[0];
        let flat = g.reshape(x, &[b, 2 * self.n_delay * self.n_angle])?;
        self.enc_fc.forward(g, flat, ctx)
    }

    pub fn decode(&self, g: &mut Graph, c: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let b = g.value(c).shape()[0];
        let mut x = self.dec_fc.forward(g, c, ctx)?;
        for block in &self.blocks {
            let t = block.narrow.forward(g, x, ctx)?;
            let t = g.leaky_relu(t, LEAKY_ALPHA)?;
            let t = block.wide.forward(g, t, ctx)?;
            let t = g.add(x, t)?;
            x = g.leaky_relu(t, LEAKY_ALPHA)?;
        }
        let x = g.sigmoid(x)?;
        g.reshape(x, &[b, 2, self.n_delay, self.n_angle])
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.enc_fc.visit(f);
        self.dec_fc.visit(f);
        for b in &self.blocks {
            b.narrow.visit(f);
            b.wide.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.enc_fc.visit_mut(f);
        self.dec_fc.visit_mut(f);
        for b in &mut self.blocks {
            b.narrow.visit_mut(f);
            b.wide.visit_mut(f);
        }
    }
}
