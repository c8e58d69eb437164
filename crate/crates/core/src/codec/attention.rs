//! Attention family: pre-norm single-head transformer blocks over delay-row
//! tokens.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::Result;

use super::layers::{DenseLayer, ForwardCtx, LayerNormLayer};
use super::spec::ModelSpec;

/// Pre-norm block: `x += attn(ln1(x)); x += ff(ln2(x))`.
#[derive(Clone)]
struct Block {
    ln1: LayerNormLayer,
    wq: DenseLayer,
    wk: DenseLayer,
    wv: DenseLayer,
    wo: DenseLayer,
    ln2: LayerNormLayer,
    ff1: DenseLayer,
    ff2: DenseLayer,
}

impl Block {
    fn new(name: &str, rng: &mut ChaCha8Rng, dim: usize, ff: usize) -> Self {
        Block {
            ln1: LayerNormLayer::new(format!("{name}.ln1"), dim),
            wq: DenseLayer::new(format!("{name}.wq"), rng, dim, dim),
            wk: DenseLayer::new(format!("{name}.wk"), rng, dim, dim),
            wv: DenseLayer::new(format!("{name}.wv"), rng, dim, dim),
            wo: DenseLayer::new(format!("{name}.wo"), rng, dim, dim),
            ln2: LayerNormLayer::new(format!("{name}.ln2"), dim),
            ff1: DenseLayer::new(format!("{name}.ff1"), rng, dim, ff),
            ff2: DenseLayer::new(format!("{name}.ff2"), rng, ff, dim),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let h = self.ln1.forward(g, x, ctx)?;
        let q = self.wq.forward_tokens(g, h, ctx)?;
        let k = self.wk.forward_tokens(g, h, ctx)?;
        let v = self.wv.forward_tokens(g, h, ctx)?;
        let a = g.attention(q, k, v)?;
        let o = self.wo.forward_tokens(g, a, ctx)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, x, ctx)?;
        let f = self.ff1.forward_tokens(g, h, ctx)?;
        let f = g.gelu(f)?;
        let f = self.ff2.forward_tokens(g, f, ctx)?;
        g.add(x, f)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(f);
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wo.visit(f);
        self.ln2.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(f);
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wo.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}

#[derive(Clone)]
pub(crate) struct AttentionNet {
    n_delay: usize,
    n_angle: usize,
    model_dim: usize,
    embed: DenseLayer,
    enc_blocks: Vec<Block>,
    enc_fc: DenseLayer,
    dec_fc: DenseLayer,
    dec_blocks: Vec<Block>,
    out_proj: DenseLayer,
}

impl AttentionNet {
    pub fn new(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        let token_dim = 2 * spec.n_angle;
        let dim = spec.knobs.attn_model_dim;
        let ff = spec.knobs.attn_ff_width;
        let cw = spec.codeword_length();
        let flat = spec.n_delay * dim;
        let embed = DenseLayer::new("encoder.embed", rng, token_dim, dim);
        let enc_blocks = (0..spec.knobs.attn_blocks)
            .map(|i| Block::new(&format!("encoder.block{i}"), rng, dim, ff))
            .collect();
        let enc_fc = DenseLayer::new("encoder.fc", rng, flat, cw);
        let dec_fc = DenseLayer::new("decoder.fc", rng, cw, flat);
        let dec_blocks = (0..spec.knobs.attn_blocks)
            .map(|i| Block::new(&format!("decoder.block{i}"), rng, dim, ff))
            .collect();
        let out_proj = DenseLayer::new("decoder.out", rng, dim, token_dim);
        AttentionNet {
            n_delay: spec.n_delay,
            n_angle: spec.n_angle,
            model_dim: dim,
            embed,
            enc_blocks,
            enc_fc,
            dec_fc,
            dec_blocks,
            out_proj,
        }
    }

    /// `[B,2,nd,na] -> [B, nd, 2*na]`: one token per delay row.
    fn tokens(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let b = g.value(x).shape()[0];
        let t = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(t, &[b, self.n_delay, 2 * self.n_angle])
    }

    pub fn encode(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let b = g.value(x).shape()[0];
        let t = self.tokens(g, x)?;
        let mut t = self.embed.forward_tokens(g, t, ctx)?;
        for block in &self.enc_blocks {
            t = block.forward(g, t, ctx)?;
        }
        let flat = g.reshape(t, &[b, self.n_delay * self.model_dim])?;
        self.enc_fc.forward(g, flat, ctx)
    }

    pub fn decode(&self, g: &mut Graph, c: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let b = g.value(c).shape()[0];
        let t = self.dec_fc.forward(g, c, ctx)?;
        let mut t = g.reshape(t, &[b, self.n_delay, self.model_dim])?;
        for block in &self.dec_blocks {
            t = block.forward(g, t, ctx)?;
        }
        let t = self.out_proj.forward_tokens(g, t, ctx)?;
        let t = g.reshape(t, &[b, self.n_delay, 2, self.n_angle])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.sigmoid(t)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embed.visit(f);
        for b in &self.enc_blocks {
            b.visit(f);
        }
        self.enc_fc.visit(f);
        self.dec_fc.visit(f);
        for b in &self.dec_blocks {
            b.visit(f);
        }
        self.out_proj.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embed.visit_mut(f);
        for b in &mut self.enc_blocks {
            b.visit_mut(f);
        }
        self.enc_fc.visit_mut(f);
        self.dec_fc.visit_mut(f);
        for b in &mut self.dec_blocks {
            b.visit_mut(f);
        }
        self.out_proj.visit_mut(f);
    }
}
