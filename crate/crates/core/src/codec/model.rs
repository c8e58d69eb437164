//! Model facade: deterministic build, encode/decode, batched forward.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, NodeId, Tensor};
use crate::channel::CsiSample;
use crate::util::derive_rng;
use crate::{Error, Result};

use super::attention::AttentionNet;
use super::cnn::CnnNet;
use super::dilated::DilatedNet;
use super::layers::ForwardCtx;
use super::mlp::MlpNet;
use super::spec::{Family, ModelSpec, Provenance};

#[derive(Clone)]
pub(crate) enum Net {
    Mlp(MlpNet),
    Cnn(CnnNet),
    Dilated(DilatedNet),
    Attention(AttentionNet),
}

impl Net {
    fn encode(&self, g: &mut Graph, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        match self {
            Net::Mlp(n) => n.encode(g, x, ctx),
            Net::Cnn(n) => n.encode(g, x, ctx),
            Net::Dilated(n) => n.encode(g, x, ctx),
            Net::Attention(n) => n.encode(g, x, ctx),
        }
    }

    fn decode(&self, g: &mut Graph, c: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        match self {
            Net::Mlp(n) => n.decode(g, c, ctx),
            Net::Cnn(n) => n.decode(g, c, ctx),
            Net::Dilated(n) => n.decode(g, c, ctx),
            Net::Attention(n) => n.decode(g, c, ctx),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Net::Mlp(n) => n.visit(f),
            Net::Cnn(n) => n.visit(f),
            Net::Dilated(n) => n.visit(f),
            Net::Attention(n) => n.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Net::Mlp(n) => n.visit_mut(f),
            Net::Cnn(n) => n.visit_mut(f),
            Net::Dilated(n) => n.visit_mut(f),
            Net::Attention(n) => n.visit_mut(f),
        }
    }

    /// Apply staged batchnorm running-stat updates (forward order).
    fn apply_bn_updates(&mut self, updates: Vec<(Vec<f64>, Vec<f64>)>) {
        let mut iter = updates.into_iter();
        let mut apply = |bn: &mut super::layers::BatchNorm2dLayer| {
            if let Some((mean, var)) = iter.next() {
                bn.state.running_mean = mean;
                bn.state.running_var = var;
            }
        };
        match self {
            Net::Cnn(n) => n.visit_bn_mut(&mut apply),
            Net::Dilated(n) => n.visit_bn_mut(&mut apply),
            Net::Mlp(_) | Net::Attention(_) => {}
        }
    }

    /// Batchnorm running statistics in declaration order (checkpoint payload).
    fn bn_stats(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut collect = |bn: &super::layers::BatchNorm2dLayer| {
            out.push((bn.name.clone(), bn.state.running_mean.clone(), bn.state.running_var.clone()));
        };
        match self {
            Net::Cnn(n) => n.visit_bn(&mut collect),
            Net::Dilated(n) => n.visit_bn(&mut collect),
            Net::Mlp(_) | Net::Attention(_) => {}
        }
        out
    }

    fn set_bn_stats(&mut self, stats: Vec<(Vec<f64>, Vec<f64>)>) {
        self.apply_bn_updates(stats)
    }
}

/// Result of one training-mode forward: the graph (holding the loss and the
/// output), plus parameter bindings in declaration order.
pub struct ForwardPass {
    pub graph: Graph,
    pub loss: NodeId,
    pub output: NodeId,
    pub bindings: Vec<(String, NodeId)>,
}

/// A realized codec: spec plus weights for the encoder/decoder pair.
#[derive(Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub provenance: Provenance,
    pub train_epochs_applied: u32,
    pub(crate) net: Net,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("provenance", &self.provenance)
            .field("train_epochs_applied", &self.train_epochs_applied)
            .field("parameters", &self.param_count())
            .finish()
    }
}

impl Model {
    /// Deterministic build: weights are a pure function of the spec. A dry-run
    /// forward on a zero sample verifies the shape contract.
    pub fn build(spec: &ModelSpec) -> Result<Model> {
        spec.validate()?;
        let mut rng: ChaCha8Rng = derive_rng(spec.init_seed, 0x6d6f_64656c);
        let net = match spec.family {
            Family::Mlp => Net::Mlp(MlpNet::new(spec, &mut rng)),
            Family::Cnn => Net::Cnn(CnnNet::new(spec, &mut rng)),
            Family::DilatedCnn => Net::Dilated(DilatedNet::new(spec, &mut rng)),
            Family::Attention => Net::Attention(AttentionNet::new(spec, &mut rng)),
        };
        let model = Model {
            spec: spec.clone(),
            provenance: Provenance::Scratch,
            train_epochs_applied: 0,
            net,
        };
        // dry run: shapes must round-trip on a zero sample
        let zero = Tensor::zeros(&[1, 2, spec.n_delay, spec.n_angle]);
        let out = model.reconstruct_batch(&zero)?;
        debug_assert_eq!(out.shape(), zero.shape());
        let cw = model.encode_batch(&zero)?;
        if cw.shape() != [1, spec.codeword_length()] {
            return Err(Error::shape(
                "build_model",
                format!("encoder emits {:?}, expected codeword {}", cw.shape(), spec.codeword_length()),
            ));
        }
        Ok(model)
    }

    fn check_geometry(&self, s: &CsiSample) -> Result<()> {
        if s.n_delay != self.spec.n_delay || s.n_angle != self.spec.n_angle {
            return Err(Error::shape(
                "codec",
                format!(
                    "sample geometry {}x{} does not match model {}x{}",
                    s.n_delay, s.n_angle, self.spec.n_delay, self.spec.n_angle
                ),
            ));
        }
        Ok(())
    }

    /// Compress one sample to its feedback codeword (inference mode).
    pub fn encode(&self, s: &CsiSample) -> Result<Vec<f64>> {
        self.check_geometry(s)?;
        let x = Tensor::from_vec(&[1, 2, s.n_delay, s.n_angle], s.planes())?;
        Ok(self.encode_batch(&x)?.into_data())
    }

    /// Reconstruct normalized planes (`[0,1]`, length `2*nd*na`) from a
    /// codeword.
    pub fn decode(&self, codeword: &[f64]) -> Result<Vec<f64>> {
        if codeword.len() != self.spec.codeword_length() {
            return Err(Error::shape(
                "decode",
                format!(
                    "codeword length {} does not match spec {}",
                    codeword.len(),
                    self.spec.codeword_length()
                ),
            ));
        }
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(Mode::Infer);
        let c = g.input(Tensor::from_vec(&[1, codeword.len()], codeword.to_vec())?);
        let y = self.net.decode(&mut g, c, &mut ctx)?;
        Ok(g.value(y).data().to_vec())
    }

    /// decode(encode(s)) with the sample's normalization metadata attached.
    pub fn reconstruct_sample(&self, s: &CsiSample) -> Result<CsiSample> {
        self.check_geometry(s)?;
        let x = Tensor::from_vec(&[1, 2, s.n_delay, s.n_angle], s.planes())?;
        let out = self.reconstruct_batch(&x)?;
        let plane = s.n_delay * s.n_angle;
        let data = out.data();
        Ok(CsiSample {
            real_plane: data[..plane].to_vec(),
            imag_plane: data[plane..].to_vec(),
            ..s.clone()
        })
    }

    /// Batched inference-mode encode.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(Mode::Infer);
        let xin = g.input(x.clone());
        let c = self.net.encode(&mut g, xin, &mut ctx)?;
        Ok(g.value(c).clone())
    }

    /// Batched inference-mode decode(encode(x)); `x` is `[B,2,nd,na]`.
    pub fn reconstruct_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(Mode::Infer);
        let xin = g.input(x.clone());
        let c = self.net.encode(&mut g, xin, &mut ctx)?;
        let y = self.net.decode(&mut g, c, &mut ctx)?;
        Ok(g.value(y).clone())
    }

    /// Training-mode forward through encoder, decoder, and MSE loss against
    /// the input. Batchnorm running statistics are updated in place.
    pub fn forward_loss(&mut self, batch: &Tensor) -> Result<ForwardPass> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(Mode::Train);
        let xin = g.input(batch.clone());
        let c = self.net.encode(&mut g, xin, &mut ctx)?;
        let y = self.net.decode(&mut g, c, &mut ctx)?;
        let target = g.input(batch.clone());
        let loss = g.mse(y, target)?;
        self.net.apply_bn_updates(std::mem::take(&mut ctx.bn_updates));
        Ok(ForwardPass {
            graph: g,
            loss,
            output: y,
            bindings: ctx.bindings,
        })
    }

    /// Validation-mode MSE without building gradients.
    pub fn eval_loss(&self, batch: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(Mode::Infer);
        let xin = g.input(batch.clone());
        let c = self.net.encode(&mut g, xin, &mut ctx)?;
        let y = self.net.decode(&mut g, c, &mut ctx)?;
        let target = g.input(batch.clone());
        let loss = g.mse(y, target)?;
        Ok(g.value(loss).data()[0])
    }

    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        self.net.visit(&mut f);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        self.net.visit_mut(&mut f);
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    /// All state arrays in declaration order: parameters, then batchnorm
    /// running statistics. This is the checkpoint payload order.
    pub fn state_arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit_params(|name, t| out.push((name.to_string(), t.data().to_vec())));
        for (name, mean, var) in self.net.bn_stats() {
            out.push((format!("{name}.running_mean"), mean));
            out.push((format!("{name}.running_var"), var));
        }
        out
    }

    /// Load state arrays produced by [`Model::state_arrays`] (same order).
    pub fn load_state_arrays(&mut self, arrays: Vec<Vec<f64>>) -> Result<()> {
        let mut iter = arrays.into_iter();
        let mut err = None;
        self.visit_params_mut(|name, t| {
            if err.is_some() {
                return;
            }
            match iter.next() {
                Some(a) if a.len() == t.numel() => t.data_mut().copy_from_slice(&a),
                Some(a) => {
                    err = Some(Error::Corrupt(format!(
                        "array for `{name}` has {} values, expected {}",
                        a.len(),
                        t.numel()
                    )))
                }
                None => err = Some(Error::Corrupt("missing weight arrays".into())),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let n_bn = self.net.bn_stats().len();
        let mut stats = Vec::with_capacity(n_bn);
        for _ in 0..n_bn {
            let mean = iter.next().ok_or_else(|| Error::Corrupt("missing running stats".into()))?;
            let var = iter.next().ok_or_else(|| Error::Corrupt("missing running stats".into()))?;
            stats.push((mean, var));
        }
        if iter.next().is_some() {
            return Err(Error::Corrupt("extra state arrays in checkpoint".into()));
        }
        self.net.set_bn_stats(stats);
        Ok(())
    }
}

/// Stack normalized sample planes into a `[B, 2, nd, na]` batch tensor.
pub fn batch_from_samples<'a>(samples: impl Iterator<Item = &'a CsiSample>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    let mut geom = (0usize, 0usize);
    for s in samples {
        geom = (s.n_delay, s.n_angle);
        data.extend_from_slice(&s.real_plane);
        data.extend_from_slice(&s.imag_plane);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Dataset("empty batch".into()));
    }
    Tensor::from_vec(&[count, 2, geom.0, geom.1], data)
}
