//! Model specification: family, compression ratio, geometry, width knobs.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mlp,
    Cnn,
    DilatedCnn,
    Attention,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Mlp, Family::Cnn, Family::DilatedCnn, Family::Attention];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::Cnn => "cnn",
            Family::DilatedCnn => "dilated_cnn",
            Family::Attention => "attention",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Family::Mlp),
            "cnn" => Ok(Family::Cnn),
            "dilated_cnn" | "dilated" => Ok(Family::DilatedCnn),
            "attention" => Ok(Family::Attention),
            other => Err(Error::InvalidArg(format!("unknown model family `{other}`"))),
        }
    }
}

/// Compression ratio as an exact rational (codeword length over input
/// dimension).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Self {
        Ratio { num, den }
    }

    /// `1/den`, the form the benchmark sweeps.
    pub fn one_over(den: u32) -> Self {
        Ratio { num: 1, den }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Width/depth knobs. Defaults are calibrated so the attention family's FLOPs
/// land 5-15x above the CNN family at CR 1/4.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Knobs {
    /// Bottleneck width of each MLP decoder refinement block.
    pub mlp_refine_width: usize,
    /// Decoder refinement blocks (all convolutional families and MLP).
    pub refine_blocks: usize,
    /// Mid width of each dilated branch.
    pub dilated_branch_width: usize,
    /// Attention model dimension (tokens are embedded into this width).
    pub attn_model_dim: usize,
    /// Attention feed-forward width.
    pub attn_ff_width: usize,
    /// Attention blocks per coder side.
    pub attn_blocks: usize,
}

impl Default for Knobs {
    fn default() -> Self {
        Knobs {
            mlp_refine_width: 256,
            refine_blocks: 2,
            dilated_branch_width: 4,
            attn_model_dim: 128,
            attn_ff_width: 512,
            attn_blocks: 2,
        }
    }
}

/// Immutable description of a codec model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub cr: Ratio,
    #[serde(default = "default_geometry")]
    pub n_delay: usize,
    #[serde(default = "default_geometry")]
    pub n_angle: usize,
    pub init_seed: u64,
    #[serde(default)]
    pub knobs: Knobs,
}

fn default_geometry() -> usize {
    32
}

impl ModelSpec {
    pub fn new(family: Family, cr: Ratio, init_seed: u64) -> Self {
        ModelSpec {
            family,
            cr,
            n_delay: 32,
            n_angle: 32,
            init_seed,
            knobs: Knobs::default(),
        }
    }

    /// Real input dimension: two planes of `n_delay x n_angle`.
    pub fn input_dim(&self) -> usize {
        2 * self.n_delay * self.n_angle
    }

    /// `round(input_dim * cr)`, the feedback payload length.
    pub fn codeword_length(&self) -> usize {
        (self.input_dim() as f64 * self.cr.value()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.cr.den == 0 || self.cr.num == 0 {
            return Err(Error::InvalidArg("compression ratio must be a positive rational".into()));
        }
        if self.n_delay == 0 || self.n_angle == 0 {
            return Err(Error::InvalidArg("model geometry extents must be positive".into()));
        }
        if self.codeword_length() < 1 {
            return Err(Error::InvalidArg(format!(
                "codeword length rounds to zero for geometry {}x{} at cr {}",
                self.n_delay, self.n_angle, self.cr
            )));
        }
        Ok(())
    }
}

/// Where a model's weights came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Fresh initialization, never trained.
    Scratch,
    /// Trained from scratch on one dataset.
    Pretrained { source: String },
    /// Pretrained then fine-tuned; sources in chronological order.
    Finetuned { sources: Vec<String> },
}

impl Provenance {
    pub fn is_trained(&self) -> bool {
        !matches!(self, Provenance::Scratch)
    }
}
