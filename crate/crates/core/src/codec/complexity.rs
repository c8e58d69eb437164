//! Closed-form FLOPs and parameter accounting per (family, compression ratio).
//!
//! Conventions (one multiply-accumulate = 2 FLOPs; see `docs/flops.md` for the
//! full formula sheet):
//!
//! - dense `I -> O`:            `2*I*O + O` FLOPs, `I*O + O` parameters
//! - conv 3x3 same, `C -> F`:   `18*C*F*H*W + F*H*W` FLOPs, `9*C*F + F` params
//! - batchnorm (inference):     2 FLOPs per element
//! - layernorm:                 8 FLOPs per element
//! - leaky ReLU 1, sigmoid 4, gelu 15 FLOPs per element; residual add 1
//! - attention core `[L, d]`:   `4*L^2*d + 6*L^2` (scores, scale, softmax at
//!   5 FLOPs per element, value mix)
//!
//! Reshapes and permutes cost nothing. FLOPs are per single-sample inference.

use serde::{Deserialize, Serialize};

use crate::Result;

use super::spec::{Family, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub flops: u64,
    pub parameters: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub flops: u64,
    pub parameters: u64,
    pub layers: Vec<LayerCost>,
}

struct Tally {
    layers: Vec<LayerCost>,
}

impl Tally {
    fn new() -> Self {
        Tally { layers: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, flops: u64, parameters: u64) {
        self.layers.push(LayerCost {
            name: name.into(),
            flops,
            parameters,
        });
    }

    fn dense(&mut self, name: &str, i: u64, o: u64) {
        self.push(name, 2 * i * o + o, i * o + o);
    }

    /// Per-token dense applied to `l` tokens.
    fn dense_tokens(&mut self, name: &str, l: u64, i: u64, o: u64) {
        self.push(name, l * (2 * i * o + o), i * o + o);
    }

    fn conv3x3(&mut self, name: &str, c: u64, f: u64, hw: u64) {
        self.push(name, 18 * c * f * hw + f * hw, 9 * c * f + f);
    }

    fn batchnorm(&mut self, name: &str, channels: u64, hw: u64) {
        self.push(name, 2 * channels * hw, 2 * channels);
    }

    fn layernorm(&mut self, name: &str, l: u64, d: u64) {
        self.push(name, 8 * l * d, 2 * d);
    }

    fn act(&mut self, name: &str, per_element: u64, n: u64) {
        self.push(name, per_element * n, 0);
    }

    fn attention_core(&mut self, name: &str, l: u64, d: u64) {
        self.push(name, 4 * l * l * d + 6 * l * l, 0);
    }

    fn finish(self) -> ComplexityReport {
        let flops = self.layers.iter().map(|l| l.flops).sum();
        let parameters = self.layers.iter().map(|l| l.parameters).sum();
        ComplexityReport {
            flops,
            parameters,
            layers: self.layers,
        }
    }
}

/// Exact inference cost of the model a spec describes.
pub fn count_complexity(spec: &ModelSpec) -> Result<ComplexityReport> {
    spec.validate()?;
    let hw = (spec.n_delay * spec.n_angle) as u64;
    let input = spec.input_dim() as u64;
    let cw = spec.codeword_length() as u64;
    let blocks = spec.knobs.refine_blocks;
    let mut t = Tally::new();
    match spec.family {
        Family::Mlp => {
            let w = spec.knobs.mlp_refine_width as u64;
            t.dense("encoder.fc", input, cw);
            t.dense("decoder.fc", cw, input);
            for i in 0..blocks {
                t.dense(&format!("decoder.block{i}.narrow"), input, w);
                t.act(&format!("decoder.block{i}.act1"), 1, w);
                t.dense(&format!("decoder.block{i}.wide"), w, input);
                t.act(&format!("decoder.block{i}.skip"), 1, input);
                t.act(&format!("decoder.block{i}.act2"), 1, input);
            }
            t.act("decoder.sigmoid", 4, input);
        }
        Family::Cnn => {
            t.conv3x3("encoder.head.conv", 2, 2, hw);
            t.batchnorm("encoder.head.bn", 2, hw);
            t.act("encoder.head.act", 1, 2 * hw);
            t.dense("encoder.fc", input, cw);
            t.dense("decoder.fc", cw, input);
            for i in 0..blocks {
                let p = format!("decoder.block{i}");
                t.conv3x3(&format!("{p}.a.conv"), 2, 8, hw);
                t.batchnorm(&format!("{p}.a.bn"), 8, hw);
                t.act(&format!("{p}.a.act"), 1, 8 * hw);
                t.conv3x3(&format!("{p}.b.conv"), 8, 16, hw);
                t.batchnorm(&format!("{p}.b.bn"), 16, hw);
                t.act(&format!("{p}.b.act"), 1, 16 * hw);
                t.conv3x3(&format!("{p}.c.conv"), 16, 2, hw);
                t.batchnorm(&format!("{p}.c.bn"), 2, hw);
                t.act(&format!("{p}.skip"), 1, 2 * hw);
                t.act(&format!("{p}.act"), 1, 2 * hw);
            }
            t.act("decoder.sigmoid", 4, input);
        }
        Family::DilatedCnn => {
            let w = spec.knobs.dilated_branch_width as u64;
            t.conv3x3("encoder.head.conv", 2, 2, hw);
            t.batchnorm("encoder.head.bn", 2, hw);
            t.act("encoder.head.act", 1, 2 * hw);
            t.dense("encoder.fc", input, cw);
            t.dense("decoder.fc", cw, input);
            for i in 0..blocks {
                let p = format!("decoder.block{i}");
                for d in 1..=3u32 {
                    t.conv3x3(&format!("{p}.dil{d}.a.conv"), 2, w, hw);
                    t.batchnorm(&format!("{p}.dil{d}.a.bn"), w, hw);
                    t.act(&format!("{p}.dil{d}.a.act"), 1, w * hw);
                    t.conv3x3(&format!("{p}.dil{d}.b.conv"), w, 2, hw);
                    t.batchnorm(&format!("{p}.dil{d}.b.bn"), 2, hw);
                }
                t.act(&format!("{p}.branch_sum"), 1, 2 * (2 * hw));
                t.act(&format!("{p}.skip"), 1, 2 * hw);
                t.act(&format!("{p}.act"), 1, 2 * hw);
            }
            t.act("decoder.sigmoid", 4, input);
        }
        Family::Attention => {
            let l = spec.n_delay as u64;
            let td = 2 * spec.n_angle as u64;
            let dm = spec.knobs.attn_model_dim as u64;
            let ff = spec.knobs.attn_ff_width as u64;
            let flat = l * dm;
            t.dense_tokens("encoder.embed", l, td, dm);
            let mut block = |t: &mut Tally, p: &str| {
                t.layernorm(&format!("{p}.ln1"), l, dm);
                for w in ["wq", "wk", "wv"] {
                    t.dense_tokens(&format!("{p}.{w}"), l, dm, dm);
                }
                t.attention_core(&format!("{p}.attn"), l, dm);
                t.dense_tokens(&format!("{p}.wo"), l, dm, dm);
                t.act(&format!("{p}.skip1"), 1, flat);
                t.layernorm(&format!("{p}.ln2"), l, dm);
                t.dense_tokens(&format!("{p}.ff1"), l, dm, ff);
                t.act(&format!("{p}.gelu"), 15, l * ff);
                t.dense_tokens(&format!("{p}.ff2"), l, ff, dm);
                t.act(&format!("{p}.skip2"), 1, flat);
            };
            for i in 0..spec.knobs.attn_blocks {
                block(&mut t, &format!("encoder.block{i}"));
            }
            t.dense("encoder.fc", flat, cw);
            t.dense("decoder.fc", cw, flat);
            for i in 0..spec.knobs.attn_blocks {
                block(&mut t, &format!("decoder.block{i}"));
            }
            t.dense_tokens("decoder.out", l, dm, td);
            t.act("decoder.sigmoid", 4, input);
        }
    }
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Model, Ratio};

    #[test]
    fn single_dense_layer_hand_formula() {
        // 512 -> 256: 2*512*256 + 256 FLOPs, 512*256 + 256 parameters
        let mut t = Tally::new();
        t.dense("fc", 512, 256);
        let r = t.finish();
        assert_eq!(r.flops, 262_400);
        assert_eq!(r.parameters, 131_328);
    }

    #[test]
    fn totals_equal_breakdown_sums() {
        for family in Family::ALL {
            for den in [4u32, 16, 64] {
                let spec = ModelSpec::new(family, Ratio::one_over(den), 0);
                let r = count_complexity(&spec).unwrap();
                assert_eq!(r.flops, r.layers.iter().map(|l| l.flops).sum::<u64>());
                assert_eq!(r.parameters, r.layers.iter().map(|l| l.parameters).sum::<u64>());
            }
        }
    }

    #[test]
    fn parameter_totals_match_allocated_scalars() {
        // exact cross-check against the actual weight allocation, all 12 cells
        for family in Family::ALL {
            for den in [4u32, 16, 64] {
                let spec = ModelSpec::new(family, Ratio::one_over(den), 3);
                let report = count_complexity(&spec).unwrap();
                let model = Model::build(&spec).unwrap();
                assert_eq!(
                    report.parameters as usize,
                    model.param_count(),
                    "{family:?} 1/{den}"
                );
            }
        }
    }

    #[test]
    fn attention_dominates_every_family_at_every_cr() {
        for den in [4u32, 16, 64] {
            let attn = count_complexity(&ModelSpec::new(Family::Attention, Ratio::one_over(den), 0)).unwrap();
            for family in [Family::Mlp, Family::Cnn, Family::DilatedCnn] {
                let other = count_complexity(&ModelSpec::new(family, Ratio::one_over(den), 0)).unwrap();
                assert!(attn.flops > other.flops, "1/{den} {family:?}");
                if den == 4 {
                    assert!(
                        attn.flops >= 5 * other.flops,
                        "1/4 {family:?}: {} vs {}",
                        attn.flops,
                        other.flops
                    );
                }
            }
            // calibration band vs the cnn family at CR 1/4
            if den == 4 {
                let cnn = count_complexity(&ModelSpec::new(Family::Cnn, Ratio::one_over(4), 0)).unwrap();
                let ratio = attn.flops as f64 / cnn.flops as f64;
                assert!((5.0..=15.0).contains(&ratio), "attention/cnn ratio {ratio:.2}");
            }
        }
    }

    #[test]
    fn flops_fall_monotonically_with_compression() {
        for family in Family::ALL {
            let f = |den| {
                count_complexity(&ModelSpec::new(family, Ratio::one_over(den), 0))
                    .unwrap()
                    .flops
            };
            let (a, b, c) = (f(4), f(16), f(64));
            assert!(a >= b && b >= c, "{family:?}: {a} {b} {c}");
        }
    }

    #[test]
    fn mlp_shows_the_largest_relative_drop() {
        let f = |family, den| {
            count_complexity(&ModelSpec::new(family, Ratio::one_over(den), 0))
                .unwrap()
                .flops as f64
        };
        // mlp at 1/64 is at most 0.6x of its 1/4 cost
        assert!(f(Family::Mlp, 64) <= 0.6 * f(Family::Mlp, 4));
        // attention barely moves (< 15%), every other family drops > 25%
        let drop = |family| 1.0 - f(family, 64) / f(family, 4);
        assert!(drop(Family::Attention) < 0.15, "attention drop {}", drop(Family::Attention));
        for family in [Family::Mlp, Family::Cnn, Family::DilatedCnn] {
            assert!(drop(family) > 0.25, "{family:?} drop {}", drop(family));
        }
    }
}
