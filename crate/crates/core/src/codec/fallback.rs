//! Non-AI fallback codec: fixed angular-delay truncation.
//!
//! Keeps the `codeword_length/2` complex coefficients nearest the delay-angle
//! origin in row-major order (complete leading delay rows first) and
//! zero-fills the rest on decode. Linear, training-free, deterministic; the
//! lifecycle manager reverts to this codec when model performance degrades.

use crate::channel::CsiSample;
use crate::{Error, Result};

/// Plane geometry plus the normalization frame the planes live in.
#[derive(Debug, Clone, PartialEq)]
pub struct FallbackGeometry {
    pub n_delay: usize,
    pub n_angle: usize,
    pub norm_offset: f64,
    pub norm_scale: f64,
}

impl FallbackGeometry {
    pub fn of(s: &CsiSample) -> Self {
        FallbackGeometry {
            n_delay: s.n_delay,
            n_angle: s.n_angle,
            norm_offset: s.norm_offset,
            norm_scale: s.norm_scale,
        }
    }

    fn input_dim(&self) -> usize {
        2 * self.n_delay * self.n_angle
    }

    /// Normalized-plane representation of a zero coefficient.
    fn zero_level(&self) -> f64 {
        (0.0 - self.norm_offset) / self.norm_scale + 0.5
    }
}

fn check_length(codeword_length: usize, input_dim: usize) -> Result<usize> {
    if codeword_length % 2 != 0 {
        return Err(Error::InvalidArg(format!(
            "fallback codeword length must be even (pairs of re/im), got {codeword_length}"
        )));
    }
    if codeword_length > input_dim {
        return Err(Error::InvalidArg(format!(
            "fallback codeword length {codeword_length} exceeds input dimension {input_dim}"
        )));
    }
    Ok(codeword_length / 2)
}

/// Retain the leading `codeword_length/2` complex coefficients (row-major).
/// The codeword interleaves their normalized re/im plane values.
pub fn fallback_encode(s: &CsiSample, codeword_length: usize) -> Result<Vec<f64>> {
    let keep = check_length(codeword_length, 2 * s.n_delay * s.n_angle)?;
    let mut out = Vec::with_capacity(codeword_length);
    for i in 0..keep {
        out.push(s.real_plane[i]);
        out.push(s.imag_plane[i]);
    }
    Ok(out)
}

/// Inverse of [`fallback_encode`]: restore the retained block, zero-fill the
/// tail. Returns stacked planes `[real, imag]` of length `2*nd*na`.
pub fn fallback_decode(codeword: &[f64], geom: &FallbackGeometry) -> Result<Vec<f64>> {
    let keep = check_length(codeword.len(), geom.input_dim())?;
    let plane = geom.n_delay * geom.n_angle;
    let zero = geom.zero_level();
    let mut planes = vec![zero; 2 * plane];
    for i in 0..keep {
        planes[i] = codeword[2 * i];
        planes[plane + i] = codeword[2 * i + 1];
    }
    Ok(planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_dataset, ScenarioProfile};

    fn sample() -> CsiSample {
        let mut p = ScenarioProfile::outdoor_like(21);
        p.n_subcarriers = 64;
        p.n_tx_antennas = 8;
        build_dataset(&p, 6, 8).unwrap().samples[0].clone()
    }

    #[test]
    fn full_length_codeword_reconstructs_exactly() {
        let s = sample();
        let cw = fallback_encode(&s, 2 * 8 * 8).unwrap();
        let planes = fallback_decode(&cw, &FallbackGeometry::of(&s)).unwrap();
        assert_eq!(planes, s.planes(), "bit-exact reconstruction");
    }

    #[test]
    fn truncation_zero_fills_the_tail() {
        let s = sample();
        let keep = 8; // 16 reals
        let cw = fallback_encode(&s, 2 * keep).unwrap();
        let geom = FallbackGeometry::of(&s);
        let planes = fallback_decode(&cw, &geom).unwrap();
        let plane = 64;
        for i in keep..plane {
            assert_eq!(planes[i], geom.zero_level());
            assert_eq!(planes[plane + i], geom.zero_level());
        }
        // retained block survives untouched
        assert_eq!(&planes[..keep], &s.real_plane[..keep]);
    }

    #[test]
    fn rejects_odd_and_oversized_codewords() {
        let s = sample();
        assert!(fallback_encode(&s, 7).is_err());
        assert!(fallback_encode(&s, 2 * 64 + 2).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let s = sample();
        assert_eq!(fallback_encode(&s, 32).unwrap(), fallback_encode(&s, 32).unwrap());
    }

    #[test]
    fn single_path_channel_survives_truncation() {
        // energy parked at the delay-angle origin is inside the retained
        // block, so reconstruction is near-exact
        use num_complex::Complex64;
        let nd = 8;
        let na = 8;
        let mut real = vec![0.0; nd * na];
        let mut imag = vec![0.0; nd * na];
        // coefficient block: first two delay rows carry everything
        real[0] = 0.9;
        imag[1] = -0.7;
        real[na + 2] = 0.3;
        let s = CsiSample {
            real_plane: real.iter().map(|v| v / 4.0 + 0.5).collect(),
            imag_plane: imag.iter().map(|v| v / 4.0 + 0.5).collect(),
            n_delay: nd,
            n_angle: na,
            norm_offset: 0.0,
            norm_scale: 4.0,
            scenario_name: "test".into(),
            sample_index: 0,
        };
        let cw = fallback_encode(&s, 2 * 2 * na).unwrap(); // keep 2 delay rows
        let planes = fallback_decode(&cw, &FallbackGeometry::of(&s)).unwrap();
        // NMSE on the de-normalized matrices
        let h: Vec<Complex64> = s.denormalize();
        let rec = CsiSample {
            real_plane: planes[..nd * na].to_vec(),
            imag_plane: planes[nd * na..].to_vec(),
            ..s.clone()
        };
        let hr = rec.denormalize();
        let err: f64 = h.iter().zip(&hr).map(|(a, b)| (a - b).norm_sqr()).sum();
        let pow: f64 = h.iter().map(|a| a.norm_sqr()).sum();
        let nmse_db = 10.0 * (err / pow).log10();
        assert!(nmse_db < -30.0, "nmse {nmse_db} dB");
    }
}
