//! Reconstruction KPIs: NMSE and squared generalized cosine similarity.
//!
//! Both metrics operate on de-normalized complex matrices; normalization is
//! an implementation artifact of the codec input, not part of the KPI.

use num_complex::Complex64;

use crate::channel::CsiSample;
use crate::{Error, Result};

/// Per-sample normalized squared error `|h - h_hat|^2_F / |h|^2_F`.
///
/// Returns `None` when the reference has zero norm (the caller counts such
/// samples in diagnostics instead of folding them into the mean).
pub fn nmse_sample(h: &[Complex64], h_hat: &[Complex64]) -> Result<Option<f64>> {
    if h.len() != h_hat.len() {
        return Err(Error::shape(
            "nmse",
            format!("{} vs {} coefficients", h.len(), h_hat.len()),
        ));
    }
    let pow: f64 = h.iter().map(|v| v.norm_sqr()).sum();
    if pow == 0.0 {
        return Ok(None);
    }
    let err: f64 = h.iter().zip(h_hat).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(Some(err / pow))
}

/// Dataset-level NMSE: mean of per-sample ratios, then dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmseAccumulator {
    sum: f64,
    pub used: usize,
    /// Samples excluded because the reference had zero norm.
    pub skipped: usize,
}

impl Default for NmseAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl NmseAccumulator {
    pub fn new() -> Self {
        NmseAccumulator {
            sum: 0.0,
            used: 0,
            skipped: 0,
        }
    }

    pub fn push(&mut self, ratio: Option<f64>) {
        match ratio {
            Some(r) => {
                self.sum += r;
                self.used += 1;
            }
            None => self.skipped += 1,
        }
    }

    pub fn linear(&self) -> f64 {
        if self.used == 0 {
            f64::NAN
        } else {
            self.sum / self.used as f64
        }
    }

    /// `10 log10(linear)`; `-inf` when the linear value is exactly zero.
    pub fn db(&self) -> f64 {
        nmse_db(self.linear())
    }
}

pub fn nmse_db(linear: f64) -> f64 {
    if linear == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * linear.log10()
    }
}

/// Squared generalized cosine similarity, averaged over angular columns.
///
/// The matrices are `n_delay x n_angle` row-major; each angular column is
/// compared via `|h_hat_c^H h_c|^2 / (|h_hat_c|^2 |h_c|^2)`. Columns with a
/// zero norm on either side are skipped; if every column degenerates the
/// metric is undefined and an error is returned.
pub fn sgcs(h: &[Complex64], h_hat: &[Complex64], n_delay: usize, n_angle: usize) -> Result<f64> {
    if h.len() != h_hat.len() || h.len() != n_delay * n_angle {
        return Err(Error::shape(
            "sgcs",
            format!("{} vs {} coefficients for {n_delay}x{n_angle}", h.len(), h_hat.len()),
        ));
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    for c in 0..n_angle {
        let mut dot = Complex64::new(0.0, 0.0);
        let mut nh = 0.0;
        let mut nr = 0.0;
        for d in 0..n_delay {
            let a = h[d * n_angle + c];
            let b = h_hat[d * n_angle + c];
            dot += b.conj() * a;
            nh += a.norm_sqr();
            nr += b.norm_sqr();
        }
        if nh == 0.0 || nr == 0.0 {
            continue;
        }
        acc += dot.norm_sqr() / (nh * nr);
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArg(
            "sgcs: every angular column has zero norm on one side".into(),
        ));
    }
    Ok(acc / used as f64)
}

/// NMSE ratio and SGCS of a reconstructed sample against its reference.
pub fn sample_metrics(reference: &CsiSample, reconstruction: &CsiSample) -> Result<(Option<f64>, f64)> {
    let h = reference.denormalize();
    let r = reconstruction.denormalize();
    let ratio = nmse_sample(&h, &r)?;
    let s = sgcs(&h, &r, reference.n_delay, reference.n_angle)?;
    Ok((ratio, s))
}
