//! Clustered-multipath channel realization and angular-delay preprocessing.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::util::derive_rng;

use super::profile::ScenarioProfile;

const DEG: f64 = std::f64::consts::PI / 180.0;
/// Intra-cluster delay jitter as a fraction of the cluster delay spread.
const DELAY_JITTER_FRAC: f64 = 0.1;
/// Cluster center angles are drawn uniformly from this sector (degrees).
const SECTOR_DEG: f64 = 60.0;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Box-Muller standard normal; two uniforms per draw keeps the stream layout
/// independent of call order.
fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn circular_gaussian(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(std_normal(rng), std_normal(rng)) / 2.0_f64.sqrt()
}

struct Ray {
    gain: Complex64,
    delay_s: f64,
    sin_angle: f64,
}

/// One frequency-domain channel realization: an `n_subcarriers x n_tx`
/// matrix, row per subcarrier. Expected per-element power is 1. Randomness
/// derives only from `(profile.master_seed, index)`.
pub fn generate_frequency_channel(profile: &ScenarioProfile, index: u32) -> Vec<Complex64> {
    let mut rng = derive_rng(profile.master_seed, index as u64);
    let spread_s = profile.delay_spread_ns * 1e-9;
    let n_paths = profile.n_clusters * profile.paths_per_cluster;

    // Cluster geometry: exponential delay profile, uniform sector angles,
    // powers decaying with delay (then normalized to unit total).
    let mut rays: Vec<Ray> = Vec::with_capacity(n_paths + 1);
    let mut cluster_power = Vec::with_capacity(profile.n_clusters);
    let mut cluster_delay = Vec::with_capacity(profile.n_clusters);
    let mut cluster_angle = Vec::with_capacity(profile.n_clusters);
    for _ in 0..profile.n_clusters {
        let delay = -spread_s * (1.0 - rng.gen::<f64>()).ln();
        cluster_delay.push(delay);
        cluster_angle.push(uniform(&mut rng, -SECTOR_DEG, SECTOR_DEG));
        cluster_power.push((-delay / spread_s).exp());
    }
    let total: f64 = cluster_power.iter().sum();
    for p in &mut cluster_power {
        *p /= total;
    }

    for c in 0..profile.n_clusters {
        let per_path = cluster_power[c] / profile.paths_per_cluster as f64;
        for _ in 0..profile.paths_per_cluster {
            let angle = cluster_angle[c] + profile.angle_spread_deg * std_normal(&mut rng);
            let delay = (cluster_delay[c] + DELAY_JITTER_FRAC * spread_s * std_normal(&mut rng)).max(0.0);
            rays.push(Ray {
                gain: circular_gaussian(&mut rng) * per_path.sqrt(),
                delay_s: delay,
                sin_angle: (angle * DEG).sin(),
            });
        }
    }

    // Rician split: LOS ray at zero excess delay with a random phase.
    let los_frac = match profile.rician_k_db {
        Some(k_db) => {
            let k = 10f64.powf(k_db / 10.0);
            if k.is_infinite() {
                1.0
            } else {
                k / (k + 1.0)
            }
        }
        None => 0.0,
    };
    let nlos_scale = (1.0 - los_frac).sqrt();
    for r in &mut rays {
        r.gain *= nlos_scale;
    }
    if los_frac > 0.0 {
        let angle = uniform(&mut rng, -SECTOR_DEG, SECTOR_DEG);
        let phase = uniform(&mut rng, 0.0, 2.0 * std::f64::consts::PI);
        rays.push(Ray {
            gain: Complex64::from_polar(los_frac.sqrt(), phase),
            delay_s: 0.0,
            sin_angle: (angle * DEG).sin(),
        });
    }

    // H[s, a] = sum_rays gain * exp(-j 2 pi f_s tau) * exp(j pi a sin(theta))
    let n_sub = profile.n_subcarriers;
    let n_tx = profile.n_tx_antennas;
    let df = profile.subcarrier_spacing_khz * 1e3;
    let mut h = vec![Complex64::new(0.0, 0.0); n_sub * n_tx];
    let mut steer = vec![Complex64::new(0.0, 0.0); n_tx];
    for ray in &rays {
        for (a, s) in steer.iter_mut().enumerate() {
            *s = Complex64::from_polar(1.0, std::f64::consts::PI * a as f64 * ray.sin_angle);
        }
        // phase ramp across subcarriers advances by a constant rotation
        let step = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * df * ray.delay_s);
        let mut ramp = Complex64::new(1.0, 0.0);
        for s in 0..n_sub {
            let g = ray.gain * ramp;
            let row = &mut h[s * n_tx..(s + 1) * n_tx];
            for (hv, sv) in row.iter_mut().zip(&steer) {
                *hv += g * sv;
            }
            ramp *= step;
        }
    }
    h
}

/// Unitary 2-D transform without delay truncation (`n_subcarriers` rows).
/// Energy-preserving; used by the truncation step and by Parseval checks.
pub fn to_angular_delay_full(h_freq: &[Complex64], n_sub: usize, n_tx: usize) -> Vec<Complex64> {
    transform(h_freq, n_sub, n_tx, n_sub)
}

/// Angular-delay representation truncated to the first `n_delay` delay rows.
pub fn to_angular_delay(h_freq: &[Complex64], n_sub: usize, n_tx: usize, n_delay: usize) -> Vec<Complex64> {
    assert!(n_delay <= n_sub, "n_delay {n_delay} exceeds subcarrier count {n_sub}");
    transform(h_freq, n_sub, n_tx, n_delay)
}

/// IDFT across subcarriers (delay axis, `rows` rows kept), then DFT across
/// antennas (angle axis); both unitary.
fn transform(h_freq: &[Complex64], n_sub: usize, n_tx: usize, rows: usize) -> Vec<Complex64> {
    assert_eq!(h_freq.len(), n_sub * n_tx);
    let mut delay = vec![Complex64::new(0.0, 0.0); rows * n_tx];
    let scale_d = 1.0 / (n_sub as f64).sqrt();
    let w = 2.0 * std::f64::consts::PI / n_sub as f64;
    for d in 0..rows {
        let row = &mut delay[d * n_tx..(d + 1) * n_tx];
        for s in 0..n_sub {
            let tw = Complex64::from_polar(scale_d, w * (d * s % n_sub) as f64);
            let src = &h_freq[s * n_tx..(s + 1) * n_tx];
            for (acc, v) in row.iter_mut().zip(src) {
                *acc += tw * v;
            }
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); rows * n_tx];
    let scale_a = 1.0 / (n_tx as f64).sqrt();
    let wa = -2.0 * std::f64::consts::PI / n_tx as f64;
    for d in 0..rows {
        let src = &delay[d * n_tx..(d + 1) * n_tx];
        let dst = &mut out[d * n_tx..(d + 1) * n_tx];
        for (a, slot) in dst.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, v) in src.iter().enumerate() {
                acc += Complex64::from_polar(scale_a, wa * (a * t % n_tx) as f64) * v;
            }
            *slot = acc;
        }
    }
    out
}

pub(crate) fn energy(m: &[Complex64]) -> f64 {
    m.iter().map(|v| v.norm_sqr()).sum()
}
