//! Dataset assembly: normalization, 4:1 split, binary import/export.

use std::io::Read;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::util::{atomic_write, derive_rng};
use crate::{Error, Result};

use super::generate::{generate_frequency_channel, to_angular_delay};
use super::profile::ScenarioProfile;

/// Reserved RNG stream for the train/validation shuffle (sample streams use
/// their index).
const SPLIT_STREAM: u64 = u64::MAX;

const MAGIC: &[u8; 4] = b"CSID";
const VERSION: u32 = 1;

/// One angular-delay channel matrix, stored as two normalized real planes.
///
/// `(value - 0.5) * norm_scale + norm_offset` recovers the raw coefficient
/// exactly; the affine metadata is shared by every sample of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub real_plane: Vec<f64>,
    pub imag_plane: Vec<f64>,
    pub n_delay: usize,
    pub n_angle: usize,
    pub norm_offset: f64,
    pub norm_scale: f64,
    pub scenario_name: String,
    pub sample_index: u32,
}

impl CsiSample {
    /// Recover the de-normalized complex matrix (row-major, delay-major).
    pub fn denormalize(&self) -> Vec<Complex64> {
        self.real_plane
            .iter()
            .zip(&self.imag_plane)
            .map(|(&re, &im)| {
                Complex64::new(
                    (re - 0.5) * self.norm_scale + self.norm_offset,
                    (im - 0.5) * self.norm_scale + self.norm_offset,
                )
            })
            .collect()
    }

    /// Normalized planes stacked `[real, imag]`, the codec input layout.
    pub fn planes(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.real_plane.len());
        v.extend_from_slice(&self.real_plane);
        v.extend_from_slice(&self.imag_plane);
        v
    }
}

/// Dataset-level metadata embedded in the binary file as a JSON blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub profile: ScenarioProfile,
    pub norm_offset: f64,
    pub norm_scale: f64,
    /// Hash of the manifest that produced this dataset, when CLI-driven.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<CsiSample>,
    pub meta: DatasetMeta,
    pub n_delay: usize,
    pub n_angle: usize,
    pub train_idx: Vec<u32>,
    pub val_idx: Vec<u32>,
}

impl Dataset {
    pub fn train_samples(&self) -> impl Iterator<Item = &CsiSample> {
        self.train_idx.iter().map(|&i| &self.samples[i as usize])
    }

    pub fn val_samples(&self) -> impl Iterator<Item = &CsiSample> {
        self.val_idx.iter().map(|&i| &self.samples[i as usize])
    }

    pub fn name(&self) -> &str {
        &self.meta.profile.name
    }
}

/// Train/validation sizes for an `n`-sample dataset at the 4:1 split
/// (validation share rounded to nearest).
pub fn split_counts(n: usize) -> (usize, usize) {
    let val = ((n + 2) / 5).max(1);
    (n - val, val)
}

/// Generate, transform, normalize, and split `n_samples` realizations.
pub fn build_dataset(profile: &ScenarioProfile, n_samples: usize, n_delay: usize) -> Result<Dataset> {
    profile.validate()?;
    if n_samples < 5 {
        return Err(Error::Dataset(format!(
            "cannot honor the 4:1 split with {n_samples} samples (need at least 5)"
        )));
    }
    if n_delay > profile.n_subcarriers {
        return Err(Error::Dataset(format!(
            "n_delay {} exceeds subcarrier count {}",
            n_delay, profile.n_subcarriers
        )));
    }
    let n_angle = profile.n_tx_antennas;

    let mut raw: Vec<Vec<Complex64>> = Vec::with_capacity(n_samples);
    for idx in 0..n_samples {
        let h = generate_frequency_channel(profile, idx as u32);
        raw.push(to_angular_delay(&h, profile.n_subcarriers, n_angle, n_delay));
    }

    // Global affine normalization over every real and imaginary part.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in &raw {
        for v in m {
            lo = lo.min(v.re).min(v.im);
            hi = hi.max(v.re).max(v.im);
        }
    }
    let (norm_offset, norm_scale) = if hi > lo {
        ((hi + lo) / 2.0, hi - lo)
    } else {
        // degenerate all-equal input: identity scale, offset at the value
        (lo, 1.0)
    };

    let samples: Vec<CsiSample> = raw
        .into_iter()
        .enumerate()
        .map(|(idx, m)| {
            let real_plane = m.iter().map(|v| (v.re - norm_offset) / norm_scale + 0.5).collect();
            let imag_plane = m.iter().map(|v| (v.im - norm_offset) / norm_scale + 0.5).collect();
            CsiSample {
                real_plane,
                imag_plane,
                n_delay,
                n_angle,
                norm_offset,
                norm_scale,
                scenario_name: profile.name.clone(),
                sample_index: idx as u32,
            }
        })
        .collect();

    let (train_idx, val_idx) = split_indices(profile.master_seed, n_samples);
    Ok(Dataset {
        samples,
        meta: DatasetMeta {
            profile: profile.clone(),
            norm_offset,
            norm_scale,
            manifest_hash: None,
        },
        n_delay,
        n_angle,
        train_idx,
        val_idx,
    })
}

/// Deterministic Fisher-Yates shuffle of `0..n`, then 4:1 partition.
fn split_indices(master_seed: u64, n: usize) -> (Vec<u32>, Vec<u32>) {
    use rand::Rng;
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut rng = derive_rng(master_seed, SPLIT_STREAM);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let (n_train, _) = split_counts(n);
    let val = order.split_off(n_train);
    (order, val)
}

// ── binary format ────────────────────────────────────────────────────
//
// magic "CSID" | version u32 | n_samples u32 | n_delay u16 | n_angle u16 |
// meta_len u32 | meta JSON | per-sample planes (real then imag, f64 LE) |
// train_len u32 | train u32 LE | val_len u32 | val u32 LE

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let meta = serde_json::to_vec(&ds.meta)?;
    let plane = ds.n_delay * ds.n_angle;
    let mut buf = Vec::with_capacity(24 + meta.len() + ds.samples.len() * plane * 16);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.n_delay as u16).to_le_bytes());
    buf.extend_from_slice(&(ds.n_angle as u16).to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    for s in &ds.samples {
        for v in s.real_plane.iter().chain(&s.imag_plane) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(ds.train_idx.len() as u32).to_le_bytes());
    for i in &ds.train_idx {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    buf.extend_from_slice(&(ds.val_idx.len() as u32).to_le_bytes());
    for i in &ds.val_idx {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    atomic_write(path, &buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("dataset file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Corrupt(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Corrupt(format!(
            "{}: unsupported dataset version {version}",
            path.display()
        )));
    }
    let n_samples = r.u32()? as usize;
    let n_delay = r.u16()? as usize;
    let n_angle = r.u16()? as usize;
    let meta_len = r.u32()? as usize;
    let meta: DatasetMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let plane = n_delay * n_angle;
    let mut samples = Vec::with_capacity(n_samples);
    for idx in 0..n_samples {
        let mut real_plane = Vec::with_capacity(plane);
        for _ in 0..plane {
            real_plane.push(r.f64()?);
        }
        let mut imag_plane = Vec::with_capacity(plane);
        for _ in 0..plane {
            imag_plane.push(r.f64()?);
        }
        samples.push(CsiSample {
            real_plane,
            imag_plane,
            n_delay,
            n_angle,
            norm_offset: meta.norm_offset,
            norm_scale: meta.norm_scale,
            scenario_name: meta.profile.name.clone(),
            sample_index: idx as u32,
        });
    }
    let train_len = r.u32()? as usize;
    let mut train_idx = Vec::with_capacity(train_len);
    for _ in 0..train_len {
        train_idx.push(r.u32()?);
    }
    let val_len = r.u32()? as usize;
    let mut val_idx = Vec::with_capacity(val_len);
    for _ in 0..val_len {
        val_idx.push(r.u32()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{}: trailing bytes", path.display())));
    }
    if train_idx
        .iter()
        .chain(&val_idx)
        .any(|&i| i as usize >= n_samples)
    {
        return Err(Error::Corrupt(format!("{}: split index out of range", path.display())));
    }
    Ok(Dataset {
        samples,
        meta,
        n_delay,
        n_angle,
        train_idx,
        val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_profile(seed: u64) -> ScenarioProfile {
        let mut p = ScenarioProfile::outdoor_like(seed);
        p.n_subcarriers = 64;
        p.n_tx_antennas = 8;
        p
    }

    #[test]
    fn split_is_exact_for_ten() {
        let ds = build_dataset(&tiny_profile(1), 10, 8).unwrap();
        assert_eq!(ds.train_idx.len(), 8);
        assert_eq!(ds.val_idx.len(), 2);
        let mut all: Vec<u32> = ds.train_idx.iter().chain(&ds.val_idx).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<u32>>());
    }

    #[test]
    fn split_counts_match_published_dataset_sizes() {
        // full-scale sanity: 83775 splits 4:1 exactly
        assert_eq!(split_counts(83775), (67020, 16755));
        assert_eq!(split_counts(20691), (16553, 4138));
        assert_eq!(split_counts(8000), (6400, 1600));
        assert_eq!(split_counts(5), (4, 1));
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(build_dataset(&tiny_profile(1), 4, 8).is_err());
    }

    #[test]
    fn normalization_bounds_and_roundtrip() {
        let ds = build_dataset(&tiny_profile(2), 12, 8).unwrap();
        for s in &ds.samples {
            for v in s.real_plane.iter().chain(&s.imag_plane) {
                assert!((0.0..=1.0).contains(v), "normalized value {v}");
            }
            // round trip: planes -> complex -> planes
            let m = s.denormalize();
            for (i, c) in m.iter().enumerate() {
                let re = (c.re - s.norm_offset) / s.norm_scale + 0.5;
                let im = (c.im - s.norm_offset) / s.norm_scale + 0.5;
                assert!((re - s.real_plane[i]).abs() < 1e-12);
                assert!((im - s.imag_plane[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_range_maps_zero_to_half() {
        // entries in [-a, a] put 0 at 0.5 exactly when min == -max
        let ds = build_dataset(&tiny_profile(3), 20, 8).unwrap();
        let zero_mapped = 0.5 + (0.0 - ds.meta.norm_offset) / ds.meta.norm_scale;
        // offset is the range midpoint, so this is 0.5 up to range asymmetry
        assert!((zero_mapped - 0.5).abs() < 0.5);
        // and the exact inverse relation holds by construction
        assert_eq!((0.5 - 0.5) * ds.meta.norm_scale + ds.meta.norm_offset, ds.meta.norm_offset);
    }

    #[test]
    fn datasets_are_pure_functions_of_profile() {
        let a = build_dataset(&tiny_profile(7), 15, 8).unwrap();
        let b = build_dataset(&tiny_profile(7), 15, 8).unwrap();
        assert_eq!(a, b);
        let c = build_dataset(&tiny_profile(8), 15, 8).unwrap();
        assert_ne!(a.samples[0].real_plane, c.samples[0].real_plane);
    }

    #[test]
    fn different_power_datasets_share_dynamic_range() {
        let quiet = tiny_profile(4);
        let mut loud = tiny_profile(4);
        loud.name = "loud".into();
        // same geometry, but delay spread change alters per-sample structure;
        // dynamic range is [0,1] for both by construction
        loud.delay_spread_ns = 600.0;
        for p in [quiet, loud] {
            let ds = build_dataset(&p, 10, 8).unwrap();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for s in &ds.samples {
                for v in s.real_plane.iter().chain(&s.imag_plane) {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
            }
            assert!(lo >= 0.0 && hi <= 1.0);
            assert!(hi - lo > 0.99, "range collapsed: {lo}..{hi}");
        }
    }

    #[test]
    fn file_roundtrip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = build_dataset(&tiny_profile(5), 10, 8).unwrap();
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
        // byte-identical on rewrite
        let bytes1 = std::fs::read(&path).unwrap();
        write_dataset(&back, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = build_dataset(&tiny_profile(6), 10, 8).unwrap();
        write_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Corrupt(_))));
        let ok = std::fs::read(&path).unwrap();
        std::fs::write(&path, &ok[..ok.len() - 3]).unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
