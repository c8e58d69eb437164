//! Checkpoint file format (the model-storage artifact).
//!
//! Layout: magic `CSIM` | version u32 | header_len u32 | header JSON (spec,
//! provenance, epochs, optional manifest hash) | state arrays in declaration
//! order as f64 LE | FNV-1a 64 checksum of the state byte region.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::util::{atomic_write, fnv1a64};
use crate::{Error, Result};

use super::model::Model;
use super::spec::{ModelSpec, Provenance};

const MAGIC: &[u8; 4] = b"CSIM";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    provenance: Provenance,
    train_epochs_applied: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest_hash: Option<String>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    save_checkpoint_tagged(model, path, None)
}

/// Save with a manifest hash recorded in the header (CLI runs).
pub fn save_checkpoint_tagged(model: &Model, path: &Path, manifest_hash: Option<&str>) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        provenance: model.provenance.clone(),
        train_epochs_applied: model.train_epochs_applied,
        manifest_hash: manifest_hash.map(str::to_string),
    })?;
    let arrays = model.state_arrays();
    let n_values: usize = arrays.iter().map(|(_, a)| a.len()).sum();
    let mut buf = Vec::with_capacity(20 + header.len() + n_values * 8 + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let weights_start = buf.len();
    for (_, a) in &arrays {
        for v in a {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf[weights_start..]);
    buf.extend_from_slice(&checksum.to_le_bytes());
    atomic_write(path, &buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt(format!("{}: not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Corrupt(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len + 8 {
        return Err(Error::Corrupt(format!("{}: truncated checkpoint", path.display())));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
    let weights = &bytes[12 + header_len..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a64(weights);
    if stored != computed {
        return Err(Error::Corrupt(format!(
            "{}: weight checksum mismatch (stored {stored:016x}, computed {computed:016x})",
            path.display()
        )));
    }
    let mut model = Model::build(&header.spec)?;
    let expected: usize = model.state_arrays().iter().map(|(_, a)| a.len()).sum();
    if weights.len() != expected * 8 {
        return Err(Error::Corrupt(format!(
            "{}: weight region holds {} bytes, expected {}",
            path.display(),
            weights.len(),
            expected * 8
        )));
    }
    let mut cursor = 0usize;
    let mut arrays = Vec::new();
    for (_, a) in model.state_arrays() {
        let n = a.len();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = (cursor + i) * 8;
            data.push(f64::from_le_bytes(weights[off..off + 8].try_into().unwrap()));
        }
        cursor += n;
        arrays.push(data);
    }
    model.load_state_arrays(arrays)?;
    model.provenance = header.provenance;
    model.train_epochs_applied = header.train_epochs_applied;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Family, ModelSpec, Ratio};

    fn tiny_spec() -> ModelSpec {
        let mut spec = ModelSpec::new(Family::Cnn, Ratio::one_over(4), 11);
        spec.n_delay = 8;
        spec.n_angle = 8;
        spec
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = Model::build(&tiny_spec()).unwrap();
        m.provenance = Provenance::Finetuned {
            sources: vec!["outdoor".into(), "indoor".into()],
        };
        m.train_epochs_applied = 70;
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec, m.spec);
        assert_eq!(back.provenance, m.provenance);
        assert_eq!(back.train_epochs_applied, 70);
        let a: Vec<_> = m.state_arrays();
        let b: Vec<_> = back.state_arrays();
        assert_eq!(a, b, "bit-exact state");
    }

    #[test]
    fn flipped_weight_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::build(&tiny_spec()).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 100; // inside the weight region
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::build(&tiny_spec()).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt(_))));
    }
}
