//! Model persistence: a JSON manifest (`model.json`) naming raw
//! little-endian f32 blobs stored back to back in `model.bin`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelParams, NetworkSpec};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "model.bin";

/// Full state of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub step: usize,
    pub rng: Option<RngState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob file.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    spec: NetworkSpec,
    tensors: Vec<TensorEntry>,
    metadata: TrainingMetadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ModelParams,
    pub metadata: TrainingMetadata,
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.params.named_tensors() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset, length: blob.len() - offset });
    }
    let manifest = Manifest { spec: ckpt.spec.clone(), tensors, metadata: ckpt.metadata.clone() };
    // blob first: a manifest never points at a blob older than itself
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = std::fs::read(dir.join(BLOB_FILE))?;
    let mut tensors = BTreeMap::new();
    let mut covered = 0;
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.length != numel * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes recorded for {} values",
                e.name, e.length, numel
            )));
        }
        let bytes = e
            .offset
            .checked_add(e.length)
            .and_then(|end| blob.get(e.offset..end))
            .ok_or_else(|| Error::Checkpoint(format!("{}: blob is too short", e.name)))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
        }
        covered += e.length;
    }
    if covered != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest accounts for {covered}",
            blob.len()
        )));
    }
    let params = ModelParams::from_named(&manifest.spec, tensors)?;
    if !manifest.spec.layers.is_empty() {
        let topo = manifest.spec.topology()?;
        params.check(&manifest.spec, &topo)?;
    }
    Ok(Checkpoint { spec: manifest.spec, params, metadata: manifest.metadata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{vgg_small, VGG_SMALL_WIDTHS};
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let spec = vgg_small([16, 16, 3], 3, &[4, 4, 4, 4, 4, 4, 4, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&spec, &mut rng).unwrap();
        let _: u64 = rng.random();
        Checkpoint { spec, params, metadata: TrainingMetadata { step: 17, rng: Some(RngState::capture(&rng)) } }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample();
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        let mut a = ckpt.metadata.rng.unwrap().restore();
        let mut b = back.metadata.rng.unwrap().restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn empty_spec_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec { layers: vec![], input_shape: [1, 1, 1], classes: 1 };
        let ckpt = Checkpoint { spec, params: ModelParams { layers: vec![] }, metadata: TrainingMetadata::default() };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), ckpt);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample()).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let mut blob = std::fs::read(&path).unwrap();
        blob.truncate(blob.len() - 4);
        std::fs::write(&path, blob).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn vgg_small_round_trip() {
        let spec = vgg_small([16, 16, 3], 2, &VGG_SMALL_WIDTHS).unwrap();
        let params = ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint { spec, params, metadata: TrainingMetadata::default() };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap().params, ckpt.params);
    }
}
