//! The binary feature-stack store: one `.vbfs` file per utterance plus an
//! `index.jsonl` sidecar mapping ids to paths.
//!
//! Format, little-endian: magic `VBFS`, u32 version = 1, u32 num_layers,
//! u32 frames, u32 dim, then `num_layers * frames * dim` f32 values in
//! layer-major, frame-major order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VBFS";
const VERSION: u32 = 1;

/// Per-utterance tensor of encoder hidden states: layer 0 is the
/// convolutional feature map, layers 1.. are transformer layers bottom-up.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    file_id: String,
    num_layers: usize,
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureStack {
    pub fn new(
        file_id: impl Into<String>,
        num_layers: usize,
        frames: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if num_layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature stack needs positive dims, got ({num_layers}, {frames}, {dim})"
            )));
        }
        if data.len() != num_layers * frames * dim {
            return Err(Error::ShapeMismatch(format!(
                "feature stack ({num_layers}, {frames}, {dim}) needs {} values, got {}",
                num_layers * frames * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature stack".into()));
        }
        Ok(FeatureStack { file_id: file_id.into(), num_layers, frames, dim, data })
    }

    pub fn file_id(&self) -> &str {
        &self.file_id
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, layer: usize, frame: usize, d: usize) -> f32 {
        self.data[(layer * self.frames + frame) * self.dim + d]
    }

    /// One frame of one layer.
    pub fn frame(&self, layer: usize, frame: usize) -> &[f32] {
        let start = (layer * self.frames + frame) * self.dim;
        &self.data[start..start + self.dim]
    }
}

pub fn write_feature_stack(stack: &FeatureStack, path: &Path) -> Result<()> {
    let mut writer = BufWriter::new(std::fs::File::create(path)?);
    writer.write_all(MAGIC)?;
    writer.write_u32::<LittleEndian>(VERSION)?;
    writer.write_u32::<LittleEndian>(stack.num_layers as u32)?;
    writer.write_u32::<LittleEndian>(stack.frames as u32)?;
    writer.write_u32::<LittleEndian>(stack.dim as u32)?;
    for &v in &stack.data {
        writer.write_f32::<LittleEndian>(v)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_feature_stack(path: &Path) -> Result<FeatureStack> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::Truncated { path: path.to_path_buf() })?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    let version = reader.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), version });
    }
    let num_layers = reader.read_u32::<LittleEndian>()? as usize;
    let frames = reader.read_u32::<LittleEndian>()? as usize;
    let dim = reader.read_u32::<LittleEndian>()? as usize;
    let count = num_layers
        .checked_mul(frames)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| Error::Artifact(format!("{}: absurd dimensions", path.display())))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let v = reader
            .read_f32::<LittleEndian>()
            .map_err(|_| Error::Truncated { path: path.to_path_buf() })?;
        data.push(v);
    }
    let file_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    FeatureStack::new(file_id, num_layers, frames, dim, data)
}

/// One line of `index.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file_id: String,
    pub path: String,
    pub frames: usize,
    pub dim: usize,
}

pub fn write_index(entries: &[IndexEntry], path: &Path) -> Result<()> {
    let mut writer = BufWriter::new(std::fs::File::create(path)?);
    for entry in entries {
        serde_json::to_writer(&mut writer, entry)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Source of feature stacks for training and evaluation. Implementations
/// must be safe for concurrent reads.
pub trait FeatureProvider: Send + Sync {
    fn stack(&self, file_id: &str) -> Result<FeatureStack>;

    /// Whether the underlying encoder exposes trainable parameters. The
    /// reference providers are frozen snapshots, so this defaults to false.
    fn supports_finetuning(&self) -> bool {
        false
    }
}

/// Reads `.vbfs` files listed in a directory's `index.jsonl`.
pub struct PrecomputedProvider {
    root: PathBuf,
    entries: std::collections::HashMap<String, IndexEntry>,
}

impl PrecomputedProvider {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = read_index(&root.join("index.jsonl"))?
            .into_iter()
            .map(|e| (e.file_id.clone(), e))
            .collect();
        Ok(PrecomputedProvider { root: root.to_path_buf(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FeatureProvider for PrecomputedProvider {
    fn stack(&self, file_id: &str) -> Result<FeatureStack> {
        let entry = self
            .entries
            .get(file_id)
            .ok_or_else(|| Error::UnknownFileId(file_id.to_string()))?;
        read_feature_stack(&self.root.join(&entry.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(id: &str, l: usize, t: usize, d: usize, seed: u64) -> FeatureStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..l * t * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        FeatureStack::new(id, l, t, d, data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stack = random_stack("abc", 4, 11, 8, 1);
        let path = dir.path().join("abc.vbfs");
        write_feature_stack(&stack, &path).unwrap();
        let back = read_feature_stack(&path).unwrap();
        assert_eq!(back, stack);
    }

    #[test]
    fn file_size_matches_format() {
        let dir = tempfile::tempdir().unwrap();
        let (l, t, d) = (25, 49, 1024);
        let stack = FeatureStack::new("big", l, t, d, vec![0.25; l * t * d]).unwrap();
        let path = dir.path().join("big.vbfs");
        write_feature_stack(&stack, &path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len();
        // 4-byte magic + 16 bytes of u32 header + payload
        assert_eq!(size, 4 + 16 + (l * t * d * 4) as u64);
    }

    #[test]
    fn wrong_magic_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vbfs");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match read_feature_stack(&path) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let stack = random_stack("t", 2, 3, 4, 2);
        let path = dir.path().join("t.vbfs");
        write_feature_stack(&stack, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_feature_stack(&path) {
            Err(Error::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let stack = random_stack("v", 2, 3, 4, 3);
        let path = dir.path().join("v.vbfs");
        write_feature_stack(&stack, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        match read_feature_stack(&path) {
            Err(Error::UnsupportedVersion { version: 9, .. }) => {}
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }

    #[test]
    fn provider_reads_through_index() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("features")).unwrap();
        let stack = random_stack("s1", 3, 5, 6, 4);
        write_feature_stack(&stack, &dir.path().join("features/s1.vbfs")).unwrap();
        write_index(
            &[IndexEntry {
                file_id: "s1".into(),
                path: "features/s1.vbfs".into(),
                frames: 5,
                dim: 6,
            }],
            &dir.path().join("index.jsonl"),
        )
        .unwrap();

        let provider = PrecomputedProvider::open(dir.path()).unwrap();
        assert_eq!(provider.stack("s1").unwrap(), stack);
        match provider.stack("missing") {
            Err(Error::UnknownFileId(id)) => assert_eq!(id, "missing"),
            other => panic!("expected UnknownFileId, got {other:?}"),
        }
    }
}
