//! Chunk dataset persistence.
//!
//! Binary layout (all little-endian, magic `MSTCH01`):
//!
//! ```text
//! magic[7]
//! u32 joints  u32 block  u32 rotation_dim  f32 fps
//! per joint: i32 parent, f32 offset[3], u16 name_len, name bytes
//! u32 chunk_count
//! per chunk: u16 source_len, source bytes, u32 index, u32 variant,
//!            block * (3 + rotation_dim * joints) f32 frames (row-major)
//! ```
//!
//! The manifest is a TOML sidecar listing chunk ids per split with the seed
//! that produced the split.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use super::pipeline::DatasetSplit;
use super::{feature_dim, MotionSequence, ROTATION_DIM};
use crate::kinematics::Skeleton;
use crate::tensor::Real;
use crate::{CoreError, Result};

pub const DATASET_MAGIC: &[u8; 7] = b"MSTCH01";

/// Identity of one chunk: source clip, chunk index within the clip, and
/// augmentation variant (0 = original).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkId {
    pub source: String,
    pub index: usize,
    pub variant: u32,
}

impl ChunkId {
    pub fn new(source: impl Into<String>, index: usize, variant: u32) -> Self {
        Self { source: source.into(), index, variant }
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.source, self.index, self.variant)
    }
}

impl FromStr for ChunkId {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.rsplitn(3, ':');
        let variant = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CoreError::Dataset(format!("bad chunk id {s:?}")))?;
        let index = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CoreError::Dataset(format!("bad chunk id {s:?}")))?;
        let source = parts
            .next()
            .ok_or_else(|| CoreError::Dataset(format!("bad chunk id {s:?}")))?
            .to_string();
        Ok(Self { source, index, variant })
    }
}

impl serde::Serialize for ChunkId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for ChunkId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One stored chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkRecord {
    pub id: ChunkId,
    pub sequence: MotionSequence,
}

/// An on-disk collection of fixed-length chunks sharing one skeleton.
#[derive(Clone, Debug)]
pub struct ChunkDataset {
    pub skeleton: Arc<Skeleton>,
    pub block: usize,
    pub fps: Real,
    pub chunks: Vec<ChunkRecord>,
}

impl ChunkDataset {
    pub fn new(skeleton: Arc<Skeleton>, block: usize, fps: Real) -> Self {
        Self { skeleton, block, fps, chunks: Vec::new() }
    }

    pub fn push(&mut self, id: ChunkId, sequence: MotionSequence) -> Result<()> {
        if sequence.frame_count() != self.block {
            return Err(CoreError::Dataset(format!(
                "chunk {id} has {} frames, dataset block is {}",
                sequence.frame_count(),
                self.block
            )));
        }
        if sequence.skeleton().joint_count() != self.skeleton.joint_count() {
            return Err(CoreError::Dataset(format!("chunk {id} uses a different skeleton")));
        }
        self.chunks.push(ChunkRecord { id, sequence });
        Ok(())
    }

    pub fn ids(&self) -> Vec<ChunkId> {
        self.chunks.iter().map(|c| c.id.clone()).collect()
    }

    pub fn get(&self, id: &ChunkId) -> Option<&ChunkRecord> {
        self.chunks.iter().find(|c| &c.id == id)
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.skeleton.joint_count())
    }

    /// Serialize to the versioned binary layout.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        let j = self.skeleton.joint_count();
        buf.extend_from_slice(&(j as u32).to_le_bytes());
        buf.extend_from_slice(&(self.block as u32).to_le_bytes());
        buf.extend_from_slice(&(ROTATION_DIM as u32).to_le_bytes());
        buf.extend_from_slice(&(self.fps as f32).to_le_bytes());
        for i in 0..j {
            let parent = self.skeleton.parents()[i] as i32;
            buf.extend_from_slice(&parent.to_le_bytes());
            for c in self.skeleton.rest_offset(i) {
                buf.extend_from_slice(&(c as f32).to_le_bytes());
            }
            let name = self.skeleton.name(i).as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
        }
        buf.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for c in &self.chunks {
            let src = c.id.source.as_bytes();
            buf.extend_from_slice(&(src.len() as u16).to_le_bytes());
            buf.extend_from_slice(src);
            buf.extend_from_slice(&(c.id.index as u32).to_le_bytes());
            buf.extend_from_slice(&c.id.variant.to_le_bytes());
            for v in c.sequence.frames_flat() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };

        let magic = r.take(7)?;
        if magic != DATASET_MAGIC {
            return Err(CoreError::Dataset(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(DATASET_MAGIC)
            )));
        }
        let j = r.u32()? as usize;
        let block = r.u32()? as usize;
        let d = r.u32()? as usize;
        if d != ROTATION_DIM {
            return Err(CoreError::Dataset(format!("unsupported rotation dim {d}")));
        }
        let fps = r.f32()? as Real;

        let mut parents = Vec::with_capacity(j);
        let mut offsets = Vec::with_capacity(j);
        let mut names = Vec::with_capacity(j);
        for _ in 0..j {
            parents.push(r.i32()? as isize);
            let o = [r.f32()? as Real, r.f32()? as Real, r.f32()? as Real];
            offsets.push(o);
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| CoreError::Dataset(format!("bad joint name: {e}")))?;
            names.push(name);
        }
        let skeleton = Arc::new(Skeleton::new(parents, offsets, names)?);

        let count = r.u32()? as usize;
        let f = feature_dim(j);
        let mut dataset = Self::new(skeleton.clone(), block, fps);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let source = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| CoreError::Dataset(format!("bad chunk source: {e}")))?;
            let index = r.u32()? as usize;
            let variant = r.u32()?;
            let mut frames = Vec::with_capacity(block * f);
            for _ in 0..block * f {
                frames.push(r.f32()? as Real);
            }
            let seq = MotionSequence::new(skeleton.clone(), frames, block, fps)?;
            dataset.push(ChunkId { source, index, variant }, seq)?;
        }
        if r.pos != bytes.len() {
            return Err(CoreError::Dataset(format!(
                "{} trailing bytes after {count} chunks",
                bytes.len() - r.pos
            )));
        }
        Ok(dataset)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Dataset("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Human-readable dataset companion: the split and its seed.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub block: usize,
    pub fps: Real,
    pub split: SplitSection,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSection {
    pub train: Vec<ChunkId>,
    pub val: Vec<ChunkId>,
    pub test: Vec<ChunkId>,
}

impl Manifest {
    pub fn from_split(split: &DatasetSplit, block: usize, fps: Real) -> Self {
        Self {
            seed: split.seed,
            block,
            fps,
            split: SplitSection {
                train: split.train.clone(),
                val: split.val.clone(),
                test: split.test.clone(),
            },
        }
    }

    pub fn to_split(&self) -> DatasetSplit {
        DatasetSplit {
            train: self.split.train.clone(),
            val: self.split.val.clone(),
            test: self.split.test.clone(),
            seed: self.seed,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CoreError::Dataset(format!("manifest serialization: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| CoreError::Dataset(format!("manifest parse: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::data::pipeline::split_dataset;

    fn sample_dataset(chunks: usize) -> ChunkDataset {
        let skeleton = Arc::new(synthetic::test_skeleton());
        let mut ds = ChunkDataset::new(skeleton.clone(), 75, 15.0);
        for i in 0..chunks {
            let seq = synthetic::synthetic_motion(skeleton.clone(), 75, 15.0, i as u64);
            ds.push(ChunkId::new("clip", i, 0), seq).unwrap();
        }
        ds
    }

    #[test]
    fn round_trip_preserves_everything_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.mstch");
        let ds = sample_dataset(3);
        ds.write(&path).unwrap();
        let back = ChunkDataset::read(&path).unwrap();
        assert_eq!(back.block, 75);
        assert_eq!(back.chunks.len(), 3);
        assert_eq!(back.skeleton.names(), ds.skeleton.names());
        for (a, b) in ds.chunks.iter().zip(&back.chunks) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.sequence.frames_flat().iter().zip(b.sequence.frames_flat()) {
                assert_eq!(*x as f32, *y as f32, "storage is exactly f32");
            }
        }
    }

    #[test]
    fn write_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.mstch");
        let b = dir.path().join("b.mstch");
        let ds = sample_dataset(2);
        ds.write(&a).unwrap();
        ds.write(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mstch");
        std::fs::write(&path, b"NOTMAGIC plus junk").unwrap();
        match ChunkDataset::read(&path) {
            Err(CoreError::Dataset(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mstch");
        sample_dataset(1).write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(ChunkDataset::read(&path).is_err());
    }

    #[test]
    fn chunk_id_string_round_trip() {
        let id = ChunkId::new("walk:fast.bvh", 12, 2);
        let s = id.to_string();
        let back: ChunkId = s.parse().unwrap();
        assert_eq!(id, back);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.toml");
        let ids: Vec<ChunkId> = (0..20).map(|i| ChunkId::new("clip", i, 0)).collect();
        let split = split_dataset(&ids, 5).unwrap();
        let m = Manifest::from_split(&split, 75, 15.0);
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.to_split(), split);
    }

    #[test]
    fn push_validates_block_length() {
        let skeleton = Arc::new(synthetic::test_skeleton());
        let mut ds = ChunkDataset::new(skeleton.clone(), 75, 15.0);
        let seq = synthetic::synthetic_motion(skeleton, 10, 15.0, 0);
        assert!(ds.push(ChunkId::new("clip", 0, 0), seq).is_err());
    }
}
