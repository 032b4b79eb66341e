//! Binary memory file.
//!
//! Little-endian layout:
//!
//! ```text
//! "UCADMEM1"            8 bytes
//! version               u32
//! task count            u32
//! per task:
//!   task_id             u32
//!   key rows, C         u32, u32
//!   key                 rows*C f32
//!   prompt layers, width u32, u32
//!   prompts             layers*width f32
//!   knowledge rows      u32
//!   knowledge           rows*C f32
//! checksum              u64, FNV-1a of every preceding byte
//! fingerprint           u64, optional trailer: encoder fingerprint
//! ```
//!
//! Values are stored as `f32`, so a round trip reproduces the memory at
//! single precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::{Encoder, PromptSet};
use crate::hash::fnv1a;
use crate::numerics::Tensor;

use super::{MemoryError, MemorySpace, TaskEntry};

pub const MAGIC: &[u8; 8] = b"UCADMEM1";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), MemoryError> {
    let v = u32::try_from(v).map_err(|_| MemoryError::InvalidEntry(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes `memory` to bytes.
pub fn write_to(memory: &MemorySpace) -> Result<Vec<u8>, MemoryError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&memory.version().to_le_bytes());
    put_u32(&mut out, memory.len())?;
    for e in memory.entries() {
        put_u32(&mut out, e.task_id)?;
        put_u32(&mut out, e.key.rows())?;
        put_u32(&mut out, e.key.cols())?;
        put_f32s(&mut out, e.key.data());
        put_u32(&mut out, e.prompts.layers())?;
        put_u32(&mut out, e.prompts.width())?;
        put_f32s(&mut out, e.prompts.values().data());
        put_u32(&mut out, e.knowledge.rows())?;
        put_f32s(&mut out, e.knowledge.data());
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    if let Some(fp) = memory.fingerprint() {
        out.extend_from_slice(&fp.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MemoryError> {
        let end = self.pos.checked_add(n).ok_or(MemoryError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(MemoryError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize, MemoryError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64, MemoryError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, rows: usize, cols: usize) -> Result<Tensor, MemoryError> {
        let n = rows.checked_mul(cols).ok_or(MemoryError::Truncated)?;
        let raw = self.take(n.checked_mul(4).ok_or(MemoryError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Tensor::matrix(rows, cols, data)?)
    }
}

/// Parses bytes produced by [`write_to`].
pub fn read_from(bytes: &[u8]) -> Result<MemorySpace, MemoryError> {
    if bytes.len() < MAGIC.len() {
        return Err(MemoryError::Truncated);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(MemoryError::BadMagic);
    }
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
    };
    let version = cur.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(MemoryError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = cur.u32()?;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let task_id = cur.u32()?;
        let (rows, c) = (cur.u32()?, cur.u32()?);
        let key = cur.f32s(rows, c)?;
        let (layers, width) = (cur.u32()?, cur.u32()?);
        let prompts = PromptSet::new(cur.f32s(layers, width)?).map_err(|e| MemoryError::InvalidEntry(e.to_string()))?;
        let krows = cur.u32()?;
        let knowledge = cur.f32s(krows, c)?;
        entries.push(TaskEntry {
            task_id,
            key,
            prompts,
            knowledge_budget: krows,
            knowledge,
            name: format!("task-{task_id}"),
            created_at: task_id,
        });
    }
    let body_end = cur.pos;
    let stored = cur.u64()?;
    let computed = fnv1a(&bytes[..body_end]);
    if stored != computed {
        return Err(MemoryError::ChecksumMismatch { stored, computed });
    }
    let fingerprint = match bytes.len() - cur.pos {
        0 => None,
        8 => Some(cur.u64()?),
        n => return Err(MemoryError::InvalidEntry(format!("{n} unexpected trailing bytes"))),
    };
    let mut memory = MemorySpace::from_parts(Vec::new(), fingerprint, version);
    for e in entries {
        memory.push(e)?;
    }
    Ok(memory)
}

pub fn persist(memory: &MemorySpace, path: &Path) -> Result<(), MemoryError> {
    let bytes = write_to(memory)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MemorySpace, MemoryError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_from(&bytes)
}

/// Loads and checks the stored fingerprint against `encoder`.
pub fn load_for_encoder(path: &Path, encoder: &Encoder) -> Result<MemorySpace, MemoryError> {
    let memory = load(path)?;
    memory.check_encoder(encoder)?;
    Ok(memory)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(task_id: usize, seed: f64) -> TaskEntry {
        let t = |rows: usize, cols: usize, k: f64| {
            Tensor::matrix(rows, cols, (0..rows * cols).map(|i| ((i as f64 + k) * 0.37).sin()).collect()).unwrap()
        };
        TaskEntry {
            task_id,
            key: t(4, 3, seed),
            prompts: PromptSet::new(t(2, 3, seed + 1.0)).unwrap(),
            knowledge: t(5, 3, seed + 2.0),
            knowledge_budget: 5,
            name: format!("task-{task_id}"),
            created_at: task_id,
        }
    }

    fn two_tasks() -> MemorySpace {
        let mut m = MemorySpace::new(0xdead_beef);
        m.push(entry(0, 0.0)).unwrap();
        m.push(entry(1, 10.0)).unwrap();
        m
    }

    fn to_f32(t: &Tensor) -> Vec<f64> {
        t.data().iter().map(|&v| f64::from(v as f32)).collect()
    }

    #[test]
    fn roundtrip_at_single_precision() {
        let m = two_tasks();
        let back = read_from(&write_to(&m).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.fingerprint(), Some(0xdead_beef));
        for (a, b) in m.entries().iter().zip(back.entries()) {
            assert_eq!(a.task_id, b.task_id);
            assert_eq!(a.key.shape(), b.key.shape());
            assert_eq!(to_f32(&a.key), b.key.data());
            assert_eq!(to_f32(a.prompts.values()), b.prompts.values().data());
            assert_eq!(to_f32(&a.knowledge), b.knowledge.data());
        }
        // a second trip is lossless
        assert_eq!(read_from(&write_to(&back).unwrap()).unwrap(), back);
    }

    #[test]
    fn layout_prefix_is_exact() {
        let bytes = write_to(&two_tasks()).unwrap();
        assert_eq!(&bytes[..8], b"UCADMEM1");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &4u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &3u32.to_le_bytes());
        let per_task = 4 + 8 + 4 * 12 + 8 + 4 * 6 + 4 + 4 * 15;
        assert_eq!(bytes.len(), 16 + 2 * per_task + 8 + 8);
        let body = bytes.len() - 16;
        assert_eq!(&bytes[body..body + 8], &fnv1a(&bytes[..body]).to_le_bytes());
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = write_to(&two_tasks()).unwrap();
        bytes[0] = b'X';
        let err = read_from(&bytes).unwrap_err();
        assert!(matches!(err, MemoryError::BadMagic));
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = write_to(&two_tasks()).unwrap();
        bytes[8] = 2;
        assert!(matches!(
            read_from(&bytes),
            Err(MemoryError::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_and_corruption() {
        let bytes = write_to(&two_tasks()).unwrap();
        assert!(matches!(read_from(&bytes[..40]), Err(MemoryError::Truncated)));
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(read_from(&flipped), Err(MemoryError::ChecksumMismatch { .. })));
    }

    #[test]
    fn file_without_fingerprint_trailer_loads() {
        let m = MemorySpace::from_parts(two_tasks().entries().to_vec(), None, FORMAT_VERSION);
        let back = read_from(&write_to(&m).unwrap()).unwrap();
        assert_eq!(back.fingerprint(), None);
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn persist_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.ucad");
        let m = two_tasks();
        persist(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap().len(), 2);
    }
}
