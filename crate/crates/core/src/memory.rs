//! Retrieval memory: per-instance global and token-level embeddings with
//! labels, plus the `RGPTMEM1` little-endian file format.
//!
//! Layout: magic (8 bytes), then `u32` version, count, n, m, d, C; then per
//! entry `E^t` (d×f32), `E^v` (d×f32), text tokens (n·d f32), image tokens
//! (m·d f32), label `u32`, source id `u64`. No padding.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Instance, Modality};
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MEMORY_MAGIC: &[u8; 8] = b"RGPTMEM1";
pub const MEMORY_VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 6 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankDims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub text_global: Vec<f32>,
    pub image_global: Vec<f32>,
    pub text_tokens: Vec<f32>,
    pub image_tokens: Vec<f32>,
    pub label: u32,
    pub source_id: u64,
}

/// Immutable retrieval corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dims: BankDims,
    entries: Vec<MemoryEntry>,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl MemoryBank {
    /// Assembles a bank from already-embedded entries, checking every shape.
    pub fn from_entries(dims: BankDims, mut entries: Vec<MemoryEntry>) -> Result<Self> {
        for e in &entries {
            let ok = e.text_global.len() == dims.d
                && e.image_global.len() == dims.d
                && e.text_tokens.len() == dims.n * dims.d
                && e.image_tokens.len() == dims.m * dims.d;
            if !ok {
                return Err(Error::Precondition(format!(
                    "entry {} has inconsistent dimensions",
                    e.source_id
                )));
            }
            if (e.label as usize) >= dims.classes {
                return Err(Error::LabelOutOfRange {
                    label: e.label as usize,
                    classes: dims.classes,
                });
            }
            if !e.text_global.iter().chain(&e.image_global).all(|v| v.is_finite()) {
                return Err(Error::Precondition(format!(
                    "entry {} has non-finite embeddings",
                    e.source_id
                )));
            }
        }
        entries.sort_by_key(|e| e.source_id);
        Ok(Self { dims, entries })
    }

    pub fn dims(&self) -> BankDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &MemoryEntry {
        &self.entries[index]
    }

    pub fn source_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.source_id)
    }

    pub fn global(&self, index: usize, modality: Modality) -> &[f32] {
        let e = &self.entries[index];
        match modality {
            Modality::Text => &e.text_global,
            Modality::Image => &e.image_global,
        }
    }

    /// Token-level embedding matrix of one entry (`n×d` or `m×d`).
    pub fn tokens(&self, index: usize, modality: Modality) -> Tensor {
        let e = &self.entries[index];
        let (rows, src) = match modality {
            Modality::Text => (self.dims.n, &e.text_tokens),
            Modality::Image => (self.dims.m, &e.image_tokens),
        };
        Tensor::matrix(rows, self.dims.d, src.iter().map(|&v| v as f64).collect()).expect("bank shape")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MEMORY_MAGIC)?;
        let d = self.dims;
        for v in [
            MEMORY_VERSION,
            self.entries.len() as u32,
            d.n as u32,
            d.m as u32,
            d.d as u32,
            d.classes as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for e in &self.entries {
            for block in [&e.text_global, &e.image_global, &e.text_tokens, &e.image_tokens] {
                for v in block.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.write_all(&e.label.to_le_bytes())?;
            w.write_all(&e.source_id.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MEMORY_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u32("version")?;
        if version != MEMORY_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "memory file",
                found: version,
                expected: MEMORY_VERSION,
            });
        }
        let count = r.u32("count")? as usize;
        let dims = BankDims {
            n: r.u32("n")? as usize,
            m: r.u32("m")? as usize,
            d: r.u32("d")? as usize,
            classes: r.u32("C")? as usize,
        };
        let entry_len = 4 * (2 * dims.d + dims.n * dims.d + dims.m * dims.d) as u64 + 12;
        let expected = HEADER_LEN + entry_len * count as u64;
        if (bytes.len() as u64) < expected {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: format!("truncated: expected {expected} bytes"),
            });
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let text_global = r.f32s(dims.d, "text global")?;
            let image_global = r.f32s(dims.d, "image global")?;
            let text_tokens = r.f32s(dims.n * dims.d, "text tokens")?;
            let image_tokens = r.f32s(dims.m * dims.d, "image tokens")?;
            let label = r.u32("label")?;
            let source_id = r.u64("source id")?;
            entries.push(MemoryEntry {
                text_global,
                image_global,
                text_tokens,
                image_tokens,
                label,
                source_id,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                reason: "trailing bytes after last entry".into(),
            });
        }
        for pair in entries.windows(2) {
            if pair[0].source_id >= pair[1].source_id {
                return Err(Error::Format {
                    offset: HEADER_LEN,
                    reason: "entries not in strictly ascending source-id order".into(),
                });
            }
        }
        Self::from_entries(dims, entries)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * count, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Embeds full-modality instances into a bank, ordered by id.
pub fn build_memory(enc: &FrozenEncoders, instances: &[Instance], dims: BankDims) -> Result<MemoryBank> {
    let mut entries = Vec::with_capacity(instances.len());
    for inst in instances {
        if !(inst.has(Modality::Text) && inst.has(Modality::Image)) {
            return Err(Error::Precondition(format!(
                "memory instance {} is not modality-complete",
                inst.id
            )));
        }
        let text = enc.embed_modality(inst, Modality::Text)?;
        let image = enc.embed_modality(inst, Modality::Image)?;
        if text.rows() != dims.n || image.rows() != dims.m || text.cols() != dims.d {
            return Err(Error::Precondition(format!(
                "instance {} embeds to {:?}/{:?}, bank expects n={}, m={}, d={}",
                inst.id,
                text.shape(),
                image.shape(),
                dims.n,
                dims.m,
                dims.d
            )));
        }
        let tg = enc.encode_global(&text, Modality::Text)?;
        let ig = enc.encode_global(&image, Modality::Image)?;
        entries.push(MemoryEntry {
            text_global: to_f32(&tg.vector),
            image_global: to_f32(&ig.vector),
            text_tokens: to_f32(text.data()),
            image_tokens: to_f32(image.data()),
            label: inst.label as u32,
            source_id: inst.id,
        });
    }
    MemoryBank::from_entries(dims, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    fn setup(count: usize) -> (FrozenEncoders, Vec<Instance>, BankDims) {
        let enc = FrozenEncoders::new(EncoderConfig {
            vocab: 12,
            patch_dim: 3,
            d: 4,
            seed: 5,
        });
        let dims = BankDims {
            n: 3,
            m: 2,
            d: 4,
            classes: 2,
        };
        let insts = (0..count)
            .map(|i| {
                let toks = vec![(i % 11 + 1) as u32, 2, 3];
                let img = Tensor::matrix(2, 3, (0..6).map(|k| (i * 6 + k) as f64 * 0.1 - 0.4).collect()).unwrap();
                Instance::new(100 - i as u64, Some(toks), Some(img), i % 2).unwrap()
            })
            .collect();
        (enc, insts, dims)
    }

    #[test]
    fn empty_and_small_banks() {
        let (enc, insts, dims) = setup(3);
        assert!(build_memory(&enc, &[], dims).unwrap().is_empty());
        let bank = build_memory(&enc, &insts, dims).unwrap();
        assert_eq!(bank.len(), 3);
        let ids: Vec<u64> = bank.source_ids().collect();
        assert_eq!(ids, vec![98, 99, 100]);
        assert_eq!(bank.tokens(0, Modality::Text).shape(), &[3, 4]);
        assert_eq!(bank.tokens(0, Modality::Image).shape(), &[2, 4]);
    }

    #[test]
    fn masked_instance_is_rejected() {
        let (enc, mut insts, dims) = setup(2);
        insts[1].drop_modality(Modality::Image).unwrap();
        assert!(matches!(build_memory(&enc, &insts, dims), Err(Error::Precondition(_))));
    }

    #[test]
    fn round_trip_and_corruption() {
        let (enc, insts, dims) = setup(5);
        let bank = build_memory(&enc, &insts, dims).unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(bytes.len() as u64, HEADER_LEN + 5 * (4 * (8 + 12 + 8) + 12));
        assert_eq!(MemoryBank::from_bytes(&bytes).unwrap(), bank);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            MemoryBank::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut bumped = bytes.clone();
        bumped[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            MemoryBank::from_bytes(&bumped),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));

        let truncated = &bytes[..bytes.len() - 3];
        match MemoryBank::from_bytes(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, truncated.len() as u64),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rebuild_is_bitwise_identical() {
        let (enc, insts, dims) = setup(4);
        let a = build_memory(&enc, &insts, dims).unwrap().to_bytes();
        let (enc2, insts2, _) = setup(4);
        let b = build_memory(&enc2, &insts2, dims).unwrap().to_bytes();
        assert_eq!(a, b);
    }
}
