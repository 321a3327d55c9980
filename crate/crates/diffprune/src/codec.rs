//! Binary formats for sparse diffs and checkpoints.
//!
//! Both formats are little-endian, fixed-width, uncompressed, and end with a
//! CRC32 (IEEE) of every preceding byte. Decoding verifies the checksum
//! before parsing anything, so any single corrupted byte surfaces as
//! [`Error::ChecksumMismatch`] rather than as a confusing structural error.
//! Writes go to a sibling `*.tmp` file first and rename into place; the
//! formats assume a single writer, and readers see either the old file or
//! the complete new one.
//!
//! Sparse diff file (`SDIF`, version 1):
//!
//! ```text
//! magic      4 bytes  "SDIF"
//! version    u16
//! total_dim  u64      flat dimension of the parameter space
//! n_entries  u64
//! positions  u32 * n  strictly ascending
//! values     f32 * n  nonzero, finite
//! n_segments u32
//! per segment:
//!   name_len u16, name bytes (UTF-8),
//!   rank u8, dims u64 * rank,
//!   offset u64, length u64, layer u16, head u8
//! meta_len   u32, meta bytes (UTF-8 key=value lines: the resolved config)
//! checksum   u32      CRC32 of all preceding bytes
//! ```
//!
//! Positions use u32, so flat dimensions at or above 2^32 are rejected at
//! encode time. The payload is `8 * n_entries` bytes plus the header and
//! segment table — the storage numbers `analysis::storage_cost` reports.
//!
//! Checkpoint file (`SDCP`, version 1): same framing, with a tensor table
//! (name, shape, dtype tag, layer, head flag, byte offset and length into
//! the raw f32 data region) instead of positions/values.

use crate::error::{Error, Result};
use crate::reparam::{compose, DiffVector};
use crate::space::{FlatParamSpace, Segment};
use std::fs;
use std::path::Path;
use std::sync::Arc;

pub const DIFF_MAGIC: [u8; 4] = *b"SDIF";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SDCP";
pub const FORMAT_VERSION: u16 = 1;
/// Dtype tag for f32, the only dtype version 1 defines.
pub const DTYPE_F32: u8 = 0;

/// A decoded sparse diff file: the diff plus the metadata it shipped with.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDiffFile {
    pub diff: DiffVector,
    pub meta: String,
}

/// A decoded checkpoint: frozen base parameters (or a patched copy) over a
/// named segment space.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub space: Arc<FlatParamSpace>,
    pub theta: Vec<f32>,
    pub meta: String,
}

// ─── little-endian plumbing ───

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut buf = Vec::with_capacity(256);
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) -> Result<()> {
        if s.len() > u16::MAX as usize {
            return Err(Error::Malformed {
                reason: format!("name too long ({} bytes)", s.len()),
            });
        }
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn meta(&mut self, s: &str) -> Result<()> {
        if s.len() > u32::MAX as usize {
            return Err(Error::Malformed {
                reason: "metadata too long".into(),
            });
        }
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    /// Appends the checksum and returns the finished file image.
    fn seal(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { context });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self, c: &'static str) -> Result<u8> {
        Ok(self.take(1, c)?[0])
    }
    fn u16(&mut self, c: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, c)?.try_into().unwrap()))
    }
    fn u32(&mut self, c: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, c)?.try_into().unwrap()))
    }
    fn u64(&mut self, c: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, c)?.try_into().unwrap()))
    }
    fn f32(&mut self, c: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, c)?.try_into().unwrap()))
    }
    fn string(&mut self, len: usize, c: &'static str) -> Result<String> {
        String::from_utf8(self.take(len, c)?.to_vec()).map_err(|_| Error::Malformed {
            reason: format!("{c}: not valid UTF-8"),
        })
    }
    fn finish(self, c: &'static str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed {
                reason: format!("{c}: {} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Checks the trailing CRC32 and returns the body it covers.
fn checked_body<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<&'a [u8]> {
    if bytes.len() < 4 + 2 + 4 {
        return Err(Error::Truncated {
            context: "file shorter than any valid header",
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let found: [u8; 4] = body[0..4].try_into().unwrap();
    if &found != magic {
        return Err(Error::BadMagic {
            expected: *magic,
            found,
        });
    }
    let version = u16::from_le_bytes(body[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(&body[6..])
}

fn write_segment_table(w: &mut Writer, segments: &[Segment]) -> Result<()> {
    w.u32(segments.len() as u32);
    for s in segments {
        w.name(&s.name)?;
        w.u8(s.shape.len() as u8);
        for &d in &s.shape {
            w.u64(d as u64);
        }
        w.u64(s.offset as u64);
        w.u64(s.len as u64);
        w.u16(s.layer);
        w.u8(s.head as u8);
    }
    Ok(())
}

// ─── sparse diff files ───

pub fn encode_diff(diff: &DiffVector, meta: &str) -> Result<Vec<u8>> {
    let space = diff.space();
    if space.dim() as u64 > u32::MAX as u64 {
        return Err(Error::DimensionTooLarge {
            dim: space.dim() as u64,
        });
    }
    let mut w = Writer::new(DIFF_MAGIC);
    w.u64(space.dim() as u64);
    w.u64(diff.entries().len() as u64);
    for &(pos, _) in diff.entries() {
        w.u32(pos);
    }
    for &(_, val) in diff.entries() {
        w.f32(val);
    }
    write_segment_table(&mut w, space.segments())?;
    w.meta(meta)?;
    Ok(w.seal())
}

pub fn decode_diff(bytes: &[u8]) -> Result<SparseDiffFile> {
    let body = checked_body(bytes, &DIFF_MAGIC)?;
    let mut r = Reader { buf: body, pos: 0 };
    let total_dim = r.u64("total_dim")?;
    if total_dim > u32::MAX as u64 {
        return Err(Error::DimensionTooLarge { dim: total_dim });
    }
    let n = r.u64("n_entries")? as usize;
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push(r.u32("positions")?);
    }
    let mut entries = Vec::with_capacity(n);
    for &p in &positions {
        entries.push((p, r.f32("values")?));
    }
    let n_segments = r.u32("n_segments")? as usize;
    let mut segments = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let name_len = r.u16("segment name length")? as usize;
        let name = r.string(name_len, "segment name")?;
        let rank = r.u8("segment rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("segment dimension")? as usize);
        }
        let offset = r.u64("segment offset")? as usize;
        let len = r.u64("segment length")? as usize;
        let layer = r.u16("segment layer")?;
        let head = r.u8("segment head flag")? != 0;
        if shape.iter().product::<usize>() != len {
            return Err(Error::Malformed {
                reason: format!(
                    "segment `{name}` claims length {len} but its shape holds {}",
                    shape.iter().product::<usize>()
                ),
            });
        }
        segments.push(Segment {
            name,
            offset,
            shape,
            len,
            layer,
            head,
        });
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta = r.string(meta_len, "meta")?;
    r.finish("diff file")?;
    let space = Arc::new(FlatParamSpace::new(segments).map_err(|e| Error::Malformed {
        reason: format!("segment table: {e}"),
    })?);
    if space.dim() as u64 != total_dim {
        return Err(Error::Malformed {
            reason: format!(
                "segment table covers {} coordinates but total_dim is {}",
                space.dim(),
                total_dim
            ),
        });
    }
    let diff = DiffVector::new(space, entries)?;
    Ok(SparseDiffFile { diff, meta })
}

// ─── checkpoint files ───

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let space = &ckpt.space;
    if ckpt.theta.len() != space.dim() {
        return Err(Error::LengthMismatch {
            what: "checkpoint parameters",
            expected: space.dim(),
            actual: ckpt.theta.len(),
        });
    }
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u32(space.segments().len() as u32);
    for s in space.segments() {
        w.name(&s.name)?;
        w.u8(s.shape.len() as u8);
        for &d in &s.shape {
            w.u64(d as u64);
        }
        w.u8(DTYPE_F32);
        w.u16(s.layer);
        w.u8(s.head as u8);
        w.u64(s.offset as u64 * 4);
        w.u64(s.len as u64 * 4);
    }
    w.u64(ckpt.theta.len() as u64 * 4);
    for &v in &ckpt.theta {
        w.f32(v);
    }
    w.meta(&ckpt.meta)?;
    Ok(w.seal())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let body = checked_body(bytes, &CHECKPOINT_MAGIC)?;
    let mut r = Reader { buf: body, pos: 0 };
    let n_tensors = r.u32("n_tensors")? as usize;
    let mut segments = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16("tensor name length")? as usize;
        let name = r.string(name_len, "tensor name")?;
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dim")? as usize);
        }
        let dtype = r.u8("tensor dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Malformed {
                reason: format!("tensor `{name}` has unsupported dtype tag {dtype}"),
            });
        }
        let layer = r.u16("tensor layer")?;
        let head = r.u8("tensor head flag")? != 0;
        let byte_offset = r.u64("tensor byte offset")? as usize;
        let byte_len = r.u64("tensor byte length")? as usize;
        let len: usize = shape.iter().product();
        if !byte_offset.is_multiple_of(4) || byte_len != len * 4 {
            return Err(Error::Malformed {
                reason: format!("tensor `{name}` has inconsistent byte extents"),
            });
        }
        segments.push(Segment {
            name,
            offset: byte_offset / 4,
            len,
            shape,
            layer,
            head,
        });
    }
    let data_len = r.u64("data length")? as usize;
    if !data_len.is_multiple_of(4) {
        return Err(Error::Malformed {
            reason: "data region length not a multiple of 4".into(),
        });
    }
    let mut theta = Vec::with_capacity(data_len / 4);
    for _ in 0..data_len / 4 {
        theta.push(r.f32("data region")?);
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta = r.string(meta_len, "meta")?;
    r.finish("checkpoint file")?;
    let space = Arc::new(FlatParamSpace::new(segments).map_err(|e| Error::Malformed {
        reason: format!("tensor table: {e}"),
    })?);
    if space.dim() != theta.len() {
        return Err(Error::Malformed {
            reason: format!(
                "tensor table covers {} coordinates but data region holds {}",
                space.dim(),
                theta.len()
            ),
        });
    }
    Ok(Checkpoint { space, theta, meta })
}

// ─── patching ───

/// Verifies that two spaces describe the same layout: same flat dimension
/// and segment-for-segment equality (name, shape, extents, layer, head
/// flag). Both file formats carry full shapes, so a reshaped segment is a
/// mismatch even when its flat extent agrees.
pub fn check_compatible(base: &FlatParamSpace, patch: &FlatParamSpace) -> Result<()> {
    if base.dim() != patch.dim() {
        return Err(Error::SpaceMismatch {
            detail: format!(
                "flat dimension {} vs {}",
                base.dim(),
                patch.dim()
            ),
        });
    }
    if base.segments().len() != patch.segments().len() {
        return Err(Error::SpaceMismatch {
            detail: format!(
                "{} segments vs {}",
                base.segments().len(),
                patch.segments().len()
            ),
        });
    }
    for (i, (a, b)) in base
        .segments()
        .iter()
        .zip(patch.segments())
        .enumerate()
    {
        if a != b {
            return Err(Error::SpaceMismatch {
                detail: format!(
                    "segment {i}: `{}` [{}..{}) layer {} head {} vs `{}` [{}..{}) layer {} head {}",
                    a.name,
                    a.offset,
                    a.offset + a.len,
                    a.layer,
                    a.head,
                    b.name,
                    b.offset,
                    b.offset + b.len,
                    b.layer,
                    b.head
                ),
            });
        }
    }
    Ok(())
}

/// `theta + delta` as a new checkpoint. The base checkpoint's space and
/// metadata carry over; untouched coordinates keep their exact bits, so
/// patching with an empty diff reproduces the base file byte for byte.
pub fn apply_patch(base: &Checkpoint, patch: &SparseDiffFile) -> Result<Checkpoint> {
    check_compatible(&base.space, patch.diff.space())?;
    let theta = compose(&base.theta, &patch.diff)?;
    Ok(Checkpoint {
        space: Arc::clone(&base.space),
        theta,
        meta: base.meta.clone(),
    })
}

// ─── file IO ───

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_diff(path: &Path, diff: &DiffVector, meta: &str) -> Result<()> {
    write_atomic(path, &encode_diff(diff, meta)?)
}

pub fn read_diff(path: &Path) -> Result<SparseDiffFile> {
    decode_diff(&fs::read(path)?)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

// ─── tests ───

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::seg;

    fn toy_space() -> Arc<FlatParamSpace> {
        Arc::new(
            FlatParamSpace::new(vec![
                seg("enc.w", 0, &[2, 3], 0, false),
                seg("enc.b", 6, &[3], 0, false),
                seg("head.w", 9, &[3, 2], 1, true),
            ])
            .unwrap(),
        )
    }

    fn toy_diff() -> DiffVector {
        DiffVector::new(
            toy_space(),
            vec![(0, -0.5), (4, 1.25), (9, 0.001), (14, -3.5)],
        )
        .unwrap()
    }

    #[test]
    fn diff_round_trip_preserves_bytes_and_values() {
        let bytes = encode_diff(&toy_diff(), "seed=1\n").unwrap();
        let decoded = decode_diff(&bytes).unwrap();
        assert_eq!(decoded.diff, toy_diff());
        assert_eq!(decoded.meta, "seed=1\n");
        let re = encode_diff(&decoded.diff, &decoded.meta).unwrap();
        assert_eq!(bytes, re, "re-encode must reproduce the exact bytes");
    }

    #[test]
    fn diff_payload_size_is_eight_bytes_per_entry_plus_framing() {
        let diff = toy_diff();
        let with = encode_diff(&diff, "").unwrap();
        let empty = DiffVector::empty(toy_space());
        let without = encode_diff(&empty, "").unwrap();
        assert_eq!(with.len() - without.len(), 8 * diff.entries().len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let space = toy_space();
        let theta: Vec<f32> = (0..space.dim()).map(|i| i as f32 * 0.25 - 1.0).collect();
        let ckpt = Checkpoint {
            space,
            theta,
            meta: "model=test\n".into(),
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let decoded = decode_checkpoint(&bytes).unwrap();
        assert_eq!(decoded, ckpt);
        // Logical shapes survive the trip.
        assert_eq!(decoded.space.segments()[0].shape, vec![2, 3]);
    }

    #[test]
    fn any_single_byte_flip_is_caught_by_the_checksum() {
        let bytes = encode_diff(&toy_diff(), "k=v\n").unwrap();
        for i in 0..bytes.len() {
            let mut corrupted = bytes.clone();
            corrupted[i] ^= 0x40;
            match decode_diff(&corrupted) {
                Err(Error::ChecksumMismatch { .. }) => {}
                other => panic!("byte {i}: expected checksum mismatch, got {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let ck = encode_checkpoint(&Checkpoint {
            space: toy_space(),
            theta: vec![0.5; 15],
            meta: String::new(),
        })
        .unwrap();
        assert!(matches!(
            decode_diff(&ck),
            Err(Error::BadMagic { found, .. }) if found == CHECKPOINT_MAGIC
        ));

        let mut future = encode_diff(&toy_diff(), "").unwrap();
        future[4..6].copy_from_slice(&2u16.to_le_bytes());
        let len = future.len();
        let crc = crc32fast::hash(&future[..len - 4]);
        future[len - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_diff(&future),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = encode_diff(&toy_diff(), "").unwrap();
        assert!(decode_diff(&bytes[..bytes.len() - 9]).is_err());
        assert!(decode_diff(&bytes[..3]).is_err());
    }

    #[test]
    fn apply_patch_composes_and_empty_patch_is_identity() {
        let space = toy_space();
        let theta: Vec<f32> = (0..space.dim()).map(|i| (i as f32).sin()).collect();
        let base = Checkpoint {
            space: Arc::clone(&space),
            theta,
            meta: "source=pretrain\n".into(),
        };
        let patched = apply_patch(
            &base,
            &SparseDiffFile {
                diff: toy_diff(),
                meta: String::new(),
            },
        )
        .unwrap();
        assert_eq!(patched.theta[0], base.theta[0] + -0.5);
        assert_eq!(patched.theta[1].to_bits(), base.theta[1].to_bits());

        let empty = SparseDiffFile {
            diff: DiffVector::empty(Arc::clone(&space)),
            meta: String::new(),
        };
        let identical = apply_patch(&base, &empty).unwrap();
        assert_eq!(
            encode_checkpoint(&identical).unwrap(),
            encode_checkpoint(&base).unwrap(),
            "empty patch must reproduce the base file exactly"
        );
    }

    #[test]
    fn incompatible_segment_tables_name_the_first_divergence() {
        let other = Arc::new(
            FlatParamSpace::new(vec![
                seg("enc.w", 0, &[2, 3], 0, false),
                seg("enc.bias", 6, &[3], 0, false),
                seg("head.w", 9, &[3, 2], 1, true),
            ])
            .unwrap(),
        );
        let base = Checkpoint {
            space: other,
            theta: vec![0.0; 15],
            meta: String::new(),
        };
        let patch = SparseDiffFile {
            diff: toy_diff(),
            meta: String::new(),
        };
        match apply_patch(&base, &patch) {
            Err(Error::SpaceMismatch { detail }) => {
                assert!(detail.contains("segment 1"), "got: {detail}");
                assert!(detail.contains("enc.bias"), "got: {detail}");
            }
            other => panic!("expected space mismatch, got {other:?}"),
        }
    }

    #[test]
    fn atomic_write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.diff");
        write_diff(&path, &toy_diff(), "seed=3\n").unwrap();
        assert!(!path.with_extension("diff.tmp").exists());
        let back = read_diff(&path).unwrap();
        assert_eq!(back.diff, toy_diff());
        assert_eq!(back.meta, "seed=3\n");
    }
}
