//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GPRN" | version: u32 | record count: u32
//! per record:
//!   name length: u32 | UTF-8 name | rank: u32 | dims: u32 each | payload: f32 LE
//! trailing CRC32 (IEEE) over every record's payload bytes, in file order
//! ```
//!
//! The architecture travels inside the file as the reserved record
//! `__arch__`, whose payload is the canonical descriptor text (NUL-padded to
//! a four-byte boundary), and training metadata as `__meta__`, whose six
//! payload slots hold `[meta version, epoch, seed lo, seed hi, hash lo,
//! hash hi]` as raw u32 bit patterns. Everything else is a tensor record
//! named `<layer>.<slot>`. A checkpoint therefore reloads without any side
//! channel, pruned or not, and round-trips bit-exactly.

use crate::descriptor::{parse_descriptor, to_descriptor};
use crate::error::{CoreError, Result};
use crate::graph::ModelGraph;
use crate::tensor::TensorRec;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"GPRN";
pub const FORMAT_VERSION: u32 = 1;
const META_VERSION: u32 = 1;
const ARCH_RECORD: &str = "__arch__";
const META_RECORD: &str = "__meta__";

/// Training provenance stored alongside the tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainMeta {
    pub epoch: u32,
    pub seed: u64,
    pub config_hash: u64,
}

struct CountingWriter<W: Write> {
    inner: W,
    crc: crc32fast::Hasher,
}

impl<W: Write> CountingWriter<W> {
    fn write_all(&mut self, buf: &[u8]) -> Result<()> {
        self.inner.write_all(buf)?;
        Ok(())
    }

    fn write_payload(&mut self, buf: &[u8]) -> Result<()> {
        self.crc.update(buf);
        self.write_all(buf)
    }

    fn write_u32(&mut self, v: u32) -> Result<()> {
        self.write_all(&v.to_le_bytes())
    }
}

fn write_record<W: Write>(
    w: &mut CountingWriter<W>,
    name: &str,
    dims: &[u32],
    payload: &[u8],
) -> Result<()> {
    w.write_u32(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32(dims.len() as u32)?;
    for &d in dims {
        w.write_u32(d)?;
    }
    debug_assert_eq!(
        payload.len(),
        4 * dims.iter().product::<u32>() as usize,
        "payload must hold one f32 slot per element"
    );
    w.write_payload(payload)
}

/// Serialize model and metadata to `path`.
pub fn save_checkpoint(model: &ModelGraph, path: &Path, meta: TrainMeta) -> Result<()> {
    let tensors = model.named_tensors();
    let mut w = CountingWriter {
        inner: BufWriter::new(File::create(path)?),
        crc: crc32fast::Hasher::new(),
    };
    w.write_all(&MAGIC)?;
    w.write_u32(FORMAT_VERSION)?;
    w.write_u32((tensors.len() + 2) as u32)?;

    // __arch__: canonical descriptor text, NUL-padded to whole f32 slots
    let mut arch = to_descriptor(model).into_bytes();
    while !arch.len().is_multiple_of(4) {
        arch.push(0);
    }
    write_record(&mut w, ARCH_RECORD, &[(arch.len() / 4) as u32], &arch)?;

    // __meta__: six u32 bit patterns in f32 slots
    let slots: [u32; 6] = [
        META_VERSION,
        meta.epoch,
        meta.seed as u32,
        (meta.seed >> 32) as u32,
        meta.config_hash as u32,
        (meta.config_hash >> 32) as u32,
    ];
    let mut meta_bytes = Vec::with_capacity(24);
    for s in slots {
        meta_bytes.extend_from_slice(&s.to_le_bytes());
    }
    write_record(&mut w, META_RECORD, &[6], &meta_bytes)?;

    for (name, tensor) in &tensors {
        let dims: Vec<u32> = tensor.shape().iter().map(|&d| d as u32).collect();
        let mut payload = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_record(&mut w, name, &dims, &payload)?;
    }

    let CountingWriter { mut inner, crc } = w;
    inner.write_all(&crc.finalize().to_le_bytes())?;
    inner.flush()?;
    Ok(())
}

struct CountingReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(CoreError::CheckpointTruncated {
                    offset: self.offset,
                    msg: format!("while reading {what}"),
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }
}

/// Deserialize a model and its metadata from `path`, verifying the CRC.
pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, TrainMeta)> {
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::CheckpointFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.read_u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CoreError::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = r.read_u32("record count")?;

    let mut crc = crc32fast::Hasher::new();
    let mut arch_text: Option<String> = None;
    let mut meta = TrainMeta::default();
    let mut tensors: Vec<(String, TensorRec)> = Vec::new();

    for _ in 0..count {
        let name_len = r.read_u32("record name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf, "record name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| CoreError::CheckpointFormat("record name is not UTF-8".into()))?;
        let rank = r.read_u32("record rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32("record dims")? as usize);
        }
        let elems: usize = dims.iter().product();
        let mut payload = vec![0u8; elems * 4];
        r.read_exact(&mut payload, &format!("payload of '{name}'"))?;
        crc.update(&payload);

        match name.as_str() {
            ARCH_RECORD => {
                let text: Vec<u8> = payload.into_iter().take_while(|&b| b != 0).collect();
                arch_text = Some(String::from_utf8(text).map_err(|_| {
                    CoreError::CheckpointFormat("architecture text is not UTF-8".into())
                })?);
            }
            META_RECORD => {
                if elems != 6 {
                    return Err(CoreError::CheckpointFormat(format!(
                        "metadata record has {elems} slots, expected 6"
                    )));
                }
                let slot = |i: usize| {
                    u32::from_le_bytes([
                        payload[4 * i],
                        payload[4 * i + 1],
                        payload[4 * i + 2],
                        payload[4 * i + 3],
                    ])
                };
                if slot(0) != META_VERSION {
                    return Err(CoreError::CheckpointFormat(format!(
                        "unsupported metadata version {}",
                        slot(0)
                    )));
                }
                meta = TrainMeta {
                    epoch: slot(1),
                    seed: slot(2) as u64 | ((slot(3) as u64) << 32),
                    config_hash: slot(4) as u64 | ((slot(5) as u64) << 32),
                };
            }
            _ => {
                let data: Vec<f32> = payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                tensors.push((name, TensorRec::from_vec(&dims, data)?));
            }
        }
    }

    let stored_crc = r.read_u32("trailing checksum")?;
    let computed = crc.finalize();
    if stored_crc != computed {
        return Err(CoreError::ChecksumMismatch {
            stored: stored_crc,
            computed,
        });
    }

    let arch = arch_text
        .ok_or_else(|| CoreError::CheckpointFormat("missing architecture record".into()))?;
    let (mut model, _init) = parse_descriptor(&arch)?;
    let expected = model.named_tensors().len();
    if tensors.len() != expected {
        return Err(CoreError::CheckpointFormat(format!(
            "checkpoint holds {} tensors, model wants {expected}",
            tensors.len()
        )));
    }
    for (name, tensor) in tensors {
        model.set_named_tensor(&name, tensor)?;
    }
    Ok((model, meta))
}
