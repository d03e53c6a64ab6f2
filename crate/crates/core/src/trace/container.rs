//! Chunked binary container shared by activation traces (`SNKT`) and model
//! weights (`SNKM`).
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic [4] | version u32 | header_len u64 | header (UTF-8 JSON) | payload chunks
//! ```
//!
//! The JSON header carries the container-specific metadata flattened together
//! with a `chunks` index. Chunk offsets are relative to the first payload
//! byte, i.e. absolute offset = 16 + header_len + offset.

use std::fs::File;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const PREAMBLE_LEN: u64 = 16;

/// Random-access byte source. Reads are positional so one open container can
/// serve concurrent readers.
pub trait ByteSource: Send + Sync {
    fn size(&self) -> io::Result<u64>;
    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()>;
}

impl ByteSource for File {
    fn size(&self) -> io::Result<u64> {
        Ok(self.metadata()?.len())
    }

    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        #[cfg(unix)]
        {
            std::os::unix::fs::FileExt::read_exact_at(self, buf, offset)
        }
        #[cfg(windows)]
        {
            let mut done = 0;
            while done < buf.len() {
                let n = std::os::windows::fs::FileExt::seek_read(
                    self,
                    &mut buf[done..],
                    offset + done as u64,
                )?;
                if n == 0 {
                    return Err(io::ErrorKind::UnexpectedEof.into());
                }
                done += n;
            }
            Ok(())
        }
    }
}

fn slice_read(data: &[u8], buf: &mut [u8], offset: u64) -> io::Result<()> {
    let start = usize::try_from(offset).map_err(|_| io::Error::from(io::ErrorKind::UnexpectedEof))?;
    let end = start
        .checked_add(buf.len())
        .filter(|&e| e <= data.len())
        .ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
    buf.copy_from_slice(&data[start..end]);
    Ok(())
}

impl ByteSource for Vec<u8> {
    fn size(&self) -> io::Result<u64> {
        Ok(self.len() as u64)
    }

    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        slice_read(self, buf, offset)
    }
}

impl ByteSource for &[u8] {
    fn size(&self) -> io::Result<u64> {
        Ok(self.len() as u64)
    }

    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        slice_read(self, buf, offset)
    }
}

impl<T: ByteSource + ?Sized> ByteSource for Arc<T> {
    fn size(&self) -> io::Result<u64> {
        (**self).size()
    }

    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        (**self).read_exact_at(buf, offset)
    }
}

/// One entry of the chunk index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub field: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

impl ChunkEntry {
    pub fn label(&self) -> String {
        match self.head {
            Some(h) => format!("{}[head {h}]", self.field),
            None => self.field.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header<M> {
    #[serde(flatten)]
    pub meta: M,
    pub chunks: Vec<ChunkEntry>,
}

/// A chunk to be written: its index key and a producer of its payload bytes.
pub struct PendingChunk<'a> {
    pub layer: Option<usize>,
    pub field: &'static str,
    pub head: Option<usize>,
    pub len: u64,
    pub encode: Box<dyn Fn(&mut Vec<u8>) + 'a>,
}

/// Writes a complete container. Each chunk is encoded twice (once to
/// checksum, once to emit) so that no more than one chunk is buffered.
pub fn write_container<M: Serialize, W: Write>(
    magic: &[u8; 4],
    meta: &M,
    chunks: &[PendingChunk<'_>],
    sink: &mut W,
) -> Result<u64> {
    let mut buf = Vec::new();
    let mut entries = Vec::with_capacity(chunks.len());
    let mut offset = 0u64;
    for c in chunks {
        buf.clear();
        (c.encode)(&mut buf);
        if buf.len() as u64 != c.len {
            return Err(Error::Format(format!(
                "chunk {} of layer {:?} encoded {} bytes, expected {}",
                c.field,
                c.layer,
                buf.len(),
                c.len
            )));
        }
        entries.push(ChunkEntry {
            layer: c.layer,
            field: c.field.to_string(),
            head: c.head,
            offset,
            length: c.len,
            crc32: crc32fast::hash(&buf),
        });
        offset += c.len;
    }
    let header = serde_json::to_vec(&Header {
        meta,
        chunks: entries,
    })?;

    sink.write_all(magic)?;
    sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
    sink.write_all(&(header.len() as u64).to_le_bytes())?;
    sink.write_all(&header)?;
    for c in chunks {
        buf.clear();
        (c.encode)(&mut buf);
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(PREAMBLE_LEN + header.len() as u64 + offset)
}

/// Raw preamble fields, read before any interpretation of the header.
#[derive(Debug, Clone)]
pub struct Preamble {
    pub magic: [u8; 4],
    pub version: u32,
    pub header_len: u64,
}

pub fn read_preamble<S: ByteSource + ?Sized>(source: &S) -> io::Result<Preamble> {
    let mut pre = [0u8; PREAMBLE_LEN as usize];
    source.read_exact_at(&mut pre, 0)?;
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&pre[0..4]);
    Ok(Preamble {
        magic,
        version: u32::from_le_bytes(pre[4..8].try_into().expect("4 bytes")),
        header_len: u64::from_le_bytes(pre[8..16].try_into().expect("8 bytes")),
    })
}

/// An opened container: parsed header plus the byte source for lazy chunk reads.
pub struct Container<S, M> {
    source: S,
    header: Header<M>,
    payload_start: u64,
}

impl<S: ByteSource, M: DeserializeOwned> Container<S, M> {
    pub fn open(source: S, magic: &[u8; 4]) -> Result<Self> {
        let total = source.size()?;
        if total < PREAMBLE_LEN {
            return Err(Error::Format(format!(
                "file is {total} bytes, shorter than the {PREAMBLE_LEN}-byte preamble"
            )));
        }
        let pre = read_preamble(&source)?;
        if &pre.magic != magic {
            return Err(Error::Format("bad magic".into()));
        }
        if pre.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                pre.version
            )));
        }
        if pre.header_len > total - PREAMBLE_LEN {
            return Err(Error::Format(format!(
                "header length {} exceeds file size {total}",
                pre.header_len
            )));
        }
        let mut raw = vec![0u8; pre.header_len as usize];
        source.read_exact_at(&mut raw, PREAMBLE_LEN)?;
        let header: Header<M> = serde_json::from_slice(&raw)
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        Ok(Self {
            source,
            header,
            payload_start: PREAMBLE_LEN + pre.header_len,
        })
    }
}

impl<S: ByteSource, M> Container<S, M> {
    pub fn meta(&self) -> &M {
        &self.header.meta
    }

    pub fn chunks(&self) -> &[ChunkEntry] {
        &self.header.chunks
    }

    pub fn source(&self) -> &S {
        &self.source
    }

    pub fn payload_start(&self) -> u64 {
        self.payload_start
    }

    pub fn find(&self, layer: Option<usize>, field: &str, head: Option<usize>) -> Option<&ChunkEntry> {
        self.header
            .chunks
            .iter()
            .find(|c| c.layer == layer && c.field == field && c.head == head)
    }

    /// Reads one chunk and verifies its checksum.
    pub fn read_chunk(&self, entry: &ChunkEntry) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; entry.length as usize];
        self.source
            .read_exact_at(&mut buf, self.payload_start + entry.offset)
            .map_err(|e| Error::Integrity {
                layer: entry.layer,
                field: entry.label(),
                reason: format!("chunk unreadable: {e}"),
            })?;
        let crc = crc32fast::hash(&buf);
        if crc != entry.crc32 {
            return Err(Error::Integrity {
                layer: entry.layer,
                field: entry.label(),
                reason: format!("checksum mismatch (stored {:08x}, computed {crc:08x})", entry.crc32),
            });
        }
        Ok(buf)
    }
}

pub fn encode_f32(values: impl IntoIterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

pub fn encode_f64(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect()
}
