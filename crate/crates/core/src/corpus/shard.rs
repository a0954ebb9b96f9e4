//! Binary shard format.
//!
//! Little-endian throughout:
//!
//! ```text
//! header   "TKSV" | version u16 | doc count u64
//! per doc  id len u16 | id bytes | flags u8 | token count u32 | ids u32[n]
//!          [spans (start u32, end u32)[n]]     flags bit 0
//!          [labels bitmap, ceil(n/8) bytes]    flags bit 1, LSB-first
//!          [scores f32[n]]                     flags bit 2
//! trailer  CRC32 (IEEE) of every byte between header and trailer
//! ```
//!
//! Flags bit 3 marks the bitmap as a loss mask instead of forget labels.

use std::io::Write;
use std::path::Path;

use super::{CorpusError, LabelSlot, Result, Span, TokenizedDocument};

pub const SHARD_MAGIC: &[u8; 4] = b"TKSV";
pub const SHARD_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8;

const FLAG_SPANS: u8 = 1 << 0;
const FLAG_LABELS: u8 = 1 << 1;
const FLAG_SCORES: u8 = 1 << 2;
const FLAG_LOSS_MASK: u8 = 1 << 3;
const KNOWN_FLAGS: u8 = FLAG_SPANS | FLAG_LABELS | FLAG_SCORES | FLAG_LOSS_MASK;

fn encode_doc(doc: &TokenizedDocument, out: &mut Vec<u8>) -> Result<()> {
    doc.validate()?;
    let id = doc.doc_id.as_bytes();
    let id_len = u16::try_from(id.len()).map_err(|_| doc.malformed("document id longer than 65535 bytes"))?;
    let n = u32::try_from(doc.tokens.len()).map_err(|_| doc.malformed("more than u32::MAX tokens"))?;

    let mut flags = 0u8;
    if doc.spans.is_some() {
        flags |= FLAG_SPANS;
    }
    if doc.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if doc.scores.is_some() {
        flags |= FLAG_SCORES;
    }
    if doc.label_slot == LabelSlot::LossMask {
        flags |= FLAG_LOSS_MASK;
    }

    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.push(flags);
    out.extend_from_slice(&n.to_le_bytes());
    for t in &doc.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    if let Some(spans) = &doc.spans {
        for s in spans {
            out.extend_from_slice(&s.start.to_le_bytes());
            out.extend_from_slice(&s.end.to_le_bytes());
        }
    }
    if let Some(labels) = &doc.labels {
        let mut bitmap = vec![0u8; labels.len().div_ceil(8)];
        for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l) {
            bitmap[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bitmap);
    }
    if let Some(scores) = &doc.scores {
        for s in scores {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    Ok(())
}

/// Serializes a corpus into shard bytes.
pub fn encode_shard(docs: &[TokenizedDocument]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 + docs.iter().map(|d| 16 + d.doc_id.len() + 8 * d.len()).sum::<usize>());
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&(docs.len() as u64).to_le_bytes());
    for doc in docs {
        encode_doc(doc, &mut out)?;
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn write_shard_to<W: Write>(mut w: W, docs: &[TokenizedDocument]) -> Result<()> {
    w.write_all(&encode_shard(docs)?)?;
    w.flush()?;
    Ok(())
}

pub fn write_shard(path: &Path, docs: &[TokenizedDocument]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_shard_to(std::io::BufWriter::new(file), docs)
}

pub fn read_shard(path: &Path) -> Result<Vec<TokenizedDocument>> {
    decode_shard(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CorpusError::Truncated(what))?;
        let slice = self.buf.get(self.pos..end).ok_or(CorpusError::Truncated(what))?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize, what: &'static str) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(CorpusError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn decode_doc(r: &mut Reader<'_>) -> Result<TokenizedDocument> {
    let id_len = r.u16("document id length")? as usize;
    let id = r.take(id_len, "document id")?;
    let doc_id = std::str::from_utf8(id)
        .map_err(|e| CorpusError::Malformed {
            doc_id: String::from_utf8_lossy(id).into_owned(),
            reason: format!("id is not UTF-8: {e}"),
        })?
        .to_string();
    let flags = r.u8("flags")?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(CorpusError::Malformed {
            doc_id,
            reason: format!("unknown flag bits {flags:#04x}"),
        });
    }
    let n = r.u32("token count")? as usize;
    let tokens = r.u32s(n, "token ids")?;
    let spans = if flags & FLAG_SPANS != 0 {
        let raw = r.u32s(n * 2, "spans")?;
        Some(raw.chunks_exact(2).map(|p| Span::new(p[0], p[1])).collect())
    } else {
        None
    };
    let labels = if flags & FLAG_LABELS != 0 {
        let bitmap = r.take(n.div_ceil(8), "label bitmap")?;
        Some((0..n).map(|i| bitmap[i / 8] >> (i % 8) & 1 == 1).collect())
    } else {
        None
    };
    let scores = if flags & FLAG_SCORES != 0 {
        let raw = r.u32s(n, "scores")?;
        Some(raw.into_iter().map(f32::from_bits).collect())
    } else {
        None
    };
    let label_slot = if flags & FLAG_LOSS_MASK != 0 {
        LabelSlot::LossMask
    } else {
        LabelSlot::Forget
    };
    let doc = TokenizedDocument {
        doc_id,
        tokens,
        spans,
        labels,
        scores,
        label_slot,
    };
    Ok(doc)
}

/// Parses shard bytes, checking magic, version, layout and checksum.
pub fn decode_shard(bytes: &[u8]) -> Result<Vec<TokenizedDocument>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != SHARD_MAGIC {
        return Err(CorpusError::BadMagic(magic));
    }
    let version = r.u16("version")?;
    if version != SHARD_VERSION {
        return Err(CorpusError::UnsupportedVersion(version));
    }
    let count = r.u64("document count")?;
    // each record is at least 7 bytes, so a larger count is certainly truncated
    if count > (bytes.len() / 7) as u64 {
        return Err(CorpusError::Truncated("documents"));
    }
    let mut docs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        docs.push(decode_doc(&mut r)?);
    }
    let payload_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(CorpusError::TrailingBytes(bytes.len() - r.pos));
    }
    let computed = crc32fast::hash(&bytes[HEADER_LEN..payload_end]);
    if stored != computed {
        return Err(CorpusError::Checksum { stored, computed });
    }
    for doc in &docs {
        doc.validate()?;
    }
    Ok(docs)
}
