//! Reference byte-pair encoder.
//!
//! Encoding starts from single-byte tokens and repeatedly applies the
//! lowest-ranked applicable merge, leftmost first on equal ranks. A lazy
//! min-heap over adjacent pairs keeps it `O(n log n)` per document.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Result, Span, TokenizedDocument};

/// One side of a merge in the JSON file: either a token id or the token's
/// bytes as lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairRef {
    Id(u32),
    Hex(String),
}

/// Serialized merge table: `{"merges": [[l, r], ...], "vocab": {hex: id}, "special": {"hidden": id}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeTableFile {
    pub merges: Vec<[PairRef; 2]>,
    pub vocab: BTreeMap<String, u32>,
    #[serde(default)]
    pub special: BTreeMap<String, u32>,
}

#[derive(Debug, Clone)]
pub struct MergeTable {
    vocab: HashMap<Vec<u8>, u32>,
    id_bytes: HashMap<u32, Vec<u8>>,
    byte_ids: [Option<u32>; 256],
    merges: Vec<(u32, u32)>,
    pair_rank: HashMap<(u32, u32), (u32, u32)>,
    special: BTreeMap<String, u32>,
    vocab_size: u32,
}

fn bad(msg: impl Into<String>) -> CorpusError {
    CorpusError::MergeTable(msg.into())
}

impl MergeTable {
    pub fn from_file_repr(file: &MergeTableFile) -> Result<Self> {
        let mut vocab = HashMap::with_capacity(file.vocab.len());
        let mut id_bytes = HashMap::with_capacity(file.vocab.len());
        for (hex_key, &id) in &file.vocab {
            let bytes = hex::decode(hex_key).map_err(|e| bad(format!("vocab key {hex_key:?}: {e}")))?;
            if bytes.is_empty() {
                return Err(bad("empty vocabulary entry"));
            }
            if let Some(prev) = id_bytes.insert(id, bytes.clone()) {
                return Err(bad(format!("id {id} assigned to both {} and {hex_key}", hex::encode(prev))));
            }
            if vocab.insert(bytes, id).is_some() {
                return Err(bad(format!("duplicate vocabulary entry {hex_key}")));
            }
        }
        for (name, &id) in &file.special {
            if id_bytes.contains_key(&id) {
                return Err(bad(format!("special token {name:?} id {id} collides with a text token")));
            }
        }
        let mut byte_ids = [None; 256];
        for (bytes, &id) in &vocab {
            if bytes.len() == 1 {
                byte_ids[bytes[0] as usize] = Some(id);
            }
        }

        let resolve = |r: &PairRef| -> Result<(u32, Vec<u8>)> {
            match r {
                PairRef::Id(id) => id_bytes
                    .get(id)
                    .map(|b| (*id, b.clone()))
                    .ok_or_else(|| bad(format!("merge part id {id} not in vocabulary"))),
                PairRef::Hex(h) => {
                    let bytes = hex::decode(h).map_err(|e| bad(format!("merge part {h:?}: {e}")))?;
                    vocab
                        .get(&bytes)
                        .map(|&id| (id, bytes))
                        .ok_or_else(|| bad(format!("merge part {h} not in vocabulary")))
                }
            }
        };

        let mut merges = Vec::with_capacity(file.merges.len());
        let mut pair_rank = HashMap::with_capacity(file.merges.len());
        for (rank, [l, r]) in file.merges.iter().enumerate() {
            let (lid, mut lb) = resolve(l)?;
            let (rid, rb) = resolve(r)?;
            lb.extend_from_slice(&rb);
            let merged = *vocab
                .get(&lb)
                .ok_or_else(|| bad(format!("merge {rank} produces {} which is not in vocabulary", hex::encode(&lb))))?;
            if pair_rank.insert((lid, rid), (rank as u32, merged)).is_some() {
                return Err(bad(format!("merge ({lid}, {rid}) listed twice")));
            }
            merges.push((lid, rid));
        }

        let vocab_size = id_bytes
            .keys()
            .chain(file.special.values())
            .max()
            .map_or(0, |m| m + 1);
        Ok(MergeTable {
            vocab,
            id_bytes,
            byte_ids,
            merges,
            pair_rank,
            special: file.special.clone(),
            vocab_size,
        })
    }

    pub fn to_file_repr(&self) -> MergeTableFile {
        let merges = self
            .merges
            .iter()
            .map(|(l, r)| {
                [
                    PairRef::Hex(hex::encode(&self.id_bytes[l])),
                    PairRef::Hex(hex::encode(&self.id_bytes[r])),
                ]
            })
            .collect();
        let vocab = self.vocab.iter().map(|(b, &id)| (hex::encode(b), id)).collect();
        MergeTableFile {
            merges,
            vocab,
            special: self.special.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: MergeTableFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        Self::from_file_repr(&file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file_repr()).map_err(|e| bad(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// All 256 single bytes as ids `0..256`, then one id per merge in rank
    /// order, then the hidden token when requested.
    pub fn byte_level(merges: &[(&[u8], &[u8])], with_hidden: bool) -> Result<Self> {
        let mut vocab: BTreeMap<String, u32> = (0..=255u8).map(|b| (hex::encode([b]), u32::from(b))).collect();
        let mut next = 256u32;
        let mut pairs = Vec::with_capacity(merges.len());
        for (l, r) in merges {
            let mut joined = l.to_vec();
            joined.extend_from_slice(r);
            let key = hex::encode(&joined);
            if let std::collections::btree_map::Entry::Vacant(e) = vocab.entry(key) {
                e.insert(next);
                next += 1;
            }
            pairs.push([PairRef::Hex(hex::encode(l)), PairRef::Hex(hex::encode(r))]);
        }
        let mut special = BTreeMap::new();
        if with_hidden {
            special.insert("hidden".to_string(), next);
        }
        Self::from_file_repr(&MergeTableFile {
            merges: pairs,
            vocab,
            special,
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn hidden_id(&self) -> Option<u32> {
        self.special.get("hidden").copied()
    }

    pub fn special(&self) -> &BTreeMap<String, u32> {
        &self.special
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.id_bytes.get(&id).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.vocab.get(bytes).copied()
    }

    /// `(rank, merged id)` of the merge for an adjacent pair.
    pub fn merge_for(&self, left: u32, right: u32) -> Option<(u32, u32)> {
        self.pair_rank.get(&(left, right)).copied()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Encodes `text` into a document with byte spans.
    pub fn encode(&self, doc_id: &str, text: &str) -> Result<TokenizedDocument> {
        let (tokens, spans) = self.encode_bytes(text.as_bytes())?;
        Ok(TokenizedDocument::new(doc_id, tokens).with_spans(spans))
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<(Vec<u32>, Vec<Span>)> {
        if bytes.len() > u32::MAX as usize {
            return Err(bad("documents larger than 4 GiB cannot be addressed by u32 spans"));
        }
        const NONE: usize = usize::MAX;
        struct Node {
            id: u32,
            start: u32,
            end: u32,
            prev: usize,
            next: usize,
            alive: bool,
        }

        let mut nodes = Vec::with_capacity(bytes.len());
        for (i, &b) in bytes.iter().enumerate() {
            let id = self.byte_ids[b as usize].ok_or(CorpusError::Unencodable { offset: i, byte: b })?;
            nodes.push(Node {
                id,
                start: i as u32,
                end: i as u32 + 1,
                prev: if i == 0 { NONE } else { i - 1 },
                next: if i + 1 == bytes.len() { NONE } else { i + 1 },
                alive: true,
            });
        }

        // (rank, start of left token, left node, right node, left id, right id)
        type Entry = Reverse<(u32, u32, usize, usize, u32, u32)>;
        let mut heap: BinaryHeap<Entry> = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<Entry>, nodes: &[Node], l: usize, r: usize| {
            if l == NONE || r == NONE {
                return;
            }
            if let Some(&(rank, _)) = self.pair_rank.get(&(nodes[l].id, nodes[r].id)) {
                heap.push(Reverse((rank, nodes[l].start, l, r, nodes[l].id, nodes[r].id)));
            }
        };
        for i in 1..nodes.len() {
            push(&mut heap, &nodes, i - 1, i);
        }

        while let Some(Reverse((_, _, l, r, lid, rid))) = heap.pop() {
            let valid = nodes[l].alive
                && nodes[r].alive
                && nodes[l].next == r
                && nodes[l].id == lid
                && nodes[r].id == rid;
            if !valid {
                continue;
            }
            let (_, merged) = self.pair_rank[&(lid, rid)];
            let after = nodes[r].next;
            nodes[l].id = merged;
            nodes[l].end = nodes[r].end;
            nodes[l].next = after;
            nodes[r].alive = false;
            if after != NONE {
                nodes[after].prev = l;
            }
            let before = nodes[l].prev;
            push(&mut heap, &nodes, before, l);
            push(&mut heap, &nodes, l, after);
        }

        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        let mut cur = if nodes.is_empty() { NONE } else { 0 };
        while cur != NONE {
            let n = &nodes[cur];
            tokens.push(n.id);
            spans.push(Span::new(n.start, n.end));
            cur = n.next;
        }
        Ok((tokens, spans))
    }
}
