//! Byte-level BPE tokenizer with reserved control tokens for the chat
//! templates.
//!
//! Token ids: 0..=255 are raw bytes, 256..=261 are control tokens, merge
//! products start at [`FIRST_MERGE_ID`]. Control tokens are never produced
//! by merges, so encoding plain text can never fabricate a template
//! boundary.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub type TokenId = u32;

pub const N_BYTE_TOKENS: u32 = 256;
pub const BOS: TokenId = 256;
pub const EOT: TokenId = 257;
pub const HDR_OPEN: TokenId = 258;
pub const HDR_CLOSE: TokenId = 259;
pub const USER: TokenId = 260;
pub const ASSISTANT: TokenId = 261;
pub const FIRST_MERGE_ID: TokenId = 262;

pub const CONTROL_TOKENS: [(TokenId, &str); 6] = [
    (BOS, "<|bos|>"),
    (EOT, "<|eot|>"),
    (HDR_OPEN, "<|hdr|>"),
    (HDR_CLOSE, "<|/hdr|>"),
    (USER, "user"),
    (ASSISTANT, "assistant"),
];

pub fn is_control(id: TokenId) -> bool {
    (BOS..FIRST_MERGE_ID).contains(&id)
}

pub fn control_name(id: TokenId) -> Option<&'static str> {
    CONTROL_TOKENS.iter().find(|(i, _)| *i == id).map(|(_, n)| *n)
}

/// Trained byte-pair vocabulary.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    merges: Vec<(TokenId, TokenId)>,
    /// byte content of every non-control token, indexed by id (controls
    /// hold their display name's bytes but are never matched during encode)
    token_bytes: Vec<Vec<u8>>,
    rank: HashMap<(TokenId, TokenId), u32>,
}

impl Vocabulary {
    /// Total number of token ids, including bytes and control tokens.
    pub fn size(&self) -> usize {
        FIRST_MERGE_ID as usize + self.merges.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> &[u8] {
        &self.token_bytes[id as usize]
    }

    fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut token_bytes: Vec<Vec<u8>> = (0u32..N_BYTE_TOKENS).map(|b| vec![b as u8]).collect();
        for (_, name) in CONTROL_TOKENS {
            token_bytes.push(name.as_bytes().to_vec());
        }
        let mut rank = HashMap::new();
        for (i, &(l, r)) in merges.iter().enumerate() {
            let next = FIRST_MERGE_ID + i as u32;
            if l >= next || r >= next || is_control(l) || is_control(r) {
                return Err(Error::invalid(format!("merge {i} references invalid id ({l},{r})")));
            }
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            token_bytes.push(bytes);
            rank.insert((l, r), i as u32);
        }
        Ok(Vocabulary { merges, token_bytes, rank })
    }

    /// Applies the learned merges to one pretoken chunk.
    fn encode_chunk(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        let mut ids: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        loop {
            let mut best: Option<(u32, usize)> = None;
            for i in 0..ids.len().saturating_sub(1) {
                if let Some(&r) = self.rank.get(&(ids[i], ids[i + 1])) {
                    if best.map_or(true, |(br, _)| r < br) {
                        best = Some((r, i));
                    }
                }
            }
            match best {
                Some((r, i)) => {
                    ids[i] = FIRST_MERGE_ID + r;
                    ids.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend_from_slice(&ids);
    }

    pub fn encode_bytes(&self, text: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    /// Inverse of [`encode_bytes`]; control tokens decode to their display
    /// names.
    pub fn decode_bytes(&self, tokens: &[TokenId]) -> Vec<u8> {
        let mut out = Vec::new();
        for &t in tokens {
            out.extend_from_slice(&self.token_bytes[t as usize]);
        }
        out
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(tokens)).into_owned()
    }

    /// Concatenated bytes of the non-control tokens, plus each token's byte
    /// range within that content (None for control tokens). Used to map
    /// answer strings back onto token spans.
    pub fn content_offsets(&self, tokens: &[TokenId]) -> (Vec<u8>, Vec<Option<(usize, usize)>>) {
        let mut content = Vec::new();
        let mut spans = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if is_control(t) {
                spans.push(None);
            } else {
                let start = content.len();
                content.extend_from_slice(&self.token_bytes[t as usize]);
                spans.push(Some((start, content.len())));
            }
        }
        (content, spans)
    }

    /// One merge per line, then the control-token table; ordering is fixed
    /// so that re-serialization is byte-identical.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "bpe-vocab v1").unwrap();
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for &(l, r) in &self.merges {
            writeln!(s, "{l} {r}").unwrap();
        }
        writeln!(s, "controls {}", CONTROL_TOKENS.len()).unwrap();
        for (id, name) in CONTROL_TOKENS {
            writeln!(s, "{id} {name}").unwrap();
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some("bpe-vocab v1") {
            return Err(Error::invalid("unrecognized vocabulary header"));
        }
        let count_line = lines.next().ok_or_else(|| Error::invalid("missing merges line"))?;
        let n: usize = count_line
            .strip_prefix("merges ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::invalid("bad merges count"))?;
        let mut merges = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| Error::invalid("truncated merge table"))?;
            let mut it = line.split_whitespace();
            let l = it.next().and_then(|v| v.parse().ok());
            let r = it.next().and_then(|v| v.parse().ok());
            match (l, r) {
                (Some(l), Some(r)) => merges.push((l, r)),
                _ => return Err(Error::invalid(format!("bad merge line {line:?}"))),
            }
        }
        Vocabulary::from_merges(merges)
    }
}

/// Splits bytes at non-space -> space transitions, so leading whitespace
/// stays attached to the following word and merges never cross words.
fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut start = 0;
    for i in 1..text.len() {
        let boundary = text[i].is_ascii_whitespace() && !text[i - 1].is_ascii_whitespace();
        if boundary {
            chunks.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

/// Learns BPE merges from a corpus. Deterministic: the most frequent pair
/// wins, ties broken by the smaller (left, right) id pair.
pub fn train_bpe(corpus: &str, target_vocab: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    if target_vocab < FIRST_MERGE_ID as usize {
        return Err(Error::invalid(format!(
            "target vocabulary {target_vocab} smaller than byte alphabet plus control tokens"
        )));
    }

    // distinct pretoken chunks with multiplicity
    let mut chunk_counts: HashMap<&[u8], u64> = HashMap::new();
    for chunk in pretokenize(corpus.as_bytes()) {
        *chunk_counts.entry(chunk).or_insert(0) += 1;
    }
    let mut chunks: Vec<(Vec<TokenId>, u64)> = chunk_counts
        .into_iter()
        .map(|(bytes, n)| (bytes.iter().map(|&b| b as TokenId).collect(), n))
        .collect();
    chunks.sort(); // iteration order independent of HashMap layout

    let mut merges = Vec::new();
    while FIRST_MERGE_ID as usize + merges.len() < target_vocab {
        let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (ids, n) in &chunks {
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += n;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some((pair, _)) = best else { break };
        let new_id = FIRST_MERGE_ID + merges.len() as u32;
        merges.push(pair);
        for (ids, _) in &mut chunks {
            let mut i = 0;
            while i + 1 < ids.len() {
                if (ids[i], ids[i + 1]) == pair {
                    ids[i] = new_id;
                    ids.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
    }
    Vocabulary::from_merges(merges)
}
