//! Byte-level BPE tokenizer compatible with the public GPT-2 vocabulary
//! format (`vocab.json` plus `merges.txt`).
//!
//! Every byte is representable, so encoding never fails and decoding inverts
//! encoding for arbitrary UTF-8 input.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// The pre-tokenizer split pattern used by GPT-2. Contractions first, then
/// space-prefixed letter and number runs, other symbol runs, and whitespace
/// (holding back the final space before a following word).
const SPLIT_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

const END_OF_TEXT: &str = "<|endoftext|>";

/// Where a keyword is expected to appear when its vocabulary index is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionHint {
    /// Mid-sentence word start; the leading-space variant is used.
    WordInitial,
    /// Continuation of a word already in progress; no leading space.
    Continuation,
}

/// The byte remapping GPT-2 applies before BPE: printable bytes map to
/// themselves, the rest to code points from 256 upward.
fn byte_char_tables() -> ([char; 256], HashMap<char, u8>) {
    let mut byte_to_char = ['\0'; 256];
    let mut assigned = [false; 256];
    let printable = (b'!'..=b'~')
        .chain(0xA1u8..=0xACu8)
        .chain(0xAEu8..=0xFFu8);
    for b in printable {
        byte_to_char[b as usize] = char::from_u32(b as u32).unwrap();
        assigned[b as usize] = true;
    }
    let mut next = 256u32;
    for b in 0..256 {
        if !assigned[b] {
            byte_to_char[b] = char::from_u32(next).unwrap();
            next += 1;
        }
    }
    let char_to_byte = byte_to_char
        .iter()
        .enumerate()
        .map(|(b, &c)| (c, b as u8))
        .collect();
    (byte_to_char, char_to_byte)
}

/// GPT-2 vocabulary: dense token ids, ordered merge rules, and the byte
/// remapping tables. Immutable after load.
pub struct BpeVocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    pattern: fancy_regex::Regex,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

impl BpeVocab {
    /// Loads `vocab.json` (token to id) and `merges.txt` (one merge per line,
    /// optional `#version` header).
    pub fn from_files(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab_path.as_ref())?;
        let merges_text = std::fs::read_to_string(merges_path.as_ref())?;
        Self::from_strings(&vocab_text, &merges_text)
    }

    pub fn from_strings(vocab_json: &str, merges: &str) -> Result<Self> {
        let token_to_id: HashMap<String, u32> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::Tokenizer(format!("vocab.json: {e}")))?;
        if token_to_id.is_empty() {
            return Err(Error::Tokenizer("vocabulary is empty".to_string()));
        }

        let mut id_to_token = vec![String::new(); token_to_id.len()];
        let mut seen = vec![false; token_to_id.len()];
        for (token, &id) in &token_to_id {
            let slot = seen
                .get_mut(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("token id {id} exceeds vocabulary size")))?;
            if *slot {
                return Err(Error::Tokenizer(format!("duplicate token id {id}")));
            }
            *slot = true;
            id_to_token[id as usize] = token.clone();
        }

        let mut merge_ranks = HashMap::new();
        for (rank, line) in merges
            .lines()
            .filter(|l| !l.is_empty() && !l.starts_with("#version"))
            .enumerate()
        {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(left), Some(right), None) if !left.is_empty() && !right.is_empty() => {
                    merge_ranks.insert((left.to_string(), right.to_string()), rank);
                }
                _ => return Err(Error::Tokenizer(format!("malformed merge rule: {line:?}"))),
            }
        }

        let (byte_to_char, char_to_byte) = byte_char_tables();
        for &c in byte_to_char.iter() {
            if !token_to_id.contains_key(&c.to_string()) {
                return Err(Error::Tokenizer(format!(
                    "vocabulary is missing base byte token {c:?}"
                )));
            }
        }

        let pattern = fancy_regex::Regex::new(SPLIT_PATTERN)
            .expect("split pattern is a valid expression");

        Ok(Self {
            token_to_id,
            id_to_token,
            merge_ranks,
            pattern,
            byte_to_char,
            char_to_byte,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Id of the end-of-text marker, if the vocabulary defines one.
    pub fn end_of_text_id(&self) -> Option<u32> {
        self.token_to_id.get(END_OF_TEXT).copied()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// The split pieces the BPE stage sees, concatenating back to the input.
    pub fn pre_tokenize(&self, text: &str) -> Vec<String> {
        self.pattern
            .find_iter(text)
            .map(|m| m.expect("bounded split pattern cannot fail").as_str().to_string())
            .collect()
    }

    fn bpe_piece(&self, piece: &str) -> Vec<String> {
        let mut symbols: Vec<String> = piece
            .bytes()
            .map(|b| self.byte_to_char[b as usize].to_string())
            .collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, w[0].clone(), w[1].clone()))
                })
                .min_by_key(|(rank, _, _)| *rank);
            let Some((_, left, right)) = best else { break };

            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Deterministic byte-level encoding. Total: every UTF-8 string encodes.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(text) {
            let piece = m.expect("bounded split pattern cannot fail").as_str();
            for symbol in self.bpe_piece(piece) {
                let id = self
                    .token_to_id
                    .get(&symbol)
                    .copied()
                    .expect("merge output is always in the vocabulary");
                ids.push(id);
            }
        }
        ids
    }

    /// Inverse of `encode` on valid UTF-8; arbitrary id sequences decode with
    /// replacement characters where the byte stream is not UTF-8.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            let Some(token) = self.id_to_token.get(id as usize) else {
                continue;
            };
            for c in token.chars() {
                match self.char_to_byte.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => bytes.extend(c.to_string().into_bytes()),
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// The vocabulary index used when an attribute keyword is looked up: the
    /// first sub-token of the hinted surface form. Word-initial keywords use
    /// the leading-space variant, the common mid-sentence form.
    pub fn keyword_token_id(&self, keyword: &str, hint: PositionHint) -> Result<u32> {
        Ok(self.keyword_token_ids(keyword, hint)?[0])
    }

    /// Full BPE split of the hinted surface form, first sub-token first.
    pub fn keyword_token_ids(&self, keyword: &str, hint: PositionHint) -> Result<Vec<u32>> {
        if keyword.is_empty() {
            return Err(Error::Tokenizer("keyword is empty".to_string()));
        }
        let surface = match hint {
            PositionHint::WordInitial => format!(" {keyword}"),
            PositionHint::Continuation => keyword.to_string(),
        };
        let ids = self.encode(&surface);
        debug_assert!(!ids.is_empty());
        Ok(ids)
    }
}
