// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level and GPT-2 BPE tokenizers.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{MegaError, Result};

/// GPT-2 pre-tokenization pattern.
const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// GPT-2's reversible byte -> printable unicode table.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from(b'!')..=u32::from(b'~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0u32;
    for b in 0..256u32 {
        let c = if printable(b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    decoder: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

impl BpeTokenizer {
    /// Build from a token->id map and merges in rank order.
    pub fn new(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let byte_encoder = bytes_to_unicode();
        for c in byte_encoder {
            if !vocab.contains_key(&c.to_string()) {
                return Err(MegaError::Tokenizer(format!(
                    "vocabulary lacks byte symbol {c:?}"
                )));
            }
        }
        let mut decoder = HashMap::with_capacity(vocab.len());
        for (tok, id) in &vocab {
            if decoder.insert(*id, tok.clone()).is_some() {
                return Err(MegaError::Tokenizer(format!("duplicate token id {id}")));
            }
        }
        let ranks = merges
            .into_iter()
            .enumerate()
            .map(|(rank, pair)| (pair, rank))
            .collect();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, c)| (*c, b as u8))
            .collect();
        let pattern = Regex::new(GPT2_PATTERN).map_err(|e| MegaError::Tokenizer(e.to_string()))?;
        Ok(Self {
            encoder: vocab,
            decoder,
            ranks,
            byte_encoder,
            byte_decoder,
            pattern,
        })
    }

    /// Load GPT-2 `vocab.json` and `merges.txt`.
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab_text =
            std::fs::read_to_string(vocab_path).map_err(|e| MegaError::io(vocab_path, e))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)
            .map_err(|e| MegaError::Tokenizer(format!("vocab.json: {e}")))?;
        let merges_text =
            std::fs::read_to_string(merges_path).map_err(|e| MegaError::io(merges_path, e))?;
        Self::new(vocab, parse_merges(&merges_text)?)
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|r| (*r, i))
                })
                .min();
            let Some((_, first)) = best else { break };
            let (a, b) = (parts[first].clone(), parts[first + 1].clone());
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == a && parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    fn encode_word(&self, bytes: &[u8], out: &mut Vec<u32>) -> Result<()> {
        let mapped: String = bytes.iter().map(|b| self.byte_encoder[*b as usize]).collect();
        for sym in self.bpe(&mapped) {
            let id = self
                .encoder
                .get(&sym)
                .ok_or_else(|| MegaError::Tokenizer(format!("symbol {sym:?} not in vocabulary")))?;
            out.push(*id);
        }
        Ok(())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for chunk in bytes.utf8_chunks() {
            for m in self.pattern.find_iter(chunk.valid()) {
                let m = m.map_err(|e| MegaError::Tokenizer(e.to_string()))?;
                self.encode_word(m.as_str().as_bytes(), &mut out)?;
            }
            for b in chunk.invalid() {
                self.encode_word(std::slice::from_ref(b), &mut out)?;
            }
        }
        Ok(out)
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for id in ids {
            let tok = self
                .decoder
                .get(id)
                .ok_or_else(|| MegaError::Tokenizer(format!("unknown token id {id}")))?;
            for c in tok.chars() {
                let b = self
                    .byte_decoder
                    .get(&c)
                    .ok_or_else(|| MegaError::Tokenizer(format!("unmappable char {c:?}")))?;
                out.push(*b);
            }
        }
        Ok(out)
    }
}

/// Parse `merges.txt`: optional `#version` header, one `a b` pair per line.
pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || (n == 0 && line.starts_with("#version")) {
            continue;
        }
        let mut it = line.split(' ');
        match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()));
            }
            _ => {
                return Err(MegaError::Tokenizer(format!(
                    "merges.txt line {}: expected two symbols, got {line:?}",
                    n + 1
                )))
            }
        }
    }
    Ok(merges)
}

/// Text <-> token id conversion.
#[derive(Debug, Clone)]
pub enum Tokenizer {
    /// Identity over bytes 0..=255.
    Byte,
    Bpe(BpeTokenizer),
}

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<Vec<u32>> {
        match self {
            Self::Byte => Ok(bytes.iter().map(|b| u32::from(*b)).collect()),
            Self::Bpe(bpe) => bpe.encode_bytes(bytes),
        }
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        match self {
            Self::Byte => ids
                .iter()
                .map(|id| {
                    u8::try_from(*id)
                        .map_err(|_| MegaError::Tokenizer(format!("byte tokenizer got id {id}")))
                })
                .collect(),
            Self::Bpe(bpe) => bpe.decode_bytes(ids),
        }
    }

    /// Decode to text, replacing invalid UTF-8 with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Byte => 256,
            Self::Bpe(bpe) => bpe.vocab_size(),
        }
    }

    /// Token whose next-token probability stands for `answer`.
    ///
    /// Byte mode reads the first byte of the trimmed answer. BPE mode follows
    /// the GPT-2 convention that a continuation word carries a leading space
    /// and takes the first token of `" " + answer`.
    pub fn answer_token(&self, answer: &str) -> Result<u32> {
        let trimmed = answer.trim_start();
        if trimmed.is_empty() {
            return Err(MegaError::Tokenizer("empty answer".into()));
        }
        let ids = match self {
            Self::Byte => self.encode(trimmed)?,
            Self::Bpe(_) => self.encode(&format!(" {trimmed}"))?,
        };
        ids.first()
            .copied()
            .ok_or_else(|| MegaError::Tokenizer("answer encoded to nothing".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Byte symbols plus a handful of merges, enough to exercise ranking.
    fn tiny_bpe() -> BpeTokenizer {
        let table = bytes_to_unicode();
        let mut vocab: HashMap<String, u32> = table
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as u32))
            .collect();
        let merges: Vec<(String, String)> = [("Ġ", "t"), ("h", "e"), ("Ġt", "he"), ("a", "b")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        for (i, (a, b)) in merges.iter().enumerate() {
            vocab.insert(format!("{a}{b}"), 256 + i as u32);
        }
        BpeTokenizer::new(vocab, merges).unwrap()
    }

    #[test]
    fn byte_table_is_gpt2() {
        let t = bytes_to_unicode();
        assert_eq!(t[b'!' as usize], '!');
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'\n' as usize], 'Ċ');
        let distinct: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(distinct.len(), 256);
    }

    #[test]
    fn byte_mode() {
        let t = Tokenizer::Byte;
        assert_eq!(t.encode("ab").unwrap(), vec![97, 98]);
        assert_eq!(t.decode(&[97, 98]).unwrap(), "ab");
        assert!(t.encode("").unwrap().is_empty());
        assert!(t.decode_bytes(&[300]).is_err());
    }

    #[test]
    fn bpe_applies_lowest_rank_merges() {
        let t = Tokenizer::Bpe(tiny_bpe());
        // " the" -> Ġ t h e -> Ġt h e -> Ġt he -> Ġthe
        assert_eq!(t.encode(" the").unwrap(), vec![258]);
        assert_eq!(t.encode("ab").unwrap(), vec![259]);
        assert_eq!(t.encode("").unwrap(), Vec::<u32>::new());
        assert_eq!(t.decode(&t.encode("say the word").unwrap()).unwrap(), "say the word");
    }

    #[test]
    fn answer_token_rules() {
        assert_eq!(Tokenizer::Byte.answer_token(" x").unwrap(), u32::from(b'x'));
        let t = Tokenizer::Bpe(tiny_bpe());
        assert_eq!(t.answer_token("the").unwrap(), 258);
        assert!(t.answer_token("  ").is_err());
    }

    #[test]
    fn malformed_files() {
        assert!(parse_merges("#version: 0.2\na b\nc\n").is_err());
        assert_eq!(parse_merges("#version: 0.2\na b\n").unwrap().len(), 1);
        let bad = BpeTokenizer::new(HashMap::new(), vec![]);
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn bpe_roundtrips_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let t = Tokenizer::Bpe(tiny_bpe());
            let ids = t.encode_bytes(&bytes).unwrap();
            prop_assert_eq!(t.decode_bytes(&ids).unwrap(), bytes);
        }

        #[test]
        fn byte_roundtrips_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let t = Tokenizer::Byte;
            prop_assert_eq!(t.decode_bytes(&t.encode_bytes(&bytes).unwrap()).unwrap(), bytes);
        }
    }
}
