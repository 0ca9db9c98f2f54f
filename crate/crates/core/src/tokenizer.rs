//! Byte-level and whitespace tokenizers that report byte ranges per token.

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const N_SPECIAL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Byte,
    Whitespace,
}

/// A tokenized text: ids plus the byte range of `text` each id covers.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub text: String,
    pub ids: Vec<usize>,
    pub byte_ranges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tokenizer {
    /// One id per UTF-8 byte (`N_SPECIAL + byte`).
    Byte,
    /// One id per whitespace-delimited word from a fixed lexicon.
    Whitespace { words: Vec<String> },
}

impl Tokenizer {
    /// Whitespace tokenizer over the sorted, deduplicated lexicon.
    pub fn whitespace<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut words: Vec<String> = words.into_iter().map(Into::into).collect();
        words.sort();
        words.dedup();
        Tokenizer::Whitespace { words }
    }

    pub fn kind(&self) -> TokenizerKind {
        match self {
            Tokenizer::Byte => TokenizerKind::Byte,
            Tokenizer::Whitespace { .. } => TokenizerKind::Whitespace,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => N_SPECIAL + 256,
            Tokenizer::Whitespace { words } => N_SPECIAL + words.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Encoding {
        let (ids, byte_ranges) = match self {
            Tokenizer::Byte => text
                .bytes()
                .enumerate()
                .map(|(i, b)| (N_SPECIAL + b as usize, (i, i + 1)))
                .unzip(),
            Tokenizer::Whitespace { words } => word_ranges(text)
                .into_iter()
                .map(|(s, e)| {
                    let id = words
                        .binary_search_by(|w| w.as_str().cmp(&text[s..e]))
                        .map(|i| N_SPECIAL + i)
                        .unwrap_or(UNK);
                    (id, (s, e))
                })
                .unzip(),
        };
        Encoding {
            text: text.to_string(),
            ids,
            byte_ranges,
        }
    }

    pub fn decode_token(&self, id: usize) -> String {
        match (self, id) {
            (_, PAD) => "<pad>".into(),
            (_, BOS) => "<bos>".into(),
            (_, EOS) => "<eos>".into(),
            (_, UNK) => "<unk>".into(),
            (Tokenizer::Byte, id) => {
                String::from_utf8_lossy(&[(id - N_SPECIAL).min(255) as u8]).into_owned()
            }
            (Tokenizer::Whitespace { words }, id) => words
                .get(id - N_SPECIAL)
                .cloned()
                .unwrap_or_else(|| "<unk>".into()),
        }
    }

    /// Decodes content ids, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let content = ids.iter().copied().filter(|&id| id >= N_SPECIAL);
        match self {
            Tokenizer::Byte => {
                let bytes: Vec<u8> = content.map(|id| (id - N_SPECIAL).min(255) as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Whitespace { .. } => content
                .map(|id| self.decode_token(id))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Byte ranges of maximal runs of non-whitespace characters.
pub fn word_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}
