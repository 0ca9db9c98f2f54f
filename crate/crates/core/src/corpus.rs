//! Corpora, encoding to next-token training pairs, and batching.
//!
//! The synthetic corpus is a copy task over a small phrase-structure
//! grammar: each sample is `"<sentence> | <sentence>"`, the second half
//! being the response. Word, NP and VP spans are emitted from the grammar,
//! so no parser is involved.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spans::{CharSpan, PhraseLabel, PhraseSpan, SpanAnnotation};
use crate::tokenizer::{Tokenizer, BOS, EOS, N_SPECIAL, PAD};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub text: String,
    /// Character offset where the response starts; `None` means the whole
    /// text is the response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_start: Option<usize>,
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::config(path.display().to_string(), format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const DET: &[&str] = &["the", "a", "every", "some", "this"];
const ADJ: &[&str] = &["red", "small", "old", "quiet", "bright", "green", "tall", "soft"];
const NOUN: &[&str] = &["cat", "dog", "bird", "child", "farmer", "river", "house", "song", "tree", "box"];
const VERB: &[&str] = &["sees", "finds", "likes", "moves", "takes", "hears", "holds", "follows"];
const AUX: &[&str] = &["will", "can", "may", "must"];
const VERB_BASE: &[&str] = &["see", "find", "like", "move", "take", "hear", "hold", "follow"];
pub const SEPARATOR: &str = "|";

#[derive(Clone, Copy)]
enum Tag {
    Det,
    Adj,
    Noun,
    Verb,
    Aux,
    VerbBase,
}

impl Tag {
    fn words(self) -> &'static [&'static str] {
        match self {
            Tag::Det => DET,
            Tag::Adj => ADJ,
            Tag::Noun => NOUN,
            Tag::Verb => VERB,
            Tag::Aux => AUX,
            Tag::VerbBase => VERB_BASE,
        }
    }
}

/// Templates as (phrase label, tags) chunks.
const TEMPLATES: &[&[(PhraseLabel, &[Tag])]] = &[
    &[
        (PhraseLabel::NP, &[Tag::Det, Tag::Adj, Tag::Noun]),
        (PhraseLabel::VP, &[Tag::Verb]),
        (PhraseLabel::NP, &[Tag::Det, Tag::Noun]),
    ],
    &[
        (PhraseLabel::NP, &[Tag::Det, Tag::Noun]),
        (PhraseLabel::VP, &[Tag::Aux, Tag::VerbBase]),
        (PhraseLabel::NP, &[Tag::Det, Tag::Noun]),
    ],
    &[
        (PhraseLabel::NP, &[Tag::Det, Tag::Noun]),
        (PhraseLabel::VP, &[Tag::Verb]),
        (PhraseLabel::NP, &[Tag::Det, Tag::Adj, Tag::Noun]),
    ],
];

/// Every word the grammar can emit, plus the separator.
pub fn synthetic_lexicon() -> Vec<&'static str> {
    let mut out: Vec<&str> = [DET, ADJ, NOUN, VERB, AUX, VERB_BASE].concat();
    out.push(SEPARATOR);
    out
}

pub fn synthetic_tokenizer() -> Tokenizer {
    Tokenizer::whitespace(synthetic_lexicon())
}

struct Builder {
    text: String,
    chars: usize,
    words: Vec<CharSpan>,
    phrases: Vec<PhraseSpan>,
}

impl Builder {
    fn word(&mut self, w: &str) -> CharSpan {
        if !self.text.is_empty() {
            self.text.push(' ');
            self.chars += 1;
        }
        let start = self.chars;
        self.text.push_str(w);
        self.chars += w.chars().count();
        let span = CharSpan {
            start_char: start,
            end_char: self.chars,
        };
        self.words.push(span);
        span
    }

    fn sentence(&mut self, chunks: &[(PhraseLabel, Vec<&str>)]) {
        for (label, words) in chunks {
            let mut first = None;
            let mut last = 0;
            for w in words {
                let s = self.word(w);
                first.get_or_insert(s.start_char);
                last = s.end_char;
            }
            self.phrases.push(PhraseSpan {
                start_char: first.expect("non-empty chunk"),
                end_char: last,
                label: *label,
            });
        }
    }
}

/// `n` copy-task samples with their gold span annotations.
pub fn generate_synthetic<R: Rng>(n: usize, id_prefix: &str, rng: &mut R) -> (Vec<Sample>, Vec<SpanAnnotation>) {
    let mut samples = Vec::with_capacity(n);
    let mut anns = Vec::with_capacity(n);
    for i in 0..n {
        let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let chunks: Vec<(PhraseLabel, Vec<&str>)> = template
            .iter()
            .map(|(label, tags)| {
                let words = tags
                    .iter()
                    .map(|t| {
                        let ws = t.words();
                        ws[rng.gen_range(0..ws.len())]
                    })
                    .collect();
                (*label, words)
            })
            .collect();
        let mut b = Builder {
            text: String::new(),
            chars: 0,
            words: Vec::new(),
            phrases: Vec::new(),
        };
        b.sentence(&chunks);
        b.word(SEPARATOR);
        let response_start = b.chars + 1;
        b.sentence(&chunks);
        let sample_id = format!("{id_prefix}{i:05}");
        anns.push(SpanAnnotation {
            sample_id: sample_id.clone(),
            text: b.text.clone(),
            words: b.words,
            phrases: b.phrases,
        });
        samples.push(Sample {
            sample_id,
            text: b.text,
            response_start: Some(response_start),
        });
    }
    (samples, anns)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    All,
    Response,
}

/// A sample as next-token pairs: position `t` reads `input_ids[t]` and
/// predicts `targets[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub sample_id: String,
    pub text: String,
    /// `BOS` followed by content tokens.
    pub input_ids: Vec<usize>,
    /// Content tokens followed by `EOS`.
    pub targets: Vec<usize>,
    /// Byte range of `text` read at each input position (`None` for `BOS`).
    pub token_ranges: Vec<Option<(usize, usize)>>,
    /// Whether the target at each position belongs to the response.
    pub response_mask: Vec<bool>,
    /// Input positions up to and including the last prompt token.
    pub prompt_len: usize,
    /// Byte offset where the response starts.
    pub response_byte: usize,
}

impl EncodedSample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn response_text(&self) -> &str {
        &self.text[self.response_byte..]
    }
}

/// Encodes a sample, truncating so that at most `max_seq_len` positions remain.
pub fn encode_sample(tokenizer: &Tokenizer, sample: &Sample, max_seq_len: usize) -> Result<EncodedSample> {
    let enc = tokenizer.encode(&sample.text);
    let response_byte = match sample.response_start {
        None => 0,
        Some(c) => match sample.text.char_indices().map(|(b, _)| b).chain([sample.text.len()]).nth(c) {
            Some(b) => b,
            None => {
                return Err(Error::Annotation {
                    sample_id: sample.sample_id.clone(),
                    msg: format!("response_start {c} past end of text"),
                })
            }
        },
    };
    let mut full = vec![BOS];
    full.extend(&enc.ids);
    full.push(EOS);
    let positions = (full.len() - 1).min(max_seq_len);
    if positions < 2 {
        return Err(Error::Annotation {
            sample_id: sample.sample_id.clone(),
            msg: format!("needs at least 2 positions, has {positions}"),
        });
    }
    let mut token_ranges = vec![None];
    token_ranges.extend(enc.byte_ranges.iter().copied().map(Some));
    token_ranges.truncate(positions);
    let response_mask = (0..positions)
        .map(|t| match enc.byte_ranges.get(t) {
            Some(&(s, _)) => s >= response_byte,
            None => true,
        })
        .collect();
    let prompt_len = 1 + enc.byte_ranges.iter().filter(|r| r.0 < response_byte).count();
    Ok(EncodedSample {
        sample_id: sample.sample_id.clone(),
        text: sample.text.clone(),
        input_ids: full[..positions].to_vec(),
        targets: full[1..=positions].to_vec(),
        token_ranges,
        response_mask,
        prompt_len: prompt_len.min(positions),
        response_byte,
    })
}

/// Right-padded batch, flattened row-major as `[batch, seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// True at padded positions.
    pub padding_mask: Vec<bool>,
    /// True where the next-token losses apply.
    pub loss_mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn loss_weights(&self) -> Vec<f64> {
        self.loss_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn row_padding(&self, b: usize) -> &[bool] {
        &self.padding_mask[b * self.seq..(b + 1) * self.seq]
    }
}

pub fn make_batch(samples: &[&EncodedSample], positions: LossPositions) -> Batch {
    let batch = samples.len();
    let seq = samples.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = Batch {
        tokens: vec![PAD; batch * seq],
        targets: vec![PAD; batch * seq],
        padding_mask: vec![true; batch * seq],
        loss_mask: vec![false; batch * seq],
        batch,
        seq,
    };
    for (b, s) in samples.iter().enumerate() {
        for t in 0..s.len() {
            let i = b * seq + t;
            out.tokens[i] = s.input_ids[t];
            out.targets[i] = s.targets[t];
            out.padding_mask[i] = false;
            out.loss_mask[i] = match positions {
                LossPositions::All => true,
                LossPositions::Response => s.response_mask[t],
            };
        }
    }
    out
}

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Token id of a lexicon word in the synthetic tokenizer.
pub fn synthetic_id(word: &str) -> Option<usize> {
    let mut lex = synthetic_lexicon();
    lex.sort();
    lex.dedup();
    lex.binary_search(&word).ok().map(|i| N_SPECIAL + i)
}
