//! Span annotations, their alignment to model tokens, and span pooling.
//!
//! Annotations carry character offsets (Unicode scalar values) into the
//! sample text. Alignment converts them to byte offsets and assigns a model
//! token to a span when their ranges overlap by at least one byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start_char: usize,
    pub end_char: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhraseLabel {
    NP,
    VP,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub start_char: usize,
    pub end_char: usize,
    pub label: PhraseLabel,
}

/// Word and phrase spans of one sample, as produced by the span extractor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub sample_id: String,
    pub text: String,
    pub words: Vec<CharSpan>,
    pub phrases: Vec<PhraseSpan>,
}

impl SpanAnnotation {
    /// Checks bounds, ordering and non-overlap within each granularity.
    pub fn validate(&self) -> Result<()> {
        let len = self.text.chars().count();
        let err = |msg: String| Error::Annotation {
            sample_id: self.sample_id.clone(),
            msg,
        };
        let check = |kind: &str, spans: &mut dyn Iterator<Item = (usize, usize)>| -> Result<()> {
            let mut prev_end = 0;
            for (i, (s, e)) in spans.enumerate() {
                if s >= e || e > len {
                    return Err(err(format!("{kind} {i}: range {s}..{e} invalid for text of {len} chars")));
                }
                if s < prev_end {
                    return Err(err(format!("{kind} {i}: overlaps or precedes span {}", i - 1)));
                }
                prev_end = e;
            }
            Ok(())
        };
        check("word", &mut self.words.iter().map(|w| (w.start_char, w.end_char)))?;
        check("phrase", &mut self.phrases.iter().map(|p| (p.start_char, p.end_char)))
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SpanAnnotation>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: SpanAnnotation = serde_json::from_str(&line).map_err(|e| Error::Annotation {
            sample_id: format!("<line {}>", i + 1),
            msg: e.to_string(),
        })?;
        ann.validate()?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, annotations: &[SpanAnnotation]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in annotations {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Word,
    Phrase,
}

/// Inclusive model-token index range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSpanMap {
    pub granularity: Granularity,
    pub spans: Vec<TokenSpan>,
    /// Annotation spans that resolved to no (non-padded) token.
    pub dropped_count: usize,
}

impl TokenSpanMap {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// `[seq]` indicator of tokens covered by any span.
    pub fn coverage(&self, seq: usize) -> Vec<bool> {
        let mut out = vec![false; seq];
        for s in &self.spans {
            for t in s.tokens() {
                out[t] = true;
            }
        }
        out
    }
}

/// Word and phrase maps for one tokenized sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedSpans {
    pub word: TokenSpanMap,
    pub phrase: TokenSpanMap,
}

impl AlignedSpans {
    /// Spans to use at a layer of the given granularity. A phrase layer on a
    /// sample without phrases falls back to its word spans; the flag reports it.
    pub fn for_granularity(&self, g: Granularity) -> (&TokenSpanMap, bool) {
        match g {
            Granularity::Word => (&self.word, false),
            Granularity::Phrase if self.phrase.is_empty() => (&self.word, true),
            Granularity::Phrase => (&self.phrase, false),
        }
    }
}

fn char_to_byte_table(text: &str) -> Vec<usize> {
    let mut table: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    table.push(text.len());
    table
}

fn resolve(
    granularity: Granularity,
    spans: impl Iterator<Item = (usize, usize)>,
    token_ranges: &[Option<(usize, usize)>],
    padding_mask: &[bool],
) -> TokenSpanMap {
    let mut resolved: Vec<TokenSpan> = Vec::new();
    let mut dropped = 0;
    for (s, e) in spans {
        let mut hit: Option<TokenSpan> = None;
        for (t, r) in token_ranges.iter().enumerate() {
            let Some((ts, te)) = *r else { continue };
            if padding_mask[t] || ts >= e || te <= s {
                continue;
            }
            hit = Some(match hit {
                None => TokenSpan { start: t, end: t },
                Some(h) => TokenSpan {
                    start: h.start.min(t),
                    end: h.end.max(t),
                },
            });
        }
        match hit {
            Some(h) => resolved.push(h),
            None => dropped += 1,
        }
    }
    resolved.sort_by_key(|s| (s.start, s.end));
    let mut merged: Vec<TokenSpan> = Vec::with_capacity(resolved.len());
    for s in resolved {
        match merged.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => merged.push(s),
        }
    }
    TokenSpanMap {
        granularity,
        spans: merged,
        dropped_count: dropped,
    }
}

/// Resolves an annotation onto model token positions.
///
/// `token_ranges[t]` is the byte range of `text` covered by model position
/// `t`, or `None` for special tokens (BOS). Positions past truncation are
/// simply absent; `padding_mask[t]` excludes padded positions.
pub fn align_spans(
    ann: &SpanAnnotation,
    text: &str,
    token_ranges: &[Option<(usize, usize)>],
    padding_mask: &[bool],
) -> Result<AlignedSpans> {
    if ann.text != text {
        return Err(Error::Annotation {
            sample_id: ann.sample_id.clone(),
            msg: "annotation text does not match tokenized text".into(),
        });
    }
    if padding_mask.len() != token_ranges.len() {
        return Err(Error::shape("align_spans", &[token_ranges.len()], &[padding_mask.len()]));
    }
    let table = char_to_byte_table(text);
    let to_bytes = |s: usize, e: usize| -> Result<(usize, usize)> {
        match (table.get(s), table.get(e)) {
            (Some(&bs), Some(&be)) if s < e => Ok((bs, be)),
            _ => Err(Error::Annotation {
                sample_id: ann.sample_id.clone(),
                msg: format!("span {s}..{e} out of range"),
            }),
        }
    };
    let words = ann
        .words
        .iter()
        .map(|w| to_bytes(w.start_char, w.end_char))
        .collect::<Result<Vec<_>>>()?;
    let phrases = ann
        .phrases
        .iter()
        .map(|p| to_bytes(p.start_char, p.end_char))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignedSpans {
        word: resolve(Granularity::Word, words.into_iter(), token_ranges, padding_mask),
        phrase: resolve(Granularity::Phrase, phrases.into_iter(), token_ranges, padding_mask),
    })
}

/// Saliency-weighted span means `U_k = sum_t w_t H_t / sum_t w_t` for
/// `h: [seq, d]`, `w: [seq]`; result `[n_spans, d]`.
pub fn span_representations<'t>(h: Var<'t>, w: Var<'t>, map: &TokenSpanMap) -> Result<Var<'t>> {
    let shape = h.shape();
    let [seq, _] = shape[..] else {
        return Err(Error::invalid("span_representations", format!("need [seq, d], got {shape:?}")));
    };
    if w.shape() != [seq] {
        return Err(Error::shape("span_representations", &shape, &w.shape()));
    }
    let n = map.len();
    if n == 0 {
        return Err(Error::invalid("span_representations", "no spans"));
    }
    let mut member = vec![0.0; n * seq];
    {
        let wv = w.value();
        for (k, s) in map.spans.iter().enumerate() {
            if s.end >= seq {
                return Err(Error::invalid("span_representations", format!("span {k} past sequence end")));
            }
            let mut mass = 0.0;
            for t in s.tokens() {
                member[k * seq + t] = 1.0;
                mass += wv.data()[t];
            }
            if mass.partial_cmp(&1e-12) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::ZeroSpanWeight { span: k });
            }
        }
    }
    let member = h.tape().constant(Tensor::new(member, &[n, seq])?);
    let weighted = member.mul(w.reshape(&[1, seq])?)?;
    let num = weighted.matmul(h)?;
    let den = weighted.sum(-1, true)?;
    num.div(den)
}

/// Span masses from token weights, normalized across spans.
pub fn span_weights(token_weights: &[f64], map: &TokenSpanMap) -> Result<Vec<f64>> {
    if map.is_empty() {
        return Err(Error::invalid("span_weights", "no spans"));
    }
    let raw: Vec<f64> = map
        .spans
        .iter()
        .map(|s| {
            let mut m = 0.0;
            for t in s.tokens() {
                m += token_weights[t];
            }
            m
        })
        .collect();
    let mut total = 0.0;
    for &r in &raw {
        total += r;
    }
    if total <= 0.0 {
        return Err(Error::ZeroSpanMass);
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}
