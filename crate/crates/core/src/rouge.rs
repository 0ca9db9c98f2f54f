//! ROUGE-L over token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS precision, recall and balanced F-measure. F1 is computed as
/// `2 * lcs / (|candidate| + |reference|)`, the same quantity as `2PR/(P+R)`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<RougeL> {
    if reference.is_empty() {
        return Err(Error::invalid("rouge_l", "empty reference"));
    }
    if candidate.is_empty() {
        return Ok(RougeL {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        });
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let (m, n) = (candidate.len() as f64, reference.len() as f64);
    Ok(RougeL {
        precision: lcs / m,
        recall: lcs / n,
        f1: 2.0 * lcs / (m + n),
    })
}

/// ROUGE-L on whitespace-split words.
pub fn rouge_l_words(candidate: &str, reference: &str) -> Result<RougeL> {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge_l(&c, &r)
}
