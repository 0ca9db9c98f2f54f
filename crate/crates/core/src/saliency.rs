//! Bidirectional token-importance weights from hidden states.
//!
//! Token states are scaled by their feature standard deviation, scored
//! pairwise with a scaled dot product, and each source token distributes a
//! softmax over every other non-padded destination. A token's weight is the
//! mean attention it receives from the non-padded sources, so the weights of
//! one row sum to one and padded positions get exactly zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum per-token feature standard deviation accepted by [`standardize`].
pub const STD_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSide {
    Teacher,
    Student,
}

pub struct TokenWeights<'t> {
    /// `[batch, seq]`
    pub weights: Var<'t>,
    pub source_layer: usize,
    pub source_model: ModelSide,
}

fn check_std(std: &Tensor, seq: usize, padding_mask: Option<&[bool]>) -> Result<()> {
    for (i, &s) in std.data().iter().enumerate() {
        let padded = padding_mask.is_some_and(|m| m[i]);
        if !padded && s.partial_cmp(&STD_THRESHOLD) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::DegenerateStd {
                batch: i / seq,
                position: i % seq,
            });
        }
    }
    Ok(())
}

/// `H / sigma(H)` per token, sigma being the population standard deviation
/// over the feature axis. Input `[.., seq, d]`.
pub fn standardize<'t>(h: Var<'t>) -> Result<Var<'t>> {
    let shape = h.shape();
    if shape.len() < 2 {
        return Err(Error::invalid("standardize", format!("need [.., seq, d], got {shape:?}")));
    }
    let std = h.std()?;
    check_std(&std.value(), shape[shape.len() - 2], None)?;
    let mut keep = std.shape();
    keep.push(1);
    h.div(std.reshape(&keep)?)
}

/// Token weights for hidden states `[batch, seq, d]`. `padding_mask` is true
/// at padded positions; each row needs at least two real tokens.
pub fn token_weights<'t>(
    h: Var<'t>,
    padding_mask: &[bool],
    source_layer: usize,
    source_model: ModelSide,
) -> Result<TokenWeights<'t>> {
    let shape = h.shape();
    let [batch, seq, d] = shape[..] else {
        return Err(Error::invalid("token_weights", format!("need [batch, seq, d], got {shape:?}")));
    };
    if padding_mask.len() != batch * seq {
        return Err(Error::shape("token_weights", &[batch, seq], &[padding_mask.len()]));
    }
    let mut valid_counts = Vec::with_capacity(batch);
    for b in 0..batch {
        let valid = padding_mask[b * seq..(b + 1) * seq].iter().filter(|&&p| !p).count();
        if valid < 2 {
            return Err(Error::TooFewTokens { row: b, valid });
        }
        valid_counts.push(valid);
    }

    let std = h.std()?;
    check_std(&std.value(), seq, Some(padding_mask))?;
    // Padded positions never reach the weights; give them a harmless scale.
    let std = std.masked_fill(padding_mask, &[batch, seq], 1.0)?;
    let h_hat = h.div(std.reshape(&[batch, seq, 1])?)?;

    let scores = h_hat.matmul(h_hat.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let mut mask = vec![false; batch * seq * seq];
    for b in 0..batch {
        for s in 0..seq {
            for t in 0..seq {
                mask[(b * seq + s) * seq + t] = s == t || padding_mask[b * seq + t];
            }
        }
    }
    let alpha = scores
        .masked_fill(&mask, &[batch, seq, seq], f64::NEG_INFINITY)?
        .softmax()?;

    // Mean over non-padded sources.
    let mut src = vec![0.0; batch * seq];
    for b in 0..batch {
        let inv = 1.0 / valid_counts[b] as f64;
        for s in 0..seq {
            if !padding_mask[b * seq + s] {
                src[b * seq + s] = inv;
            }
        }
    }
    let src = h.tape().constant(Tensor::new(src, &[batch, 1, seq])?);
    let weights = src.matmul(alpha)?.reshape(&[batch, seq])?;
    Ok(TokenWeights {
        weights,
        source_layer,
        source_model,
    })
}
