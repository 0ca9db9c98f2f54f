//! Assembles structural (DSA) and hidden-state alignment terms for a batch
//! from student and teacher hidden states, span maps and a layer schedule.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::losses::{dsa_layer, hid_layer, kd_forward_kl, mean_of, skew_kl, skew_rkl, BaseKind};
use crate::saliency::{token_weights, ModelSide};
use crate::schedule::LayerSchedule;
use crate::spans::{span_representations, span_weights, AlignedSpans};

/// Which token weights pool the student's span representations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanPoolWeights {
    /// Each model pools with its own weights at its own layer.
    #[default]
    Own,
    /// Both sides pool with the teacher's weights at the mapped layer.
    Teacher,
}

pub struct StructuralTerms<'t> {
    /// Mean over scheduled layers of the batch-mean layer discrepancy.
    pub dsa: Var<'t>,
    /// Batch mean of the per-sample sum over layers; `None` without projectors.
    pub hid: Option<Var<'t>>,
    pub per_layer_dsa: BTreeMap<usize, f64>,
    /// (sample, layer) pairs with fewer than two spans.
    pub degenerate: usize,
    /// (sample, layer) pairs where a phrase layer used word spans.
    pub phrase_fallbacks: usize,
    pub hid_skipped: usize,
}

/// Row `b` of a `[batch, ...]` var, without the batch axis.
fn row<'t>(v: Var<'t>, b: usize) -> Result<Var<'t>> {
    let shape = v.shape();
    v.slice(0, b, b + 1)?.reshape(&shape[1..])
}

/// DSA and Hid terms. `teacher_hidden[l]` is the teacher's layer-`l` state
/// `[batch, seq, d_t]` (treated as constant); `student_hidden` likewise for
/// the student. `padding_mask` is `[batch * seq]`, true where padded.
/// `projectors`, when given, holds one `[d_s, d_t]` matrix per schedule entry.
#[allow(clippy::too_many_arguments)]
pub fn structural_terms<'t>(
    student_hidden: &[Var<'t>],
    teacher_hidden: &[Var<'t>],
    padding_mask: &[bool],
    spans: &[AlignedSpans],
    schedule: &LayerSchedule,
    projectors: Option<&[Var<'t>]>,
    pool: SpanPoolWeights,
) -> Result<StructuralTerms<'t>> {
    if schedule.is_empty() {
        return Err(Error::Schedule("empty schedule".into()));
    }
    if let Some(p) = projectors {
        if p.len() != schedule.len() {
            return Err(Error::invalid(
                "structural_terms",
                format!("{} projectors for {} scheduled layers", p.len(), schedule.len()),
            ));
        }
    }
    let get = |hidden: &[Var<'t>], l: usize| {
        hidden.get(l).copied().ok_or(Error::LayerOutOfRange {
            layer: l,
            max: hidden.len().saturating_sub(1),
        })
    };
    let shape = get(student_hidden, 0)?.shape();
    let (batch, seq) = (shape[0], shape[1]);
    if spans.len() != batch {
        return Err(Error::shape("structural_terms", &[batch], &[spans.len()]));
    }

    let mut teacher_weights: BTreeMap<usize, Var<'t>> = BTreeMap::new();
    let mut layer_values = Vec::with_capacity(schedule.len());
    let mut per_layer_dsa = BTreeMap::new();
    let mut hid: Option<Var<'t>> = None;
    let (mut degenerate, mut fallbacks, mut hid_skipped) = (0, 0, 0);

    for (idx, e) in schedule.entries.iter().enumerate() {
        let h_s = get(student_hidden, e.student_layer)?;
        let h_t = get(teacher_hidden, e.teacher_layer)?.detach();
        let w_t = match teacher_weights.get(&e.teacher_layer) {
            Some(w) => *w,
            None => {
                let w = token_weights(h_t, padding_mask, e.teacher_layer, ModelSide::Teacher)?.weights;
                teacher_weights.insert(e.teacher_layer, w);
                w
            }
        };
        let w_s = match pool {
            SpanPoolWeights::Own => token_weights(h_s, padding_mask, e.student_layer, ModelSide::Student)?.weights,
            SpanPoolWeights::Teacher => w_t,
        };
        let w_t_vals = w_t.to_tensor();

        let mut terms: Option<Var<'t>> = None;
        let mut members = vec![false; batch * seq];
        for (b, sample_spans) in spans.iter().enumerate() {
            let (map, fell_back) = sample_spans.for_granularity(e.granularity);
            if fell_back {
                fallbacks += 1;
                debug!("sample {b} layer {}: no phrases, using word spans", e.student_layer);
            }
            for (t, covered) in map.coverage(seq).into_iter().enumerate() {
                members[b * seq + t] = covered && !padding_mask[b * seq + t];
            }
            if map.len() < 2 {
                degenerate += 1;
                continue;
            }
            let u_s = span_representations(row(h_s, b)?, row(w_s, b)?, map)?;
            let u_t = span_representations(row(h_t, b)?, row(w_t, b)?, map)?;
            let w_sp = span_weights(&w_t_vals.data()[b * seq..(b + 1) * seq], map)?;
            let (v, _) = dsa_layer(u_s, u_t, &w_sp)?;
            terms = Some(match terms {
                None => v,
                Some(acc) => acc.add(v)?,
            });
        }
        let value = match terms {
            Some(sum) => sum.scale(1.0 / batch as f64),
            None => h_s.tape().scalar(0.0),
        };
        per_layer_dsa.insert(e.student_layer, value.item());
        layer_values.push(value);

        if let Some(projectors) = projectors {
            let d_s = h_s.shape()[2];
            let d_t = h_t.shape()[2];
            let weights: Vec<f64> = w_t_vals.data().iter().map(|w| w / batch as f64).collect();
            let (v, skipped) = hid_layer(
                h_s.reshape(&[batch * seq, d_s])?,
                h_t.reshape(&[batch * seq, d_t])?,
                projectors[idx],
                &weights,
                &members,
            )?;
            hid_skipped += skipped;
            hid = Some(match hid {
                None => v,
                Some(acc) => acc.add(v)?,
            });
        }
    }

    Ok(StructuralTerms {
        dsa: mean_of(&layer_values)?,
        hid,
        per_layer_dsa,
        degenerate,
        phrase_fallbacks: fallbacks,
        hid_skipped,
    })
}

/// Output-distribution loss between teacher and student logits.
pub fn base_loss<'t>(
    kind: BaseKind,
    teacher_logits: Var<'t>,
    student_logits: Var<'t>,
    alpha: f64,
    include: &[bool],
) -> Result<Var<'t>> {
    let p = teacher_logits.detach();
    match kind {
        BaseKind::Kl | BaseKind::Fdd => kd_forward_kl(p, student_logits, include),
        BaseKind::SkewKl => skew_kl(p, student_logits, alpha, include),
        BaseKind::SkewRkl => skew_rkl(p, student_logits, alpha, include),
    }
}
