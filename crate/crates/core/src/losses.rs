//! Distillation objectives.
//!
//! Distribution losses take logits (or log-probabilities) shaped `[.., V]`
//! and an `include` mask with one entry per row; they return the mean over
//! included rows. The teacher side is whatever the caller passes, so callers
//! detach teacher values before handing them in.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{BoundModel, ForwardTrace};
use crate::schedule::LayerSchedule;
use crate::tensor::Tensor;

/// Norm below which a vector is treated as zero by the cosine losses.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Kl,
    SkewKl,
    SkewRkl,
    Fdd,
}

fn rows_of(v: &Var<'_>) -> usize {
    let s = v.shape();
    s[..s.len().saturating_sub(1)].iter().product()
}

/// Weighted sum of a per-row quantity with constant weights.
fn weighted_sum<'t>(per_row: Var<'t>, weights: Vec<f64>) -> Result<Var<'t>> {
    let n = weights.len();
    let w = per_row.tape().constant(Tensor::vector(weights));
    Ok(per_row.reshape(&[n])?.mul(w)?.sum_all())
}

/// Mean of `per_row` over included rows.
pub fn masked_mean<'t>(per_row: Var<'t>, include: &[bool], op: &'static str) -> Result<Var<'t>> {
    let n = per_row.value().numel();
    if include.len() != n {
        return Err(Error::shape(op, &[n], &[include.len()]));
    }
    let count = include.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask { op });
    }
    let inv = 1.0 / count as f64;
    weighted_sum(per_row, include.iter().map(|&m| if m { inv } else { 0.0 }).collect())
}

/// Per-row `sum_v exp(lp) (lp - lq)` for log-probabilities.
fn kl_rows<'t>(lp: Var<'t>, lq: Var<'t>) -> Result<Var<'t>> {
    lp.exp().mul(lp.sub(lq)?)?.sum(-1, false)
}

fn check_pair(op: &'static str, a: &Var<'_>, b: &Var<'_>, include: &[bool]) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    if include.len() != rows_of(a) {
        return Err(Error::shape(op, &[rows_of(a)], &[include.len()]));
    }
    Ok(())
}

/// Token-mean `KL(p || q)` with `p`, `q` the softmax of the given logits.
pub fn kd_forward_kl<'t>(p_logits: Var<'t>, q_logits: Var<'t>, include: &[bool]) -> Result<Var<'t>> {
    check_pair("kd_forward_kl", &p_logits, &q_logits, include)?;
    let kl = kl_rows(p_logits.log_softmax()?, q_logits.log_softmax()?)?;
    masked_mean(kl, include, "kd_forward_kl")
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("skew", format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `log(a * exp(la) + (1 - a) * exp(lb))`, returning the endpoint exactly
/// when `a` is 0 or 1.
fn log_mixture<'t>(la: Var<'t>, lb: Var<'t>, a: f64) -> Result<Var<'t>> {
    if a == 1.0 {
        return Ok(la);
    }
    if a == 0.0 {
        return Ok(lb);
    }
    Ok(la.exp().scale(a).add(lb.exp().scale(1.0 - a))?.log())
}

/// Token-mean `KL(p || alpha p + (1 - alpha) q)`.
pub fn skew_kl<'t>(p_logits: Var<'t>, q_logits: Var<'t>, alpha: f64, include: &[bool]) -> Result<Var<'t>> {
    check_alpha(alpha)?;
    check_pair("skew_kl", &p_logits, &q_logits, include)?;
    let lp = p_logits.log_softmax()?;
    let lq = q_logits.log_softmax()?;
    let kl = kl_rows(lp, log_mixture(lp, lq, alpha)?)?;
    masked_mean(kl, include, "skew_kl")
}

/// Token-mean `KL(q || (1 - alpha) p + alpha q)`.
pub fn skew_rkl<'t>(p_logits: Var<'t>, q_logits: Var<'t>, alpha: f64, include: &[bool]) -> Result<Var<'t>> {
    check_alpha(alpha)?;
    check_pair("skew_rkl", &p_logits, &q_logits, include)?;
    let lp = p_logits.log_softmax()?;
    let lq = q_logits.log_softmax()?;
    let kl = kl_rows(lq, log_mixture(lq, lp, alpha)?)?;
    masked_mean(kl, include, "skew_rkl")
}

/// Vocabulary-space images (log-probabilities) of selected hidden layers.
pub struct VocabTrajectory<'t> {
    pub layers: BTreeMap<usize, Var<'t>>,
}

impl<'t> VocabTrajectory<'t> {
    pub fn build(
        model: &BoundModel<'t>,
        trace: &ForwardTrace<'t>,
        layers: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let mut out = BTreeMap::new();
        for l in layers {
            if let std::collections::btree_map::Entry::Vacant(e) = out.entry(l) {
                e.insert(model.project_to_vocab(trace.layer(l)?)?);
            }
        }
        Ok(Self { layers: out })
    }

    pub fn get(&self, l: usize) -> Result<Var<'t>> {
        self.layers.get(&l).copied().ok_or(Error::LayerOutOfRange {
            layer: l,
            max: self.layers.keys().next_back().copied().unwrap_or(0),
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|(&l, v)| (l, v.detach())).collect(),
        }
    }
}

/// Student and teacher layers an FDD objective reads: each scheduled layer
/// and the one below it.
pub fn fdd_layers(schedule: &LayerSchedule) -> (Vec<usize>, Vec<usize>) {
    let mut s = Vec::new();
    let mut t = Vec::new();
    for e in &schedule.entries {
        s.extend([e.student_layer - 1, e.student_layer]);
        t.extend([e.teacher_layer - 1, e.teacher_layer]);
    }
    (s, t)
}

/// Sum over scheduled layers of the token-mean KL between teacher and
/// student intermediate distributions.
pub fn fdd_traj<'t>(
    teacher: &VocabTrajectory<'t>,
    student: &VocabTrajectory<'t>,
    schedule: &LayerSchedule,
    include: &[bool],
) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for e in &schedule.entries {
        let yt = teacher.get(e.teacher_layer)?;
        let ys = student.get(e.student_layer)?;
        check_pair("fdd_traj", &yt, &ys, include)?;
        let term = masked_mean(kl_rows(yt, ys)?, include, "fdd_traj")?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    total.ok_or_else(|| Error::Schedule("empty schedule".into()))
}

/// Per-row `1 - cos(a, b)` over the last axis plus the row weights to use:
/// rows where either vector has norm below [`NORM_EPS`] get weight zero and
/// are counted as skipped.
fn cosine_distance_rows<'t>(a: Var<'t>, b: Var<'t>, include: &[bool]) -> Result<(Var<'t>, Vec<bool>, usize)> {
    let na = a.l2_norm()?;
    let nb = b.l2_norm()?;
    let rows = include.len();
    let mut keep = include.to_vec();
    let mut skipped = 0;
    {
        let (va, vb) = (na.value(), nb.value());
        for r in 0..rows {
            if keep[r] && (va.data()[r] < NORM_EPS || vb.data()[r] < NORM_EPS) {
                keep[r] = false;
                skipped += 1;
            }
        }
    }
    let dropped: Vec<bool> = keep.iter().map(|&k| !k).collect();
    let shape = na.shape();
    let denom = na.mul(nb)?.masked_fill(&dropped, &shape, 1.0)?;
    let cos = a.mul(b)?.sum(-1, false)?.div(denom)?;
    Ok((cos.neg().add_scalar(1.0), keep, skipped))
}

/// Sum over scheduled layers of the token-mean cosine distance between the
/// layer-to-layer changes of teacher and student log-probabilities. Also
/// returns the number of skipped (near-zero change) tokens.
pub fn fdd_der<'t>(
    teacher: &VocabTrajectory<'t>,
    student: &VocabTrajectory<'t>,
    schedule: &LayerSchedule,
    include: &[bool],
) -> Result<(Var<'t>, usize)> {
    let mut total: Option<Var<'t>> = None;
    let mut skipped = 0;
    for e in &schedule.entries {
        let dt = teacher.get(e.teacher_layer)?.sub(teacher.get(e.teacher_layer - 1)?)?;
        let ds = student.get(e.student_layer)?.sub(student.get(e.student_layer - 1)?)?;
        check_pair("fdd_der", &dt, &ds, include)?;
        let (dist, keep, n_skip) = cosine_distance_rows(dt, ds, include)?;
        skipped += n_skip;
        let term = if keep.iter().any(|&k| k) {
            masked_mean(dist, &keep, "fdd_der")?
        } else {
            dist.tape().scalar(0.0)
        };
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Schedule("empty schedule".into()))?;
    Ok((total, skipped))
}

/// Structural discrepancy at one layer:
/// `sum_{i<j} w_i w_j (d_S(i,j) - d_T(i,j))^2` with cosine distance `d`.
/// `u_t` is detached. Returns `(loss, degenerate)`; fewer than two spans
/// gives zero with `degenerate = true`.
pub fn dsa_layer<'t>(u_s: Var<'t>, u_t: Var<'t>, w: &[f64]) -> Result<(Var<'t>, bool)> {
    let (ss, ts) = (u_s.shape(), u_t.shape());
    if ss.len() != 2 || ts.len() != 2 {
        return Err(Error::invalid("dsa_layer", format!("need [n, d] reps, got {ss:?} and {ts:?}")));
    }
    if ss[0] != ts[0] {
        return Err(Error::SpanCountMismatch {
            what: "span representations",
            student: ss[0],
            teacher: ts[0],
        });
    }
    let n = ss[0];
    if w.len() != n {
        return Err(Error::SpanCountMismatch {
            what: "span weights",
            student: n,
            teacher: w.len(),
        });
    }
    if n < 2 {
        return Ok((u_s.tape().scalar(0.0), true));
    }
    let d_s = cosine_distance_matrix(u_s)?;
    let d_t = cosine_distance_matrix(u_t.detach())?;
    let mut pair = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            pair[i * n + j] = w[i] * w[j];
        }
    }
    let pair = u_s.tape().constant(Tensor::new(pair, &[n, n])?);
    Ok((d_s.sub(d_t)?.square().mul(pair)?.sum_all(), false))
}

/// `[n, n]` matrix of `1 - cos(u_i, u_j)`.
pub fn cosine_distance_matrix<'t>(u: Var<'t>) -> Result<Var<'t>> {
    let n = u.shape()[0];
    let norms = u.l2_norm()?;
    if let Some(i) = norms.value().data().iter().position(|&x| !(x >= NORM_EPS)) {
        return Err(Error::invalid("cosine_distance_matrix", format!("row {i} has zero norm")));
    }
    let unit = u.div(norms.reshape(&[n, 1])?)?;
    Ok(unit.matmul(unit.transpose()?)?.neg().add_scalar(1.0))
}

/// Mean of per-layer values.
pub fn mean_of<'t>(values: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = values
        .split_first()
        .ok_or_else(|| Error::invalid("mean_of", "no values"))?;
    let mut acc = *first;
    for v in rest {
        acc = acc.add(*v)?;
    }
    Ok(acc.scale(1.0 / values.len() as f64))
}

/// Hidden-state alignment for one sample at one layer:
/// `sum_{t in M} w_t (1 - cos(h_s[t] W, h_t[t]))` with `h_s: [T, d_s]`,
/// `h_t: [T, d_t]`, `proj: [d_s, d_t]`. Tokens whose projected or teacher
/// state has zero norm are skipped; the count is returned.
pub fn hid_layer<'t>(
    h_s: Var<'t>,
    h_t: Var<'t>,
    proj: Var<'t>,
    teacher_weights: &[f64],
    members: &[bool],
) -> Result<(Var<'t>, usize)> {
    let projected = h_s.matmul(proj)?;
    let h_t = h_t.detach();
    if projected.shape() != h_t.shape() {
        return Err(Error::shape("hid_layer", &projected.shape(), &h_t.shape()));
    }
    let rows = projected.shape()[0];
    if teacher_weights.len() != rows || members.len() != rows {
        return Err(Error::shape("hid_layer", &[rows], &[teacher_weights.len(), members.len()]));
    }
    let (dist, keep, skipped) = cosine_distance_rows(projected, h_t, members)?;
    let weights = keep
        .iter()
        .zip(teacher_weights)
        .map(|(&k, &w)| if k { w } else { 0.0 })
        .collect();
    Ok((weighted_sum(dist, weights)?, skipped))
}

/// Uniform `[-a, a]` initialization with `a = sqrt(6 / (d_s + d_t))`.
pub fn init_projector<R: Rng>(d_s: usize, d_t: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (d_s + d_t) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    let data = (0..d_s * d_t).map(|_| dist.sample(rng)).collect();
    Tensor::new(data, &[d_s, d_t]).expect("projector shape")
}

/// Loss weights applied on top of the base objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_dsa: f64,
    pub lambda_hid: f64,
}

/// Scalar components of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub base: f64,
    pub traj: f64,
    pub der: f64,
    pub dsa: f64,
    pub hid: f64,
    pub total: f64,
    pub per_layer_dsa: BTreeMap<usize, f64>,
}

impl LossReport {
    /// Recomputes the total from the parts in the order [`total_loss`] uses.
    pub fn recompose(&self, weights: LossWeights, fdd: bool) -> f64 {
        let mut t = self.base;
        if fdd {
            t = t + self.traj + self.der;
        }
        if weights.lambda_dsa != 0.0 {
            t += weights.lambda_dsa * self.dsa;
        }
        if weights.lambda_hid != 0.0 {
            t += weights.lambda_hid * self.hid;
        }
        t
    }
}

/// Differentiable parts of the objective.
pub struct LossParts<'t> {
    pub base: Var<'t>,
    /// FDD trajectory and derivative terms, present only for the FDD base.
    pub fdd: Option<(Var<'t>, Var<'t>)>,
    pub dsa: Option<Var<'t>>,
    pub hid: Option<Var<'t>>,
    pub per_layer_dsa: BTreeMap<usize, f64>,
}

/// `base (+ traj + der) + lambda_dsa * dsa + lambda_hid * hid`. Terms with a
/// zero weight are not added, so zero weights leave the base untouched.
pub fn total_loss<'t>(parts: &LossParts<'t>, weights: LossWeights, step: usize) -> Result<(Var<'t>, LossReport)> {
    if weights.lambda_dsa < 0.0 || weights.lambda_hid < 0.0 {
        return Err(Error::invalid("total_loss", "loss weights must be non-negative"));
    }
    let mut total = parts.base;
    let (mut traj, mut der) = (0.0, 0.0);
    if let Some((t, d)) = parts.fdd {
        total = total.add(t)?.add(d)?;
        traj = t.item();
        der = d.item();
    }
    let dsa = parts.dsa.map_or(0.0, |v| v.item());
    let hid = parts.hid.map_or(0.0, |v| v.item());
    if weights.lambda_dsa != 0.0 {
        let v = parts.dsa.ok_or_else(|| Error::invalid("total_loss", "lambda_dsa set without a DSA term"))?;
        total = total.add(v.scale(weights.lambda_dsa))?;
    }
    if weights.lambda_hid != 0.0 {
        let v = parts.hid.ok_or_else(|| Error::invalid("total_loss", "lambda_hid set without a Hid term"))?;
        total = total.add(v.scale(weights.lambda_hid))?;
    }
    let report = LossReport {
        step,
        base: parts.base.item(),
        traj,
        der,
        dsa,
        hid,
        total: total.item(),
        per_layer_dsa: parts.per_layer_dsa.clone(),
    };
    Ok((total, report))
}
