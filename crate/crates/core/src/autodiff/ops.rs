use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, normalize_axis, Tensor};

impl<'t> Var<'t> {
    fn unary(&self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (f(&n.value), n.requires_grad)
        };
        self.tape.record(value, op, rg)
    }

    fn try_unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (f(&n.value)?, n.requires_grad)
        };
        Ok(self.tape.record(value, op, rg))
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            (
                tensor::broadcast_binary(name, &a.value, &b.value, f)?,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.record(value, op, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |t| t.map(|x| -x))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|x| x * c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |t| t.map(|x| x + c))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), |t| t.map(f64::ln))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |t| t.map(f64::sqrt))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), |t| t.map(tensor::gelu))
    }

    /// Matrix product over the last two axes. The right operand is either a
    /// plain `[k, n]` matrix shared across the batch or has the same batch axes.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, dims, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (v, dims) = tensor::matmul(&a.value, &b.value)?;
            (v, dims, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .record(value, Op::MatMul(self.id, other.id, dims), rg))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.try_unary(Op::Permute(self.id, axes.to_vec()), |t| {
            tensor::permute(t, axes)
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(Error::invalid("transpose", format!("rank {rank} < 2")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.try_unary(Op::Reshape(self.id), |t| t.reshape(shape))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.try_unary(Op::BroadcastTo(self.id), |t| tensor::broadcast_to(t, shape))
    }

    pub fn sum(&self, axis: isize, keepdim: bool) -> Result<Var<'t>> {
        let rank = self.value().rank();
        let ax = normalize_axis("sum", axis, rank)?;
        let v = self.unary(Op::SumAxis(self.id, ax), |t| tensor::sum_axis(t, ax, true));
        if keepdim {
            Ok(v)
        } else {
            let mut shape = v.shape();
            shape.remove(ax);
            v.reshape(&shape)
        }
    }

    pub fn mean(&self, axis: isize, keepdim: bool) -> Result<Var<'t>> {
        let rank = self.value().rank();
        let ax = normalize_axis("mean", axis, rank)?;
        let n = self.value().shape()[ax];
        Ok(self.sum(axis, keepdim)?.scale(1.0 / n as f64))
    }

    pub fn sum_all(&self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |t| {
            let mut s = 0.0;
            for &x in t.data() {
                s += x;
            }
            Tensor::scalar(s)
        })
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value().numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Softmax over the last axis with max subtraction. A row that is
    /// entirely `-inf` is rejected.
    pub fn softmax(&self) -> Result<Var<'t>> {
        self.try_unary(Op::Softmax(self.id), tensor::softmax_rows)
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        self.try_unary(Op::LogSoftmax(self.id), tensor::log_softmax_rows)
    }

    /// Replaces entries where `mask` (broadcast to this shape) is true.
    pub fn masked_fill(&self, mask: &[bool], mask_shape: &[usize], value: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        if mask.len() != mask_shape.iter().product::<usize>() {
            return Err(Error::shape("masked_fill", mask_shape, &[mask.len()]));
        }
        match tensor::broadcast_shape(mask_shape, &shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("masked_fill", &shape, mask_shape)),
        }
        let idx = tensor::broadcast_index(mask_shape, &shape);
        let full: Vec<bool> = idx.iter().map(|&i| mask[i]).collect();
        let out = {
            let v = self.value();
            let data = v
                .data()
                .iter()
                .zip(&full)
                .map(|(&x, &m)| if m { value } else { x })
                .collect();
            Tensor::new(data, &shape)?
        };
        Ok(self
            .tape
            .record(out, Op::MaskedFill(self.id, full), self.requires_grad()))
    }

    /// Euclidean norm over the last axis; the axis is removed.
    pub fn l2_norm(&self) -> Result<Var<'t>> {
        self.try_unary(Op::L2Norm(self.id), |t| {
            if t.rank() == 0 {
                return Err(Error::invalid("l2_norm", "rank 0"));
            }
            let shape = &t.shape()[..t.rank() - 1];
            Tensor::new(tensor::row_l2_norm(t), shape)
        })
    }

    /// Population standard deviation (divisor `d`) over the last axis; the axis is removed.
    pub fn std(&self) -> Result<Var<'t>> {
        let (value, means, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let t = &n.value;
            if t.rank() == 0 {
                return Err(Error::invalid("std", "rank 0"));
            }
            let (means, stds) = tensor::row_mean_std(t);
            (Tensor::new(stds, &t.shape()[..t.rank() - 1])?, means, n.requires_grad)
        };
        Ok(self.tape.record(value, Op::Std(self.id, means), rg))
    }

    pub fn slice(&self, axis: isize, start: usize, end: usize) -> Result<Var<'t>> {
        let rank = self.value().rank();
        let ax = normalize_axis("slice", axis, rank)?;
        self.try_unary(Op::Slice(self.id, ax, start), |t| {
            let (outer, len, inner) = tensor::split_at_axis(t.shape(), ax);
            if start > end || end > len {
                return Err(Error::invalid(
                    "slice",
                    format!("range {start}..{end} out of bounds for axis of length {len}"),
                ));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                data.extend_from_slice(&t.data()[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[ax] = w;
            Tensor::new(data, &shape)
        })
    }

    /// Row lookup into an embedding table `[vocab, d]`; output shape is
    /// `index_shape + [d]`.
    pub fn embedding(&self, ids: &[usize], index_shape: &[usize]) -> Result<Var<'t>> {
        if ids.len() != index_shape.iter().product::<usize>() {
            return Err(Error::shape("embedding", index_shape, &[ids.len()]));
        }
        self.try_unary(Op::Embedding(self.id, ids.to_vec()), |t| {
            if t.rank() != 2 {
                return Err(Error::invalid("embedding", "table must be rank 2"));
            }
            let (vocab, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::TokenOutOfRange { id, vocab });
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            let mut shape = index_shape.to_vec();
            shape.push(d);
            Tensor::new(data, &shape)
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (value, xhat, rstd, rg) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let (rows, d) = x.value.rows_cols();
            if g.value.shape() != [d] || b.value.shape() != [d] {
                return Err(Error::shape("layer_norm", x.value.shape(), g.value.shape()));
            }
            let (means, stds) = tensor::row_mean_std(&x.value);
            let mut out = vec![0.0; rows * d];
            let mut xhat = vec![0.0; rows * d];
            let mut rstd = Vec::with_capacity(rows);
            for r in 0..rows {
                let var = stds[r] * stds[r];
                let rs = 1.0 / (var + eps).sqrt();
                rstd.push(rs);
                for j in 0..d {
                    let xh = (x.value.data()[r * d + j] - means[r]) * rs;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * g.value.data()[j] + b.value.data()[j];
                }
            }
            (
                Tensor::new(out, x.value.shape())?,
                xhat,
                rstd,
                x.requires_grad || g.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.record(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Weighted mean next-token cross-entropy: logits `[..., V]`, one target
    /// and one non-negative weight per row.
    pub fn cross_entropy(&self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let (value, total, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let (rows, v) = n.value.rows_cols();
            if targets.len() != rows || weights.len() != rows {
                return Err(Error::shape("cross_entropy", &[rows], &[targets.len(), weights.len()]));
            }
            let lsm = tensor::log_softmax_rows(&n.value)?;
            let mut total = 0.0;
            let mut acc = 0.0;
            for r in 0..rows {
                if weights[r] == 0.0 {
                    continue;
                }
                if targets[r] >= v {
                    return Err(Error::TokenOutOfRange { id: targets[r], vocab: v });
                }
                total += weights[r];
                acc += -weights[r] * lsm.data()[r * v + targets[r]];
            }
            if total <= 0.0 {
                return Err(Error::EmptyMask { op: "cross_entropy" });
            }
            (Tensor::scalar(acc / total), total, n.requires_grad)
        };
        Ok(self.tape.record(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total,
            },
            rg,
        ))
    }

    /// Cosine similarity over the last axis; the axis is removed.
    pub fn cosine_similarity(&self, other: Var<'t>) -> Result<Var<'t>> {
        let dot = self.mul(other)?.sum(-1, false)?;
        let denom = self.l2_norm()?.mul(other.l2_norm()?)?;
        dot.div(denom)
    }
}

impl Tape {
    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: isize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let (value, ax, rg) = {
            let nodes = self.nodes();
            let first = nodes[parts[0].id].value.shape().to_vec();
            let ax = normalize_axis("concat", axis, first.len())?;
            let mut out_shape = first.clone();
            out_shape[ax] = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let mut a = s.to_vec();
                let mut b = first.clone();
                a[ax] = 0;
                b[ax] = 0;
                if a != b {
                    return Err(Error::shape("concat", &first, s));
                }
                out_shape[ax] += s[ax];
            }
            let (outer, _, inner) = tensor::split_at_axis(&out_shape, ax);
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let len = t.shape()[ax];
                    data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (Tensor::new(data, &out_shape)?, ax, rg)
        };
        Ok(self.record(
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect(), ax),
            rg,
        ))
    }
}
