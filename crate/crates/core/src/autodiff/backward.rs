use super::{Node, NodeId, Op};
use crate::tensor::{self, reduce_to_shape, Tensor};

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Reverse sweep from `loss`. Returns leaf gradients (indexed by node id)
/// and the order in which nodes were visited.
pub(super) fn run(nodes: &[Node], loss: NodeId) -> (Vec<Option<Tensor>>, Vec<NodeId>) {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
    let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
    let mut order = Vec::new();
    grads[loss] = Some(vec![1.0]);

    for id in (0..=loss).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        order.push(id);
        let needs = |p: NodeId| nodes[p].requires_grad;
        let val = |p: NodeId| &nodes[p].value;
        let out = &node.value;

        match &node.op {
            Op::Leaf => {
                leaf_grads[id] = Some(Tensor::new(g, out.shape()).expect("grad shape"));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    accumulate(&mut grads, *a, reduce_to_shape(&g, out.shape(), val(*a).shape()));
                }
                if needs(*b) {
                    let gb: Vec<f64> = g.iter().map(|x| sign * x).collect();
                    accumulate(&mut grads, *b, reduce_to_shape(&gb, out.shape(), val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    let ib = tensor::broadcast_index(vb.shape(), out.shape());
                    let ga: Vec<f64> = g.iter().zip(&ib).map(|(x, &j)| x * vb.data()[j]).collect();
                    accumulate(&mut grads, *a, reduce_to_shape(&ga, out.shape(), va.shape()));
                }
                if needs(*b) {
                    let ia = tensor::broadcast_index(va.shape(), out.shape());
                    let gb: Vec<f64> = g.iter().zip(&ia).map(|(x, &i)| x * va.data()[i]).collect();
                    accumulate(&mut grads, *b, reduce_to_shape(&gb, out.shape(), vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ib = tensor::broadcast_index(vb.shape(), out.shape());
                if needs(*a) {
                    let ga: Vec<f64> = g.iter().zip(&ib).map(|(x, &j)| x / vb.data()[j]).collect();
                    accumulate(&mut grads, *a, reduce_to_shape(&ga, out.shape(), va.shape()));
                }
                if needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .zip(&ib)
                        .map(|((x, q), &j)| -x * q / vb.data()[j])
                        .collect();
                    accumulate(&mut grads, *b, reduce_to_shape(&gb, out.shape(), vb.shape()));
                }
            }
            Op::Neg(a) => accumulate(&mut grads, *a, g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => accumulate(&mut grads, *a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => accumulate(&mut grads, *a, g),
            Op::Exp(a) => {
                let ga = g.iter().zip(out.data()).map(|(x, y)| x * y).collect();
                accumulate(&mut grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = g.iter().zip(val(*a).data()).map(|(x, v)| x / v).collect();
                accumulate(&mut grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = g.iter().zip(out.data()).map(|(x, y)| x / (2.0 * y)).collect();
                accumulate(&mut grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &v)| x * tensor::gelu_grad(v))
                    .collect();
                accumulate(&mut grads, *a, ga);
            }
            Op::MatMul(a, b, dims) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (dims.m, dims.k, dims.n);
                if needs(*a) {
                    // dA = G B^T
                    let mut ga = vec![0.0; va.numel()];
                    for bi in 0..dims.batch {
                        let bslice = if dims.rhs_shared {
                            vb.data()
                        } else {
                            &vb.data()[bi * k * n..(bi + 1) * k * n]
                        };
                        tensor::gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            bslice,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(&mut grads, *a, ga);
                }
                if needs(*b) {
                    // dB = A^T G, summed over the batch when B is shared.
                    let mut gb = vec![0.0; vb.numel()];
                    if dims.rhs_shared {
                        tensor::gemm_tn_acc(va.data(), &g, &mut gb, dims.batch * m, k, n);
                    } else {
                        for bi in 0..dims.batch {
                            tensor::gemm_tn_acc(
                                &va.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                }
            }
            Op::Permute(a, axes) => {
                let gt = Tensor::new(g, out.shape()).expect("grad shape");
                let inv = tensor::inverse_permutation(axes);
                let ga = tensor::permute(&gt, &inv).expect("valid permutation");
                accumulate(&mut grads, *a, ga.into_data());
            }
            Op::Reshape(a) => accumulate(&mut grads, *a, g),
            Op::BroadcastTo(a) => {
                accumulate(&mut grads, *a, reduce_to_shape(&g, out.shape(), val(*a).shape()));
            }
            Op::SumAxis(a, ax) => {
                // out has keepdim shape; broadcast back.
                let ga = reduce_free_broadcast(&g, out.shape(), val(*a).shape(), *ax);
                accumulate(&mut grads, *a, ga);
            }
            Op::SumAll(a) => accumulate(&mut grads, *a, vec![g[0]; val(*a).numel()]),
            Op::Softmax(a) => {
                let (rows, cols) = out.rows_cols();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let mut dot = 0.0;
                    for (gi, yi) in g[s.clone()].iter().zip(&y[s.clone()]) {
                        dot += gi * yi;
                    }
                    for j in s {
                        ga[j] = y[j] * (g[j] - dot);
                    }
                }
                accumulate(&mut grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = out.rows_cols();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let mut gsum = 0.0;
                    for gi in &g[s.clone()] {
                        gsum += gi;
                    }
                    for j in s {
                        ga[j] = g[j] - y[j].exp() * gsum;
                    }
                }
                accumulate(&mut grads, *a, ga);
            }
            Op::MaskedFill(a, mask) => {
                let ga = g
                    .iter()
                    .zip(mask)
                    .map(|(&x, &m)| if m { 0.0 } else { x })
                    .collect();
                accumulate(&mut grads, *a, ga);
            }
            Op::L2Norm(a) => {
                let va = val(*a);
                let (rows, cols) = va.rows_cols();
                let mut ga = vec![0.0; va.numel()];
                for r in 0..rows {
                    let nrm = out.data()[r];
                    if nrm == 0.0 {
                        continue;
                    }
                    for j in r * cols..(r + 1) * cols {
                        ga[j] = g[r] * va.data()[j] / nrm;
                    }
                }
                accumulate(&mut grads, *a, ga);
            }
            Op::Std(a, means) => {
                let va = val(*a);
                let (rows, cols) = va.rows_cols();
                let mut ga = vec![0.0; va.numel()];
                for r in 0..rows {
                    let sd = out.data()[r];
                    if sd == 0.0 {
                        continue;
                    }
                    for j in r * cols..(r + 1) * cols {
                        ga[j] = g[r] * (va.data()[j] - means[r]) / (cols as f64 * sd);
                    }
                }
                accumulate(&mut grads, *a, ga);
            }
            Op::Concat(parts, ax) => {
                let (outer, total, inner) = tensor::split_at_axis(out.shape(), *ax);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*ax];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(&mut grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice(a, ax, start) => {
                let va = val(*a);
                let (outer, len, inner) = tensor::split_at_axis(va.shape(), *ax);
                let w = out.shape()[*ax];
                let mut ga = vec![0.0; va.numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    ga[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                accumulate(&mut grads, *a, ga);
            }
            Op::Embedding(table, ids) => {
                let vt = val(*table);
                let d = vt.shape()[1];
                let mut gt = vec![0.0; vt.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
                accumulate(&mut grads, *table, gt);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = val(*gamma);
                let (rows, d) = out.rows_cols();
                if needs(*gamma) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *gamma, gg);
                }
                if needs(*beta) {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *beta, gb);
                }
                if needs(*x) {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * vg.data()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[r * d + j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * vg.data()[j];
                            gx[r * d + j] = rstd[r]
                                * (dxh - inv_d * sum_dxh - xhat[r * d + j] * inv_d * sum_dxh_xh);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                total,
            } => {
                let vl = val(*logits);
                let (rows, v) = vl.rows_cols();
                let sm = tensor::softmax_rows(vl).expect("finite logits");
                let mut gl = vec![0.0; vl.numel()];
                for r in 0..rows {
                    let w = weights[r];
                    if w == 0.0 {
                        continue;
                    }
                    let c = g[0] * w / total;
                    for j in 0..v {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        gl[r * v + j] = c * (sm.data()[r * v + j] - onehot);
                    }
                }
                accumulate(&mut grads, *logits, gl);
            }
        }
    }
    (leaf_grads, order)
}

/// Broadcasts a keepdim reduction gradient back along `axis`.
fn reduce_free_broadcast(g: &[f64], out_shape: &[usize], in_shape: &[usize], axis: usize) -> Vec<f64> {
    debug_assert_eq!(out_shape[axis], 1);
    let (outer, len, inner) = tensor::split_at_axis(in_shape, axis);
    let mut ga = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    ga
}
