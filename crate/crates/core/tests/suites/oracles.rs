//! Vectorized implementations against independently written scalar loops.

use crate::common::{randn, random_aligned, random_map, random_model, rng, token_batch, uniform};
use mta_core::autodiff::Tape;
use mta_core::losses::{dsa_layer, fdd_traj, hid_layer, kd_forward_kl, VocabTrajectory};
use mta_core::objective::{structural_terms, SpanPoolWeights};
use mta_core::saliency::{standardize, token_weights, ModelSide};
use mta_core::schedule::{map_layer, LayerSchedule};
use mta_core::spans::{span_representations, span_weights, Granularity, TokenSpan, TokenSpanMap};
use mta_core::{Error, Tensor};
use rand::Rng;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn naive_dsa(us: &[Vec<f64>], ut: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..us.len() {
        for j in i + 1..us.len() {
            let diff = cos_dist(&us[i], &us[j]) - cos_dist(&ut[i], &ut[j]);
            total += w[i] * w[j] * diff * diff;
        }
    }
    total
}

fn normalized<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn dsa_matches_naive_double_loop() {
    let mut r = rng(1);
    for n in [2, 3, 5, 8, 13, 21, 34, 50] {
        for _ in 0..3 {
            let us = randn(&mut r, &[n, 7]);
            let ut = randn(&mut r, &[n, 11]);
            let w = normalized(&mut r, n);
            let tape = Tape::new();
            let (v, degenerate) = dsa_layer(tape.constant(us.clone()), tape.constant(ut.clone()), &w).unwrap();
            assert!(!degenerate);
            let oracle = naive_dsa(&rows(&us), &rows(&ut), &w);
            assert!((v.item() - oracle).abs() <= 1e-12, "n={n}: {} vs {oracle}", v.item());
        }
    }
}

/// Token weights from one row of states by explicit loops over the score matrix.
fn scalar_weights(h: &[Vec<f64>], padded: &[bool]) -> Vec<f64> {
    let n = h.len();
    let d = h[0].len() as f64;
    let hat: Vec<Vec<f64>> = h
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            row.iter().map(|x| x / var.sqrt()).collect()
        })
        .collect();
    let valid: Vec<usize> = (0..n).filter(|&i| !padded[i]).collect();
    let mut w = vec![0.0; n];
    for &s in &valid {
        let dests: Vec<usize> = valid.iter().copied().filter(|&t| t != s).collect();
        let scores: Vec<f64> = dests.iter().map(|&t| dot(&hat[s], &hat[t]) / d.sqrt()).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
        for (k, &t) in dests.iter().enumerate() {
            w[t] += (scores[k] - m).exp() / z / valid.len() as f64;
        }
    }
    w
}

fn saliency_matches_scalar_softmax() {
    // [1, 1] has zero feature spread, so this instance is rejected outright
    let h = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[1, 3, 2]).unwrap();
    let tape = Tape::new();
    let err = token_weights(tape.constant(h), &[false; 3], 0, ModelSide::Teacher).err().unwrap();
    assert!(matches!(err, Error::DegenerateStd { position: 2, .. }), "{err}");

    let h = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 2.0], &[1, 3, 2]).unwrap();
    let w = token_weights(tape.constant(h.clone()), &[false; 3], 0, ModelSide::Teacher).unwrap().weights.to_tensor();
    let oracle = scalar_weights(&rows(&h), &[false; 3]);
    for t in 0..3 {
        assert!((w.data()[t] - oracle[t]).abs() <= 1e-12);
    }

    let mut r = rng(2);
    for _ in 0..10 {
        let (batch, seq, d) = (3, 6, 5);
        let h = randn(&mut r, &[batch, seq, d]);
        let mut padding = vec![false; batch * seq];
        for b in 0..batch {
            let len = r.gen_range(2..=seq);
            for t in len..seq {
                padding[b * seq + t] = true;
            }
        }
        let tape = Tape::new();
        let w = token_weights(tape.constant(h.clone()), &padding, 2, ModelSide::Student)
            .unwrap()
            .weights
            .to_tensor();
        let hr = rows(&h);
        for b in 0..batch {
            let oracle = scalar_weights(&hr[b * seq..(b + 1) * seq], &padding[b * seq..(b + 1) * seq]);
            for t in 0..seq {
                assert!((w.data()[b * seq + t] - oracle[t]).abs() <= 1e-12);
            }
        }
    }
}

fn standardize_matches_scalar_loop() {
    let mut r = rng(3);
    for _ in 0..5 {
        let h = randn(&mut r, &[1, 3, 4]);
        let tape = Tape::new();
        let out = standardize(tape.constant(h.clone())).unwrap().to_tensor();
        for (i, row) in rows(&h).iter().enumerate() {
            let mean = row.iter().sum::<f64>() / 4.0;
            let sd = (row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0).sqrt();
            for j in 0..4 {
                assert!((out.data()[i * 4 + j] - row[j] / sd).abs() <= 1e-14);
            }
        }
    }
}

fn scalar_span_reps(h: &[Vec<f64>], w: &[f64], map: &TokenSpanMap) -> Vec<Vec<f64>> {
    map.spans
        .iter()
        .map(|s| {
            let mut num = vec![0.0; h[0].len()];
            let mut den = 0.0;
            for t in s.start..=s.end {
                for j in 0..num.len() {
                    num[j] += w[t] * h[t][j];
                }
                den += w[t];
            }
            num.iter().map(|x| x / den).collect()
        })
        .collect()
}

fn span_reps_match_scalar_loop() {
    let mut r = rng(4);
    let h = randn(&mut r, &[3, 5]);
    let w = [0.2, 0.3, 0.5];
    let map = TokenSpanMap {
        granularity: Granularity::Word,
        spans: vec![TokenSpan { start: 0, end: 2 }],
        dropped_count: 0,
    };
    let check = |h: &Tensor, w: &[f64], map: &TokenSpanMap| {
        let tape = Tape::new();
        let out = span_representations(tape.constant(h.clone()), tape.constant(Tensor::vector(w.to_vec())), map)
            .unwrap()
            .to_tensor();
        let oracle = scalar_span_reps(&rows(h), w, map);
        let d = h.shape()[1];
        for (k, rep) in oracle.iter().enumerate() {
            for j in 0..d {
                assert!((out.data()[k * d + j] - rep[j]).abs() <= 1e-14);
            }
        }
    };
    check(&h, &w, &map);
    for _ in 0..20 {
        let seq = r.gen_range(2..12);
        let h = randn(&mut r, &[seq, 4]);
        let w = uniform(&mut r, &[seq], 0.01, 1.0);
        let map = random_map(&mut r, Granularity::Phrase, seq, 1);
        check(&h, w.data(), &map);
    }
}

fn span_weights_compose_with_uniform_saliency() {
    // zero-mean orthogonal rows: standardized rows have equal norm, all scores vanish
    let h = Tensor::new(
        vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0],
        &[1, 3, 4],
    )
    .unwrap();
    let tape = Tape::new();
    let w = token_weights(tape.constant(h), &[false; 3], 1, ModelSide::Teacher).unwrap().weights.to_tensor();
    let map = TokenSpanMap {
        granularity: Granularity::Word,
        spans: (0..3).map(|t| TokenSpan { start: t, end: t }).collect(),
        dropped_count: 0,
    };
    for x in span_weights(w.data(), &map).unwrap() {
        assert!((x - 1.0 / 3.0).abs() <= 1e-12);
    }
}

fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
    x.iter().map(|v| v - m - z.ln()).collect()
}

fn scalar_kl(p_logits: &[Vec<f64>], q_logits: &[Vec<f64>], include: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for r in 0..p_logits.len() {
        if !include[r] {
            continue;
        }
        let lp = log_softmax_row(&p_logits[r]);
        let lq = log_softmax_row(&q_logits[r]);
        for v in 0..lp.len() {
            total += lp[v].exp() * (lp[v] - lq[v]);
        }
        n += 1.0;
    }
    total / n
}

fn kl_matches_scalar_loop() {
    let mut r = rng(5);
    for _ in 0..5 {
        let p = randn(&mut r, &[6, 9]).map(|x| 3.0 * x);
        let q = randn(&mut r, &[6, 9]);
        let include = [true, false, true, true, false, true];
        let tape = Tape::new();
        let v = kd_forward_kl(tape.constant(p.clone()), tape.constant(q.clone()), &include).unwrap();
        assert!((v.item() - scalar_kl(&rows(&p), &rows(&q), &include)).abs() <= 1e-10);
    }
}

fn fdd_trajectory_matches_scalar_loop() {
    let (vocab, seq) = (11, 5);
    let teacher = random_model(2, 8, vocab, 60);
    let student = random_model(2, 4, vocab, 61);
    let schedule = LayerSchedule::build(2, 2, 1, 2, 1).unwrap();
    let mut r = rng(6);
    let (tokens, padding) = token_batch(&mut r, &[5, 3], seq, vocab);
    let include: Vec<bool> = padding.iter().map(|p| !p).collect();

    let tape = Tape::new();
    let (s, t) = (student.bind(&tape, false), teacher.bind(&tape, false));
    let (s_tr, t_tr) = (
        s.forward(&tokens, 2, seq, &padding).unwrap(),
        t.forward(&tokens, 2, seq, &padding).unwrap(),
    );
    let st = VocabTrajectory::build(&s, &s_tr, 0..=2).unwrap();
    let tt = VocabTrajectory::build(&t, &t_tr, 0..=2).unwrap();
    let v = fdd_traj(&tt, &st, &schedule, &include).unwrap().item();

    // lm_head by hand: layer norm with the final gains, then the head matrix
    let lm_head = |model: &mta_core::model::Model, h: &Tensor| -> Vec<Vec<f64>> {
        let names = model.names();
        let find = |n: &str| &model.params()[names.iter().position(|x| x == n).unwrap()];
        let (g, b, w) = (find("ln_f.gamma"), find("ln_f.beta"), find("head.w"));
        let d = g.numel();
        rows(h)
            .iter()
            .map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let normed: Vec<f64> = (0..d)
                    .map(|j| (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j])
                    .collect();
                (0..vocab)
                    .map(|v| (0..d).map(|j| normed[j] * w.data()[j * vocab + v]).sum())
                    .collect()
            })
            .collect()
    };
    let mut oracle = 0.0;
    for e in &schedule.entries {
        let p = lm_head(&teacher, &t_tr.hidden_states[e.teacher_layer].to_tensor());
        let q = lm_head(&student, &s_tr.hidden_states[e.student_layer].to_tensor());
        oracle += scalar_kl(&p, &q, &include);
    }
    assert!((v - oracle).abs() <= 1e-10, "{v} vs {oracle}");

    // adjacent-layer differences of the projected trajectory
    for l in 1..=2 {
        let dy = st.get(l).unwrap().sub(st.get(l - 1).unwrap()).unwrap().to_tensor();
        let hi = lm_head(&student, &s_tr.hidden_states[l].to_tensor());
        let lo = lm_head(&student, &s_tr.hidden_states[l - 1].to_tensor());
        for (i, (a, b)) in hi.iter().zip(&lo).enumerate() {
            let (a, b) = (log_softmax_row(a), log_softmax_row(b));
            for v in 0..vocab {
                assert!((dy.data()[i * vocab + v] - (a[v] - b[v])).abs() <= 1e-10);
            }
        }
    }
}

fn hid_matches_scalar_loop() {
    let mut r = rng(7);
    for _ in 0..5 {
        let (n, d_s, d_t) = (7, 3, 5);
        let hs = randn(&mut r, &[n, d_s]);
        let ht = randn(&mut r, &[n, d_t]);
        let proj = randn(&mut r, &[d_s, d_t]);
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let members: Vec<bool> = (0..n).map(|_| r.gen_bool(0.6)).collect();
        let tape = Tape::new();
        let (v, skipped) = hid_layer(
            tape.constant(hs.clone()),
            tape.constant(ht.clone()),
            tape.constant(proj.clone()),
            &w,
            &members,
        )
        .unwrap();
        assert_eq!(skipped, 0);
        let (hs, ht) = (rows(&hs), rows(&ht));
        let mut oracle = 0.0;
        for t in 0..n {
            if !members[t] {
                continue;
            }
            let projected: Vec<f64> = (0..d_t)
                .map(|j| (0..d_s).map(|i| hs[t][i] * proj.data()[i * d_t + j]).sum())
                .collect();
            oracle += w[t] * cos_dist(&projected, &ht[t]);
        }
        assert!((v.item() - oracle).abs() <= 1e-12);
    }
}

fn layer_mapping_floor_expression() {
    for n_s in 1..=24 {
        for n_t in 1..=48 {
            for l in 1..=n_s {
                let expected = ((l as f64 * n_t as f64 / n_s as f64).floor() as usize).max(1);
                assert_eq!(map_layer(l, n_s, n_t).unwrap(), expected);
            }
        }
    }
    assert_eq!(map_layer(5, 12, 20).unwrap(), 8);
}

fn dsa_total_is_mean_of_independent_layers() {
    let mut r = rng(8);
    let (batch, seq, d_s, d_t) = (2, 7, 4, 6);
    let schedule = LayerSchedule::build(3, 6, 1, 3, 1).unwrap();
    let student: Vec<Tensor> = (0..4).map(|_| randn(&mut r, &[batch, seq, d_s])).collect();
    let teacher: Vec<Tensor> = (0..7).map(|_| randn(&mut r, &[batch, seq, d_t])).collect();
    let spans: Vec<_> = (0..batch).map(|_| random_aligned(&mut r, seq)).collect();
    let padding = vec![false; batch * seq];
    let tape = Tape::new();
    let sv: Vec<_> = student.iter().map(|t| tape.constant(t.clone())).collect();
    let tv: Vec<_> = teacher.iter().map(|t| tape.constant(t.clone())).collect();
    let terms = structural_terms(&sv, &tv, &padding, &spans, &schedule, None, SpanPoolWeights::Own).unwrap();

    // each layer recomputed from scratch with scalar loops
    let mut layer_values = Vec::new();
    for e in &schedule.entries {
        let mut sum = 0.0;
        for b in 0..batch {
            let hs = &rows(&student[e.student_layer])[b * seq..(b + 1) * seq];
            let ht = &rows(&teacher[e.teacher_layer])[b * seq..(b + 1) * seq];
            let ws = scalar_weights(hs, &padding[..seq]);
            let wt = scalar_weights(ht, &padding[..seq]);
            let (map, _) = spans[b].for_granularity(e.granularity);
            let us = scalar_span_reps(hs, &ws, map);
            let ut = scalar_span_reps(ht, &wt, map);
            let mass: Vec<f64> = map.spans.iter().map(|s| (s.start..=s.end).map(|t| wt[t]).sum()).collect();
            let total: f64 = mass.iter().sum();
            let wsp: Vec<f64> = mass.iter().map(|m| m / total).collect();
            sum += naive_dsa(&us, &ut, &wsp);
        }
        layer_values.push(sum / batch as f64);
    }
    for (e, v) in schedule.entries.iter().zip(&layer_values) {
        assert!((terms.per_layer_dsa[&e.student_layer] - v).abs() <= 1e-12);
    }
    let mean = layer_values.iter().sum::<f64>() / 3.0;
    assert!((terms.dsa.item() - mean).abs() <= 1e-12);
}

pub const CHECKS: &[(&str, fn())] = &[
    ("dsa_matches_naive_double_loop", dsa_matches_naive_double_loop),
    ("saliency_matches_scalar_softmax", saliency_matches_scalar_softmax),
    ("standardize_matches_scalar_loop", standardize_matches_scalar_loop),
    ("span_reps_match_scalar_loop", span_reps_match_scalar_loop),
    ("span_weights_compose_with_uniform_saliency", span_weights_compose_with_uniform_saliency),
    ("kl_matches_scalar_loop", kl_matches_scalar_loop),
    ("fdd_trajectory_matches_scalar_loop", fdd_trajectory_matches_scalar_loop),
    ("hid_matches_scalar_loop", hid_matches_scalar_loop),
    ("layer_mapping_floor_expression", layer_mapping_floor_expression),
    ("dsa_total_is_mean_of_independent_layers", dsa_total_is_mean_of_independent_layers),
];
