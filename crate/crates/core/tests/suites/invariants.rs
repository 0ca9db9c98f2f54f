//! Property tests over randomly drawn instances.

use crate::common::{randn, random_aligned, random_map, rng, tiny_model, token_batch, uniform};
use mta_core::autodiff::Tape;
use mta_core::losses::{dsa_layer, fdd_der, hid_layer, VocabTrajectory};
use mta_core::objective::{structural_terms, SpanPoolWeights};
use mta_core::saliency::{token_weights, ModelSide};
use mta_core::schedule::{map_layer, select_layers, LayerSchedule};
use mta_core::spans::{
    align_spans, span_representations, span_weights, CharSpan, Granularity, PhraseLabel, PhraseSpan, SpanAnnotation,
};
use mta_core::tokenizer::Tokenizer;
use mta_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn weights_of(h: &Tensor, padding: &[bool]) -> Vec<f64> {
    let tape = Tape::new();
    token_weights(tape.constant(h.clone()), padding, 1, ModelSide::Teacher)
        .unwrap()
        .weights
        .to_tensor()
        .into_data()
}

fn random_padding<R: Rng>(r: &mut R, batch: usize, seq: usize) -> Vec<bool> {
    let mut padding = vec![false; batch * seq];
    for b in 0..batch {
        let len = r.gen_range(2..=seq);
        padding[b * seq + len..(b + 1) * seq].iter_mut().for_each(|p| *p = true);
    }
    padding
}

/// Random orthogonal `[d, d]` matrix by Gram-Schmidt on Gaussian columns.
fn orthogonal<R: Rng>(r: &mut R, d: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v = randn(r, &[d]).into_data();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.iter().map(|x| x / n).collect());
        }
    }
    let mut data = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            data[i * d + j] = c[i];
        }
    }
    Tensor::new(data, &[d, d]).unwrap()
}

fn trajectory<'t>(tape: &'t Tape, layers: &[Tensor]) -> VocabTrajectory<'t> {
    VocabTrajectory {
        layers: layers.iter().enumerate().map(|(l, t)| (l, tape.constant(t.clone()))).collect(),
    }
}

fn dsa(us: &Tensor, ut: &Tensor, w: &[f64]) -> f64 {
    let tape = Tape::new();
    dsa_layer(tape.constant(us.clone()), tape.constant(ut.clone()), w).unwrap().0.item()
}

fn normalized<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn scale_rows(t: &Tensor, c: &[f64]) -> Tensor {
    let d = t.shape()[t.rank() - 1];
    let data = t.data().iter().enumerate().map(|(i, x)| x * c[i / d]).collect();
    Tensor::new(data, t.shape()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    fn token_weights_are_a_distribution(seed in any::<u64>(), batch in 1usize..4, seq in 2usize..9, d in 2usize..7) {
        let mut r = rng(seed);
        let h = randn(&mut r, &[batch, seq, d]);
        let padding = random_padding(&mut r, batch, seq);
        let w = weights_of(&h, &padding);
        for b in 0..batch {
            let mut sum = 0.0;
            for t in 0..seq {
                let x = w[b * seq + t];
                prop_assert!(x >= 0.0);
                if padding[b * seq + t] {
                    prop_assert_eq!(x, 0.0);
                }
                sum += x;
            }
            prop_assert!((sum - 1.0).abs() <= 1e-10);
        }
    }

    fn two_tokens_always_split_evenly(seed in any::<u64>(), d in 2usize..9, pad in 0usize..3) {
        let mut r = rng(seed);
        let seq = 2 + pad;
        let h = randn(&mut r, &[1, seq, d]);
        let mut padding = vec![true; seq];
        padding[0] = false;
        padding[1] = false;
        let w = weights_of(&h, &padding);
        prop_assert!((w[0] - 0.5).abs() <= 1e-12);
        prop_assert!((w[1] - 0.5).abs() <= 1e-12);
    }

    fn token_weights_ignore_per_token_scale(seed in any::<u64>(), seq in 2usize..9, d in 2usize..7) {
        let mut r = rng(seed);
        let h = randn(&mut r, &[1, seq, d]);
        let padding = random_padding(&mut r, 1, seq);
        let c: Vec<f64> = (0..seq).map(|_| r.gen_range(0.1..10.0)).collect();
        let (a, b) = (weights_of(&h, &padding), weights_of(&scale_rows(&h, &c), &padding));
        for t in 0..seq {
            prop_assert!((a[t] - b[t]).abs() <= 1e-10);
        }
    }

    fn token_weights_are_permutation_equivariant(seed in any::<u64>(), seq in 2usize..9, d in 2usize..7) {
        let mut r = rng(seed);
        let h = randn(&mut r, &[1, seq, d]);
        let mut perm: Vec<usize> = (0..seq).collect();
        perm.shuffle(&mut r);
        let rows: Vec<&[f64]> = h.data().chunks(d).collect();
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| rows[i].iter().copied()).collect();
        let hp = Tensor::new(permuted, &[1, seq, d]).unwrap();
        let padding = vec![false; seq];
        let (a, b) = (weights_of(&h, &padding), weights_of(&hp, &padding));
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((b[k] - a[i]).abs() <= 1e-12);
        }
    }

    fn dsa_is_rotation_and_scale_invariant(seed in any::<u64>(), n in 2usize..12, d in 2usize..8) {
        let mut r = rng(seed);
        let us = randn(&mut r, &[n, d]);
        let ut = randn(&mut r, &[n, d + 1]);
        let w = normalized(&mut r, n);
        let base = dsa(&us, &ut, &w);
        prop_assert!(base >= 0.0);

        let q = orthogonal(&mut r, d);
        let rotated = {
            let tape = Tape::new();
            tape.constant(us.clone()).matmul(tape.constant(q)).unwrap().to_tensor()
        };
        prop_assert!((dsa(&rotated, &ut, &w) - base).abs() <= 1e-10);

        let c: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..10.0)).collect();
        prop_assert!((dsa(&scale_rows(&us, &c), &ut, &w) - base).abs() <= 1e-10);
        let c: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..10.0)).collect();
        prop_assert!((dsa(&us, &scale_rows(&ut, &c), &w) - base).abs() <= 1e-10);

        prop_assert!(dsa(&ut, &ut, &w).abs() <= 1e-15);
    }

    fn dsa_is_symmetric_under_span_relabelling(seed in any::<u64>(), n in 2usize..12, d in 2usize..8) {
        let mut r = rng(seed);
        let us = randn(&mut r, &[n, d]);
        let ut = randn(&mut r, &[n, d]);
        let w = normalized(&mut r, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let permute = |t: &Tensor| {
            let rows: Vec<&[f64]> = t.data().chunks(d).collect();
            Tensor::new(perm.iter().flat_map(|&i| rows[i].iter().copied()).collect(), &[n, d]).unwrap()
        };
        let wp: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        prop_assert!((dsa(&permute(&us), &permute(&ut), &wp) - dsa(&us, &ut, &w)).abs() <= 1e-12);
    }

    fn fdd_derivative_ignores_positive_scale(seed in any::<u64>(), rows in 1usize..6, v in 2usize..9) {
        let mut r = rng(seed);
        let schedule = LayerSchedule::build(2, 2, 1, 1, 0).unwrap();
        let teacher: Vec<Tensor> = (0..3).map(|_| randn(&mut r, &[rows, v])).collect();
        let student: Vec<Tensor> = (0..3).map(|_| randn(&mut r, &[rows, v])).collect();
        let c = r.gen_range(0.1..10.0);
        // y_2' = y_1 + c (y_2 - y_1)
        let stretched: Vec<f64> = student[1]
            .data()
            .iter()
            .zip(student[2].data())
            .map(|(lo, hi)| lo + c * (hi - lo))
            .collect();
        let mut scaled = student.clone();
        scaled[2] = Tensor::new(stretched, &[rows, v]).unwrap();
        let include = vec![true; rows];
        let tape = Tape::new();
        let tt = trajectory(&tape, &teacher);
        let a = fdd_der(&tt, &trajectory(&tape, &student), &schedule, &include).unwrap().0.item();
        let b = fdd_der(&tt, &trajectory(&tape, &scaled), &schedule, &include).unwrap().0.item();
        prop_assert!((a - b).abs() <= 1e-10);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&a));
    }

    fn hid_ignores_teacher_scale(seed in any::<u64>(), n in 1usize..8, d_s in 1usize..5, d_t in 1usize..6) {
        let mut r = rng(seed);
        let hs = randn(&mut r, &[n, d_s]);
        let ht = randn(&mut r, &[n, d_t]);
        let proj = randn(&mut r, &[d_s, d_t]);
        let w = normalized(&mut r, n);
        let members: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
        let c: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..10.0)).collect();
        let tape = Tape::new();
        let hid = |t: &Tensor| {
            hid_layer(tape.constant(hs.clone()), tape.constant(t.clone()), tape.constant(proj.clone()), &w, &members)
                .unwrap()
                .0
                .item()
        };
        let (a, b) = (hid(&ht), hid(&scale_rows(&ht, &c)));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-10);
    }

    fn span_weights_and_reps_are_convex(seed in any::<u64>(), seq in 1usize..12, d in 1usize..5) {
        let mut r = rng(seed);
        let map = random_map(&mut r, Granularity::Word, seq, 1);
        let tw = uniform(&mut r, &[seq], 0.01, 1.0);
        let sw = span_weights(tw.data(), &map).unwrap();
        prop_assert!((sw.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert!(sw.iter().all(|&x| x >= 0.0));

        let h = randn(&mut r, &[seq, d]);
        let tape = Tape::new();
        let u = span_representations(tape.constant(h.clone()), tape.constant(tw.clone()), &map).unwrap().to_tensor();
        for (k, s) in map.spans.iter().enumerate() {
            let mass: f64 = s.tokens().map(|t| tw.data()[t]).sum();
            for j in 0..d {
                let lo = s.tokens().map(|t| h.at(&[t, j])).fold(f64::INFINITY, f64::min);
                let hi = s.tokens().map(|t| h.at(&[t, j])).fold(f64::NEG_INFINITY, f64::max);
                let x = u.at(&[k, j]);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                // barycentric reconstruction with coefficients w_t / mass
                let rebuilt: f64 = s.tokens().map(|t| tw.data()[t] / mass * h.at(&[t, j])).sum();
                prop_assert!((x - rebuilt).abs() <= 1e-12);
            }
        }
    }

    fn layer_mapping_is_monotone_and_hits_the_top(n_s in 1usize..40, n_t in 1usize..80) {
        let mut prev = 0;
        for l in 1..=n_s {
            let m = map_layer(l, n_s, n_t).unwrap();
            prop_assert!(m >= prev && m >= 1 && m <= n_t);
            prev = m;
        }
        prop_assert_eq!(map_layer(n_s, n_s, n_t).unwrap(), n_t);
        if n_s == n_t {
            for l in 1..=n_s {
                prop_assert_eq!(map_layer(l, n_s, n_t).unwrap(), l);
            }
        }
    }

    fn schedules_are_strictly_increasing(n_s in 1usize..30, k in 1usize..5, m in 1usize..8, n_t in 1usize..60, wc in 0usize..8) {
        let fits = (m - 1) * k < n_s;
        let layers = select_layers(n_s, k, m);
        prop_assert_eq!(layers.is_ok(), fits);
        if fits {
            let layers = layers.unwrap();
            prop_assert_eq!(layers.len(), m);
            prop_assert_eq!(*layers.last().unwrap(), n_s);
            prop_assert!(layers.windows(2).all(|w| w[1] == w[0] + k));
            let wc = wc.min(m);
            let s = LayerSchedule::build(n_s, n_t, k, m, wc).unwrap();
            for (i, e) in s.entries.iter().enumerate() {
                prop_assert_eq!(e.student_layer, layers[i]);
                prop_assert_eq!(e.teacher_layer, map_layer(layers[i], n_s, n_t).unwrap());
                let g = if i < wc { Granularity::Word } else { Granularity::Phrase };
                prop_assert_eq!(e.granularity, g);
            }
        }
    }

    fn realignment_is_idempotent(seed in any::<u64>(), n_words in 1usize..8) {
        let mut r = rng(seed);
        let pool = ["a", "cat", "sat", "ñandú", "on", "the", "mat", "über", "x"];
        let words: Vec<&str> = (0..n_words).map(|_| *pool.choose(&mut r).unwrap()).collect();
        let text = words.join(" ");
        let char_of = |b: usize| text[..b].chars().count();
        let mut word_spans = Vec::new();
        let mut pos = 0;
        for w in &words {
            let start = char_of(pos);
            pos += w.len();
            word_spans.push(CharSpan { start_char: start, end_char: char_of(pos) });
            pos += 1;
        }
        let phrases = vec![PhraseSpan { start_char: 0, end_char: word_spans[0].end_char, label: PhraseLabel::NP }];
        let ann = SpanAnnotation { sample_id: "p".into(), text: text.clone(), words: word_spans, phrases };
        let enc = Tokenizer::Byte.encode(&text);
        let ranges: Vec<Option<(usize, usize)>> = enc.byte_ranges.iter().copied().map(Some).collect();
        let padding = vec![false; ranges.len()];
        let first = align_spans(&ann, &text, &ranges, &padding).unwrap();

        let image = |map: &mta_core::spans::TokenSpanMap| -> Vec<CharSpan> {
            map.spans
                .iter()
                .map(|s| CharSpan {
                    start_char: char_of(ranges[s.start].unwrap().0),
                    end_char: char_of(ranges[s.end].unwrap().1),
                })
                .collect()
        };
        let again = SpanAnnotation {
            words: image(&first.word),
            phrases: image(&first.phrase)
                .into_iter()
                .map(|c| PhraseSpan { start_char: c.start_char, end_char: c.end_char, label: PhraseLabel::NP })
                .collect(),
            ..ann.clone()
        };
        let second = align_spans(&again, &text, &ranges, &padding).unwrap();
        prop_assert_eq!(first, second);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Hidden states and token ids at padded positions never reach a loss.
    fn padded_positions_do_not_influence_losses(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (vocab, seq) = (12, 7);
        // init-scale weights: O(1) weights can saturate the saliency softmax and
        // leave a span with no mass, which the losses reject
        let teacher = tiny_model(3, 8, vocab, seed.wrapping_add(1));
        let student = tiny_model(2, 4, vocab, seed.wrapping_add(2));
        let schedule = LayerSchedule::build(2, 3, 1, 2, 1).unwrap();
        let lens = [7, r.gen_range(3..7)];
        let (tokens, padding) = token_batch(&mut r, &lens, seq, vocab);
        let spans: Vec<_> = lens.iter().map(|&l| random_aligned(&mut r, l)).collect();
        let projectors: Vec<Tensor> = (0..2).map(|_| randn(&mut r, &[4, 8])).collect();

        let losses = |tokens: &[usize], noise: Option<u64>| -> (f64, f64) {
            let tape = Tape::new();
            let s = student.bind(&tape, false).forward(tokens, 2, seq, &padding).unwrap();
            let t = teacher.bind(&tape, false).forward(tokens, 2, seq, &padding).unwrap();
            let perturb = |states: &[mta_core::Var<'_>], salt: u64| -> Vec<Tensor> {
                states
                    .iter()
                    .map(|h| {
                        let mut x = h.to_tensor();
                        if let Some(n) = noise {
                            let mut nr = rng(n ^ salt);
                            let d = x.shape()[2];
                            for (i, v) in x.data_mut().iter_mut().enumerate() {
                                if padding[i / d] {
                                    *v = nr.gen_range(-50.0..50.0);
                                }
                            }
                        }
                        x
                    })
                    .collect()
            };
            let sv: Vec<_> = perturb(&s.hidden_states, 1).into_iter().map(|x| tape.constant(x)).collect();
            let tv: Vec<_> = perturb(&t.hidden_states, 2).into_iter().map(|x| tape.constant(x)).collect();
            let pv: Vec<_> = projectors.iter().map(|p| tape.constant(p.clone())).collect();
            let terms = structural_terms(&sv, &tv, &padding, &spans, &schedule, Some(&pv), SpanPoolWeights::Own).unwrap();
            (terms.dsa.item(), terms.hid.unwrap().item())
        };
        let reference = losses(&tokens, None);
        
        prop_assert_eq!(losses(&tokens, Some(seed)), reference);
        let mut mutated = tokens.clone();
        for (i, p) in padding.iter().enumerate() {
            if *p {
                mutated[i] = r.gen_range(0..vocab);
            }
        }
        prop_assert_eq!(losses(&mutated, None), reference);
    }
}

pub const CHECKS: &[(&str, fn())] = &[
    ("token_weights_are_a_distribution", token_weights_are_a_distribution),
    ("two_tokens_always_split_evenly", two_tokens_always_split_evenly),
    ("token_weights_ignore_per_token_scale", token_weights_ignore_per_token_scale),
    ("token_weights_are_permutation_equivariant", token_weights_are_permutation_equivariant),
    ("dsa_is_rotation_and_scale_invariant", dsa_is_rotation_and_scale_invariant),
    ("dsa_is_symmetric_under_span_relabelling", dsa_is_symmetric_under_span_relabelling),
    ("fdd_derivative_ignores_positive_scale", fdd_derivative_ignores_positive_scale),
    ("hid_ignores_teacher_scale", hid_ignores_teacher_scale),
    ("span_weights_and_reps_are_convex", span_weights_and_reps_are_convex),
    ("layer_mapping_is_monotone_and_hits_the_top", layer_mapping_is_monotone_and_hits_the_top),
    ("schedules_are_strictly_increasing", schedules_are_strictly_increasing),
    ("realignment_is_idempotent", realignment_is_idempotent),
    ("padded_positions_do_not_influence_losses", padded_positions_do_not_influence_losses),
];
