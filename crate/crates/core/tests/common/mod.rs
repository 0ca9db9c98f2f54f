#![allow(dead_code)]

use mta_core::autodiff::Tape;
use mta_core::config::RunConfig;
use mta_core::harness::{train_teacher, Dataset, RunLog};
use mta_core::model::{Model, ModelConfig};
use mta_core::spans::{AlignedSpans, Granularity, TokenSpan, TokenSpanMap};
use mta_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(data, shape).unwrap()
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(data, shape).unwrap()
}

/// Random contiguous spans inside `0..len`, in order, sometimes with gaps.
/// At least `min` spans when `len >= min`.
pub fn random_map<R: Rng>(rng: &mut R, g: Granularity, len: usize, min: usize) -> TokenSpanMap {
    loop {
        let mut spans = Vec::new();
        let mut t = 0;
        while t < len {
            if rng.gen_bool(0.2) {
                t += 1;
                continue;
            }
            let end = (t + rng.gen_range(0..3)).min(len - 1);
            spans.push(TokenSpan { start: t, end });
            t = end + 1;
        }
        if spans.len() >= min.min(len) {
            return TokenSpanMap {
                granularity: g,
                spans,
                dropped_count: 0,
            };
        }
    }
}

pub fn random_aligned<R: Rng>(rng: &mut R, len: usize) -> AlignedSpans {
    AlignedSpans {
        word: random_map(rng, Granularity::Word, len, 2),
        phrase: random_map(rng, Granularity::Phrase, len, 2),
    }
}

pub fn tiny_config(n_layers: usize, d_model: usize, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads: 2,
        vocab_size,
        max_seq_len: 8,
        tie_embeddings: false,
    }
}

pub fn tiny_model(n_layers: usize, d_model: usize, vocab_size: usize, seed: u64) -> Model {
    Model::init(&tiny_config(n_layers, d_model, vocab_size), &mut rng(seed)).unwrap()
}

/// A model with O(1) random parameters; layer-norm gains near one.
pub fn random_model(n_layers: usize, d_model: usize, vocab_size: usize, seed: u64) -> Model {
    let mut m = tiny_model(n_layers, d_model, vocab_size, seed);
    let mut r = rng(seed ^ 0x5eed);
    let names = m.names().to_vec();
    for (name, p) in names.iter().zip(m.params_mut()) {
        let noise = randn(&mut r, p.shape());
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x = if name.ends_with("gamma") { 1.0 + 0.2 * n } else { 0.5 * n };
        }
    }
    m
}

/// Right-padded token batch with the given row lengths.
pub fn token_batch<R: Rng>(rng: &mut R, lens: &[usize], seq: usize, vocab: usize) -> (Vec<usize>, Vec<bool>) {
    let mut tokens = vec![0; lens.len() * seq];
    let mut padding = vec![true; lens.len() * seq];
    for (b, &len) in lens.iter().enumerate() {
        for t in 0..len {
            tokens[b * seq + t] = rng.gen_range(4..vocab);
            padding[b * seq + t] = false;
        }
    }
    (tokens, padding)
}

/// Values of a scalar function of a single constant tensor.
pub fn eval1(f: impl for<'t> Fn(&'t Tape, mta_core::Var<'t>) -> mta_core::Result<mta_core::Var<'t>>, x: &Tensor) -> f64 {
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    f(&tape, v).unwrap().item()
}

/// Default config shrunk to a few seconds of work.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.corpus.n_train = 48;
    cfg.corpus.n_heldout = 16;
    cfg.teacher.n_layers = 2;
    cfg.teacher.d_model = 16;
    cfg.teacher.n_heads = 2;
    cfg.student.n_layers = 2;
    cfg.student.d_model = 8;
    cfg.student.n_heads = 2;
    cfg.teacher_training.epochs = 3;
    cfg.teacher_training.batch_size = 8;
    cfg.teacher_training.warmup_steps = 3;
    cfg.distill.epochs = 2;
    cfg.distill.batch_size = 8;
    cfg.distill.warmup_steps = 2;
    cfg
}

pub fn teacher_for(cfg: &RunConfig, data: &Dataset) -> Model {
    train_teacher(cfg, data, &mut RunLog::none()).unwrap().0
}
