//! Pre-norm decoder-only transformer exposing every intermediate hidden state.
//!
//! Layer `0` is the embedding output (token + learned position embedding);
//! layer `l` in `1..=n_layers` is the output of block `l`. The LM head is the
//! final layer norm followed by the output projection, so
//! `logits = lm_head(hidden_states[n_layers])`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::EOS;

const LN_EPS: f64 = 1e-5;
const PARAMS_PER_BLOCK: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Share the token embedding table with the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{path}.{name}"), "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                format!("{path}.n_heads"),
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v) = (self.d_model, self.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("block{l}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.w_qkv"), vec![d, 3 * d]),
                (p("attn.b_qkv"), vec![3 * d]),
                (p("attn.w_out"), vec![d, d]),
                (p("attn.b_out"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.w_in"), vec![d, 4 * d]),
                (p("mlp.b_in"), vec![4 * d]),
                (p("mlp.w_out"), vec![4 * d, d]),
                (p("mlp.b_out"), vec![d]),
            ]);
        }
        out.push(("ln_f.gamma".to_string(), vec![d]));
        out.push(("ln_f.beta".to_string(), vec![d]));
        if !self.tie_embeddings {
            out.push(("head.w".to_string(), vec![d, v]));
        }
        out
    }
}

/// Named parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

const CHECKPOINT_FORMAT: &str = "mta-checkpoint";

impl Model {
    /// GPT-2 style init: N(0, 0.02) weights, residual output projections
    /// scaled by `1/sqrt(2 n_layers)`, zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate("model")?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid_scale = 1.0 / ((2 * config.n_layers.max(1)) as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("gamma") {
                vec![1.0; numel]
            } else if name.ends_with("beta") || name.contains(".b_") {
                vec![0.0; numel]
            } else {
                let scale = if name.ends_with("attn.w_out") || name.ends_with("mlp.w_out") {
                    resid_scale
                } else {
                    1.0
                };
                (0..numel).map(|_| normal.sample(rng) * scale).collect()
            };
            names.push(name);
            params.push(Tensor::new(data, &shape)?);
        }
        Ok(Model {
            config: config.clone(),
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records the parameters on `tape`. With `trainable = false` they are
    /// constants and nothing computed from them receives gradient.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        BoundModel {
            config: self.config.clone(),
            vars,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| ParamEntry {
                    name: n.clone(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for p in &self.params {
            for v in p.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let corrupt = |offset: u64, msg: String| Error::Corrupt {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| corrupt(0, format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != 1 {
            return Err(corrupt(0, format!("unsupported format {} v{}", header.format, header.version)));
        }
        header.config.validate("checkpoint.config")?;
        let expected = header.config.param_shapes();
        if expected.len() != header.params.len()
            || expected
                .iter()
                .zip(&header.params)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(corrupt(0, "parameter manifest does not match config".into()));
        }
        let mut offset = line.len() as u64;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut buf = [0u8; 8];
        for entry in header.params {
            let numel: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| corrupt(offset, format!("truncated in {}", entry.name)))?;
                data.push(f64::from_le_bytes(buf));
                offset += 8;
            }
            params.push(Tensor::new(data, &entry.shape)?);
            names.push(entry.name);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(corrupt(offset, format!("{} trailing bytes", rest.len())));
        }
        Ok(Model {
            config: header.config,
            names,
            params,
        })
    }

    /// Greedy continuation of `prompt` (ids without padding) until EOS,
    /// `max_new` tokens, or the context limit.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.config.max_seq_len {
                break;
            }
            let tape = Tape::new();
            let bound = self.bind(&tape, false);
            let trace = bound.forward(&seq, 1, seq.len(), &vec![false; seq.len()])?;
            let logits = trace.logits.value();
            let v = self.config.vocab_size;
            let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            seq.push(best);
            out.push(best);
        }
        Ok(out)
    }
}

/// Per-layer hidden states and logits of one forward pass.
pub struct ForwardTrace<'t> {
    /// `n_layers + 1` entries of shape `[batch, seq, d_model]`.
    pub hidden_states: Vec<Var<'t>>,
    /// `[batch, seq, vocab_size]`.
    pub logits: Var<'t>,
    /// `true` at padded positions, `[batch * seq]`.
    pub padding_mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl<'t> ForwardTrace<'t> {
    pub fn layer(&self, l: usize) -> Result<Var<'t>> {
        self.hidden_states.get(l).copied().ok_or(Error::LayerOutOfRange {
            layer: l,
            max: self.hidden_states.len() - 1,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.hidden_states.len() - 1
    }
}

/// Model parameters recorded on a tape.
pub struct BoundModel<'t> {
    config: ModelConfig,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundModel<'t> {
    /// Binds externally created vars (in [`Model::names`] order).
    pub fn from_vars(config: &ModelConfig, vars: Vec<Var<'t>>) -> Result<Self> {
        let expected = config.param_shapes();
        if expected.len() != vars.len() {
            return Err(Error::invalid(
                "BoundModel::from_vars",
                format!("expected {} parameters, got {}", expected.len(), vars.len()),
            ));
        }
        for ((_, shape), v) in expected.iter().zip(&vars) {
            if *shape != v.shape() {
                return Err(Error::shape("BoundModel::from_vars", shape, &v.shape()));
            }
        }
        Ok(BoundModel {
            config: config.clone(),
            vars,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients of every parameter after `tape.backward` (zeros where none flowed).
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| {
                v.tape()
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    }

    fn block(&self, l: usize, i: usize) -> Var<'t> {
        self.vars[2 + l * PARAMS_PER_BLOCK + i]
    }

    fn tail(&self, i: usize) -> Var<'t> {
        self.vars[2 + self.config.n_layers * PARAMS_PER_BLOCK + i]
    }

    /// Runs the model on right-padded token ids `[batch, seq]`. Causal
    /// masking is always applied.
    pub fn forward(
        &self,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        padding_mask: &[bool],
    ) -> Result<ForwardTrace<'t>> {
        let cfg = &self.config;
        if seq > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq,
                max: cfg.max_seq_len,
            });
        }
        if tokens.len() != batch * seq || padding_mask.len() != batch * seq {
            return Err(Error::shape("forward", &[batch, seq], &[tokens.len(), padding_mask.len()]));
        }
        let tok = self.vars[0].embedding(tokens, &[batch, seq])?;
        let pos_ids: Vec<usize> = (0..seq).collect();
        let pos = self.vars[1].embedding(&pos_ids, &[seq])?;
        let mut x = tok.add(pos)?;
        let mut hidden = vec![x];

        let causal: Vec<bool> = (0..seq * seq).map(|i| i % seq > i / seq).collect();
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let att_scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let p = |i| self.block(l, i);
            let a = x.layer_norm(p(0), p(1), LN_EPS)?;
            let qkv = a.matmul(p(2))?.add(p(3))?;
            let heads = |s: usize| -> Result<Var<'t>> {
                qkv.slice(-1, s * d, (s + 1) * d)?
                    .reshape(&[batch, seq, h, dh])?
                    .permute(&[0, 2, 1, 3])
            };
            let (q, k, v) = (heads(0)?, heads(1)?, heads(2)?);
            let scores = q.matmul(k.transpose()?)?.scale(att_scale);
            let att = scores
                .masked_fill(&causal, &[seq, seq], f64::NEG_INFINITY)?
                .softmax()?;
            let ctx = att
                .matmul(v)?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[batch, seq, d])?;
            x = x.add(ctx.matmul(p(4))?.add(p(5))?)?;

            let m = x.layer_norm(p(6), p(7), LN_EPS)?;
            let m = m.matmul(p(8))?.add(p(9))?.gelu().matmul(p(10))?.add(p(11))?;
            x = x.add(m)?;
            hidden.push(x);
        }
        let logits = self.lm_head(x)?;
        Ok(ForwardTrace {
            hidden_states: hidden,
            logits,
            padding_mask: padding_mask.to_vec(),
            batch,
            seq,
        })
    }

    /// Final layer norm and output projection.
    pub fn lm_head(&self, h: Var<'t>) -> Result<Var<'t>> {
        let d = self.config.d_model;
        let shape = h.shape();
        if shape.last() != Some(&d) {
            return Err(Error::shape("lm_head", &shape, &[d]));
        }
        let normed = h.layer_norm(self.tail(0), self.tail(1), LN_EPS)?;
        if self.config.tie_embeddings {
            normed.matmul(self.vars[0].transpose()?)
        } else {
            normed.matmul(self.tail(2))
        }
    }

    /// `log softmax(lm_head(h))`: the vocabulary-space image of a hidden state.
    pub fn project_to_vocab(&self, h: Var<'t>) -> Result<Var<'t>> {
        self.lm_head(h)?.log_softmax()
    }
}
