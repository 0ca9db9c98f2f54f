//! Run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{synthetic_tokenizer, LossPositions};
use crate::error::{Error, Result};
use crate::losses::BaseKind;
use crate::model::ModelConfig;
use crate::objective::SpanPoolWeights;
use crate::schedule::LayerSchedule;
use crate::tokenizer::{Tokenizer, TokenizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Generated copy-task grammar with gold spans.
    Synthetic,
    /// Sample and span JSONL files.
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    /// Generation seed for the synthetic corpus, independent of the run seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_train: usize,
    #[serde(default)]
    pub n_heldout: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_spans: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_spans: Option<PathBuf>,
    /// Tokenizer for JSONL corpora; the synthetic corpus always uses its
    /// whitespace lexicon.
    #[serde(default = "default_tokenizer")]
    pub tokenizer: TokenizerKind,
    pub loss_positions: LossPositions,
}

fn default_tokenizer() -> TokenizerKind {
    TokenizerKind::Byte
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub base: BaseKind,
    /// Mixture weight for the skew divergences.
    pub alpha: f64,
    pub lambda_dsa: f64,
    pub lambda_hid: f64,
    pub stride: usize,
    pub budget: usize,
    pub word_count: usize,
    /// Explicit student layers; overrides `stride` and `budget`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub span_pool_weights: SpanPoolWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub projector_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_training: TrainConfig,
    pub distill: DistillConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vocab = synthetic_tokenizer().vocab_size();
        RunConfig {
            seed: 0,
            corpus: CorpusConfig {
                kind: CorpusKind::Synthetic,
                seed: 7,
                n_train: 512,
                n_heldout: 64,
                train: None,
                heldout: None,
                train_spans: None,
                heldout_spans: None,
                tokenizer: TokenizerKind::Whitespace,
                loss_positions: LossPositions::All,
            },
            teacher: ModelConfig {
                n_layers: 4,
                d_model: 64,
                n_heads: 4,
                vocab_size: vocab,
                max_seq_len: 16,
                tie_embeddings: false,
            },
            student: ModelConfig {
                n_layers: 2,
                d_model: 32,
                n_heads: 4,
                vocab_size: vocab,
                max_seq_len: 16,
                tie_embeddings: false,
            },
            teacher_training: TrainConfig {
                epochs: 12,
                batch_size: 16,
                lr: 3e-3,
                warmup_steps: 20,
                weight_decay: 0.01,
                grad_clip: 1.0,
            },
            distill: DistillConfig {
                base: BaseKind::Kl,
                alpha: 0.1,
                lambda_dsa: 2.0,
                lambda_hid: 0.2,
                stride: 1,
                budget: 2,
                word_count: 1,
                layers: None,
                span_pool_weights: SpanPoolWeights::Own,
                epochs: 16,
                batch_size: 16,
                lr: 1e-3,
                projector_lr: 5e-4,
                warmup_steps: 20,
                weight_decay: 0.01,
                grad_clip: 1.0,
                eval_every: 0,
            },
            paths: PathsConfig {
                out_dir: PathBuf::from("runs/default"),
                teacher_checkpoint: None,
            },
        }
    }
}

fn check(ok: bool, path: &str, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, msg))
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(..s.start))
                .map(|prefix| format!("line {}", prefix.lines().count().max(1)))
                .unwrap_or_else(|| "<root>".into());
            Error::config(field, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for p in [
            &mut self.corpus.train,
            &mut self.corpus.heldout,
            &mut self.corpus.train_spans,
            &mut self.corpus.heldout_spans,
            &mut self.paths.teacher_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.paths.out_dir);
    }

    pub fn tokenizer(&self) -> Tokenizer {
        match (self.corpus.kind, self.corpus.tokenizer) {
            (CorpusKind::Synthetic, _) => synthetic_tokenizer(),
            (CorpusKind::Jsonl, TokenizerKind::Byte) => Tokenizer::Byte,
            // Without a lexicon file the whitespace tokenizer is the synthetic one.
            (CorpusKind::Jsonl, TokenizerKind::Whitespace) => synthetic_tokenizer(),
        }
    }

    pub fn schedule(&self) -> Result<LayerSchedule> {
        let (n_s, n_t) = (self.student.n_layers, self.teacher.n_layers);
        let d = &self.distill;
        match &d.layers {
            Some(layers) => LayerSchedule::explicit(layers, n_s, n_t, d.word_count),
            None => LayerSchedule::build(n_s, n_t, d.stride, d.budget, d.word_count),
        }
    }

    /// Checks every field; errors name the offending field path.
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate("teacher")?;
        self.student.validate("student")?;
        let vocab = self.tokenizer().vocab_size();
        check(
            self.teacher.vocab_size == vocab,
            "teacher.vocab_size",
            format!("must equal the tokenizer vocabulary ({vocab})"),
        )?;
        check(
            self.student.vocab_size == vocab,
            "student.vocab_size",
            format!("must equal the tokenizer vocabulary ({vocab})"),
        )?;
        check(self.teacher.n_layers >= 1, "teacher.n_layers", "must be at least 1")?;
        check(self.student.n_layers >= 1, "student.n_layers", "must be at least 1")?;

        let c = &self.corpus;
        match c.kind {
            CorpusKind::Synthetic => {
                check(c.n_train > 0, "corpus.n_train", "must be positive")?;
                check(c.n_heldout > 0, "corpus.n_heldout", "must be positive")?;
            }
            CorpusKind::Jsonl => {
                for (name, p) in [
                    ("corpus.train", &c.train),
                    ("corpus.heldout", &c.heldout),
                    ("corpus.train_spans", &c.train_spans),
                    ("corpus.heldout_spans", &c.heldout_spans),
                ] {
                    check(p.is_some(), name, "required for jsonl corpora")?;
                }
            }
        }

        let t = &self.teacher_training;
        check(t.batch_size > 0, "teacher_training.batch_size", "must be positive")?;
        check(t.lr > 0.0 && t.lr.is_finite(), "teacher_training.lr", "must be positive")?;
        check(t.grad_clip > 0.0, "teacher_training.grad_clip", "must be positive")?;
        check(t.weight_decay >= 0.0, "teacher_training.weight_decay", "must be non-negative")?;
        let d = &self.distill;
        check(d.batch_size > 0, "distill.batch_size", "must be positive")?;
        check(d.lr > 0.0 && d.lr.is_finite(), "distill.lr", "must be positive")?;
        check(d.projector_lr > 0.0 && d.projector_lr.is_finite(), "distill.projector_lr", "must be positive")?;
        check(d.grad_clip > 0.0, "distill.grad_clip", "must be positive")?;
        check(d.weight_decay >= 0.0, "distill.weight_decay", "must be non-negative")?;
        check((0.0..=1.0).contains(&d.alpha), "distill.alpha", "must lie in [0, 1]")?;
        check(d.lambda_dsa >= 0.0 && d.lambda_dsa.is_finite(), "distill.lambda_dsa", "must be non-negative")?;
        check(d.lambda_hid >= 0.0 && d.lambda_hid.is_finite(), "distill.lambda_hid", "must be non-negative")?;
        let field = if d.layers.is_some() { "distill.layers" } else { "distill.budget" };
        self.schedule().map_err(|e| Error::config(field, e.to_string()))?;
        Ok(())
    }
}
