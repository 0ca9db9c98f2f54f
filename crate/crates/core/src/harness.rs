//! End-to-end runs: data loading, teacher training, distillation,
//! evaluation, DSA probing and hidden-state export.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{CorpusKind, RunConfig, TrainConfig};
use crate::corpus::{
    encode_sample, epoch_batches, generate_synthetic, make_batch, read_samples, Batch, EncodedSample,
    LossPositions, Sample,
};
use crate::error::{Error, Result};
use crate::hidden_dump::{DumpHeader, DumpRecord, HiddenDump};
use crate::losses::{
    fdd_der, fdd_layers, fdd_traj, init_projector, total_loss, BaseKind, LossParts, LossReport, LossWeights,
    VocabTrajectory,
};
use crate::model::Model;
use crate::objective::{base_loss, structural_terms, SpanPoolWeights};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};
use crate::rouge::rouge_l_words;
use crate::schedule::{map_layer, LayerSchedule};
use crate::spans::{align_spans, read_jsonl, AlignedSpans, Granularity, SpanAnnotation};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

/// Independent RNG streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    TeacherInit = 1,
    StudentInit = 2,
    Data = 3,
    Projectors = 4,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

const EVAL_BATCH: usize = 32;

/// Encoded train and held-out samples with their aligned spans.
pub struct Dataset {
    pub tokenizer: Tokenizer,
    pub train: Vec<EncodedSample>,
    pub heldout: Vec<EncodedSample>,
    pub train_spans: Vec<AlignedSpans>,
    pub heldout_spans: Vec<AlignedSpans>,
}

/// Pairs samples with annotations by position; the first sample whose id or
/// text does not match is reported.
pub fn pair_annotations(samples: &[Sample], anns: &[SpanAnnotation]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        match anns.get(i) {
            Some(a) if a.sample_id == s.sample_id && a.text == s.text => {}
            Some(a) if a.sample_id == s.sample_id => {
                return Err(Error::Annotation {
                    sample_id: s.sample_id.clone(),
                    msg: "annotation text differs from corpus text".into(),
                })
            }
            found => {
                return Err(Error::Annotation {
                    sample_id: s.sample_id.clone(),
                    msg: format!(
                        "span file has {} at this position",
                        found.map_or("no record".to_string(), |a| format!("sample_id {:?}", a.sample_id))
                    ),
                })
            }
        }
    }
    if let Some(extra) = anns.get(samples.len()) {
        return Err(Error::Annotation {
            sample_id: extra.sample_id.clone(),
            msg: "span annotation without a corpus sample".into(),
        });
    }
    Ok(())
}

fn encode_split(
    tokenizer: &Tokenizer,
    samples: &[Sample],
    anns: &[SpanAnnotation],
    max_seq_len: usize,
) -> Result<(Vec<EncodedSample>, Vec<AlignedSpans>)> {
    pair_annotations(samples, anns)?;
    let mut enc = Vec::with_capacity(samples.len());
    let mut spans = Vec::with_capacity(samples.len());
    for (s, a) in samples.iter().zip(anns) {
        let e = encode_sample(tokenizer, s, max_seq_len)?;
        spans.push(align_spans(a, &s.text, &e.token_ranges, &vec![false; e.len()])?);
        enc.push(e);
    }
    Ok((enc, spans))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let tokenizer = cfg.tokenizer();
    let max_len = cfg.teacher.max_seq_len.min(cfg.student.max_seq_len);
    let c = &cfg.corpus;
    let ((train_s, train_a), (held_s, held_a)) = match c.kind {
        CorpusKind::Synthetic => {
            let mut r = ChaCha8Rng::seed_from_u64(c.seed);
            (
                generate_synthetic(c.n_train, "train-", &mut r),
                generate_synthetic(c.n_heldout, "heldout-", &mut r),
            )
        }
        CorpusKind::Jsonl => {
            let req = |p: &Option<PathBuf>, name: &str| {
                p.clone().ok_or_else(|| Error::config(name, "required for jsonl corpora"))
            };
            (
                (
                    read_samples(&req(&c.train, "corpus.train")?)?,
                    read_jsonl(&req(&c.train_spans, "corpus.train_spans")?)?,
                ),
                (
                    read_samples(&req(&c.heldout, "corpus.heldout")?)?,
                    read_jsonl(&req(&c.heldout_spans, "corpus.heldout_spans")?)?,
                ),
            )
        }
    };
    if train_s.is_empty() || held_s.is_empty() {
        return Err(Error::config("corpus", "train and held-out splits must be non-empty"));
    }
    let (train, train_spans) = encode_split(&tokenizer, &train_s, &train_a, max_len)?;
    let (heldout, heldout_spans) = encode_split(&tokenizer, &held_s, &held_a, max_len)?;
    Ok(Dataset {
        tokenizer,
        train,
        heldout,
        train_spans,
        heldout_spans,
    })
}

/// Plain-text run log mirrored to the `log` facade.
pub struct RunLog {
    out: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn none() -> Self {
        Self { out: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
        })
    }

    pub fn line(&mut self, msg: &str) {
        info!("{msg}");
        if let Some(w) = &mut self.out {
            // A failed log write is not worth aborting a run for.
            let _ = writeln!(w, "{msg}");
            let _ = w.flush();
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn batch_of<'a>(samples: &'a [EncodedSample], idx: &[usize]) -> Vec<&'a EncodedSample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

fn adamw(t: &TrainConfigView) -> AdamWConfig {
    AdamWConfig {
        weight_decay: t.weight_decay,
        ..Default::default()
    }
}

struct TrainConfigView {
    epochs: usize,
    batch_size: usize,
    warmup_steps: usize,
    weight_decay: f64,
    grad_clip: f64,
}

impl From<&TrainConfig> for TrainConfigView {
    fn from(t: &TrainConfig) -> Self {
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
        }
    }
}

fn lr_schedule(view: &TrainConfigView, n_samples: usize) -> LrSchedule {
    let per_epoch = n_samples.div_ceil(view.batch_size);
    LrSchedule {
        warmup: view.warmup_steps,
        total: view.epochs * per_epoch,
        floor: 0.1,
    }
}

fn diverged(step: usize, batch: &[&EncodedSample], value: f64) -> Error {
    let ids: Vec<&str> = batch.iter().map(|s| s.sample_id.as_str()).collect();
    Error::Diverged {
        step,
        msg: format!("loss {value} on samples {ids:?}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetrics {
    pub steps: usize,
    pub epoch_train_ce: Vec<f64>,
    pub heldout_ce: f64,
    pub heldout_perplexity: f64,
    pub copy_accuracy: f64,
}

/// Next-token cross-entropy pretraining of the teacher. Positions follow
/// `corpus.loss_positions`.
pub fn train_teacher(cfg: &RunConfig, data: &Dataset, log: &mut RunLog) -> Result<(Model, TeacherMetrics)> {
    let mut model = Model::init(&cfg.teacher, &mut rng(cfg.seed, Stream::TeacherInit))?;
    let view = TrainConfigView::from(&cfg.teacher_training);
    let lr = cfg.teacher_training.lr;
    let positions = cfg.corpus.loss_positions;
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = AdamW::new(adamw(&view), &shape_refs);
    let sched = lr_schedule(&view, data.train.len());
    let mut data_rng = rng(cfg.seed, Stream::Data);
    let mut step = 0;
    let mut epoch_ce = Vec::new();

    for epoch in 0..view.epochs {
        let mut sum = 0.0;
        let mut count = 0.0;
        for idx in epoch_batches(data.train.len(), view.batch_size, &mut data_rng) {
            let samples = batch_of(&data.train, &idx);
            let batch = make_batch(&samples, positions);
            let grads = {
                let tape = Tape::new();
                let bound = model.bind(&tape, true);
                let trace = bound.forward(&batch.tokens, batch.batch, batch.seq, &batch.padding_mask)?;
                let v = cfg.teacher.vocab_size;
                let weights = batch.loss_weights();
                let loss = trace
                    .logits
                    .reshape(&[batch.batch * batch.seq, v])?
                    .cross_entropy(&batch.targets, &weights)?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(diverged(step, &samples, value));
                }
                let n: f64 = weights.iter().sum();
                sum += value * n;
                count += n;
                tape.backward(loss)?;
                bound.grads()
            };
            let mut grads = grads;
            clip_grad_norm(&mut grads, view.grad_clip);
            let lrs = vec![lr * sched.factor(step); grads.len()];
            let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().collect();
            opt.step(&mut params, &grads, &lrs)?;
            step += 1;
        }
        let ce = sum / count;
        log.line(&format!("teacher epoch {epoch}: train ce {ce:.6}"));
        epoch_ce.push(ce);
    }
    let heldout_ce = heldout_cross_entropy(&model, &data.heldout, positions)?;
    let copy_accuracy = response_accuracy(&model, &data.heldout)?;
    log.line(&format!(
        "teacher held-out ce {heldout_ce:.6} ppl {:.4} response accuracy {copy_accuracy:.4}",
        heldout_ce.exp()
    ));
    Ok((
        model,
        TeacherMetrics {
            steps: step,
            epoch_train_ce: epoch_ce,
            heldout_ce,
            heldout_perplexity: heldout_ce.exp(),
            copy_accuracy,
        },
    ))
}

fn eval_batches(samples: &[EncodedSample]) -> impl Iterator<Item = Vec<usize>> + '_ {
    (0..samples.len())
        .step_by(EVAL_BATCH)
        .map(move |s| (s..(s + EVAL_BATCH).min(samples.len())).collect())
}

/// Token-weighted mean next-token cross-entropy.
pub fn heldout_cross_entropy(model: &Model, samples: &[EncodedSample], positions: LossPositions) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0.0;
    for idx in eval_batches(samples) {
        let batch = make_batch(&batch_of(samples, &idx), positions);
        let tape = Tape::new();
        let trace = model
            .bind(&tape, false)
            .forward(&batch.tokens, batch.batch, batch.seq, &batch.padding_mask)?;
        let weights = batch.loss_weights();
        let n: f64 = weights.iter().sum();
        if n == 0.0 {
            continue;
        }
        let v = model.config().vocab_size;
        let ce = trace
            .logits
            .reshape(&[batch.batch * batch.seq, v])?
            .cross_entropy(&batch.targets, &weights)?;
        sum += ce.item() * n;
        count += n;
    }
    if count == 0.0 {
        return Err(Error::EmptyMask {
            op: "heldout_cross_entropy",
        });
    }
    Ok(sum / count)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced argmax accuracy over response positions.
pub fn response_accuracy(model: &Model, samples: &[EncodedSample]) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    let v = model.config().vocab_size;
    for idx in eval_batches(samples) {
        let batch = make_batch(&batch_of(samples, &idx), LossPositions::Response);
        let tape = Tape::new();
        let trace = model
            .bind(&tape, false)
            .forward(&batch.tokens, batch.batch, batch.seq, &batch.padding_mask)?;
        let logits = trace.logits.value();
        for (i, &m) in batch.loss_mask.iter().enumerate() {
            if m {
                total += 1;
                if argmax(&logits.data()[i * v..(i + 1) * v]) == batch.targets[i] {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask { op: "response_accuracy" });
    }
    Ok(hit as f64 / total as f64)
}

/// Mean ROUGE-L F1 of greedy continuations of each prompt against the
/// reference response.
pub fn rouge_l_f1(model: &Model, tokenizer: &Tokenizer, samples: &[EncodedSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let reference = s.response_text();
        if reference.split_whitespace().next().is_none() {
            continue;
        }
        let budget = s.len() + 1 - s.prompt_len;
        let out = model.greedy_decode(&s.input_ids[..s.prompt_len], budget)?;
        sum += rouge_l_words(&tokenizer.decode(&out), reference)?.f1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask { op: "rouge_l_f1" });
    }
    Ok(sum / n as f64)
}

/// Held-out DSA of `student` against `teacher` under `schedule`, with the
/// per-layer values keyed by student layer.
pub fn heldout_dsa(
    student: &Model,
    teacher: &Model,
    data: &Dataset,
    schedule: &LayerSchedule,
    pool: SpanPoolWeights,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    let mut total = 0.0;
    let mut per_layer: BTreeMap<usize, f64> = BTreeMap::new();
    let n = data.heldout.len() as f64;
    for idx in eval_batches(&data.heldout) {
        let batch = make_batch(&batch_of(&data.heldout, &idx), LossPositions::All);
        let spans: Vec<AlignedSpans> = idx.iter().map(|&i| data.heldout_spans[i].clone()).collect();
        let tape = Tape::new();
        let s = student
            .bind(&tape, false)
            .forward(&batch.tokens, batch.batch, batch.seq, &batch.padding_mask)?;
        let t = teacher
            .bind(&tape, false)
            .forward(&batch.tokens, batch.batch, batch.seq, &batch.padding_mask)?;
        let terms = structural_terms(
            &s.hidden_states,
            &t.hidden_states,
            &batch.padding_mask,
            &spans,
            schedule,
            None,
            pool,
        )?;
        let w = batch.batch as f64 / n;
        total += terms.dsa.item() * w;
        for (l, v) in terms.per_layer_dsa {
            *per_layer.entry(l).or_insert(0.0) += v * w;
        }
    }
    Ok((total, per_layer))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub heldout_ce: f64,
    pub rouge_l_f1: f64,
    pub response_accuracy: f64,
    pub heldout_dsa: f64,
    pub per_layer_dsa: BTreeMap<usize, f64>,
}

pub fn evaluate(cfg: &RunConfig, student: &Model, teacher: &Model, data: &Dataset) -> Result<EvalMetrics> {
    let schedule = cfg.schedule()?;
    let (heldout_dsa, per_layer_dsa) =
        heldout_dsa(student, teacher, data, &schedule, cfg.distill.span_pool_weights)?;
    Ok(EvalMetrics {
        heldout_ce: heldout_cross_entropy(student, &data.heldout, cfg.corpus.loss_positions)?,
        rouge_l_f1: rouge_l_f1(student, &data.tokenizer, &data.heldout)?,
        response_accuracy: response_accuracy(student, &data.heldout)?,
        heldout_dsa,
        per_layer_dsa,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub steps: usize,
    pub final_report: Option<LossReport>,
    pub degenerate_layer_samples: usize,
    pub phrase_fallbacks: usize,
    pub hid_skipped_tokens: usize,
    pub fdd_skipped_tokens: usize,
    pub eval: EvalMetrics,
}

pub struct DistillOutcome {
    pub student: Model,
    pub projectors: Vec<Tensor>,
    pub reports: Vec<LossReport>,
    pub metrics: DistillMetrics,
}

struct StepOutput {
    report: LossReport,
    student_grads: Vec<Tensor>,
    projector_grads: Vec<Tensor>,
    degenerate: usize,
    fallbacks: usize,
    hid_skipped: usize,
    fdd_skipped: usize,
}

#[allow(clippy::too_many_arguments)]
fn distill_step(
    cfg: &RunConfig,
    student: &Model,
    teacher: &Model,
    projectors: &[Tensor],
    schedule: &LayerSchedule,
    batch: &Batch,
    spans: &[AlignedSpans],
    step: usize,
) -> Result<StepOutput> {
    let d = &cfg.distill;
    let weights = LossWeights {
        lambda_dsa: d.lambda_dsa,
        lambda_hid: d.lambda_hid,
    };
    let tape = Tape::new();
    let s = student.bind(&tape, true);
    let t = teacher.bind(&tape, false);
    let proj: Vec<Var<'_>> = projectors.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let s_tr = s.forward(&batch.tokens, batch.batch, batch.seq, &batch.padding_mask)?;
    let t_tr = t.forward(&batch.tokens, batch.batch, batch.seq, &batch.padding_mask)?;
    let rows = batch.batch * batch.seq;
    let v = cfg.student.vocab_size;
    let include = &batch.loss_mask;
    let base = base_loss(
        d.base,
        t_tr.logits.reshape(&[rows, v])?,
        s_tr.logits.reshape(&[rows, v])?,
        d.alpha,
        include,
    )?;

    let mut fdd_skipped = 0;
    let fdd = if d.base == BaseKind::Fdd {
        let (sl, tl) = fdd_layers(schedule);
        let st = VocabTrajectory::build(&s, &s_tr, sl)?;
        let tt = VocabTrajectory::build(&t, &t_tr, tl)?.detach();
        let traj = fdd_traj(&tt, &st, schedule, include)?;
        let (der, skipped) = fdd_der(&tt, &st, schedule, include)?;
        fdd_skipped = skipped;
        Some((traj, der))
    } else {
        None
    };

    let mut parts = LossParts {
        base,
        fdd,
        dsa: None,
        hid: None,
        per_layer_dsa: BTreeMap::new(),
    };
    let (mut degenerate, mut fallbacks, mut hid_skipped) = (0, 0, 0);
    if d.lambda_dsa != 0.0 || d.lambda_hid != 0.0 {
        let terms = structural_terms(
            &s_tr.hidden_states,
            &t_tr.hidden_states,
            &batch.padding_mask,
            spans,
            schedule,
            (d.lambda_hid != 0.0).then_some(proj.as_slice()),
            d.span_pool_weights,
        )?;
        parts.dsa = Some(terms.dsa);
        parts.hid = terms.hid;
        parts.per_layer_dsa = terms.per_layer_dsa;
        degenerate = terms.degenerate;
        fallbacks = terms.phrase_fallbacks;
        hid_skipped = terms.hid_skipped;
    }
    let (total, report) = total_loss(&parts, weights, step)?;
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            step,
            msg: format!("{report:?}"),
        });
    }
    tape.backward(total)?;
    let student_grads = s.grads();
    let projector_grads = proj
        .iter()
        .map(|p| tape.grad(*p).unwrap_or_else(|| Tensor::zeros(&p.shape())))
        .collect();
    Ok(StepOutput {
        report,
        student_grads,
        projector_grads,
        degenerate,
        fallbacks,
        hid_skipped,
        fdd_skipped,
    })
}

/// Output files of a distillation run.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn schedule(&self) -> PathBuf {
        self.dir.join("schedule.txt")
    }
    pub fn reports(&self) -> PathBuf {
        self.dir.join("loss_reports.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("run.log")
    }
    pub fn student(&self) -> PathBuf {
        self.dir.join("student.ckpt")
    }
    pub fn evals(&self) -> PathBuf {
        self.dir.join("evals.jsonl")
    }
}

/// Distils `teacher` into a freshly initialized student. With `out`, the
/// resolved config, schedule, per-step loss reports, metrics, log and the
/// student checkpoint are written there.
pub fn distill(cfg: &RunConfig, teacher: &Model, data: &Dataset, out: Option<&Path>) -> Result<DistillOutcome> {
    cfg.validate()?;
    if teacher.config() != &cfg.teacher {
        return Err(Error::config("teacher", "checkpoint config differs from the run config"));
    }
    let files = out.map(|d| RunFiles { dir: d.to_path_buf() });
    let mut log = match &files {
        Some(f) => {
            create_dir(&f.dir)?;
            fs::write(f.config(), cfg.to_toml()).map_err(|e| Error::io(f.config(), e))?;
            RunLog::create(&f.log())?
        }
        None => RunLog::none(),
    };
    let schedule = cfg.schedule()?;
    if let Some(f) = &files {
        fs::write(f.schedule(), schedule.to_string()).map_err(|e| Error::io(f.schedule(), e))?;
    }
    log.line(&format!("schedule:\n{schedule}"));
    let mut reports_out = match &files {
        Some(f) => Some(BufWriter::new(File::create(f.reports()).map_err(|e| Error::io(f.reports(), e))?)),
        None => None,
    };
    let mut evals_out = match &files {
        Some(f) if cfg.distill.eval_every > 0 => {
            Some(BufWriter::new(File::create(f.evals()).map_err(|e| Error::io(f.evals(), e))?))
        }
        _ => None,
    };

    let d = &cfg.distill;
    let mut student = Model::init(&cfg.student, &mut rng(cfg.seed, Stream::StudentInit))?;
    let mut proj_rng = rng(cfg.seed, Stream::Projectors);
    let mut projectors: Vec<Tensor> = schedule
        .entries
        .iter()
        .map(|_| init_projector(cfg.student.d_model, cfg.teacher.d_model, &mut proj_rng))
        .collect();
    let view = TrainConfigView {
        epochs: d.epochs,
        batch_size: d.batch_size,
        warmup_steps: d.warmup_steps,
        weight_decay: d.weight_decay,
        grad_clip: d.grad_clip,
    };
    let mut shapes: Vec<Vec<usize>> = student.params().iter().map(|p| p.shape().to_vec()).collect();
    shapes.extend(projectors.iter().map(|p| p.shape().to_vec()));
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = AdamW::new(adamw(&view), &shape_refs);
    let sched = lr_schedule(&view, data.train.len());
    let mut data_rng = rng(cfg.seed, Stream::Data);
    let n_student = student.params().len();

    let mut reports = Vec::new();
    let (mut degenerate, mut fallbacks, mut hid_skipped, mut fdd_skipped) = (0, 0, 0, 0);
    let mut step = 0;
    for epoch in 0..d.epochs {
        for idx in epoch_batches(data.train.len(), d.batch_size, &mut data_rng) {
            let samples = batch_of(&data.train, &idx);
            let batch = make_batch(&samples, cfg.corpus.loss_positions);
            let spans: Vec<AlignedSpans> = idx.iter().map(|&i| data.train_spans[i].clone()).collect();
            let out = distill_step(cfg, &student, teacher, &projectors, &schedule, &batch, &spans, step)
                .map_err(|e| match e {
                    Error::Diverged { step, msg } => {
                        let ids: Vec<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
                        Error::Diverged {
                            step,
                            msg: format!("{msg} on samples {ids:?}"),
                        }
                    }
                    other => other,
                })?;
            degenerate += out.degenerate;
            fallbacks += out.fallbacks;
            hid_skipped += out.hid_skipped;
            fdd_skipped += out.fdd_skipped;

            let mut grads = out.student_grads;
            grads.extend(out.projector_grads);
            clip_grad_norm(&mut grads, d.grad_clip);
            let f = sched.factor(step);
            let mut lrs = vec![d.lr * f; n_student];
            lrs.extend(std::iter::repeat(d.projector_lr * f).take(projectors.len()));
            {
                let mut params: Vec<&mut Tensor> = student.params_mut().iter_mut().collect();
                params.extend(projectors.iter_mut());
                opt.step(&mut params, &grads, &lrs)?;
            }
            if let Some(w) = &mut reports_out {
                serde_json::to_writer(&mut *w, &out.report)?;
                w.write_all(b"\n").map_err(|e| Error::io("loss_reports.jsonl", e))?;
            }
            if step % 50 == 0 {
                let r = &out.report;
                log.line(&format!(
                    "epoch {epoch} step {step}: total {:.6} base {:.6} dsa {:.6} hid {:.6}",
                    r.total, r.base, r.dsa, r.hid
                ));
            }
            reports.push(out.report);
            step += 1;
            if d.eval_every > 0 && step % d.eval_every == 0 {
                let ce = heldout_cross_entropy(&student, &data.heldout, cfg.corpus.loss_positions)?;
                let (dsa, _) = heldout_dsa(&student, teacher, data, &schedule, d.span_pool_weights)?;
                log.line(&format!("eval step {step}: held-out ce {ce:.6} dsa {dsa:.6}"));
                if let Some(w) = &mut evals_out {
                    let rec = serde_json::json!({"step": step, "heldout_ce": ce, "heldout_dsa": dsa});
                    serde_json::to_writer(&mut *w, &rec)?;
                    w.write_all(b"\n").map_err(|e| Error::io("evals.jsonl", e))?;
                }
            }
        }
    }
    if let Some(w) = &mut reports_out {
        w.flush().map_err(|e| Error::io("loss_reports.jsonl", e))?;
    }
    if let Some(w) = &mut evals_out {
        w.flush().map_err(|e| Error::io("evals.jsonl", e))?;
    }
    if fallbacks > 0 {
        log.line(&format!("{fallbacks} sample-layer pairs fell back from phrase to word spans"));
    }

    let eval = evaluate(cfg, &student, teacher, data)?;
    log.line(&format!(
        "final: held-out ce {:.6} rouge-l {:.4} response accuracy {:.4} dsa {:.6}",
        eval.heldout_ce, eval.rouge_l_f1, eval.response_accuracy, eval.heldout_dsa
    ));
    let metrics = DistillMetrics {
        steps: step,
        final_report: reports.last().cloned(),
        degenerate_layer_samples: degenerate,
        phrase_fallbacks: fallbacks,
        hid_skipped_tokens: hid_skipped,
        fdd_skipped_tokens: fdd_skipped,
        eval,
    };
    if let Some(f) = &files {
        write_json(&f.metrics(), &metrics)?;
        student.save(&f.student())?;
    }
    Ok(DistillOutcome {
        student,
        projectors,
        reports,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub student_layer: usize,
    pub teacher_layer: usize,
    pub granularity: Granularity,
    pub dsa: f64,
}

/// Held-out DSA at every student layer and both granularities.
pub fn probe_dsa(cfg: &RunConfig, student: &Model, teacher: &Model, data: &Dataset) -> Result<Vec<ProbeRow>> {
    let (n_s, n_t) = (student.config().n_layers, teacher.config().n_layers);
    let mut rows = Vec::new();
    for l in 1..=n_s {
        for (g, word_count) in [(Granularity::Word, 1), (Granularity::Phrase, 0)] {
            let schedule = LayerSchedule::explicit(&[l], n_s, n_t, word_count)?;
            let (dsa, _) = heldout_dsa(student, teacher, data, &schedule, cfg.distill.span_pool_weights)?;
            rows.push(ProbeRow {
                student_layer: l,
                teacher_layer: map_layer(l, n_s, n_t)?,
                granularity: g,
                dsa,
            });
        }
    }
    Ok(rows)
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("student_layer,teacher_layer,granularity,dsa\n");
    for r in rows {
        let g = match r.granularity {
            Granularity::Word => "word",
            Granularity::Phrase => "phrase",
        };
        out.push_str(&format!("{},{},{g},{:.12e}\n", r.student_layer, r.teacher_layer, r.dsa));
    }
    out
}

/// Hidden states of every layer for each sample, run unpadded one at a time.
pub fn export_hidden(model: &Model, samples: &[EncodedSample]) -> Result<HiddenDump> {
    let cfg = model.config();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let tape = Tape::new();
        let trace = model
            .bind(&tape, false)
            .forward(&s.input_ids, 1, s.len(), &vec![false; s.len()])?;
        let states = trace
            .hidden_states
            .iter()
            .map(|h| h.value().data().iter().map(|&x| x as f32).collect())
            .collect();
        records.push(DumpRecord {
            ids: s.input_ids.iter().map(|&i| i as u32).collect(),
            padding_mask: vec![false; s.len()],
            states,
        });
    }
    Ok(HiddenDump {
        header: DumpHeader {
            n_states: cfg.n_layers + 1,
            d_model: cfg.d_model,
            vocab_size: cfg.vocab_size,
        },
        records,
    })
}

/// Right-pads the chosen dump records into per-layer `[batch, seq, d]`
/// constants and the matching padding mask.
pub fn dump_states<'t>(tape: &'t Tape, dump: &HiddenDump, idx: &[usize]) -> Result<(Vec<Var<'t>>, Vec<bool>)> {
    let h = dump.header;
    let recs: Vec<&DumpRecord> = idx
        .iter()
        .map(|&i| {
            dump.records
                .get(i)
                .ok_or_else(|| Error::invalid("dump_states", format!("record {i} out of range")))
        })
        .collect::<Result<_>>()?;
    let batch = recs.len();
    let seq = recs.iter().map(|r| r.seq_len()).max().unwrap_or(0);
    let mut padding = vec![true; batch * seq];
    for (b, r) in recs.iter().enumerate() {
        for t in 0..r.seq_len() {
            padding[b * seq + t] = r.padding_mask[t];
        }
    }
    let mut layers = Vec::with_capacity(h.n_states);
    for l in 0..h.n_states {
        let mut data = vec![0.0; batch * seq * h.d_model];
        for (b, r) in recs.iter().enumerate() {
            let src = &r.states[l];
            let dst = &mut data[b * seq * h.d_model..][..src.len()];
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = x as f64;
            }
        }
        layers.push(tape.constant(Tensor::new(data, &[batch, seq, h.d_model])?));
    }
    Ok((layers, padding))
}

/// Writes `metrics` as pretty JSON.
pub fn save_metrics<T: Serialize>(path: &Path, metrics: &T) -> Result<()> {
    write_json(path, metrics)
}
