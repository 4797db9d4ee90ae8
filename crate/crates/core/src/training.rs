//! Two-stage training: teacher-forced cross-entropy under the Noam schedule,
//! then self-critical sequence training with a CIDEr reward at a fixed
//! learning rate. Both stages use Adam with global-norm gradient clipping
//! and pick checkpoints by a dev-set metric.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{encode_caption, Example, ImageRecord, Vocabulary, BOS};
use crate::error::{Error, Result};
use crate::metrics::{build_corpus_stats, cider, evaluate, tokenize, CorpusStats, MetricReport, TokenSeq};
use crate::model::{
    beam_decode, bind, decode_on, encode_on, generation_mask, strip_specials, xe_loss_on, Checkpoint, Dropout,
    ModelConfig, Session, Stage,
};
use crate::tensor::{Tensor, TensorError};

/// `(step^-0.5, step · warmup^-1.5)`, the latter evaluated as
/// `(step / warmup) · warmup^-0.5` so both arms agree exactly at the peak.
fn noam_arms(step: u64, warmup_steps: u64) -> (f64, f64) {
    let s = step as f64;
    let w = warmup_steps.max(1) as f64;
    (1.0 / s.sqrt(), (s / w) * (1.0 / w.sqrt()))
}

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup_steps: u64) -> f64 {
    assert!(step >= 1, "noam_lr is defined from step 1");
    let (decay, ramp) = noam_arms(step, warmup_steps);
    (d_model as f64).powf(-0.5) * decay.min(ramp)
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_grads(op: &'static str, params: &[Tensor], grads: &[Vec<f64>]) -> Result<()> {
    let ok = params.len() == grads.len() && params.iter().zip(grads).all(|(p, g)| p.numel() == g.len());
    if ok {
        Ok(())
    } else {
        Err(TensorError::shape(op, format!("{} parameters, {} gradients", params.len(), grads.len())).into())
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut OptimizerState, lr: f64) -> Result<()> {
    check_grads("adam_step", params, grads)?;
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
        return Err(TensorError::shape("adam_step", "optimizer state does not match the parameters").into());
    }
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (pi, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[pi], &mut state.v[pi]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[pi][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    Cider,
    BleuAvg4,
}

impl SelectionMetric {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::Cider => "cider",
            SelectionMetric::BleuAvg4 => "bleu_avg4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cider" => Some(SelectionMetric::Cider),
            "bleu_avg4" => Some(SelectionMetric::BleuAvg4),
            _ => None,
        }
    }
}

/// Which stages [`run_two_stage`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stages {
    Xe,
    Scst,
    Both,
}

impl Stages {
    pub fn name(self) -> &'static str {
        match self {
            Stages::Xe => "xe",
            Stages::Scst => "scst",
            Stages::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "xe" => Some(Stages::Xe),
            "scst" => Some(Stages::Scst),
            "both" => Some(Stages::Both),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub xe_max_epochs: usize,
    pub scst_lr: f64,
    pub scst_max_steps: usize,
    /// SCST steps between dev evaluations.
    pub scst_eval_every: usize,
    /// Dev evaluations without improvement before a stage stops.
    pub patience: usize,
    pub selection_metric: SelectionMetric,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            warmup_steps: 100,
            xe_max_epochs: 50,
            scst_lr: 5e-6,
            scst_max_steps: 0,
            scst_eval_every: 10,
            patience: 3,
            selection_metric: SelectionMetric::Cider,
            clip_norm: 1.0,
            seed: 7,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "batch_size",
        "warmup_steps",
        "xe_max_epochs",
        "scst_lr",
        "scst_max_steps",
        "scst_eval_every",
        "patience",
        "selection_metric",
        "clip_norm",
        "train_seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.scst_lr > 0.0) {
            return Err(Error::Config(format!("scst_lr must be positive, got {}", self.scst_lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.scst_eval_every == 0 {
            return Err(Error::Config("scst_eval_every must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.batch_size.to_string(),
            self.warmup_steps.to_string(),
            self.xe_max_epochs.to_string(),
            self.scst_lr.to_string(),
            self.scst_max_steps.to_string(),
            self.scst_eval_every.to_string(),
            self.patience.to_string(),
            self.selection_metric.name().to_string(),
            self.clip_norm.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    /// Sets one field from text. Returns `Ok(false)` for keys this config
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "xe_max_epochs" => self.xe_max_epochs = parse(key, value)?,
            "scst_lr" => self.scst_lr = parse(key, value)?,
            "scst_max_steps" => self.scst_max_steps = parse(key, value)?,
            "scst_eval_every" => self.scst_eval_every = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "selection_metric" => {
                self.selection_metric = SelectionMetric::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("selection_metric: expected cider or bleu_avg4, got {value:?}")))?
            }
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "train_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// An image with its encoded training captions and tokenized references.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub image: ImageRecord,
    /// `<bos> … <eos>` per reference caption.
    pub ids: Vec<Vec<usize>>,
    pub refs: Vec<TokenSeq>,
}

/// Encodes every caption for a model that decodes up to `max_caption_len`
/// tokens.
pub fn prepare(examples: &[Example], vocab: &Vocabulary, max_caption_len: usize) -> Vec<Prepared> {
    examples
        .iter()
        .map(|e| Prepared {
            image: e.image.clone(),
            ids: e
                .captions
                .iter()
                .map(|c| encode_caption(c, vocab, max_caption_len + 1))
                .collect(),
            refs: e.captions.iter().map(|c| tokenize(c)).collect(),
        })
        .collect()
}

fn rng_for(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) ^ index);
    rng
}

const STREAM_EPOCH: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_SCST: u64 = 3;

fn param_grads(tape: &Tape, vars: &[crate::autodiff::Var], params: &[Tensor]) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect()
}

/// Mean teacher-forced loss over a batch of `(image, ids)` pairs and its
/// gradient with respect to every parameter.
pub fn xe_batch_gradient(
    ckpt: &Checkpoint,
    batch: &[(&ImageRecord, &[usize])],
    drop: &mut Dropout,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let cfg = &ckpt.config;
    let mut tape = Tape::new();
    let mv = bind(&mut tape, cfg, &ckpt.params, true)?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (record, ids) in batch {
        let mark = tape.mark();
        let loss = xe_loss_on(&mut tape, cfg, &mv, record, ids, drop)?;
        total += tape.value(loss).data()[0];
        let scaled = tape.scale(loss, scale);
        tape.backward(scaled)?;
        tape.truncate(mark);
    }
    Ok((total * scale, param_grads(&tape, &mv.all, ckpt.params.tensors())))
}

/// Summary of one cross-entropy epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean over batches of the batch loss before its update.
    pub loss: f64,
    pub steps: u64,
    pub last_lr: f64,
}

/// One pass over `data` in seeded mini-batches. `epoch` selects the
/// shuffle and, per image, which reference caption is trained on.
pub fn train_xe_epoch(
    ckpt: &mut Checkpoint,
    data: &[Prepared],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    epoch: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, STREAM_EPOCH, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let choice: Vec<usize> = order.iter().map(|&i| rng.gen_range(0..data[i].ids.len())).collect();
    let mut loss_sum = 0.0;
    let mut steps = 0;
    let mut lr = 0.0;
    for (chunk, picks) in order.chunks(cfg.batch_size).zip(choice.chunks(cfg.batch_size)) {
        let batch: Vec<(&ImageRecord, &[usize])> = chunk
            .iter()
            .zip(picks)
            .map(|(&i, &c)| (&data[i].image, data[i].ids[c].as_slice()))
            .collect();
        let step = ckpt.state.step + 1;
        let mut drop = if ckpt.config.dropout_rate > 0.0 {
            Dropout::new(ckpt.config.dropout_rate, rng_for(cfg.seed, STREAM_DROPOUT, step))
        } else {
            Dropout::off()
        };
        let (loss, mut grads) = xe_batch_gradient(ckpt, &batch, &mut drop)?;
        clip_grad_norm(&mut grads, cfg.clip_norm);
        lr = noam_lr(step, ckpt.config.d_model, cfg.warmup_steps);
        adam_step(ckpt.params.tensors_mut(), &grads, opt, lr)?;
        ckpt.state.step = step;
        ckpt.state.stage = Stage::Xe;
        loss_sum += loss;
        steps += 1;
    }
    Ok(EpochStats {
        loss: loss_sum / steps as f64,
        steps,
        last_lr: lr,
    })
}

/// Mean teacher-forced loss over every `(image, caption)` pair, without
/// dropout or updates.
pub fn xe_loss(ckpt: &Checkpoint, data: &[Prepared]) -> Result<f64> {
    let cfg = &ckpt.config;
    let mut tape = Tape::new();
    let mv = bind(&mut tape, cfg, &ckpt.params, false)?;
    let mut total = 0.0;
    let mut n = 0;
    for p in data {
        for ids in &p.ids {
            let mark = tape.mark();
            let loss = xe_loss_on(&mut tape, cfg, &mv, &p.image, ids, &mut Dropout::off())?;
            total += tape.value(loss).data()[0];
            tape.truncate(mark);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("no captions to score".into()));
    }
    Ok(total / n as f64)
}

/// One image's self-critical outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardRecord {
    /// Sampled tokens, `<eos>` included when produced.
    pub sampled: Vec<usize>,
    pub greedy: Vec<usize>,
    pub sampled_reward: f64,
    pub greedy_reward: f64,
    /// `sampled_reward - greedy_reward`.
    pub advantage: f64,
}

/// Gradient of `-(1/B) Σ_i advantage_i · log p(tokens_i | image_i)` where
/// `B = items.len()` and the log-probabilities use the generation mask.
/// Items with zero advantage contribute nothing and are skipped.
pub fn policy_gradient(ckpt: &Checkpoint, items: &[(&ImageRecord, &[usize], f64)]) -> Result<Vec<Vec<f64>>> {
    let cfg = &ckpt.config;
    let mut tape = Tape::new();
    let mv = bind(&mut tape, cfg, &ckpt.params, true)?;
    let mask = generation_mask(cfg.vocab_size);
    let b = items.len().max(1) as f64;
    for &(record, tokens, adv) in items {
        if adv == 0.0 || tokens.is_empty() {
            continue;
        }
        let mark = tape.mark();
        let memory = encode_on(&mut tape, cfg, &mv, record, &mut Dropout::off())?;
        let mut prefix = Vec::with_capacity(tokens.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&tokens[..tokens.len() - 1]);
        let logits = decode_on(&mut tape, cfg, &mv, memory, &prefix, &mut Dropout::off())?;
        let lp = tape.log_prob_gather(logits, tokens, Some(&mask))?;
        let total = tape.sum(lp);
        let surrogate = tape.scale(total, -adv / b);
        tape.backward(surrogate)?;
        tape.truncate(mark);
    }
    Ok(param_grads(&tape, &mv.all, ckpt.params.tensors()))
}

/// CIDEr of generated `tokens` against `refs`.
pub fn caption_reward(tokens: &[usize], refs: &[TokenSeq], vocab: &Vocabulary, stats: &CorpusStats) -> f64 {
    cider(&vocab.tokens_of(&strip_specials(tokens)), refs, stats)
}

/// One self-critical update on `batch`. `step_index` seeds the sampler.
pub fn scst_step(
    ckpt: &mut Checkpoint,
    batch: &[&Prepared],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    stats: &CorpusStats,
    step_index: u64,
) -> Result<Vec<RewardRecord>> {
    if ckpt.state.stage == Stage::Xe && ckpt.state.step == 0 {
        return Err(Error::Contract(
            "self-critical training needs a checkpoint that finished cross-entropy training".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut rng = rng_for(cfg.seed, STREAM_SCST, step_index);
    let mut records = Vec::with_capacity(batch.len());
    for p in batch {
        let mut session = Session::new(ckpt, &p.image)?;
        let sampled = session.sample(&mut rng)?;
        let greedy = session.greedy()?;
        let sampled_reward = caption_reward(&sampled, &p.refs, vocab, stats);
        let greedy_reward = caption_reward(&greedy, &p.refs, vocab, stats);
        records.push(RewardRecord {
            sampled,
            greedy,
            sampled_reward,
            greedy_reward,
            advantage: sampled_reward - greedy_reward,
        });
    }
    let items: Vec<(&ImageRecord, &[usize], f64)> = batch
        .iter()
        .zip(&records)
        .map(|(p, r)| (&p.image, r.sampled.as_slice(), r.advantage))
        .collect();
    let mut grads = policy_gradient(ckpt, &items)?;
    clip_grad_norm(&mut grads, cfg.clip_norm);
    adam_step(ckpt.params.tensors_mut(), &grads, opt, cfg.scst_lr)?;
    ckpt.state.step += 1;
    ckpt.state.stage = Stage::Scst;
    Ok(records)
}

/// The candidate with the highest `metric`; ties go to the earliest step.
pub fn select_best<'a>(candidates: &'a [Checkpoint], metric: &str) -> Result<&'a Checkpoint> {
    let mut best: Option<(&Checkpoint, f64)> = None;
    for c in candidates {
        let s = *c
            .scores
            .get(metric)
            .ok_or_else(|| Error::Contract(format!("candidate at step {} has no {metric} score", c.state.step)))?;
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && b.state.step <= c.state.step) => Some((b, bs)),
            _ => Some((c, s)),
        };
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::Contract("no candidates to select from".into()))
}

/// Decodes every image (in parallel, order kept) and scores the captions
/// against all references. Beam width 1 is greedy decoding.
pub fn generate_captions(ckpt: &Checkpoint, images: &[ImageRecord], beam_width: usize) -> Result<Vec<Vec<usize>>> {
    images
        .par_iter()
        .map(|img| beam_decode(img, ckpt, beam_width))
        .collect()
}

pub fn evaluate_split(ckpt: &Checkpoint, data: &[Prepared], vocab: &Vocabulary, beam_width: usize) -> Result<MetricReport> {
    let images: Vec<ImageRecord> = data.iter().map(|p| p.image.clone()).collect();
    let outputs = generate_captions(ckpt, &images, beam_width)?;
    let cands: Vec<TokenSeq> = outputs.iter().map(|o| vocab.tokens_of(&strip_specials(o))).collect();
    let refs: Vec<Vec<TokenSeq>> = data.iter().map(|p| p.refs.clone()).collect();
    Ok(evaluate(&cands, &refs, None)?)
}

/// One training-log event.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub stage: Stage,
    pub step: u64,
    pub epoch: Option<u64>,
    pub lr: f64,
    /// Cross-entropy loss, or mean sampled reward during SCST.
    pub loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub greedy_reward: Option<f64>,
    pub dev: Option<MetricReport>,
}

impl LogRecord {
    /// `key=value` pairs separated by spaces.
    pub fn to_line(&self) -> String {
        let mut s = format!("stage={} step={}", self.stage.as_str(), self.step);
        if let Some(e) = self.epoch {
            write!(s, " epoch={e}").expect("String write");
        }
        write!(s, " lr={:e}", self.lr).expect("String write");
        if let Some(l) = self.loss {
            write!(s, " loss={l}").expect("String write");
        }
        if let Some(r) = self.mean_reward {
            write!(s, " mean_reward={r}").expect("String write");
        }
        if let Some(r) = self.greedy_reward {
            write!(s, " greedy_reward={r}").expect("String write");
        }
        if let Some(d) = &self.dev {
            for (k, v) in MetricReport::NAMES.iter().zip(d.values()) {
                write!(s, " dev_{k}={v}").expect("String write");
            }
        }
        s
    }
}

/// Result of [`run_two_stage`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best dev-scoring checkpoint over every evaluation.
    pub best: Checkpoint,
    /// Parameters after the last update.
    pub last: Checkpoint,
    pub log: Vec<LogRecord>,
}

fn score_into(ckpt: &mut Checkpoint, report: &MetricReport) {
    ckpt.scores.clear();
    for (k, v) in MetricReport::NAMES.iter().zip(report.values()) {
        ckpt.scores.insert((*k).to_string(), v);
    }
}

/// Tracks the best candidate and the patience counter of one stage.
struct Selector {
    metric: &'static str,
    best: Option<Checkpoint>,
    stage_best: f64,
    stale: usize,
}

impl Selector {
    /// Returns `true` when the stage should stop.
    fn offer(&mut self, candidate: &Checkpoint, patience: usize) -> Result<bool> {
        let score = candidate.scores[self.metric];
        let pool: Vec<Checkpoint> = self.best.iter().cloned().chain([candidate.clone()]).collect();
        self.best = Some(select_best(&pool, self.metric)?.clone());
        if score > self.stage_best {
            self.stage_best = score;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Ok(self.stale >= patience)
    }

    fn new_stage(&mut self) {
        self.stage_best = f64::NEG_INFINITY;
        self.stale = 0;
    }
}

/// Cross-entropy training with per-epoch dev evaluation and early stopping,
/// then self-critical training from the best cross-entropy checkpoint with
/// dev evaluation every `scst_eval_every` steps. `init` is the starting
/// model; its vocabulary size must match `vocab`.
pub fn run_two_stage(
    train: &[Prepared],
    dev: &[Prepared],
    vocab: &Vocabulary,
    init: Checkpoint,
    cfg: &TrainConfig,
    stages: Stages,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Config("model selection needs a non-empty dev split".into()));
    }
    if init.config.vocab_size != vocab.len() {
        return Err(Error::Compatibility(format!(
            "model vocab_size {} but the vocabulary has {} entries",
            init.config.vocab_size,
            vocab.len()
        )));
    }
    if let Some(id) = train
        .iter()
        .map(|p| &p.image.id)
        .find(|id| dev.iter().any(|d| &d.image.id == *id))
    {
        return Err(Error::validation(id.clone(), "image appears in both the training and dev splits"));
    }
    if stages == Stages::Scst && init.state.step == 0 {
        return Err(Error::Contract(
            "self-critical training needs a checkpoint that finished cross-entropy training".into(),
        ));
    }
    let metric = cfg.selection_metric.name();
    let mut sel = Selector {
        metric,
        best: None,
        stage_best: f64::NEG_INFINITY,
        stale: 0,
    };
    let mut log = Vec::new();
    let mut ckpt = init;

    if matches!(stages, Stages::Xe | Stages::Both) {
        let mut opt = OptimizerState::new(ckpt.params.tensors());
        for epoch in 0..cfg.xe_max_epochs as u64 {
            let stats = train_xe_epoch(&mut ckpt, train, cfg, &mut opt, epoch)?;
            let report = evaluate_split(&ckpt, dev, vocab, 1)?;
            score_into(&mut ckpt, &report);
            log.push(LogRecord {
                stage: Stage::Xe,
                step: ckpt.state.step,
                epoch: Some(epoch),
                lr: stats.last_lr,
                loss: Some(stats.loss),
                mean_reward: None,
                greedy_reward: None,
                dev: Some(report),
            });
            if sel.offer(&ckpt, cfg.patience)? {
                break;
            }
        }
    }

    if matches!(stages, Stages::Scst | Stages::Both) && cfg.scst_max_steps > 0 {
        if let Some(b) = &sel.best {
            ckpt = b.clone();
        }
        sel.new_stage();
        if let Some(&s) = ckpt.scores.get(metric).filter(|_| sel.best.is_some()) {
            sel.stage_best = s;
        }
        if ckpt.state.step == 0 {
            return Err(Error::Contract(
                "self-critical training needs a checkpoint that finished cross-entropy training".into(),
            ));
        }
        if sel.best.is_none() {
            let report = evaluate_split(&ckpt, dev, vocab, 1)?;
            score_into(&mut ckpt, &report);
            sel.offer(&ckpt, cfg.patience)?;
            sel.new_stage();
            sel.stage_best = ckpt.scores[metric];
        }
        let refs: Vec<Vec<TokenSeq>> = train.iter().map(|p| p.refs.clone()).collect();
        let stats = build_corpus_stats(&refs);
        let mut opt = OptimizerState::new(ckpt.params.tensors());
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut pass = 0;
        for s in 0..cfg.scst_max_steps as u64 {
            let mut batch = Vec::with_capacity(cfg.batch_size.min(train.len()));
            while batch.len() < cfg.batch_size.min(train.len()) {
                if cursor == order.len() {
                    order = (0..train.len()).collect();
                    order.shuffle(&mut rng_for(cfg.seed, STREAM_SCST, u64::MAX - pass));
                    pass += 1;
                    cursor = 0;
                }
                batch.push(&train[order[cursor]]);
                cursor += 1;
            }
            let records = scst_step(&mut ckpt, &batch, vocab, cfg, &mut opt, &stats, s)?;
            let n = records.len() as f64;
            let mut entry = LogRecord {
                stage: Stage::Scst,
                step: ckpt.state.step,
                epoch: None,
                lr: cfg.scst_lr,
                loss: None,
                mean_reward: Some(records.iter().map(|r| r.sampled_reward).sum::<f64>() / n),
                greedy_reward: Some(records.iter().map(|r| r.greedy_reward).sum::<f64>() / n),
                dev: None,
            };
            let evaluate_now = (s + 1) % cfg.scst_eval_every as u64 == 0 || s + 1 == cfg.scst_max_steps as u64;
            let mut stop = false;
            if evaluate_now {
                let report = evaluate_split(&ckpt, dev, vocab, 1)?;
                score_into(&mut ckpt, &report);
                entry.dev = Some(report);
                stop = sel.offer(&ckpt, cfg.patience)?;
            }
            log.push(entry);
            if stop {
                break;
            }
        }
    }

    let best = match sel.best {
        Some(b) => b,
        None => {
            let report = evaluate_split(&ckpt, dev, vocab, 1)?;
            score_into(&mut ckpt, &report);
            ckpt.clone()
        }
    };
    Ok(TrainOutcome { best, last: ckpt, log })
}

/// A model configuration sized for `vocab` and `d_feat`, everything else
/// from `base`.
pub fn fit_config(base: &ModelConfig, vocab: &Vocabulary, d_feat: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_feat,
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::{init_model, TrainerState};

    fn toy(n: usize, d_model: usize) -> (Vec<Prepared>, Vocabulary, ModelConfig) {
        let (images, captions) = synth_generate(n, 3, 10).unwrap();
        let vocab = Vocabulary::build(&captions, 1);
        let examples = crate::data::join(images, captions).unwrap();
        let cfg = ModelConfig {
            d_model,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ffn: 2 * d_model,
            d_g: 16,
            d_feat: 10,
            vocab_size: vocab.len(),
            max_caption_len: 10,
            ..ModelConfig::default()
        };
        (prepare(&examples, &vocab, cfg.max_caption_len), vocab, cfg)
    }

    #[test]
    fn noam_schedule() {
        let w = 4000;
        let at = noam_lr(w, 512, w);
        assert!((at - 6.988e-4).abs() < 1e-6, "{at}");
        for w in [1, 3, 50, 4000, 12345] {
            let (decay, ramp) = noam_arms(w, w);
            assert_eq!(decay, ramp);
        }
        let lrs: Vec<f64> = (1..=200).map(|s| noam_lr(s, 64, 50)).collect();
        assert!(lrs[..50].windows(2).all(|p| p[0] <= p[1]));
        assert!(lrs[49..].windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn adam_basics() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &[vec![0.0; 3]], &mut st, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);

        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &[vec![1.0; 3]], &mut st, 0.01).unwrap();
        let expect = 0.01 / (1.0 + 1e-8);
        for (a, b) in p[0].data().iter().zip([1.0, -2.0, 3.0]) {
            assert!(((b - a) - expect).abs() < 1e-15);
        }
        assert!(adam_step(&mut p, &[vec![1.0; 2]], &mut st, 0.01).is_err());
        assert!(adam_step(&mut p, &[vec![1.0; 3]], &mut st, 0.0).is_err());
    }

    #[test]
    fn adam_replays_from_serialized_state() {
        let mut p = vec![Tensor::vector(vec![0.5, 0.25])];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &[vec![0.3, -0.1]], &mut st, 0.01).unwrap();
        let saved_p = p.clone();
        let saved = serde_json::to_string(&st).unwrap();
        adam_step(&mut p, &[vec![0.2, 0.4]], &mut st, 0.01).unwrap();
        let mut p2 = saved_p;
        let mut st2: OptimizerState = serde_json::from_str(&saved).unwrap();
        adam_step(&mut p2, &[vec![0.2, 0.4]], &mut st2, 0.01).unwrap();
        assert_eq!(p, p2);
        assert_eq!(st, st2);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1]]);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig {
            selection_metric: SelectionMetric::BleuAvg4,
            scst_lr: 1e-5,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in cfg.entries() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("d_model", "3").unwrap());
        assert!(back.set("selection_metric", "meteor").is_err());
        for bad in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { scst_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let (data, _, base) = toy(8, 16);
        let cfg = ModelConfig {
            vocab_size: 100,
            ..base
        };
        let ck = init_model(&cfg).unwrap();
        let loss = xe_loss(&ck, &data).unwrap();
        let ln_v = (100f64).ln();
        assert!((loss - ln_v).abs() < 0.1 * ln_v, "loss {loss} vs {ln_v}");
    }

    #[test]
    fn memorizes_one_example_and_is_deterministic() {
        let (data, _, cfg) = toy(1, 16);
        let tc = TrainConfig {
            batch_size: 1,
            warmup_steps: 20,
            ..TrainConfig::default()
        };
        let run = || {
            let mut ck = init_model(&cfg).unwrap();
            let mut opt = OptimizerState::new(ck.params.tensors());
            let losses: Vec<f64> = (0..120)
                .map(|e| train_xe_epoch(&mut ck, &data, &tc, &mut opt, e).unwrap().loss)
                .collect();
            (losses, ck)
        };
        let (a, ck) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(a[119] < 0.05, "final loss {}", a[119]);
        assert_eq!(ck.state, TrainerState { step: 120, stage: Stage::Xe });
        assert!(train_xe_epoch(&mut ck.clone(), &[], &tc, &mut OptimizerState::new(ck.params.tensors()), 0).is_err());
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let (data, _, cfg) = toy(2, 16);
        let ck = init_model(&cfg).unwrap();
        let tokens = [5, 6, 2];
        let g = policy_gradient(&ck, &[(&data[0].image, &tokens, 0.0), (&data[1].image, &tokens, 0.0)]).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
        let g = policy_gradient(&ck, &[(&data[0].image, &tokens, 0.7)]).unwrap();
        assert!(global_norm(&g) > 0.0);
    }

    #[test]
    fn constant_reward_has_zero_expected_gradient() {
        // every caption scores the same, so every advantage is exactly zero
        let (data, vocab, cfg) = toy(2, 16);
        let mut ck = init_model(&cfg).unwrap();
        ck.state.step = 1;
        let before = ck.params.clone();
        let stats = build_corpus_stats(&[vec![vec!["x".to_string()]]]);
        let tc = TrainConfig::default();
        let mut opt = OptimizerState::new(ck.params.tensors());
        let batch: Vec<&Prepared> = data.iter().collect();
        let recs = scst_step(&mut ck, &batch, &vocab, &tc, &mut opt, &stats, 0).unwrap();
        assert!(recs.iter().all(|r| r.advantage == 0.0 && r.advantage == r.sampled_reward - r.greedy_reward));
        assert_eq!(ck.params, before);
        assert_eq!(ck.state.stage, Stage::Scst);
    }

    #[test]
    fn scst_refuses_fresh_model() {
        let (data, vocab, cfg) = toy(2, 16);
        let mut ck = init_model(&cfg).unwrap();
        let stats = build_corpus_stats(&[data[0].refs.clone()]);
        let mut opt = OptimizerState::new(ck.params.tensors());
        let batch: Vec<&Prepared> = data.iter().collect();
        let err = scst_step(&mut ck, &batch, &vocab, &TrainConfig::default(), &mut opt, &stats, 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        // the whole-run entry point refuses too, even with no steps scheduled
        let fresh = init_model(&cfg).unwrap();
        let err = run_two_stage(&data[..1], &data[1..], &vocab, fresh, &TrainConfig::default(), Stages::Scst).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    fn scored(step: u64, cider: f64) -> Checkpoint {
        let (_, _, cfg) = toy(1, 16);
        let mut c = init_model(&cfg).unwrap();
        c.state.step = step;
        c.scores.insert("cider".into(), cider);
        c
    }

    #[test]
    fn selection_rule() {
        let one = [scored(1, 0.5)];
        assert_eq!(select_best(&one, "cider").unwrap().state.step, 1);
        let three = [scored(1, 0.1), scored(2, 0.3), scored(3, 0.2)];
        assert_eq!(select_best(&three, "cider").unwrap().state.step, 2);
        let tied = [scored(5, 0.4), scored(2, 0.4), scored(9, 0.4)];
        assert_eq!(select_best(&tied, "cider").unwrap().state.step, 2);
        assert!(select_best(&three, "bleu_avg4").is_err());
        assert!(select_best(&[], "cider").is_err());
    }

    #[test]
    fn two_stage_log_and_stopping() {
        let (data, vocab, cfg) = toy(10, 16);
        let (train, dev) = (&data[..7], &data[7..]);
        let tc = TrainConfig {
            batch_size: 4,
            warmup_steps: 10,
            xe_max_epochs: 6,
            scst_max_steps: 4,
            scst_eval_every: 2,
            patience: 1,
            scst_lr: 1e-4,
            ..TrainConfig::default()
        };
        let init = init_model(&cfg).unwrap();
        let out = run_two_stage(train, dev, &vocab, init.clone(), &tc, Stages::Both).unwrap();
        let tags: Vec<Stage> = out.log.iter().map(|r| r.stage).collect();
        let first_scst = tags.iter().position(|s| *s == Stage::Scst).unwrap_or(tags.len());
        assert!(tags[..first_scst].iter().all(|s| *s == Stage::Xe));
        assert!(tags[first_scst..].iter().all(|s| *s == Stage::Scst));
        // patience 1: the XE stage ends at the first epoch that fails to improve
        let xe: Vec<f64> = out.log[..first_scst].iter().map(|r| r.dev.unwrap().cider).collect();
        for i in 1..xe.len() - 1 {
            let best_before = xe[..i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(xe[i] > best_before, "{xe:?}");
        }
        let best_score = out.best.scores["cider"];
        let all: Vec<f64> = out.log.iter().filter_map(|r| r.dev.map(|d| d.cider)).collect();
        assert_eq!(best_score, all.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let again = run_two_stage(train, dev, &vocab, init, &tc, Stages::Both).unwrap();
        let lines = |o: &TrainOutcome| o.log.iter().map(LogRecord::to_line).collect::<Vec<_>>();
        assert_eq!(lines(&out), lines(&again));
        assert!(lines(&out)[0].starts_with("stage=xe step="));
    }

    #[test]
    fn two_stage_rejects_bad_splits() {
        let (data, vocab, cfg) = toy(4, 16);
        let init = init_model(&cfg).unwrap();
        let tc = TrainConfig::default();
        assert!(run_two_stage(&data[..3], &data[2..], &vocab, init.clone(), &tc, Stages::Xe).is_err());
        assert!(run_two_stage(&data, &[], &vocab, init.clone(), &tc, Stages::Xe).is_err());
        let scst = TrainConfig { scst_max_steps: 2, ..tc };
        let err = run_two_stage(&data[..3], &data[3..], &vocab, init, &scst, Stages::Scst).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
