//! Continual-learning trainers: fine-tuning, experience replay, A-GEM and
//! their decoder-aware variants, plus the plateau scheduler.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, ToyMASRModel};
use crate::numerics::{flatten_grads, unflatten_grads, GradientVector, GroupSet, ParamGroup, Tensor};
use crate::tasks::{rng_for, ReplayBuffer, TaskDataset};
use crate::vocab::{TokenId, TokenSet, Vocab};

/// Below this squared norm the reference gradient is treated as zero.
pub const DEGENERATE_NORM_SQ: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "ER")]
    Er,
    #[serde(rename = "AGEM")]
    Agem,
    #[serde(rename = "ER_M")]
    ErM,
    #[serde(rename = "AGEM_M")]
    AgemM,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ft, Method::Er, Method::Agem, Method::ErM, Method::AgemM];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ft => "FT",
            Method::Er => "ER",
            Method::Agem => "AGEM",
            Method::ErM => "ER_M",
            Method::AgemM => "AGEM_M",
        }
    }

    pub fn needs_replay(self) -> bool {
        !matches!(self, Method::Ft)
    }

    pub fn is_agem(self) -> bool {
        matches!(self, Method::Agem | Method::AgemM)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "FT" => Ok(Method::Ft),
            "ER" => Ok(Method::Er),
            "AGEM" => Ok(Method::Agem),
            "ERM" => Ok(Method::ErM),
            "AGEMM" => Ok(Method::AgemM),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbeddingStrategy {
    FullShared,
    TaskWiseCopy,
    PartialUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    /// Not covered by the projection guarantees; gradients are projected
    /// before the moment estimates see them.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub anneal_factor: f64,
    pub improvement_threshold: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            anneal_factor: 0.5,
            improvement_threshold: 0.0025,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub method: Method,
    pub beta: f64,
    pub lr0: f64,
    pub batch_size: usize,
    /// Replay samples drawn per new-task batch.
    pub replay_batch_size: usize,
    /// Fraction of each old language's training split kept for replay.
    pub replay_fraction: f64,
    pub epochs: usize,
    pub val_split_n: usize,
    pub surgery_scope: GroupSet,
    pub embedding_strategy: EmbeddingStrategy,
    pub suppression_enabled: bool,
    pub scheduler: SchedulerConfig,
    pub optimizer: OptimizerKind,
    /// Global L2 clip over trainable gradients, applied after surgery and
    /// masking. `None` disables it.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: Method::Ft,
            beta: 1.0,
            lr0: 0.05,
            batch_size: 4,
            replay_batch_size: 4,
            replay_fraction: 0.1,
            epochs: 2,
            val_split_n: 32,
            surgery_scope: GroupSet::all_trainable(),
            embedding_strategy: EmbeddingStrategy::FullShared,
            suppression_enabled: false,
            scheduler: SchedulerConfig::default(),
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Canonical settings for `method`. Every method validates every 1/32
    /// epoch; the modified variants add the embedding and decoding changes.
    pub fn preset(method: Method) -> Self {
        let base = Self {
            method,
            val_split_n: 32,
            ..Self::default()
        };
        match method {
            Method::Ft | Method::Er | Method::Agem => base,
            Method::ErM => Self {
                embedding_strategy: EmbeddingStrategy::PartialUpdate,
                suppression_enabled: true,
                ..base
            },
            Method::AgemM => Self {
                surgery_scope: GroupSet::decoder_layers(),
                embedding_strategy: EmbeddingStrategy::PartialUpdate,
                suppression_enabled: true,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta {} must be finite and non-negative", self.beta));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.val_split_n == 0 {
            return bad("batch_size, epochs and val_split_n must be positive".into());
        }
        if self.method.needs_replay() && self.replay_batch_size == 0 {
            return bad("replay_batch_size must be positive for replay methods".into());
        }
        if self.method.is_agem() && self.surgery_scope.is_empty() {
            return Err(Error::EmptyScope);
        }
        if self.max_grad_norm.is_some_and(|c| !(c > 0.0) || !c.is_finite()) {
            return bad("max_grad_norm must be positive".into());
        }
        let s = &self.scheduler;
        if !(s.anneal_factor > 0.0 && s.anneal_factor <= 1.0) || !(s.improvement_threshold >= 0.0) {
            return bad("scheduler anneal_factor must be in (0, 1], threshold non-negative".into());
        }
        Ok(())
    }
}

/// `new_loss + beta * sum(replay_losses)`
pub fn er_loss(new_loss: f64, replay_losses: &[f64], beta: f64) -> f64 {
    new_loss + beta * replay_losses.iter().sum::<f64>()
}

/// Projects `g_new` onto the half-space `<g, g_ref> >= 0`.
pub fn agem_project(g_new: &GradientVector, g_ref: &GradientVector) -> Result<GradientVector> {
    let d = g_new.dot(g_ref)?;
    if d >= 0.0 {
        return Ok(g_new.clone());
    }
    let nn = g_ref.norm_sq();
    if nn < DEGENERATE_NORM_SQ {
        return Ok(g_new.clone());
    }
    let c = d / nn;
    let data = g_new.data.iter().zip(&g_ref.data).map(|(b, a)| b - c * a).collect();
    Ok(GradientVector {
        scope: g_new.scope,
        data,
        layout: g_new.layout.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurgeryReport {
    /// Inner product of the scoped new-task and reference gradients.
    pub dot_before: f64,
    pub projected: bool,
}

/// A-GEM surgery restricted to `scope`: the model's current gradients are
/// the new-task gradients, `reference` holds the replay gradients flattened
/// over the same scope. Out-of-scope gradients are left untouched.
pub fn scoped_surgery(
    model: &mut ToyMASRModel,
    reference: &GradientVector,
    scope: GroupSet,
) -> Result<SurgeryReport> {
    if scope.is_empty() {
        return Err(Error::EmptyScope);
    }
    if reference.scope != scope {
        return Err(Error::Layout(format!(
            "reference scope {:?} differs from {:?}",
            reference.scope, scope
        )));
    }
    let g_new = flatten_grads(model.params(), scope)?;
    let dot_before = g_new.dot(reference)?;
    let projected = agem_project(&g_new, reference)?;
    let changed = projected.data != g_new.data;
    if changed {
        unflatten_grads(model.params_mut(), &projected)?;
    }
    Ok(SurgeryReport {
        dot_before,
        projected: changed,
    })
}

/// Zeroes every gradient row whose token is not in `used` (PartialUpdate);
/// the other strategies leave the gradient unchanged.
pub fn embedding_grad_mask(grad: &mut Tensor, strategy: EmbeddingStrategy, used: &TokenSet) {
    if strategy != EmbeddingStrategy::PartialUpdate {
        return;
    }
    for r in 0..grad.rows() {
        if !used.contains(r) {
            grad.row_mut(r).fill(0.0);
        }
    }
}

/// Number of optimizer steps between validations.
pub fn validation_interval(steps_per_epoch: usize, val_split_n: usize) -> Result<usize> {
    if val_split_n == 0 || val_split_n > steps_per_epoch {
        return Err(Error::Config(format!(
            "val_split_n {val_split_n} exceeds {steps_per_epoch} steps per epoch"
        )));
    }
    Ok(steps_per_epoch / val_split_n)
}

/// Whether to validate after within-epoch step `step_index` (0-based).
///
/// Validation happens every `floor(steps_per_epoch / n)` steps, and at most
/// `n` times per epoch, so trailing remainder steps never validate.
pub fn should_validate(step_index: usize, steps_per_epoch: usize, val_split_n: usize) -> Result<bool> {
    let interval = validation_interval(steps_per_epoch, val_split_n)?;
    let k = step_index + 1;
    Ok(k % interval == 0 && k / interval <= val_split_n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub lr0: f64,
    pub current_lr: f64,
    /// `None` until the first validation.
    pub best_val_loss: Option<f64>,
    pub anneal_factor: f64,
    pub improvement_threshold: f64,
    pub validations_seen: usize,
    pub reductions: u32,
}

impl SchedulerState {
    pub fn new(lr0: f64, cfg: &SchedulerConfig) -> Self {
        Self {
            lr0,
            current_lr: lr0,
            best_val_loss: None,
            anneal_factor: cfg.anneal_factor,
            improvement_threshold: cfg.improvement_threshold,
            validations_seen: 0,
            reductions: 0,
        }
    }
}

/// Plateau rule: anneal when the relative improvement over the best loss so
/// far falls below the threshold, otherwise record a new best.
pub fn scheduler_step(state: &mut SchedulerState, val_loss: f64) -> Result<()> {
    if !val_loss.is_finite() {
        return Err(Error::NonFinite(val_loss));
    }
    state.validations_seen += 1;
    let improved = match state.best_val_loss {
        None => true,
        Some(best) => {
            let rel = if best.abs() > 0.0 {
                (best - val_loss) / best.abs()
            } else {
                best - val_loss
            };
            rel >= state.improvement_threshold
        }
    };
    if improved {
        state.best_val_loss = Some(val_loss);
    } else {
        state.reductions += 1;
        state.current_lr = state.lr0 * state.anneal_factor.powi(state.reductions as i32);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter.
    pub fn apply(&mut self, model: &mut ToyMASRModel, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => model.sgd_step(lr),
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                self.step += 1;
                let t = self.step as i32;
                let params = model.params_mut();
                if self.moments.len() < params.len() {
                    self.moments.resize(params.len(), (Vec::new(), Vec::new()));
                }
                for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
                    if !p.trainable {
                        continue;
                    }
                    if m.len() != p.value.len() {
                        m.resize(p.value.len(), 0.0);
                        v.resize(p.value.len(), 0.0);
                    }
                    let decay = if p.group() == ParamGroup::TokenEmbedding { 0.0 } else { weight_decay };
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..p.value.len() {
                        let g = p.grad.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        if m[i] == 0.0 && decay == 0.0 {
                            continue;
                        }
                        let x = &mut p.value.data_mut()[i];
                        *x -= lr * ((m[i] / c1) / ((v[i] / c2).sqrt() + eps) + decay * *x);
                    }
                }
            }
        }
    }
}

/// Per-task context shared by every step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub pad_id: TokenId,
    /// Token-embedding parameter trained for the new task.
    pub embedding: usize,
    pub used_tokens: &'a TokenSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub new_loss: f64,
    /// Per-old-language replay losses, in sorted language order.
    pub replay_losses: Vec<f64>,
    pub loss: f64,
    pub surgery_dot: Option<f64>,
    pub projected: bool,
}

fn grouped_by_language<'a>(batch: &[&'a Example]) -> Vec<Vec<&'a Example>> {
    let mut langs: Vec<&str> = batch.iter().map(|e| e.language.as_str()).collect();
    langs.sort_unstable();
    langs.dedup();
    langs
        .into_iter()
        .map(|l| batch.iter().copied().filter(|e| e.language == l).collect())
        .collect()
}

/// Rescales trainable gradients so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(model: &mut ToyMASRModel, max_norm: f64) -> f64 {
    let norm = model
        .params()
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in model.params_mut().iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

/// One optimizer step for the configured method. Gradients are zeroed first.
pub fn train_step(
    model: &mut ToyMASRModel,
    new_batch: &[&Example],
    replay: Option<&[&Example]>,
    cfg: &TrainerConfig,
    ctx: StepContext<'_>,
    lr: f64,
    optimizer: &mut OptimizerState,
) -> Result<StepRecord> {
    if new_batch.is_empty() {
        return Err(Error::Sampling("empty new-task batch".into()));
    }
    let replay = if cfg.method.needs_replay() {
        match replay {
            Some(r) if !r.is_empty() => Some(r),
            _ => return Err(Error::Config(format!("{} requires a replay batch", cfg.method))),
        }
    } else {
        None
    };
    model.zero_grads();
    let mut record = StepRecord {
        new_loss: 0.0,
        replay_losses: Vec::new(),
        loss: 0.0,
        surgery_dot: None,
        projected: false,
    };
    match cfg.method {
        Method::Ft => {
            record.new_loss = model.accumulate_group(new_batch, ctx.pad_id, 1.0)?;
            record.loss = record.new_loss;
        }
        Method::Er | Method::ErM => {
            record.new_loss = model.accumulate_group(new_batch, ctx.pad_id, 1.0)?;
            for group in grouped_by_language(replay.expect("replay checked")) {
                let l = model.accumulate_group(&group, ctx.pad_id, cfg.beta)?;
                record.replay_losses.push(l);
            }
            record.loss = er_loss(record.new_loss, &record.replay_losses, cfg.beta);
        }
        Method::Agem | Method::AgemM => {
            let r = replay.expect("replay checked");
            let replay_loss = model.accumulate_group(r, ctx.pad_id, 1.0)?;
            let reference = flatten_grads(model.params(), cfg.surgery_scope)?;
            model.zero_grads();
            record.new_loss = model.accumulate_group(new_batch, ctx.pad_id, 1.0)?;
            let report = scoped_surgery(model, &reference, cfg.surgery_scope)?;
            record.replay_losses.push(replay_loss);
            record.loss = record.new_loss;
            record.surgery_dot = Some(report.dot_before);
            record.projected = report.projected;
        }
    }
    let emb = &mut model.params_mut()[ctx.embedding];
    embedding_grad_mask(&mut emb.grad, cfg.embedding_strategy, ctx.used_tokens);
    if !record.loss.is_finite() {
        return Err(Error::NonFinite(record.loss));
    }
    if let Some(c) = cfg.max_grad_norm {
        clip_grad_norm(model, c);
    }
    optimizer.apply(model, lr);
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub task: String,
    pub step: usize,
    pub split_index: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn write_history_jsonl(records: &[HistoryRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history_jsonl(text: &str) -> Result<Vec<HistoryRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn examples_for(samples: &[crate::tasks::Sample], vocab: &Vocab) -> Result<Vec<Example>> {
    samples.iter().map(|s| Example::from_sample(s, vocab)).collect()
}

/// Trains on `tasks` in order. Missing LID tokens are added to `vocab` and
/// the model before each task; after each task its training data joins
/// `replay`, and `after_task(stage, model, vocab)` is invoked.
pub fn run_adaptation<F>(
    model: &mut ToyMASRModel,
    vocab: &mut Vocab,
    tasks: &[&TaskDataset],
    replay: &mut ReplayBuffer,
    cfg: &TrainerConfig,
    mut after_task: F,
) -> Result<Vec<HistoryRecord>>
where
    F: FnMut(usize, &ToyMASRModel, &Vocab) -> Result<()>,
{
    cfg.validate()?;
    let mut history = Vec::new();
    for (stage, ds) in tasks.iter().enumerate() {
        if cfg.method.needs_replay() && replay.is_empty() {
            return Err(Error::Config(format!("{} requires old-task replay data", cfg.method)));
        }
        let lang = ds.language.as_str();
        if vocab.lid_id(lang).is_none() {
            model.extend_for_language(vocab, lang)?;
        }
        let shared = model.token_embedding_index();
        let shared_trainable = model.params()[shared].trainable;
        if cfg.embedding_strategy == EmbeddingStrategy::TaskWiseCopy {
            if model.task_embedding_index(lang).is_none() {
                model.add_task_embedding(lang)?;
            }
            model.params_mut()[shared].trainable = false;
        }
        let result = train_task(model, vocab, ds, replay, cfg, &mut history);
        model.params_mut()[shared].trainable = shared_trainable;
        result?;
        replay.add(ds)?;
        after_task(stage, model, vocab)?;
    }
    Ok(history)
}

fn train_task(
    model: &mut ToyMASRModel,
    vocab: &Vocab,
    ds: &TaskDataset,
    replay: &ReplayBuffer,
    cfg: &TrainerConfig,
    history: &mut Vec<HistoryRecord>,
) -> Result<()> {
    let lang = ds.language.as_str();
    let train = examples_for(&ds.train, vocab)?;
    let val = examples_for(&ds.val, vocab)?;
    let val_refs: Vec<&Example> = val.iter().collect();
    let targets = ds.train_targets();
    let used = vocab.used_token_set(&targets)?;
    let ctx = StepContext {
        pad_id: vocab.pad_id(),
        embedding: model.embedding_index_for(lang),
        used_tokens: &used,
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    validation_interval(steps_per_epoch, cfg.val_split_n)?;
    let mut sched = SchedulerState::new(cfg.lr0, &cfg.scheduler);
    let mut optimizer = OptimizerState::new(cfg.optimizer);
    let mut order_rng = rng_for(cfg.seed, &format!("order/{lang}"));
    let mut replay_rng = rng_for(cfg.seed, &format!("replay-batch/{lang}"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut split_index = 0;
    let mut since = (0.0, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&j| &train[j]).collect();
            let replay_examples = if cfg.method.needs_replay() {
                let samples = replay.sample_batch(cfg.replay_batch_size, &mut replay_rng)?;
                Some(
                    samples
                        .into_iter()
                        .map(|s| Example::from_sample(s, vocab))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let replay_refs: Option<Vec<&Example>> = replay_examples.as_ref().map(|v| v.iter().collect());
            let rec = train_step(
                model,
                &batch,
                replay_refs.as_deref(),
                cfg,
                ctx,
                sched.current_lr,
                &mut optimizer,
            )?;
            since.0 += rec.loss;
            since.1 += 1;
            step += 1;
            if should_validate(i, steps_per_epoch, cfg.val_split_n)? {
                let val_loss = model.mean_loss(&val_refs, vocab.pad_id())?;
                scheduler_step(&mut sched, val_loss)?;
                history.push(HistoryRecord {
                    task: lang.to_string(),
                    step,
                    split_index,
                    train_loss: since.0 / since.1 as f64,
                    val_loss,
                    lr: sched.current_lr,
                });
                split_index += 1;
                since = (0.0, 0);
            }
        }
    }
    Ok(())
}
