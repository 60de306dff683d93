//! Experiment configuration and protocols: pre-training, the pair and
//! sequential adaptation settings, the ablation grid and hyper-parameter
//! sweeps. Every protocol returns a [`RunLog`] and can write its artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cl::{
    examples_for, run_adaptation, scheduler_step, EmbeddingStrategy, HistoryRecord, Method, OptimizerKind,
    SchedulerConfig, SchedulerState, TrainerConfig,
};
use crate::decoding::{greedy_decode, DecodeOptions, HypothesisRecord, SuppressionTarget};
use crate::error::{Error, Result};
use crate::metrics::{
    mean, summary_csv, wer_text, EvalMode, LanguageRole, ResultRow, ResultsTable, SummaryRow, WerRecord,
};
use crate::model::{Example, ModelConfig, ToyMASRModel};
use crate::numerics::GroupSet;
use crate::tasks::{
    build_replay_buffer, derive_seed, encode_dataset, generate_dataset, make_language, rng_for, DatasetSidecar,
    LanguageOptions, LanguageSpec, TaskDataset, MAX_PHONEMES_PER_UTTERANCE,
};
use crate::vocab::Vocab;
use rand::seq::SliceRandom;

pub const SCHEMA_VERSION: u32 = 1;
pub const NONE_METHOD: &str = "None";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageDef {
    pub name: String,
    /// Characters only this language may use.
    pub exclusive_pool: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub alphabet: String,
    /// Characters every language may draw from.
    pub shared_pool: String,
    pub languages: Vec<LanguageDef>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub options: LanguageOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        let def = |name: &str, pool: &str| LanguageDef {
            name: name.into(),
            exclusive_pool: pool.into(),
        };
        Self {
            alphabet: "abcdefghijklmnopqrstuvwxyz".into(),
            shared_pool: "abcdefghij".into(),
            languages: vec![
                def("L1", "klm"),
                def("L2", "nop"),
                def("N1", "qrs"),
                def("N2", "tuv"),
                def("N3", "wxyz"),
            ],
            n_train: 500,
            n_val: 50,
            n_test: 50,
            options: LanguageOptions {
                accent_scale: 0.5,
                ..LanguageOptions::default()
            },
        }
    }
}

/// Model dimensions; the vocabulary size and seed are filled in by the lab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_len: m.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub languages: Vec<String>,
    /// Epoch cap.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stop once every old language's validation WER is at or below this.
    pub mastery_wer: f64,
    /// Reuse a saved checkpoint instead of training; the vocabulary is read
    /// from `vocab.txt` next to it.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            languages: vec!["L1".into(), "L2".into()],
            epochs: 30,
            lr: 0.1,
            batch_size: 4,
            mastery_wer: 0.05,
            checkpoint: None,
        }
    }
}

/// Trainer fields shared by every method; method presets supply the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommonTrainer {
    pub lr0: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    pub replay_fraction: f64,
    pub scheduler: SchedulerConfig,
    pub optimizer: OptimizerKind,
    pub max_grad_norm: Option<f64>,
}

impl Default for CommonTrainer {
    fn default() -> Self {
        let t = TrainerConfig::default();
        Self {
            lr0: t.lr0,
            beta: t.beta,
            epochs: t.epochs,
            batch_size: t.batch_size,
            replay_batch_size: t.replay_batch_size,
            replay_fraction: t.replay_fraction,
            scheduler: t.scheduler,
            optimizer: t.optimizer,
            max_grad_norm: t.max_grad_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairDirection {
    /// Adapt to the new language, measure forgetting on the old ones.
    #[default]
    AdaptNew,
    /// Continue training on the first pre-trained language and evaluate the
    /// unseen new language alongside.
    AdaptOld,
}

/// Per-method values that replace the shared trainer settings, as chosen
/// by a hyper-parameter sweep.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodOverride {
    pub lr0: Option<f64>,
    pub beta: Option<f64>,
    pub val_split_n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub new_languages: Vec<String>,
    pub methods: Vec<Method>,
    pub trainer: CommonTrainer,
    pub overrides: BTreeMap<Method, MethodOverride>,
    pub pair_direction: PairDirection,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            new_languages: vec!["N1".into()],
            methods: Method::ALL.to_vec(),
            trainer: CommonTrainer::default(),
            overrides: BTreeMap::new(),
            pair_direction: PairDirection::AdaptNew,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub modes: Vec<EvalMode>,
    /// Forces suppression on or off for every method; `None` follows each
    /// method's own setting.
    pub suppression: Option<bool>,
    pub suppression_target: SuppressionTarget,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: vec![EvalMode::Aware, EvalMode::Agnostic],
            suppression: None,
            suppression_target: SuppressionTarget::AllLid,
        }
    }
}

/// Hyper-parameter grid. An empty list keeps the configured value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub beta: Vec<f64>,
    pub lr0: Vec<f64>,
    pub val_split_n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Root seed; data, model and trainer seeds are derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelDims,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub sweep: Option<SweepConfig>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelDims::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
            sweep: None,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        let known: Vec<&str> = self.data.languages.iter().map(|l| l.name.as_str()).collect();
        for l in self.pretrain.languages.iter().chain(&self.adapt.new_languages) {
            if !known.contains(&l.as_str()) {
                return bad(format!("language {l} is not defined in data.languages"));
            }
        }
        if self.pretrain.languages.is_empty() {
            return bad("at least one pre-training language is required".into());
        }
        if let Some(l) = self.adapt.new_languages.iter().find(|l| self.pretrain.languages.contains(l)) {
            return bad(format!("{l} is both pre-trained and new"));
        }
        if self.eval.modes.is_empty() {
            return bad("eval.modes is empty".into());
        }
        let longest = 2 + 2 * MAX_PHONEMES_PER_UTTERANCE + (MAX_PHONEMES_PER_UTTERANCE - 1);
        if self.model.max_len < longest {
            return bad(format!("model.max_len {} below longest sequence {longest}", self.model.max_len));
        }
        if self.data.options.feat_dim < self.data.options.phoneme_count {
            return bad("data.options.feat_dim below phoneme_count".into());
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return bad("pretrain epochs, batch_size and lr must be positive".into());
        }
        Ok(())
    }

    /// Trainer for `method`: the preset, then the shared fields, then any
    /// per-method override.
    pub fn trainer_for(&self, method: Method) -> TrainerConfig {
        let c = &self.adapt.trainer;
        let o = self.adapt.overrides.get(&method).copied().unwrap_or_default();
        let t = TrainerConfig {
            lr0: c.lr0,
            beta: c.beta,
            epochs: c.epochs,
            batch_size: c.batch_size,
            replay_batch_size: c.replay_batch_size,
            replay_fraction: c.replay_fraction,
            scheduler: c.scheduler,
            optimizer: c.optimizer,
            max_grad_norm: c.max_grad_norm,
            seed: derive_seed(self.seed, "trainer"),
            ..TrainerConfig::preset(method)
        };
        TrainerConfig {
            lr0: o.lr0.unwrap_or(t.lr0),
            beta: o.beta.unwrap_or(t.beta),
            val_split_n: o.val_split_n.unwrap_or(t.val_split_n),
            ..t
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            feat_dim: self.data.options.feat_dim,
            max_len: self.model.max_len,
            vocab_size,
            seed: derive_seed(self.seed, "model"),
        }
    }
}

/// Languages, the base vocabulary and all generated datasets.
#[derive(Debug, Clone)]
pub struct Lab {
    pub vocab: Vocab,
    pub specs: BTreeMap<String, LanguageSpec>,
    pub datasets: BTreeMap<String, TaskDataset>,
    pub alphabet: Vec<char>,
}

impl Lab {
    pub fn dataset(&self, lang: &str) -> Result<&TaskDataset> {
        self.datasets
            .get(lang)
            .ok_or_else(|| Error::Config(format!("no dataset for {lang}")))
    }

    pub fn spec(&self, lang: &str) -> Result<&LanguageSpec> {
        self.specs
            .get(lang)
            .ok_or_else(|| Error::Config(format!("no language {lang}")))
    }
}

pub fn build_lab(cfg: &ExperimentConfig) -> Result<Lab> {
    cfg.validate()?;
    let alphabet: Vec<char> = cfg.data.alphabet.chars().collect();
    let shared: Vec<char> = cfg.data.shared_pool.chars().collect();
    let old: Vec<&str> = cfg.pretrain.languages.iter().map(String::as_str).collect();
    let vocab = Vocab::build(&alphabet, &old)?;
    let mut specs = BTreeMap::new();
    let mut datasets = BTreeMap::new();
    let lang_seed = derive_seed(cfg.seed, "languages");
    let data_seed = derive_seed(cfg.seed, "data");
    for def in &cfg.data.languages {
        let pool: Vec<char> = def.exclusive_pool.chars().collect();
        let spec = make_language(&def.name, &alphabet, &shared, &pool, lang_seed, &cfg.data.options)?;
        let ds = generate_dataset(&spec, &vocab, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, data_seed)?;
        specs.insert(def.name.clone(), spec);
        datasets.insert(def.name.clone(), ds);
    }
    Ok(Lab {
        vocab,
        specs,
        datasets,
        alphabet,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

/// Corpus-level WER of one language in one mode: error counts summed over
/// all utterances of the split.
pub fn evaluate_language(
    model: &ToyMASRModel,
    vocab: &Vocab,
    ds: &TaskDataset,
    split: Split,
    mode: EvalMode,
    suppression: bool,
    target: SuppressionTarget,
    hyps: Option<&mut Vec<HypothesisRecord>>,
) -> Result<WerRecord> {
    let samples = match split {
        Split::Val => &ds.val,
        Split::Test => &ds.test,
    };
    let max_len = model.config().max_len + 1;
    let mut options = match mode {
        EvalMode::Aware => DecodeOptions::aware(&ds.language, suppression, max_len),
        EvalMode::Agnostic => DecodeOptions::agnostic(suppression, max_len),
    };
    options.suppression_target = target;
    let mut total = WerRecord::default();
    let mut out = Vec::new();
    for s in samples {
        let reference = vocab.decode(&s.target[..s.target.len() - 1])?;
        let h = greedy_decode(model, &s.features, &options, vocab)?;
        total.merge(&wer_text(&reference, &h.text)?);
        if hyps.is_some() {
            out.push(HypothesisRecord {
                language_ref: ds.language.clone(),
                predicted_lid: h.predicted_lid.clone(),
                text_ref: reference,
                text_hyp: h.text,
                truncated: h.truncated,
            });
        }
    }
    if let Some(h) = hyps {
        h.extend(out);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Mean validation WER (aware mode) over the old languages.
    pub val_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs_run: usize,
    pub mastered: bool,
    pub warning: Option<String>,
    pub val_wer: BTreeMap<String, f64>,
    pub history: Vec<PretrainEpoch>,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: ToyMASRModel,
    pub vocab: Vocab,
    pub summary: PretrainSummary,
}

impl Pretrained {
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        self.model.to_checkpoint_bytes()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn old_language_wers(model: &ToyMASRModel, vocab: &Vocab, lab: &Lab, langs: &[String]) -> Result<BTreeMap<String, f64>> {
    langs
        .iter()
        .map(|l| {
            let rec = evaluate_language(
                model,
                vocab,
                lab.dataset(l)?,
                Split::Val,
                EvalMode::Aware,
                false,
                SuppressionTarget::AllLid,
                None,
            )?;
            Ok((l.clone(), rec.wer()))
        })
        .collect()
}

/// Joint training on every old language until mastery or the epoch cap.
pub fn pretrain_base_model(cfg: &ExperimentConfig, lab: &Lab) -> Result<Pretrained> {
    let p = &cfg.pretrain;
    if let Some(path) = &p.checkpoint {
        return load_pretrained(cfg, lab, path);
    }
    let vocab = lab.vocab.clone();
    let mut model = ToyMASRModel::new(cfg.model_config(vocab.len()))?;
    let mut train: Vec<Example> = Vec::new();
    let mut val: Vec<Example> = Vec::new();
    for l in &p.languages {
        let ds = lab.dataset(l)?;
        train.extend(examples_for(&ds.train, &vocab)?);
        val.extend(examples_for(&ds.val, &vocab)?);
    }
    let val_refs: Vec<&Example> = val.iter().collect();
    let mut rng = rng_for(cfg.seed, "pretrain/order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sched = SchedulerState::new(p.lr, &SchedulerConfig::default());
    let mut history = Vec::new();
    let mut mastered = false;
    let mut wers = BTreeMap::new();
    for epoch in 1..=p.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(p.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            loss_sum += model.loss_and_grads(&batch, vocab.pad_id())?;
            model.sgd_step(sched.current_lr);
            steps += 1;
        }
        let val_loss = model.mean_loss(&val_refs, vocab.pad_id())?;
        scheduler_step(&mut sched, val_loss)?;
        wers = old_language_wers(&model, &vocab, lab, &p.languages)?;
        let val_wer = mean(&wers.values().copied().collect::<Vec<_>>())?;
        history.push(PretrainEpoch {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_loss,
            lr: sched.current_lr,
            val_wer,
        });
        if wers.values().all(|&w| w <= p.mastery_wer) {
            mastered = true;
            break;
        }
    }
    let warning = (!mastered).then(|| {
        format!(
            "mastery WER {} not reached within {} epochs: {:?}",
            p.mastery_wer, p.epochs, wers
        )
    });
    let checkpoint_sha256 = sha256_hex(&model.to_checkpoint_bytes()?);
    Ok(Pretrained {
        summary: PretrainSummary {
            epochs_run: history.len(),
            mastered,
            warning,
            val_wer: wers,
            history,
            checkpoint_sha256,
        },
        model,
        vocab,
    })
}

fn load_pretrained(cfg: &ExperimentConfig, lab: &Lab, path: &Path) -> Result<Pretrained> {
    let bytes = fs::read(path)?;
    let model = ToyMASRModel::from_checkpoint_bytes(&bytes)?;
    let vocab_path = path.with_file_name("vocab.txt");
    let vocab = Vocab::from_text(&fs::read_to_string(&vocab_path)?)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "{} does not match checkpoint vocabulary size",
            vocab_path.display()
        )));
    }
    let wers = old_language_wers(&model, &vocab, lab, &cfg.pretrain.languages)?;
    let mastered = wers.values().all(|&w| w <= cfg.pretrain.mastery_wer);
    Ok(Pretrained {
        summary: PretrainSummary {
            epochs_run: 0,
            mastered,
            warning: (!mastered).then(|| format!("loaded checkpoint above mastery WER: {wers:?}")),
            val_wer: wers,
            history: Vec::new(),
            checkpoint_sha256: sha256_hex(&bytes),
        },
        model,
        vocab,
    })
}

/// One trained-and-evaluated configuration. `trainer: None` is the
/// unadapted checkpoint (with new LID rows appended but never trained).
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub trainer: Option<TrainerConfig>,
    pub suppression: bool,
}

impl Variant {
    pub fn none(label: &str, suppression: bool) -> Self {
        Self {
            label: label.into(),
            trainer: None,
            suppression,
        }
    }

    pub fn trained(label: &str, trainer: TrainerConfig, suppression: bool) -> Self {
        Self {
            label: label.into(),
            trainer: Some(trainer),
            suppression,
        }
    }

    /// Training identity: variants differing only in decode-time
    /// suppression share one trained model.
    fn training_key(&self) -> Result<String> {
        match &self.trainer {
            None => Ok(NONE_METHOD.into()),
            Some(t) => {
                let mut t = t.clone();
                t.suppression_enabled = false;
                Ok(serde_json::to_string(&t)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub history: Vec<HistoryRecord>,
    /// Rows of every evaluated language and mode for this variant.
    pub rows: Vec<ResultRow>,
    pub hypotheses: Vec<HypothesisRecord>,
}

/// Which tasks are trained and which languages are scored, with roles.
#[derive(Debug, Clone)]
pub struct Protocol {
    pub tasks: Vec<String>,
    pub replay_from: Vec<String>,
    pub eval: Vec<(String, LanguageRole)>,
    pub split: Split,
}

impl Protocol {
    pub fn pair(cfg: &ExperimentConfig) -> Result<Self> {
        if cfg.adapt.new_languages.len() != 1 {
            return Err(Error::Config(format!(
                "the pair setting needs exactly one new language, got {}",
                cfg.adapt.new_languages.len()
            )));
        }
        let new = cfg.adapt.new_languages[0].clone();
        let old = cfg.pretrain.languages.clone();
        let mut eval: Vec<(String, LanguageRole)> = old.iter().map(|l| (l.clone(), LanguageRole::Old)).collect();
        eval.push((new.clone(), LanguageRole::New));
        Ok(match cfg.adapt.pair_direction {
            PairDirection::AdaptNew => Self {
                tasks: vec![new],
                replay_from: old,
                eval,
                split: Split::Test,
            },
            PairDirection::AdaptOld => Self {
                tasks: vec![old[0].clone()],
                replay_from: old[1..].to_vec(),
                eval,
                split: Split::Test,
            },
        })
    }
}

struct Trained {
    model: ToyMASRModel,
    vocab: Vocab,
    history: Vec<HistoryRecord>,
}

fn train_variant(
    cfg: &ExperimentConfig,
    lab: &Lab,
    base: &Pretrained,
    protocol: &Protocol,
    trainer: Option<&TrainerConfig>,
) -> Result<Trained> {
    let mut model = base.model.clone();
    let mut vocab = base.vocab.clone();
    let Some(trainer) = trainer else {
        for (lang, _) in &protocol.eval {
            if vocab.lid_id(lang).is_none() {
                model.extend_for_language(&mut vocab, lang)?;
            }
        }
        return Ok(Trained {
            model,
            vocab,
            history: Vec::new(),
        });
    };
    let old: Vec<&TaskDataset> = protocol
        .replay_from
        .iter()
        .map(|l| lab.dataset(l))
        .collect::<Result<_>>()?;
    let mut replay = build_replay_buffer(&old, trainer.replay_fraction, derive_seed(cfg.seed, "replay"))?;
    let tasks: Vec<&TaskDataset> = protocol.tasks.iter().map(|l| lab.dataset(l)).collect::<Result<_>>()?;
    let history = run_adaptation(&mut model, &mut vocab, &tasks, &mut replay, trainer, |_, _, _| Ok(()))?;
    for (lang, _) in &protocol.eval {
        if vocab.lid_id(lang).is_none() {
            model.extend_for_language(&mut vocab, lang)?;
        }
    }
    Ok(Trained { model, vocab, history })
}

fn evaluate_variant(
    cfg: &ExperimentConfig,
    lab: &Lab,
    protocol: &Protocol,
    trained: &Trained,
    label: &str,
    suppression: bool,
) -> Result<(Vec<ResultRow>, Vec<HypothesisRecord>)> {
    let mut rows = Vec::new();
    let mut hyps = Vec::new();
    for (lang, _) in &protocol.eval {
        for &mode in &cfg.eval.modes {
            let record = evaluate_language(
                &trained.model,
                &trained.vocab,
                lab.dataset(lang)?,
                protocol.split,
                mode,
                suppression,
                cfg.eval.suppression_target,
                Some(&mut hyps),
            )?;
            rows.push(ResultRow {
                method: label.to_string(),
                language: lang.clone(),
                mode,
                record,
            });
        }
    }
    Ok((rows, hyps))
}

/// Trains (with caching of identical trainer settings) and evaluates each
/// variant under `protocol`.
pub fn run_variants(
    cfg: &ExperimentConfig,
    lab: &Lab,
    base: &Pretrained,
    protocol: &Protocol,
    variants: &[Variant],
) -> Result<Vec<VariantOutcome>> {
    let mut cache: BTreeMap<String, Trained> = BTreeMap::new();
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let key = v.training_key()?;
        if !cache.contains_key(&key) {
            let t = train_variant(cfg, lab, base, protocol, v.trainer.as_ref())?;
            cache.insert(key.clone(), t);
        }
        let trained = &cache[&key];
        let (rows, hypotheses) = evaluate_variant(cfg, lab, protocol, trained, &v.label, v.suppression)?;
        out.push(VariantOutcome {
            variant: v.clone(),
            history: trained.history.clone(),
            rows,
            hypotheses,
        });
    }
    Ok(out)
}

/// Suppression used when evaluating `trainer`'s model.
fn eval_suppression(cfg: &ExperimentConfig, trainer: Option<&TrainerConfig>) -> bool {
    cfg.eval
        .suppression
        .unwrap_or_else(|| trainer.is_some_and(|t| t.suppression_enabled))
}

fn method_variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let mut v = vec![Variant::none(NONE_METHOD, eval_suppression(cfg, None))];
    for &m in &cfg.adapt.methods {
        let t = cfg.trainer_for(m);
        let s = eval_suppression(cfg, Some(&t));
        v.push(Variant::trained(m.as_str(), t, s));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodHistory {
    pub method: String,
    #[serde(flatten)]
    pub record: HistoryRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub method: String,
    pub stage: usize,
    pub languages: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: EvalMode,
    pub old_wer: Option<f64>,
    pub new_wer: Option<f64>,
    pub avg_wer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyBlock {
    pub family: String,
    pub checkpoint_sha256: String,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: String,
    pub beta: f64,
    pub lr0: f64,
    pub val_split_n: usize,
    pub val_awer: f64,
    pub winner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub pretrain: PretrainSummary,
    pub roles: BTreeMap<String, LanguageRole>,
    pub history: Vec<MethodHistory>,
    pub results: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    #[serde(default)]
    pub stages: Vec<StageSummary>,
    #[serde(default)]
    pub ablation: Vec<FamilyBlock>,
    #[serde(default)]
    pub sweep: Vec<SweepPoint>,
    pub wall_clock_secs: f64,
    /// File name to SHA-256 of its bytes.
    pub checksums: BTreeMap<String, String>,
    #[serde(skip)]
    pub hypotheses: Vec<HypothesisRecord>,
}

impl RunLog {
    fn new(kind: &str, cfg: &ExperimentConfig, pretrain: &PretrainSummary) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.into(),
            seed: cfg.seed,
            config: cfg.clone(),
            pretrain: pretrain.clone(),
            roles: BTreeMap::new(),
            history: Vec::new(),
            results: Vec::new(),
            summary: Vec::new(),
            stages: Vec::new(),
            ablation: Vec::new(),
            sweep: Vec::new(),
            wall_clock_secs: 0.0,
            checksums: BTreeMap::from([("pretrained.ckpt".to_string(), pretrain.checkpoint_sha256.clone())]),
            hypotheses: Vec::new(),
        }
    }

    pub fn table(&self) -> ResultsTable {
        let mut t = ResultsTable::new();
        for (l, r) in &self.roles {
            t.set_role(l, *r);
        }
        for r in &self.results {
            t.insert(r.clone());
        }
        t
    }

    fn absorb(&mut self, outcomes: Vec<VariantOutcome>) {
        for o in outcomes {
            for h in o.history {
                self.history.push(MethodHistory {
                    method: o.variant.label.clone(),
                    record: h,
                });
            }
            self.results.extend(o.rows);
            self.hypotheses.extend(o.hypotheses);
        }
    }

    fn finish(&mut self, started: Instant) {
        self.summary = self.table().summary_rows();
        self.wall_clock_secs = started.elapsed().as_secs_f64();
    }

    pub fn results_csv(&self) -> Result<String> {
        self.table().to_csv()
    }

    pub fn summary_csv(&self) -> Result<String> {
        summary_csv(&self.summary)
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<(Lab, Pretrained)> {
    let lab = build_lab(cfg)?;
    let base = pretrain_base_model(cfg, &lab)?;
    Ok((lab, base))
}

fn roles_for(protocol: &Protocol) -> BTreeMap<String, LanguageRole> {
    protocol.eval.iter().cloned().collect()
}

pub fn run_pair_setting(cfg: &ExperimentConfig) -> Result<RunLog> {
    let started = Instant::now();
    let (lab, base) = prepare(cfg)?;
    run_pair_with(cfg, &lab, &base, started)
}

pub fn run_pair_with(cfg: &ExperimentConfig, lab: &Lab, base: &Pretrained, started: Instant) -> Result<RunLog> {
    let protocol = Protocol::pair(cfg)?;
    let mut log = RunLog::new("pair", cfg, &base.summary);
    log.roles = roles_for(&protocol);
    let outcomes = run_variants(cfg, lab, base, &protocol, &method_variants(cfg))?;
    log.absorb(outcomes);
    log.finish(started);
    Ok(log)
}

/// Adapts to every new language in order, scoring old and seen-new
/// languages after each stage. Result rows are labelled `METHOD@stage`.
pub fn run_sequential_setting(cfg: &ExperimentConfig) -> Result<RunLog> {
    let started = Instant::now();
    if cfg.adapt.new_languages.len() < 2 {
        return Err(Error::Config("the sequential setting needs at least two new languages".into()));
    }
    let (lab, base) = prepare(cfg)?;
    let mut log = RunLog::new("sequential", cfg, &base.summary);
    for l in &cfg.pretrain.languages {
        log.roles.insert(l.clone(), LanguageRole::Old);
    }
    for l in &cfg.adapt.new_languages {
        log.roles.insert(l.clone(), LanguageRole::New);
    }
    let old: Vec<&TaskDataset> = cfg
        .pretrain
        .languages
        .iter()
        .map(|l| lab.dataset(l))
        .collect::<Result<_>>()?;
    let tasks: Vec<&TaskDataset> = cfg
        .adapt
        .new_languages
        .iter()
        .map(|l| lab.dataset(l))
        .collect::<Result<_>>()?;
    // the unadapted checkpoint, scored on the old languages
    {
        let none = Protocol {
            tasks: Vec::new(),
            replay_from: Vec::new(),
            eval: cfg.pretrain.languages.iter().map(|l| (l.clone(), LanguageRole::Old)).collect(),
            split: Split::Test,
        };
        let outcomes = run_variants(cfg, &lab, &base, &none, &[Variant::none(NONE_METHOD, eval_suppression(cfg, None))])?;
        log.absorb(outcomes);
    }
    for &m in &cfg.adapt.methods {
        let trainer = cfg.trainer_for(m);
        let suppression = eval_suppression(cfg, Some(&trainer));
        let mut model = base.model.clone();
        let mut vocab = base.vocab.clone();
        let mut replay = build_replay_buffer(&old, trainer.replay_fraction, derive_seed(cfg.seed, "replay"))?;
        let mut stage_rows: Vec<(usize, Vec<ResultRow>, Vec<HypothesisRecord>)> = Vec::new();
        let history = run_adaptation(&mut model, &mut vocab, &tasks, &mut replay, &trainer, |stage, model, vocab| {
            let label = format!("{m}@{}", stage + 1);
            let mut rows = Vec::new();
            let mut hyps = Vec::new();
            let langs = cfg
                .pretrain
                .languages
                .iter()
                .chain(cfg.adapt.new_languages.iter().take(stage + 1));
            for lang in langs {
                for &mode in &cfg.eval.modes {
                    let record = evaluate_language(
                        model,
                        vocab,
                        lab.dataset(lang)?,
                        Split::Test,
                        mode,
                        suppression,
                        cfg.eval.suppression_target,
                        Some(&mut hyps),
                    )?;
                    rows.push(ResultRow {
                        method: label.clone(),
                        language: lang.clone(),
                        mode,
                        record,
                    });
                }
            }
            stage_rows.push((stage + 1, rows, hyps));
            Ok(())
        })?;
        for h in history {
            log.history.push(MethodHistory {
                method: m.to_string(),
                record: h,
            });
        }
        for (stage, rows, hyps) in stage_rows {
            let mut t = ResultsTable::new();
            for (l, r) in &log.roles {
                t.set_role(l, *r);
            }
            let languages: Vec<String> = rows.iter().map(|r| r.language.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            for r in &rows {
                t.insert(r.clone());
            }
            log.stages.push(StageSummary {
                method: m.to_string(),
                stage,
                languages,
                rows: t.summary_rows(),
            });
            log.results.extend(rows);
            log.hypotheses.extend(hyps);
        }
    }
    log.finish(started);
    Ok(log)
}

/// The four ablation families as (family name, variants).
pub fn ablation_families(cfg: &ExperimentConfig) -> Vec<(String, Vec<Variant>)> {
    let er = cfg.trainer_for(Method::Er);
    let agem = cfg.trainer_for(Method::Agem);
    let with = |t: &TrainerConfig, f: &dyn Fn(&mut TrainerConfig)| {
        let mut t = t.clone();
        f(&mut t);
        t
    };
    let partial = with(&er, &|t| t.embedding_strategy = EmbeddingStrategy::PartialUpdate);
    let taskwise = with(&er, &|t| t.embedding_strategy = EmbeddingStrategy::TaskWiseCopy);
    let agem_rm = with(&agem, &|t| t.surgery_scope = GroupSet::decoder_layers());
    let er1 = with(&er, &|t| t.val_split_n = 1);
    vec![
        (
            "gradient_surgery_removal".into(),
            vec![
                Variant::trained("AGEM", agem, false),
                Variant::trained("AGEM + rm emb gradient surgery", agem_rm, false),
            ],
        ),
        (
            "partial_embedding_update".into(),
            vec![
                Variant::trained("ER", er.clone(), false),
                Variant::trained("ER + suppress token", er.clone(), true),
                Variant::trained("ER + suppress token + partial emb", partial.clone(), true),
                Variant::trained("ER + suppress token + task-wise emb", taskwise, true),
            ],
        ),
        (
            "lid_token_suppression".into(),
            vec![
                Variant::none("None", false),
                Variant::none("None + suppress token", true),
                Variant::trained("ER + partial emb", partial.clone(), false),
                Variant::trained("ER + partial emb + suppress token", partial, true),
            ],
        ),
        (
            "validation_interval".into(),
            vec![
                Variant::trained("ER + val every epoch", er1, false),
                Variant::trained("ER + val every 1/32 epoch", er, false),
            ],
        ),
    ]
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<RunLog> {
    let started = Instant::now();
    let (lab, base) = prepare(cfg)?;
    let protocol = Protocol::pair(cfg)?;
    let mut log = RunLog::new("ablation", cfg, &base.summary);
    log.roles = roles_for(&protocol);
    let families = ablation_families(cfg);
    // one flat run so that identical trainers are trained once
    let mut all = Vec::new();
    for (family, variants) in &families {
        for v in variants {
            let mut v = v.clone();
            v.label = format!("{family}: {}", v.label);
            all.push(v);
        }
    }
    let outcomes = run_variants(cfg, &lab, &base, &protocol, &all)?;
    let table = {
        let mut t = ResultsTable::new();
        for (l, r) in &log.roles {
            t.set_role(l, *r);
        }
        for o in &outcomes {
            for r in &o.rows {
                t.insert(r.clone());
            }
        }
        t
    };
    for (family, variants) in &families {
        let mut rows = Vec::new();
        for v in variants {
            let label = format!("{family}: {}", v.label);
            for &mode in &cfg.eval.modes {
                let old = table.awer_for(&label, mode, LanguageRole::Old);
                let new = table.awer_for(&label, mode, LanguageRole::New);
                let avg = match (old, new) {
                    (Some(o), Some(n)) => Some((o + n) / 2.0),
                    _ => None,
                };
                rows.push(AblationRow {
                    variant: v.label.clone(),
                    mode,
                    old_wer: old,
                    new_wer: new.filter(|_| v.trainer.is_some()),
                    avg_wer: avg.filter(|_| v.trainer.is_some()),
                });
            }
        }
        log.ablation.push(FamilyBlock {
            family: family.clone(),
            checkpoint_sha256: base.summary.checkpoint_sha256.clone(),
            rows,
        });
    }
    log.absorb(outcomes);
    log.finish(started);
    Ok(log)
}

pub fn ablation_csv(blocks: &[FamilyBlock]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["family", "variant", "mode", "old_wer", "new_wer", "avg_wer"])?;
    let opt = |v: Option<f64>| v.map(crate::metrics::format_rate).unwrap_or_default();
    for b in blocks {
        for r in &b.rows {
            w.write_record([
                b.family.clone(),
                r.variant.clone(),
                r.mode.to_string(),
                opt(r.old_wer),
                opt(r.new_wer),
                opt(r.avg_wer),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|_| Error::Format("csv is not utf-8".into()))
}

/// Grid points in enumeration order (beta, then lr0, then val_split_n).
pub fn sweep_grid(cfg: &ExperimentConfig, method: Method) -> Result<Vec<TrainerConfig>> {
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("no sweep section in config".into()))?;
    let base = cfg.trainer_for(method);
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let betas = or(&grid.beta, base.beta);
    let lrs = or(&grid.lr0, base.lr0);
    let splits = if grid.val_split_n.is_empty() {
        vec![base.val_split_n]
    } else {
        grid.val_split_n.clone()
    };
    let mut out = Vec::new();
    for &beta in &betas {
        for &lr0 in &lrs {
            for &val_split_n in &splits {
                out.push(TrainerConfig {
                    beta,
                    lr0,
                    val_split_n,
                    ..base.clone()
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    Ok(out)
}

/// Full-grid search per method on validation AWER (all evaluated languages
/// and modes); the first best point wins ties. Winners are scored on test.
pub fn sweep(cfg: &ExperimentConfig) -> Result<RunLog> {
    let started = Instant::now();
    let (lab, base) = prepare(cfg)?;
    let test_protocol = Protocol::pair(cfg)?;
    let val_protocol = Protocol {
        split: Split::Val,
        ..test_protocol.clone()
    };
    let mut log = RunLog::new("sweep", cfg, &base.summary);
    log.roles = roles_for(&test_protocol);
    let mut winners = vec![Variant::none(NONE_METHOD, eval_suppression(cfg, None))];
    for &m in &cfg.adapt.methods {
        let grid = sweep_grid(cfg, m)?;
        let mut best: Option<(f64, usize)> = None;
        let mut points = Vec::new();
        for (i, t) in grid.iter().enumerate() {
            let v = Variant::trained(m.as_str(), t.clone(), eval_suppression(cfg, Some(t)));
            let outcome = run_variants(cfg, &lab, &base, &val_protocol, &[v])?;
            let wers: Vec<f64> = outcome[0].rows.iter().map(|r| r.record.wer()).collect();
            let score = mean(&wers)?;
            if best.is_none_or(|(b, _)| score < b) {
                best = Some((score, i));
            }
            points.push(SweepPoint {
                method: m.to_string(),
                beta: t.beta,
                lr0: t.lr0,
                val_split_n: t.val_split_n,
                val_awer: score,
                winner: false,
            });
        }
        let (_, wi) = best.expect("non-empty grid");
        points[wi].winner = true;
        log.sweep.extend(points);
        let t = grid[wi].clone();
        let s = eval_suppression(cfg, Some(&t));
        winners.push(Variant::trained(m.as_str(), t, s));
    }
    let outcomes = run_variants(cfg, &lab, &base, &test_protocol, &winners)?;
    log.absorb(outcomes);
    log.finish(started);
    Ok(log)
}

pub fn sweep_csv(points: &[SweepPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "beta", "lr0", "val_split_n", "val_awer", "winner"])?;
    for p in points {
        w.write_record([
            p.method.clone(),
            p.beta.to_string(),
            p.lr0.to_string(),
            p.val_split_n.to_string(),
            crate::metrics::format_rate(p.val_awer),
            p.winner.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|_| Error::Format("csv is not utf-8".into()))
}

/// Writes results.csv, summary.csv, history.jsonl, hypotheses.jsonl,
/// protocol-specific tables and finally runlog.json with checksums.
pub fn write_run_outputs(log: &mut RunLog, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(&str, Vec<u8>)> = vec![
        ("results.csv", log.results_csv()?.into_bytes()),
        ("summary.csv", log.summary_csv()?.into_bytes()),
    ];
    let mut history = Vec::new();
    for h in &log.history {
        serde_json::to_writer(&mut history, h)?;
        history.push(b'\n');
    }
    files.push(("history.jsonl", history));
    let mut hyps = Vec::new();
    crate::decoding::write_hypotheses_jsonl(&log.hypotheses, &mut hyps)?;
    files.push(("hypotheses.jsonl", hyps));
    if !log.ablation.is_empty() {
        files.push(("ablation.csv", ablation_csv(&log.ablation)?.into_bytes()));
    }
    if !log.sweep.is_empty() {
        files.push(("sweep.csv", sweep_csv(&log.sweep)?.into_bytes()));
    }
    if !log.stages.is_empty() {
        let rows: Vec<SummaryRow> = log
            .stages
            .iter()
            .flat_map(|s| {
                s.rows.iter().map(move |r| SummaryRow {
                    method: format!("{}@{}", s.method, s.stage),
                    ..r.clone()
                })
            })
            .collect();
        files.push(("stages.csv", summary_csv(&rows)?.into_bytes()));
    }
    for (name, bytes) in &files {
        fs::write(dir.join(name), bytes)?;
        log.checksums.insert((*name).to_string(), sha256_hex(bytes));
    }
    fs::write(dir.join("runlog.json"), serde_json::to_string_pretty(log)?)?;
    Ok(())
}

/// Writes every configured language's dataset container, its JSON sidecar
/// and the base vocabulary. Returns the written paths.
pub fn generate_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let lab = build_lab(cfg)?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let vocab_path = dir.join("vocab.txt");
    fs::write(&vocab_path, lab.vocab.to_text())?;
    written.push(vocab_path);
    for (name, ds) in &lab.datasets {
        let bin = dir.join(format!("{name}.bin"));
        fs::write(&bin, encode_dataset(ds))?;
        let sidecar = DatasetSidecar {
            format_version: 1,
            language: lab.spec(name)?.clone(),
            alphabet: lab.alphabet.clone(),
            n_train: cfg.data.n_train,
            n_val: cfg.data.n_val,
            n_test: cfg.data.n_test,
            seed: ds.seed,
        };
        let json = dir.join(format!("{name}.json"));
        fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
        written.push(bin);
        written.push(json);
    }
    Ok(written)
}

/// Pre-trains and saves `pretrained.ckpt`, `vocab.txt` and `pretrain.json`.
pub fn pretrain_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<PretrainSummary> {
    let lab = build_lab(cfg)?;
    let base = pretrain_base_model(cfg, &lab)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("pretrained.ckpt"), base.checkpoint_bytes()?)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(base.model.config())?)?;
    fs::write(dir.join("vocab.txt"), base.vocab.to_text())?;
    fs::write(dir.join("pretrain.json"), serde_json::to_string_pretty(&base.summary)?)?;
    Ok(base.summary)
}

/// Markdown rendering of a saved run: the summary plus any ablation blocks.
pub fn report(dir: &Path) -> Result<String> {
    let log: RunLog = serde_json::from_str(&fs::read_to_string(dir.join("runlog.json"))?)?;
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut s = format!("# {} run, seed {}\n\n", log.kind, log.seed);
    s.push_str("| method | mode | AWER old (%) | AWER new (%) |\n|---|---|---|---|\n");
    for r in &log.summary {
        s.push_str(&format!("| {} | {} | {} | {} |\n", r.method, r.mode, pct(r.awer_old), pct(r.awer_new)));
    }
    for b in &log.ablation {
        s.push_str(&format!("\n## {}\n\n| variant | mode | old | new | avg |\n|---|---|---|---|---|\n", b.family));
        for r in &b.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.variant,
                r.mode,
                pct(r.old_wer),
                pct(r.new_wer),
                pct(r.avg_wer)
            ));
        }
    }
    if let Some(w) = &log.pretrain.warning {
        s.push_str(&format!("\nwarning: {w}\n"));
    }
    Ok(s)
}
