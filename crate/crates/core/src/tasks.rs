//! Synthetic transcription "languages", dataset splits and replay buffers.
//!
//! A language maps each of its phonemes to a short grapheme string. Audio
//! features are one-hot phoneme frames plus Gaussian noise, optionally offset
//! by a constant per-language accent vector so that the language can be
//! identified from the input.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vocab::{validate_language_name, TokenId, Vocab};

pub const MIN_PHONEMES_PER_UTTERANCE: usize = 3;
pub const MAX_PHONEMES_PER_UTTERANCE: usize = 8;

/// Mixes a label into a seed (FNV-1a over the label, xor-folded).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed.rotate_left(17) ^ h
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageOptions {
    pub phoneme_count: usize,
    /// Fraction of all mapping characters drawn from the exclusive pool.
    pub exclusive_fraction: f64,
    pub noise_std: f64,
    /// Euclidean norm of the per-language feature offset; 0 disables it.
    pub accent_scale: f64,
    /// Feature dimension; must be at least `phoneme_count`.
    pub feat_dim: usize,
}

impl Default for LanguageOptions {
    fn default() -> Self {
        Self {
            phoneme_count: 10,
            exclusive_fraction: 0.3,
            noise_std: 0.25,
            accent_scale: 0.0,
            feat_dim: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub phoneme_count: usize,
    /// Grapheme string for each phoneme.
    pub mapping: Vec<String>,
    /// Characters only this language uses.
    pub exclusive_chars: Vec<char>,
    pub noise_std: f64,
    pub accent: Vec<f64>,
}

impl LanguageSpec {
    pub fn feat_dim(&self) -> usize {
        self.accent.len()
    }

    pub fn mapping_chars(&self) -> BTreeSet<char> {
        self.mapping.iter().flat_map(|m| m.chars()).collect()
    }

    /// Reference transcript for a phoneme sequence.
    pub fn transcribe(&self, phonemes: &[usize]) -> String {
        phonemes
            .iter()
            .map(|&p| self.mapping[p].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn validate(&self) -> Result<()> {
        validate_language_name(&self.name)?;
        if self.mapping.len() != self.phoneme_count || self.phoneme_count == 0 {
            return Err(Error::Task(format!("{}: mapping size mismatch", self.name)));
        }
        let distinct: BTreeSet<_> = self.mapping.iter().collect();
        if distinct.len() != self.mapping.len() {
            return Err(Error::Task(format!("{}: mapping is not injective", self.name)));
        }
        if self.feat_dim() < self.phoneme_count {
            return Err(Error::Task(format!("{}: feat_dim below phoneme count", self.name)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Task(format!("{}: negative noise", self.name)));
        }
        Ok(())
    }
}

/// Builds a language whose mapping mixes characters from a pool shared with
/// other languages and a pool private to this one.
pub fn make_language(
    name: &str,
    global_alphabet: &[char],
    shared_pool: &[char],
    exclusive_pool: &[char],
    seed: u64,
    opts: &LanguageOptions,
) -> Result<LanguageSpec> {
    validate_language_name(name)?;
    let shared: BTreeSet<char> = shared_pool.iter().copied().collect();
    let exclusive: BTreeSet<char> = exclusive_pool.iter().copied().collect();
    if shared.is_empty() {
        return Err(Error::Task("shared pool is empty".into()));
    }
    if !shared.is_disjoint(&exclusive) {
        return Err(Error::Task("shared and exclusive pools overlap".into()));
    }
    if let Some(c) = shared.iter().chain(&exclusive).find(|c| !global_alphabet.contains(c)) {
        return Err(Error::Task(format!("pool character {c:?} not in alphabet")));
    }
    let n = opts.phoneme_count;
    let pool_size = shared.len() + exclusive.len();
    if pool_size + pool_size * pool_size < n {
        return Err(Error::Task(format!(
            "pools of {pool_size} characters cannot encode {n} distinct phonemes"
        )));
    }
    if opts.exclusive_fraction > 0.0 && exclusive.is_empty() {
        return Err(Error::Task("exclusive fraction requested with an empty pool".into()));
    }
    if opts.feat_dim < n {
        return Err(Error::Task("feat_dim below phoneme count".into()));
    }

    let shared: Vec<char> = shared.into_iter().collect();
    let exclusive: Vec<char> = exclusive.into_iter().collect();
    let mut rng = rng_for(seed, name);
    for _attempt in 0..1000 {
        let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(1..=2)).collect();
        let total: usize = lengths.iter().sum();
        let n_excl = ((opts.exclusive_fraction * total as f64).round() as usize).min(total);
        let excl_slots: BTreeSet<usize> = index::sample(&mut rng, total, n_excl).into_iter().collect();
        let mut slot = 0;
        let mut mapping = Vec::with_capacity(n);
        for &len in &lengths {
            let mut s = String::new();
            for _ in 0..len {
                let pool = if excl_slots.contains(&slot) { &exclusive } else { &shared };
                s.push(pool[rng.random_range(0..pool.len())]);
                slot += 1;
            }
            mapping.push(s);
        }
        let distinct: BTreeSet<_> = mapping.iter().collect();
        if distinct.len() != n {
            continue;
        }
        let exclusive_chars = mapping
            .iter()
            .flat_map(|m| m.chars())
            .filter(|c| exclusive.contains(c))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let accent = accent_vector(&mut rng, opts.feat_dim, opts.accent_scale);
        let spec = LanguageSpec {
            name: name.to_string(),
            phoneme_count: n,
            mapping,
            exclusive_chars,
            noise_std: opts.noise_std,
            accent,
        };
        spec.validate()?;
        return Ok(spec);
    }
    Err(Error::Task(format!("could not draw an injective mapping for {name}")))
}

fn accent_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    if scale == 0.0 {
        return vec![0.0; dim];
    }
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.iter().map(|x| x / norm * scale).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub phonemes: Vec<usize>,
    /// Text tokens terminated by EOS; no BOS, PAD or LID.
    pub target: Vec<TokenId>,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub language: String,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

impl TaskDataset {
    pub fn train_targets(&self) -> Vec<&[TokenId]> {
        self.train.iter().map(|s| s.target.as_slice()).collect()
    }
}

pub fn encode_target(spec: &LanguageSpec, phonemes: &[usize], vocab: &Vocab) -> Result<Vec<TokenId>> {
    let mut ids = vocab.encode(&spec.transcribe(phonemes))?;
    ids.push(vocab.eos_id());
    Ok(ids)
}

pub fn features_for(
    spec: &LanguageSpec,
    phonemes: &[usize],
    rng: &mut impl RngCore,
) -> Result<Tensor> {
    let dim = spec.feat_dim();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| Error::Task(format!("noise distribution: {e}")))?;
    let mut data = Vec::with_capacity(phonemes.len() * dim);
    for &p in phonemes {
        for (j, a) in spec.accent.iter().enumerate() {
            let onehot = if j == p { 1.0 } else { 0.0 };
            let eps = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(onehot + a + eps);
        }
    }
    Tensor::new(vec![phonemes.len(), dim], data)
}

pub fn generate_dataset(
    spec: &LanguageSpec,
    vocab: &Vocab,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<TaskDataset> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Task("every split needs at least one sample".into()));
    }
    spec.validate()?;
    let mut rng = rng_for(seed, &format!("data/{}", spec.name));
    let mut all = Vec::with_capacity(n_train + n_val + n_test);
    for _ in 0..n_train + n_val + n_test {
        let len = rng.random_range(MIN_PHONEMES_PER_UTTERANCE..=MAX_PHONEMES_PER_UTTERANCE);
        let phonemes: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.phoneme_count)).collect();
        let features = features_for(spec, &phonemes, &mut rng)?;
        let target = encode_target(spec, &phonemes, vocab)?;
        all.push(Sample {
            features,
            phonemes,
            target,
            language: spec.name.clone(),
        });
    }
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(TaskDataset {
        language: spec.name.clone(),
        train: all,
        val,
        test,
        seed,
    })
}

/// `ceil(fraction * n)` with a small guard against representation error
/// (`0.05 * 300` is not exactly 15 in binary).
pub fn replay_size(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayLanguage {
    pub language: String,
    /// Indices into the language's train split.
    pub indices: Vec<usize>,
    pub samples: Vec<Sample>,
}

/// Retained subset of old-task training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub languages: Vec<ReplayLanguage>,
    pub fraction: f64,
    pub seed: u64,
}

impl ReplayBuffer {
    pub fn new(fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Task(format!("replay fraction {fraction} outside (0, 1]")));
        }
        Ok(Self {
            languages: Vec::new(),
            fraction,
            seed,
        })
    }

    /// Adds a uniform without-replacement subsample of `ds.train`.
    pub fn add(&mut self, ds: &TaskDataset) -> Result<()> {
        if ds.train.is_empty() {
            return Err(Error::Task(format!("old dataset {} has no training data", ds.language)));
        }
        if self.languages.iter().any(|l| l.language == ds.language) {
            return Err(Error::AlreadyExists(ds.language.clone()));
        }
        let k = replay_size(self.fraction, ds.train.len());
        let mut rng = rng_for(self.seed, &format!("replay/{}", ds.language));
        let mut indices = index::sample(&mut rng, ds.train.len(), k).into_vec();
        indices.sort_unstable();
        let samples = indices.iter().map(|&i| ds.train[i].clone()).collect();
        self.languages.push(ReplayLanguage {
            language: ds.language.clone(),
            indices,
            samples,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.languages.iter().map(|l| l.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size_of(&self, lang: &str) -> Option<usize> {
        self.languages
            .iter()
            .find(|l| l.language == lang)
            .map(|l| l.samples.len())
    }

    /// Uniform with replacement over the union of all retained samples.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut impl RngCore) -> Result<Vec<&Sample>> {
        let total = self.len();
        if total == 0 {
            return Err(Error::Sampling("replay buffer is empty".into()));
        }
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut k = rng.random_range(0..total);
            for lang in &self.languages {
                if k < lang.samples.len() {
                    out.push(&lang.samples[k]);
                    break;
                }
                k -= lang.samples.len();
            }
        }
        Ok(out)
    }
}

pub fn build_replay_buffer(old: &[&TaskDataset], fraction: f64, seed: u64) -> Result<ReplayBuffer> {
    let mut buf = ReplayBuffer::new(fraction, seed)?;
    for ds in old {
        buf.add(ds)?;
    }
    Ok(buf)
}

const DATA_MAGIC: &[u8; 8] = b"DCLDATA\0";
const DATA_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Binary container for a dataset (little-endian, versioned header).
pub fn encode_dataset(ds: &TaskDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    put_u32(&mut out, ds.language.len());
    out.extend_from_slice(ds.language.as_bytes());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    let feat_dim = ds.train.first().map_or(0, |s| s.features.cols());
    put_u32(&mut out, feat_dim);
    for split in [&ds.train, &ds.val, &ds.test] {
        put_u32(&mut out, split.len());
    }
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        put_u32(&mut out, s.phonemes.len());
        for &p in &s.phonemes {
            put_u32(&mut out, p);
        }
        for v in s.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, s.target.len());
        for &t in &s.target {
            put_u32(&mut out, t);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TaskDataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != DATA_MAGIC {
        return Err(Error::Format("not a dataset container".into()));
    }
    let version = r.u32()?;
    if version != DATA_VERSION as usize {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let name_len = r.u32()?;
    let language = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("language name is not utf-8".into()))?;
    let seed = r.u64()?;
    let feat_dim = r.u32()?;
    let sizes = [r.u32()?, r.u32()?, r.u32()?];
    let mut splits: Vec<Vec<Sample>> = Vec::new();
    for n in sizes {
        let mut split = Vec::with_capacity(n);
        for _ in 0..n {
            let frames = r.u32()?;
            let phonemes = (0..frames).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let data = (0..frames * feat_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let features = Tensor::new(vec![frames, feat_dim], data)?;
            let tl = r.u32()?;
            let target = (0..tl).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            split.push(Sample {
                features,
                phonemes,
                target,
                language: language.clone(),
            });
        }
        splits.push(split);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in container".into()));
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(TaskDataset {
        language,
        train,
        val,
        test,
        seed,
    })
}

/// JSON sidecar describing how a dataset container was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format_version: u32,
    pub language: LanguageSpec,
    pub alphabet: Vec<char>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DatasetSidecar {
    pub fn regenerate(&self) -> Result<TaskDataset> {
        let vocab = Vocab::build(&self.alphabet, &[])?;
        generate_dataset(&self.language, &vocab, self.n_train, self.n_val, self.n_test, self.seed)
    }
}
