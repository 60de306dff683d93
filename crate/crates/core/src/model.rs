//! Toy transcription network: a frozen linear encoder and a pre-norm
//! transformer decoder whose output projection is tied to the token
//! embedding matrix.
//!
//! Parameter build order (and therefore gradient layout) is:
//! `encoder.proj`, `tok_emb`, `pos_emb`, then for each layer
//! `ln1`, self-attention `q k v o`, `ln2`, cross-attention `q k v o`, `ln3`,
//! `ff1`, `ff2`, then `ln_f`. Every weight is immediately followed by its
//! bias. Task-private embedding copies are appended after `ln_f`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{
    affine, affine_backward, attention_backward, cross_entropy_sum, gelu,
    gelu_backward, layer_norm, layer_norm_backward, scaled_dot_attention, AttentionCache, AttnMask,
    LayerNormCache,
};
use crate::numerics::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::numerics::{ParamGroup, Parameter, Tensor};
use crate::tasks::{derive_seed, Sample};
use crate::vocab::{TokenId, Vocab};

pub const LN_EPS: f64 = 1e-5;
/// Standard deviation of the noise added to a freshly appended LID row.
pub const NEW_LID_NOISE_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub feat_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            feat_dim: 10,
            max_len: 26,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model < 2 {
            return bad("d_model must be at least 2".into());
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.feat_dim == 0 {
            return bad("n_layers, d_ff and feat_dim must be positive".into());
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} below 3", self.max_len));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count (without task-private embedding copies).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let layer = 3 * 2 * d + 2 * attn + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d);
        self.feat_dim * d + self.vocab_size * d + self.max_len * d + self.n_layers * layer + 2 * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AttnIds {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIds {
    ln1: usize,
    self_attn: AttnIds,
    ln2: usize,
    cross_attn: AttnIds,
    ln3: usize,
    ff1: usize,
    ff2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMASRModel {
    config: ModelConfig,
    params: Vec<Parameter>,
    encoder: usize,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    ln_f: usize,
    task_embeddings: Vec<(String, usize)>,
}

struct Builder<'a> {
    params: Vec<Parameter>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, group: ParamGroup, value: Tensor, trainable: bool) -> usize {
        self.params.push(Parameter::new(name, group, value, trainable));
        self.params.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    /// Weight `[fan_in × fan_out]` and zero bias; returns the weight index.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&[fan_in, fan_out], bound);
        let wi = self.push(format!("{name}.weight"), ParamGroup::DecoderLayer, w, true);
        self.push(format!("{name}.bias"), ParamGroup::DecoderLayer, Tensor::zeros(&[fan_out]), true);
        wi
    }

    fn norm(&mut self, name: &str, d: usize) -> usize {
        let gi = self.push(
            format!("{name}.gamma"),
            ParamGroup::DecoderLayer,
            Tensor::new(vec![d], vec![1.0; d]).expect("gamma"),
            true,
        );
        self.push(format!("{name}.beta"), ParamGroup::DecoderLayer, Tensor::zeros(&[d]), true);
        gi
    }

    fn attention(&mut self, name: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.linear(&format!("{name}.q"), d, d),
            wk: self.linear(&format!("{name}.k"), d, d),
            wv: self.linear(&format!("{name}.v"), d, d),
            wo: self.linear(&format!("{name}.o"), d, d),
        }
    }
}

/// Everything the backward pass of one multi-head attention block needs.
#[derive(Debug, Clone)]
struct MhaCache {
    x_q: Tensor,
    x_kv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: Vec<AttentionCache>,
    concat: Tensor,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LayerNormCache,
    sa: MhaCache,
    ln2: LayerNormCache,
    ca: MhaCache,
    ln3: LayerNormCache,
    h3: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
}

/// Intermediate activations of one teacher-forced forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<TokenId>,
    emb: usize,
    layers: Vec<LayerCache>,
    ln_f: LayerNormCache,
    y: Tensor,
}

impl ForwardCache {
    /// The final decoder state (after the last layer norm), one row per position.
    pub fn decoder_state(&self) -> &Tensor {
        &self.y
    }
}

/// One teacher-forced training sequence: `[BOS, LID, text…]` predicting
/// `[LID, text…, EOS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub language: String,
}

impl Example {
    pub fn from_sample(sample: &Sample, vocab: &Vocab) -> Result<Self> {
        let lid = vocab
            .lid_id(&sample.language)
            .ok_or_else(|| Error::Vocab(format!("no LID token for {}", sample.language)))?;
        let mut input = vec![vocab.bos_id(), lid];
        input.extend_from_slice(&sample.target[..sample.target.len().saturating_sub(1)]);
        let mut target = vec![lid];
        target.extend_from_slice(&sample.target);
        Ok(Self {
            features: sample.features.clone(),
            input,
            target,
            language: sample.language.clone(),
        })
    }
}

fn two_mut(g: &mut [Tensor], i: usize, j: usize) -> (&mut Tensor, &mut Tensor) {
    debug_assert!(i < j);
    let (a, b) = g.split_at_mut(j);
    (&mut a[i], &mut b[0])
}

impl ToyMASRModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "model/init"));
        let d = config.d_model;
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let enc = b.uniform(&[config.feat_dim, d], 1.0 / (config.feat_dim as f64).sqrt());
        let encoder = b.push("encoder.proj".into(), ParamGroup::Encoder, enc, false);
        let emb_bound = 1.0 / (d as f64).sqrt();
        let te = b.uniform(&[config.vocab_size, d], emb_bound);
        let tok_emb = b.push("tok_emb".into(), ParamGroup::TokenEmbedding, te, true);
        let pe = b.uniform(&[config.max_len, d], emb_bound);
        let pos_emb = b.push("pos_emb".into(), ParamGroup::PositionalEmbedding, pe, true);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("dec.{l}");
            layers.push(LayerIds {
                ln1: b.norm(&format!("{p}.ln1"), d),
                self_attn: b.attention(&format!("{p}.self_attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                ln3: b.norm(&format!("{p}.ln3"), d),
                ff1: b.linear(&format!("{p}.ff1"), d, config.d_ff),
                ff2: b.linear(&format!("{p}.ff2"), config.d_ff, d),
            });
        }
        let ln_f = b.norm("ln_f", d);
        let params = b.params;
        Ok(Self {
            config,
            params,
            encoder,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            task_embeddings: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn encoder_param(&self) -> &Parameter {
        &self.params[self.encoder]
    }

    pub fn token_embedding(&self) -> &Parameter {
        &self.params[self.tok_emb]
    }

    pub fn token_embedding_index(&self) -> usize {
        self.tok_emb
    }

    pub fn positional_embedding(&self) -> &Parameter {
        &self.params[self.pos_emb]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Index of the token-embedding matrix used for `lang`: its private copy
    /// when one exists, the shared matrix otherwise.
    pub fn embedding_index_for(&self, lang: &str) -> usize {
        self.task_embeddings
            .iter()
            .find(|(l, _)| l == lang)
            .map_or(self.tok_emb, |(_, i)| *i)
    }

    pub fn task_embedding_index(&self, lang: &str) -> Option<usize> {
        self.task_embeddings.iter().find(|(l, _)| l == lang).map(|(_, i)| *i)
    }

    /// Adds a private copy of the shared token embeddings for `lang`.
    pub fn add_task_embedding(&mut self, lang: &str) -> Result<usize> {
        if self.task_embedding_index(lang).is_some() {
            return Err(Error::AlreadyExists(lang.to_string()));
        }
        let value = self.params[self.tok_emb].value.clone();
        self.params.push(Parameter::new(
            format!("tok_emb.task.{lang}"),
            ParamGroup::TokenEmbedding,
            value,
            true,
        ));
        let idx = self.params.len() - 1;
        self.task_embeddings.push((lang.to_string(), idx));
        Ok(idx)
    }

    pub fn task_embeddings(&self) -> &[(String, usize)] {
        &self.task_embeddings
    }

    /// `memory = features · encoder.proj + frame_code`
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let w = &self.params[self.encoder].value;
        if features.shape().len() != 2 || features.cols() != self.config.feat_dim {
            return Err(Error::Dimension {
                op: "encode",
                left: features.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let (f, d) = (features.rows(), self.config.d_model);
        let mut out = vec![0.0; f * d];
        matmul_acc(features.data(), w.data(), &mut out, f, self.config.feat_dim, d);
        for (t, row) in out.chunks_mut(d).enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x += frame_code(t, j, d);
            }
        }
        Tensor::new(vec![f, d], out)
    }

    fn mha_forward(&self, ids: AttnIds, x_q: &Tensor, x_kv: &Tensor, mask: Option<&AttnMask>) -> Result<(Tensor, MhaCache)> {
        let p = &self.params;
        let q = affine(x_q, &p[ids.wq].value, &p[ids.wq + 1].value)?;
        let k = affine(x_kv, &p[ids.wk].value, &p[ids.wk + 1].value)?;
        let v = affine(x_kv, &p[ids.wv].value, &p[ids.wv + 1].value)?;
        let dh = self.config.d_model / self.config.n_heads;
        let mut concat = Tensor::zeros(&[x_q.rows(), self.config.d_model]);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (oh, cache) = scaled_dot_attention(
                &q.column_block(h * dh, dh),
                &k.column_block(h * dh, dh),
                &v.column_block(h * dh, dh),
                mask,
            )?;
            concat.add_column_block(h * dh, &oh);
            heads.push(cache);
        }
        let out = affine(&concat, &p[ids.wo].value, &p[ids.wo + 1].value)?;
        Ok((
            out,
            MhaCache {
                x_q: x_q.clone(),
                x_kv: x_kv.clone(),
                q,
                k,
                v,
                heads,
                concat,
            },
        ))
    }

    /// Returns `(d x_q, d x_kv)`; the key/value input gradient is skipped when
    /// `need_kv_grad` is false.
    fn mha_backward(
        &self,
        ids: AttnIds,
        c: &MhaCache,
        dout: &Tensor,
        grads: &mut [Tensor],
        need_kv_grad: bool,
    ) -> (Tensor, Option<Tensor>) {
        let p = &self.params;
        let (dwo, dbo) = two_mut(grads, ids.wo, ids.wo + 1);
        let dconcat = affine_backward(&c.concat, &p[ids.wo].value, dout, dwo, dbo);
        let dh = self.config.d_model / self.config.n_heads;
        let (t, s, d) = (c.q.rows(), c.k.rows(), self.config.d_model);
        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[s, d]);
        let mut dv = Tensor::zeros(&[s, d]);
        for (h, cache) in c.heads.iter().enumerate() {
            let (dqh, dkh, dvh) = attention_backward(
                &c.q.column_block(h * dh, dh),
                &c.k.column_block(h * dh, dh),
                &c.v.column_block(h * dh, dh),
                cache,
                &dconcat.column_block(h * dh, dh),
            );
            dq.add_column_block(h * dh, &dqh);
            dk.add_column_block(h * dh, &dkh);
            dv.add_column_block(h * dh, &dvh);
        }
        let (dwq, dbq) = two_mut(grads, ids.wq, ids.wq + 1);
        let dxq = affine_backward(&c.x_q, &p[ids.wq].value, &dq, dwq, dbq);
        let (dwk, dbk) = two_mut(grads, ids.wk, ids.wk + 1);
        let mut dxkv = if need_kv_grad {
            Some(affine_backward(&c.x_kv, &p[ids.wk].value, &dk, dwk, dbk))
        } else {
            accumulate_affine_params(&c.x_kv, &dk, dwk, dbk);
            None
        };
        let (dwv, dbv) = two_mut(grads, ids.wv, ids.wv + 1);
        if let Some(acc) = dxkv.as_mut() {
            acc.add_assign(&affine_backward(&c.x_kv, &p[ids.wv].value, &dv, dwv, dbv));
        } else {
            accumulate_affine_params(&c.x_kv, &dv, dwv, dbv);
        }
        (dxq, dxkv)
    }

    /// Teacher-forced causal forward pass over `input` given encoder `memory`,
    /// using the token-embedding matrix at parameter index `emb`.
    pub fn forward(&self, input: &[TokenId], memory: &Tensor, emb: usize) -> Result<(Tensor, ForwardCache)> {
        let t = input.len();
        if t == 0 || t > self.config.max_len {
            return Err(Error::Length {
                len: t,
                max_len: self.config.max_len,
            });
        }
        let ev = &self.params[emb].value;
        let vocab = ev.rows();
        if let Some(&bad) = input.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocab(format!("token id {bad} out of range for |V|={vocab}")));
        }
        if memory.cols() != self.config.d_model || memory.rows() == 0 {
            return Err(Error::Dimension {
                op: "decoder memory",
                left: memory.shape().to_vec(),
                right: vec![self.config.d_model],
            });
        }
        let d = self.config.d_model;
        let pe = &self.params[self.pos_emb].value;
        let mut x = Tensor::zeros(&[t, d]);
        for (i, &tok) in input.iter().enumerate() {
            let row = x.row_mut(i);
            for ((o, e), p) in row.iter_mut().zip(ev.row(tok)).zip(pe.row(i)) {
                *o = e + p;
            }
        }
        let mask = AttnMask::causal(t);
        let p = &self.params;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for ids in &self.layers {
            let (h1, ln1) = layer_norm(&x, &p[ids.ln1].value, &p[ids.ln1 + 1].value, LN_EPS)?;
            let (sa_out, sa) = self.mha_forward(ids.self_attn, &h1, &h1, Some(&mask))?;
            x.add_assign(&sa_out);
            let (h2, ln2) = layer_norm(&x, &p[ids.ln2].value, &p[ids.ln2 + 1].value, LN_EPS)?;
            let (ca_out, ca) = self.mha_forward(ids.cross_attn, &h2, memory, None)?;
            x.add_assign(&ca_out);
            let (h3, ln3) = layer_norm(&x, &p[ids.ln3].value, &p[ids.ln3 + 1].value, LN_EPS)?;
            let ff_pre = affine(&h3, &p[ids.ff1].value, &p[ids.ff1 + 1].value)?;
            let ff_act = gelu(&ff_pre);
            let ff_out = affine(&ff_act, &p[ids.ff2].value, &p[ids.ff2 + 1].value)?;
            x.add_assign(&ff_out);
            layer_caches.push(LayerCache {
                ln1,
                sa,
                ln2,
                ca,
                ln3,
                h3,
                ff_pre,
                ff_act,
            });
        }
        let (y, ln_f) = layer_norm(&x, &p[self.ln_f].value, &p[self.ln_f + 1].value, LN_EPS)?;
        let mut logits = vec![0.0; t * vocab];
        matmul_a_bt_acc(y.data(), ev.data(), &mut logits, t, d, vocab);
        Ok((
            Tensor::new(vec![t, vocab], logits)?,
            ForwardCache {
                input: input.to_vec(),
                emb,
                layers: layer_caches,
                ln_f,
                y,
            },
        ))
    }

    /// Accumulates parameter gradients for `dlogits` into `grads`
    /// (indexed like `params`). Encoder gradients are never touched.
    fn backward_into(&self, cache: &ForwardCache, dlogits: &Tensor, grads: &mut [Tensor]) {
        let d = self.config.d_model;
        let t = cache.input.len();
        let vocab = dlogits.cols();
        let p = &self.params;
        let ev = &p[cache.emb].value;
        // tied output projection
        let mut dy = vec![0.0; t * d];
        matmul_acc(dlogits.data(), ev.data(), &mut dy, t, vocab, d);
        matmul_at_b_acc(dlogits.data(), cache.y.data(), grads[cache.emb].data_mut(), t, vocab, d);
        let dy = Tensor::new(vec![t, d], dy).expect("dy");
        let (dg, db) = two_mut(grads, self.ln_f, self.ln_f + 1);
        let mut dx = layer_norm_backward(&cache.ln_f, &p[self.ln_f].value, &dy, dg, db);

        for (ids, lc) in self.layers.iter().zip(&cache.layers).rev() {
            // feed-forward
            let (dw2, db2) = two_mut(grads, ids.ff2, ids.ff2 + 1);
            let dact = affine_backward(&lc.ff_act, &p[ids.ff2].value, &dx, dw2, db2);
            let dpre = gelu_backward(&lc.ff_pre, &dact);
            let (dw1, db1) = two_mut(grads, ids.ff1, ids.ff1 + 1);
            let dh3 = affine_backward(&lc.h3, &p[ids.ff1].value, &dpre, dw1, db1);
            let (dg, db) = two_mut(grads, ids.ln3, ids.ln3 + 1);
            dx.add_assign(&layer_norm_backward(&lc.ln3, &p[ids.ln3].value, &dh3, dg, db));
            // cross-attention; memory comes from the frozen encoder
            let (dh2, _) = self.mha_backward(ids.cross_attn, &lc.ca, &dx, grads, false);
            let (dg, db) = two_mut(grads, ids.ln2, ids.ln2 + 1);
            dx.add_assign(&layer_norm_backward(&lc.ln2, &p[ids.ln2].value, &dh2, dg, db));
            // causal self-attention: queries, keys and values all come from h1
            let (dq_in, dkv_in) = self.mha_backward(ids.self_attn, &lc.sa, &dx, grads, true);
            let mut dh1 = dq_in;
            dh1.add_assign(&dkv_in.expect("self-attention kv grad"));
            let (dg, db) = two_mut(grads, ids.ln1, ids.ln1 + 1);
            dx.add_assign(&layer_norm_backward(&lc.ln1, &p[ids.ln1].value, &dh1, dg, db));
        }

        // embeddings
        for (i, &tok) in cache.input.iter().enumerate() {
            let g = dx.row(i);
            for (o, v) in grads[cache.emb].row_mut(tok).iter_mut().zip(g) {
                *o += v;
            }
            for (o, v) in grads[self.pos_emb].row_mut(i).iter_mut().zip(g) {
                *o += v;
            }
        }
    }

    /// Backward pass accumulating into every parameter's `grad` buffer.
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &Tensor) {
        let mut grads: Vec<Tensor> = self
            .params
            .iter_mut()
            .map(|p| std::mem::replace(&mut p.grad, Tensor::zeros(&[0])))
            .collect();
        self.backward_into(cache, dlogits, &mut grads);
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad = g;
        }
    }

    /// Forward, loss and backward for a group of examples. Gradients are
    /// accumulated with weight `weight / n_tokens`, so that `weight = 1`
    /// yields the gradient of the group's mean token loss.
    ///
    /// Returns the mean token loss of the group.
    pub fn accumulate_group(&mut self, examples: &[&Example], pad_id: TokenId, weight: f64) -> Result<f64> {
        let n_tokens: usize = examples
            .iter()
            .map(|e| e.target.iter().filter(|&&t| t != pad_id).count())
            .sum();
        if n_tokens == 0 {
            return Err(Error::EmptyLoss);
        }
        let scale = weight / n_tokens as f64;
        let mut grads: Vec<Tensor> = self
            .params
            .iter_mut()
            .map(|p| std::mem::replace(&mut p.grad, Tensor::zeros(&[0])))
            .collect();
        let mut total = 0.0;
        let mut outcome = Ok(());
        for ex in examples {
            let step = (|| -> Result<()> {
                let memory = self.encode(&ex.features)?;
                let emb = self.embedding_index_for(&ex.language);
                let (logits, cache) = self.forward(&ex.input, &memory, emb)?;
                let (sum, _, dlogits) = cross_entropy_sum(&logits, &ex.target, pad_id, scale)?;
                total += sum;
                self.backward_into(&cache, &dlogits, &mut grads);
                Ok(())
            })();
            if step.is_err() {
                outcome = step;
                break;
            }
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad = g;
        }
        outcome?;
        Ok(total / n_tokens as f64)
    }

    /// Mean token loss without touching gradients.
    pub fn mean_loss(&self, examples: &[&Example], pad_id: TokenId) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for ex in examples {
            let memory = self.encode(&ex.features)?;
            let emb = self.embedding_index_for(&ex.language);
            let (logits, _) = self.forward(&ex.input, &memory, emb)?;
            let (sum, n, _) = cross_entropy_sum(&logits, &ex.target, pad_id, 0.0)?;
            total += sum;
            count += n;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        Ok(total / count as f64)
    }

    /// Zeroes gradients, then computes the mean token loss of `batch` and
    /// populates every trainable gradient.
    pub fn loss_and_grads(&mut self, batch: &[&Example], pad_id: TokenId) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Sampling("empty batch".into()));
        }
        self.zero_grads();
        self.accumulate_group(batch, pad_id, 1.0)
    }

    /// Logits of the next token after `prefix`.
    pub fn next_logits(&self, prefix: &[TokenId], memory: &Tensor, emb: usize) -> Result<Vec<f64>> {
        let (logits, _) = self.forward(prefix, memory, emb)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    /// Registers a new language: appends its LID token to `vocab` and a row
    /// to every token-embedding matrix. The new row is the mean of that
    /// matrix's existing LID rows plus seeded Gaussian noise.
    pub fn extend_for_language(&mut self, vocab: &mut Vocab, lang: &str) -> Result<TokenId> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Config(format!(
                "vocab size {} does not match model {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let old_lids: Vec<TokenId> = vocab.lid_ids().map(|(_, id)| id).collect();
        let id = vocab.add_language_token(lang)?;
        let d = self.config.d_model;
        let noise = Normal::new(0.0, NEW_LID_NOISE_STD).expect("noise std");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("lid/{lang}")));
        let mut emb_indices = vec![self.tok_emb];
        emb_indices.extend(self.task_embeddings.iter().map(|(_, i)| *i));
        for idx in emb_indices {
            let p = &mut self.params[idx];
            let v = &p.value;
            let mut row = vec![0.0; d];
            let sources: Vec<usize> = if old_lids.is_empty() {
                (0..v.rows()).collect()
            } else {
                old_lids.clone()
            };
            for &r in &sources {
                for (o, x) in row.iter_mut().zip(v.row(r)) {
                    *o += x;
                }
            }
            for o in row.iter_mut() {
                *o = *o / sources.len() as f64 + noise.sample(&mut rng);
            }
            let mut data = std::mem::replace(&mut p.value, Tensor::zeros(&[0])).into_data();
            data.extend_from_slice(&row);
            p.value = Tensor::new(vec![id + 1, d], data)?;
            p.grad = Tensor::zeros(&[id + 1, d]);
        }
        self.config.vocab_size = id + 1;
        Ok(id)
    }

    pub fn sgd_step(&mut self, lr: f64) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }

    // --- checkpoints ---------------------------------------------------

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.task_embeddings.len() as u32).to_le_bytes());
        for (lang, _) in &self.task_embeddings {
            out.extend_from_slice(&(lang.len() as u32).to_le_bytes());
            out.extend_from_slice(lang.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name().len() as u32).to_le_bytes());
            out.extend_from_slice(p.name().as_bytes());
            out.push(p.group().to_byte());
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &s in p.value.shape() {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = CkptReader { buf: bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        let mut model = Self::new(config)?;
        let n_tasks = r.u32()? as usize;
        for _ in 0..n_tasks {
            let lang = r.string()?;
            model.add_task_embedding(&lang)?;
        }
        let n_params = r.u32()? as usize;
        if n_params != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n_params} parameters, architecture expects {}",
                model.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            let name = r.string()?;
            let group = ParamGroup::from_byte(r.take(1)?[0]);
            let trainable = r.take(1)?[0] != 0;
            if name != p.name() || group != Some(p.group()) {
                return Err(Error::Format(format!("unexpected parameter {name}, wanted {}", p.name())));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if shape != p.value.shape() {
                return Err(Error::Format(format!("shape mismatch for {name}")));
            }
            let data = (0..p.value.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            p.value = Tensor::new(shape, data)?;
            p.trainable = trainable;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(model)
    }
}

fn accumulate_affine_params(x: &Tensor, dy: &Tensor, dw: &mut Tensor, db: &mut Tensor) {
    let (m, k, n) = (x.rows(), x.cols(), dy.cols());
    matmul_at_b_acc(x.data(), dy.data(), dw.data_mut(), m, k, n);
    for i in 0..m {
        for (g, d) in db.data_mut().iter_mut().zip(dy.row(i)) {
            *g += d;
        }
    }
}

/// Fixed sinusoidal code of frame `t`, channel `j`; it tells the decoder
/// where each frame sits, which a linear per-frame projection cannot.
fn frame_code(t: usize, j: usize, d: usize) -> f64 {
    let rate = 10_000f64.powf(-((j / 2 * 2) as f64) / d as f64);
    let angle = t as f64 * rate;
    if j % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

const CKPT_MAGIC: &[u8; 8] = b"DCLCKPT\0";
const CKPT_VERSION: u32 = 1;

struct CkptReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> CkptReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }
}
