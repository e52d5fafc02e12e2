//! The text-to-graph network: a transformer encoder over words, the dynamic
//! vocabulary matrix `E`, and a transformer decoder whose hidden state points
//! into `E`.

use std::collections::{BTreeSet, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{GrammarError, Phase};
use crate::graph::Document;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::vocab::{VocabError, VocabLayout, NUM_SPECIAL};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has {len} words but max_positions is {max}")]
    TooLong { len: usize, max: usize },
    #[error("decoder prefix has {len} symbols but max_dec_positions is {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("vocabulary layout does not match the model: {0}")]
    LayoutMismatch(String),
    #[error("{ids} symbol ids but {labels} structural labels")]
    LabelCount { ids: usize, labels: usize },
    #[error("parameter {name}: {reason}")]
    BadParameter { name: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Maximum span width `K`.
    pub max_width: usize,
    /// Entity type count `C`.
    pub entity_types: usize,
    /// Relation type count `R`.
    pub relation_types: usize,
    pub dropout: f64,
    /// Longest input (in words) the encoder position table covers.
    pub max_positions: usize,
    /// Longest decoder input the decoder position table covers.
    pub max_dec_positions: usize,
    /// Drop the decoder's absolute position term.
    pub pos_off: bool,
    /// Drop the decoder's structural term.
    pub struct_off: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 8,
            enc_layers: 2,
            dec_layers: 6,
            max_width: 12,
            entity_types: 1,
            relation_types: 0,
            dropout: 0.1,
            max_positions: 128,
            max_dec_positions: 256,
            pos_off: false,
            struct_off: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.heads == 0 {
            return bad("d_model and heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be at least 1");
        }
        if self.max_width == 0 || self.entity_types == 0 {
            return bad("max_width and entity_types must be positive");
        }
        if self.max_positions == 0 || self.max_dec_positions == 0 {
            return bad("position tables must be non-empty");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Whitespace-token vocabulary for the word embedding table. Id 0 is `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl From<Vec<String>> for WordVocab {
    fn from(mut words: Vec<String>) -> Self {
        if words.first().map(String::as_str) != Some(UNK) {
            words.insert(0, UNK.to_string());
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<WordVocab> for Vec<String> {
    fn from(v: WordVocab) -> Self {
        v.words
    }
}

impl WordVocab {
    /// Sorted distinct tokens of `docs`, after `<unk>`.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Self {
        let set: BTreeSet<&str> = docs
            .into_iter()
            .flat_map(|d| d.tokens.iter().map(String::as_str))
            .filter(|w| *w != UNK)
            .collect();
        let mut words = vec![UNK.to_string()];
        words.extend(set.into_iter().map(str::to_string));
        Self::from(words)
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Weights {
    word_emb: ParamId,
    enc_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Option<Norm>,
    w_type: Vec<ParamId>,
    special: ParamId,
    relation: ParamId,
    dec_pos: ParamId,
    dec_struct: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn xavier(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let t = Tensor::from_fn(&[rows, cols], |_| T::of(dist.sample(&mut self.rng)));
        self.store.add(name, t, group, true)
    }

    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, group: ParamGroup, decay: bool) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(&[rows, cols], |_| T::of(dist.sample(&mut self.rng)));
        self.store.add(name, t, group, decay)
    }

    fn constant(&mut self, name: &str, n: usize, v: f64, group: ParamGroup) -> ParamId {
        self.store.add(name, Tensor::from_fn(&[n], |_| T::of(v)), group, false)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, group: ParamGroup) -> Linear {
        Linear {
            w: self.xavier(&format!("{name}.w"), d_in, d_out, group),
            b: self.constant(&format!("{name}.b"), d_out, 0.0, group),
        }
    }

    fn norm(&mut self, name: &str, d: usize, group: ParamGroup) -> Norm {
        Norm {
            g: self.constant(&format!("{name}.g"), d, 1.0, group),
            b: self.constant(&format!("{name}.b"), d, 0.0, group),
        }
    }

    fn attention(&mut self, name: &str, d: usize, group: ParamGroup) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, group),
            k: self.linear(&format!("{name}.k"), d, d, group),
            v: self.linear(&format!("{name}.v"), d, d, group),
            o: self.linear(&format!("{name}.o"), d, d, group),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, group: ParamGroup) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, 4 * d, group),
            down: self.linear(&format!("{name}.down"), 4 * d, d, group),
        }
    }
}

/// Optional dropout source threaded through a forward pass.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    /// Inference: dropout is the identity.
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'r mut dyn RngCore) -> Self {
        Self { p, rng: Some(rng) }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if self.p > 0.0 => Ok(g.dropout(v, self.p, &mut **rng, true)?),
            _ => Ok(v),
        }
    }
}

/// Attention weights of one decoder pass, indexed `[layer][head]`.
#[derive(Debug, Clone, Default)]
pub struct AttentionMaps<T> {
    /// `(n × n)` causal self-attention.
    pub self_attn: Vec<Vec<Tensor<T>>>,
    /// `(n × L)` attention over the input words.
    pub cross_attn: Vec<Vec<Tensor<T>>>,
}

/// Encoder output for one document, detached from any tape.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub layout: VocabLayout,
    /// `H`, `(L × D)`.
    pub h: Tensor<T>,
    /// `E`, `(V × D)`.
    pub e: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Atg<T> {
    config: ModelConfig,
    vocab: WordVocab,
    params: ParamStore<T>,
    w: Weights,
}

impl<T: Scalar> Atg<T> {
    /// Fresh randomly initialised model. Initial values depend only on `seed`.
    pub fn new(config: ModelConfig, vocab: WordVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        use ParamGroup::{Decoder, Encoder, Other};
        let inv_d = 1.0 / (d as f64).sqrt();
        let word_emb = init.normal("enc.word_emb", vocab.len(), d, 1.0, Encoder, false);
        let enc_pos = init.normal("enc.pos", config.max_positions, d, 1.0, Encoder, false);
        let encoder = (0..config.enc_layers)
            .map(|l| EncoderLayer {
                ln1: init.norm(&format!("enc.{l}.ln1"), d, Encoder),
                attn: init.attention(&format!("enc.{l}.attn"), d, Encoder),
                ln2: init.norm(&format!("enc.{l}.ln2"), d, Encoder),
                ffn: init.ffn(&format!("enc.{l}.ffn"), d, Encoder),
            })
            .collect();
        let enc_norm = (config.enc_layers > 0).then(|| init.norm("enc.norm", d, Encoder));
        let w_type = (0..config.entity_types)
            .map(|c| init.normal(&format!("span.w_type.{c}"), 2 * d, d, inv_d / (2.0 * d as f64).sqrt(), Other, true))
            .collect();
        let special = init.normal("vocab.special", NUM_SPECIAL, d, inv_d, Other, false);
        let relation = init.normal("vocab.relation", config.relation_types, d, inv_d, Other, false);
        let dec_pos = init.normal("dec.pos", config.max_dec_positions, d, inv_d, Other, false);
        let dec_struct = init.normal("dec.struct", Phase::ALL.len(), d, inv_d, Other, false);
        let decoder = (0..config.dec_layers)
            .map(|l| DecoderLayer {
                ln1: init.norm(&format!("dec.{l}.ln1"), d, Decoder),
                self_attn: init.attention(&format!("dec.{l}.self"), d, Decoder),
                ln2: init.norm(&format!("dec.{l}.ln2"), d, Decoder),
                cross_attn: init.attention(&format!("dec.{l}.cross"), d, Decoder),
                ln3: init.norm(&format!("dec.{l}.ln3"), d, Decoder),
                ffn: init.ffn(&format!("dec.{l}.ffn"), d, Decoder),
            })
            .collect();
        let dec_norm = init.norm("dec.norm", d, Decoder);
        let w = Weights {
            word_emb,
            enc_pos,
            encoder,
            enc_norm,
            w_type,
            special,
            relation,
            dec_pos,
            dec_struct,
            decoder,
            dec_norm,
        };
        Ok(Self {
            config,
            vocab,
            params,
            w,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &WordVocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Overwrites parameters by name; every parameter must be present with
    /// its exact shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<T>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in self.params.iter_mut() {
            let t = by_name.get(p.name.as_str()).ok_or_else(|| ModelError::BadParameter {
                name: p.name.clone(),
                reason: "missing".into(),
            })?;
            if t.shape() != p.value.shape() {
                return Err(ModelError::BadParameter {
                    name: p.name.clone(),
                    reason: format!("shape {:?}, expected {:?}", t.shape(), p.value.shape()),
                });
            }
            p.value = (*t).clone();
        }
        Ok(())
    }

    /// Learned structural embedding table, rows in [`Phase::ALL`] order.
    pub fn struct_embeddings(&self) -> &Tensor<T> {
        self.params.value(self.w.dec_struct)
    }

    pub fn special_embeddings(&self) -> &Tensor<T> {
        self.params.value(self.w.special)
    }

    pub fn relation_embeddings(&self) -> &Tensor<T> {
        self.params.value(self.w.relation)
    }

    pub fn type_matrix(&self, c: usize) -> &Tensor<T> {
        self.params.value(self.w.w_type[c])
    }

    pub fn word_ids(&self, doc: &Document) -> Vec<usize> {
        doc.tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    /// Vocabulary layout of `doc` under this model's `K`, `C` and `R`.
    pub fn layout_for(&self, doc: &Document) -> Result<VocabLayout> {
        Ok(VocabLayout::new(
            doc.len(),
            self.config.max_width,
            self.config.entity_types,
            self.config.relation_types,
        )?)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Result<Var> {
        let gain = g.param(&self.params, n.g);
        let bias = g.param(&self.params, n.b);
        Ok(g.layer_norm(x, gain, bias)?)
    }

    /// Multi-head scaled dot-product attention before the output projection.
    fn attend(
        &self,
        g: &mut Graph<T>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
        mut capture: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale)?;
            let p = g.softmax_last_dim(s, mask)?;
            if let Some(c) = capture.as_mut() {
                c.push(g.value(p).clone());
            }
            outs.push(g.matmul(p, vh)?);
        }
        Ok(g.concat_cols(&outs)?)
    }

    fn self_attention(
        &self,
        g: &mut Graph<T>,
        x: Var,
        a: Attention,
        causal: bool,
        capture: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let q = self.linear(g, x, a.q)?;
        let k = self.linear(g, x, a.k)?;
        let v = self.linear(g, x, a.v)?;
        let n = g.value(x).rows();
        let mask: Option<Vec<bool>> = causal.then(|| (0..n * n).map(|i| i % n <= i / n).collect());
        let o = self.attend(g, q, k, v, mask.as_deref(), capture)?;
        self.linear(g, o, a.o)
    }

    fn cross_kv(&self, g: &mut Graph<T>, h: Var, a: Attention) -> Result<(Var, Var)> {
        Ok((self.linear(g, h, a.k)?, self.linear(g, h, a.v)?))
    }

    fn feed_forward(&self, g: &mut Graph<T>, x: Var, f: FeedForward, drop: &mut Dropout) -> Result<Var> {
        let u = self.linear(g, x, f.up)?;
        let u = g.gelu(u)?;
        let u = drop.apply(g, u)?;
        self.linear(g, u, f.down)
    }

    /// Contextual word representations `H`, `(L × D)`.
    pub fn encode(&self, g: &mut Graph<T>, doc: &Document, drop: &mut Dropout) -> Result<Var> {
        let n = doc.len();
        if n > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: n,
                max: self.config.max_positions,
            });
        }
        let table = g.param(&self.params, self.w.word_emb);
        let x = g.embedding_lookup(table, &self.word_ids(doc))?;
        let pos = g.param(&self.params, self.w.enc_pos);
        let positions: Vec<usize> = (0..n).collect();
        let p = g.embedding_lookup(pos, &positions)?;
        let mut x = g.add(x, p)?;
        x = drop.apply(g, x)?;
        for layer in &self.w.encoder {
            let a = self.norm(g, x, layer.ln1)?;
            let a = self.self_attention(g, a, layer.attn, false, None)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let f = self.norm(g, x, layer.ln2)?;
            let f = self.feed_forward(g, f, layer.ffn, drop)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        match self.w.enc_norm {
            Some(n) => self.norm(g, x, n),
            None => Ok(x),
        }
    }

    fn check_layout(&self, layout: &VocabLayout, len: usize) -> Result<()> {
        let c = &self.config;
        if layout.len() != len
            || layout.max_width() != c.max_width
            || layout.entity_types() != c.entity_types
            || layout.relation_types() != c.relation_types
        {
            return Err(ModelError::LayoutMismatch(format!(
                "layout (L={}, K={}, C={}, R={}) vs input L={len}, model K={}, C={}, R={}",
                layout.len(),
                layout.max_width(),
                layout.entity_types(),
                layout.relation_types(),
                c.max_width,
                c.entity_types,
                c.relation_types
            )));
        }
        Ok(())
    }

    /// Span embeddings `S`, `(L·K·C × D)`, in span-id order. Slots that
    /// overhang the input use a zero end vector.
    pub fn span_embeddings(&self, g: &mut Graph<T>, h: Var, layout: &VocabLayout) -> Result<Var> {
        let len = g.value(h).rows();
        self.check_layout(layout, len)?;
        let k = layout.max_width();
        let mut starts = Vec::with_capacity(len * k);
        let mut ends = Vec::with_capacity(len * k);
        for s in 0..len {
            for w in 0..k {
                starts.push(Some(s));
                ends.push((s + w < len).then_some(s + w));
            }
        }
        let hs = g.gather_rows(h, &starts)?;
        let he = g.gather_rows(h, &ends)?;
        let x = g.concat_cols(&[hs, he])?;
        let ws: Vec<Var> = self.w.w_type.iter().map(|&id| g.param(&self.params, id)).collect();
        let w_all = g.concat_cols(&ws)?;
        let y = g.matmul(x, w_all)?;
        Ok(g.reshape(y, &[layout.span_slots(), self.config.d_model])?)
    }

    /// `E = [S; special; relation]`, `(V × D)`.
    pub fn build_e(&self, g: &mut Graph<T>, s: Var) -> Result<Var> {
        let special = g.param(&self.params, self.w.special);
        let relation = g.param(&self.params, self.w.relation);
        Ok(g.concat_rows(&[s, special, relation])?)
    }

    fn decoder_inputs_at(&self, g: &mut Graph<T>, e: Var, ids: &[usize], labels: &[Phase], first: usize) -> Result<Var> {
        if ids.len() != labels.len() {
            return Err(ModelError::LabelCount {
                ids: ids.len(),
                labels: labels.len(),
            });
        }
        let end = first + ids.len();
        if end > self.config.max_dec_positions {
            return Err(ModelError::PrefixTooLong {
                len: end,
                max: self.config.max_dec_positions,
            });
        }
        let mut z = g.embedding_lookup(e, ids)?;
        if !self.config.pos_off {
            let table = g.param(&self.params, self.w.dec_pos);
            let positions: Vec<usize> = (first..end).collect();
            let p = g.embedding_lookup(table, &positions)?;
            z = g.add(z, p)?;
        }
        if !self.config.struct_off {
            let table = g.param(&self.params, self.w.dec_struct);
            let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
            let s = g.embedding_lookup(table, &idx)?;
            z = g.add(z, s)?;
        }
        Ok(z)
    }

    /// `Z[i] = E[y_i] + E_pos[i] + E_struct[label_i]`.
    pub fn decoder_step_inputs(&self, g: &mut Graph<T>, e: Var, ids: &[usize], labels: &[Phase]) -> Result<Var> {
        self.decoder_inputs_at(g, e, ids, labels, 0)
    }

    /// Decoder hidden states `(n × D)` for inputs `z` attending over `h`.
    pub fn decode_hidden(
        &self,
        g: &mut Graph<T>,
        z: Var,
        h: Var,
        drop: &mut Dropout,
        mut capture: Option<&mut AttentionMaps<T>>,
    ) -> Result<Var> {
        let mut x = drop.apply(g, z)?;
        for layer in &self.w.decoder {
            let (mut cap_self, mut cap_cross) = (Vec::new(), Vec::new());
            let want = capture.is_some();
            let a = self.norm(g, x, layer.ln1)?;
            let a = self.self_attention(g, a, layer.self_attn, true, want.then_some(&mut cap_self))?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let c = self.norm(g, x, layer.ln2)?;
            let q = self.linear(g, c, layer.cross_attn.q)?;
            let (k, v) = self.cross_kv(g, h, layer.cross_attn)?;
            let c = self.attend(g, q, k, v, None, want.then_some(&mut cap_cross))?;
            let c = self.linear(g, c, layer.cross_attn.o)?;
            let c = drop.apply(g, c)?;
            x = g.add(x, c)?;
            let f = self.norm(g, x, layer.ln3)?;
            let f = self.feed_forward(g, f, layer.ffn, drop)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
            if let Some(maps) = capture.as_mut() {
                maps.self_attn.push(cap_self);
                maps.cross_attn.push(cap_cross);
            }
        }
        self.norm(g, x, self.w.dec_norm)
    }

    /// Pointing scores `hidden · Eᵀ`, one row of `V` logits per hidden row.
    pub fn next_token_logits(&self, g: &mut Graph<T>, hidden: Var, e: Var) -> Result<Var> {
        let et = g.transpose(e)?;
        Ok(g.matmul(hidden, et)?)
    }

    /// Teacher-forced logits `((n-1) × V)`: row `j` scores symbol `j + 1`
    /// given the gold prefix `ids[..=j]`.
    pub fn teacher_forcing_logits(
        &self,
        g: &mut Graph<T>,
        doc: &Document,
        layout: &VocabLayout,
        ids: &[usize],
        labels: &[Phase],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if ids.len() < 2 || ids.len() != labels.len() {
            return Err(ModelError::LabelCount {
                ids: ids.len(),
                labels: labels.len(),
            });
        }
        let h = self.encode(g, doc, drop)?;
        let s = self.span_embeddings(g, h, layout)?;
        let e = self.build_e(g, s)?;
        let n = ids.len() - 1;
        let z = self.decoder_step_inputs(g, e, &ids[..n], &labels[..n])?;
        let hidden = self.decode_hidden(g, z, h, drop, None)?;
        self.next_token_logits(g, hidden, e)
    }

    /// Runs the encoder and builds `E` for inference.
    pub fn prepare(&self, doc: &Document) -> Result<Encoded<T>> {
        let layout = self.layout_for(doc)?;
        let mut g = Graph::new();
        let mut drop = Dropout::off();
        let h = self.encode(&mut g, doc, &mut drop)?;
        let s = self.span_embeddings(&mut g, h, &layout)?;
        let e = self.build_e(&mut g, s)?;
        Ok(Encoded {
            layout,
            h: g.value(h).clone(),
            e: g.value(e).clone(),
        })
    }

    /// Next-symbol logits by recomputing the decoder over the whole prefix.
    pub fn full_step_logits(&self, enc: &Encoded<T>, ids: &[usize], labels: &[Phase]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let h = g.constant(enc.h.clone());
        let e = g.constant(enc.e.clone());
        let z = self.decoder_step_inputs(&mut g, e, ids, labels)?;
        let hidden = self.decode_hidden(&mut g, z, h, &mut Dropout::off(), None)?;
        let last = g.gather_rows(hidden, &[Some(ids.len() - 1)])?;
        let logits = self.next_token_logits(&mut g, last, e)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Attention weights of a decoder pass over `ids`.
    pub fn attention_maps(&self, enc: &Encoded<T>, ids: &[usize], labels: &[Phase]) -> Result<AttentionMaps<T>> {
        let mut g = Graph::new();
        let h = g.constant(enc.h.clone());
        let e = g.constant(enc.e.clone());
        let z = self.decoder_step_inputs(&mut g, e, ids, labels)?;
        let mut maps = AttentionMaps::default();
        self.decode_hidden(&mut g, z, h, &mut Dropout::off(), Some(&mut maps))?;
        Ok(maps)
    }

    /// Decoder state that caches per-layer keys and values between steps.
    pub fn incremental<'m>(&'m self, enc: &Encoded<T>) -> Result<IncrementalDecoder<'m, T>> {
        let mut g = Graph::new();
        let h = g.constant(enc.h.clone());
        let mut cross = Vec::with_capacity(self.w.decoder.len());
        for layer in &self.w.decoder {
            let (k, v) = self.cross_kv(&mut g, h, layer.cross_attn)?;
            cross.push((g.value(k).clone(), g.value(v).clone()));
        }
        Ok(IncrementalDecoder {
            model: self,
            e: enc.e.clone(),
            cross,
            cache: vec![None; self.w.decoder.len()],
            pos: 0,
        })
    }
}

/// Incremental decoding: each step feeds one symbol and returns the logits
/// for the next. The arithmetic per row is the same as a full recompute.
pub struct IncrementalDecoder<'m, T: Scalar> {
    model: &'m Atg<T>,
    e: Tensor<T>,
    cross: Vec<(Tensor<T>, Tensor<T>)>,
    cache: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    pos: usize,
}

impl<T: Scalar> IncrementalDecoder<'_, T> {
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn step(&mut self, id: usize, label: Phase) -> Result<Vec<T>> {
        let m = self.model;
        let mut g = Graph::new();
        let e = g.constant(self.e.clone());
        let mut x = m.decoder_inputs_at(&mut g, e, &[id], &[label], self.pos)?;
        for (l, layer) in m.w.decoder.iter().enumerate() {
            let a = m.norm(&mut g, x, layer.ln1)?;
            let sa = layer.self_attn;
            let q = m.linear(&mut g, a, sa.q)?;
            let k_new = m.linear(&mut g, a, sa.k)?;
            let v_new = m.linear(&mut g, a, sa.v)?;
            let (k, v) = match self.cache[l].take() {
                Some((kc, vc)) => {
                    let kc = g.constant(kc);
                    let vc = g.constant(vc);
                    (g.concat_rows(&[kc, k_new])?, g.concat_rows(&[vc, v_new])?)
                }
                None => (k_new, v_new),
            };
            self.cache[l] = Some((g.value(k).clone(), g.value(v).clone()));
            let o = m.attend(&mut g, q, k, v, None, None)?;
            let a = m.linear(&mut g, o, sa.o)?;
            x = g.add(x, a)?;
            let c = m.norm(&mut g, x, layer.ln2)?;
            let q = m.linear(&mut g, c, layer.cross_attn.q)?;
            let ck = g.constant(self.cross[l].0.clone());
            let cv = g.constant(self.cross[l].1.clone());
            let c = m.attend(&mut g, q, ck, cv, None, None)?;
            let c = m.linear(&mut g, c, layer.cross_attn.o)?;
            x = g.add(x, c)?;
            let f = m.norm(&mut g, x, layer.ln3)?;
            let f = m.feed_forward(&mut g, f, layer.ffn, &mut Dropout::off())?;
            x = g.add(x, f)?;
        }
        let hidden = m.norm(&mut g, x, m.w.dec_norm)?;
        let logits = m.next_token_logits(&mut g, hidden, e)?;
        self.pos += 1;
        Ok(g.value(logits).data().to_vec())
    }
}
