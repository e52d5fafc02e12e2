//! Teacher-forced training with sentence augmentation, a warmup/decay
//! schedule, per-group learning rates and AdamW.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{predict_all, DecodeConfig, DecodeError};
use crate::eval::{score_corpus, ScoreReport};
use crate::grammar::{Grammar, GrammarError};
use crate::graph::{Document, Example, IEGraph, Relation, Schema};
use crate::io::SchemaFile;
use crate::linearize::{linearize, Ordering};
use crate::model::{Atg, Dropout, ModelConfig, ModelError, WordVocab};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Graph, ParamGroup, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::vocab::VocabError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("gold symbol at position {position} is illegal under the grammar mask")]
    GoldIllegalUnderMask { position: usize },
    #[error("gold sequence rejected by the grammar: {0}")]
    GoldRejected(GrammarError),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub warmup_frac: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// `B`: at most this many sentences are concatenated per sample.
    pub augment_max: usize,
    pub ordering: Ordering,
    pub seed: u64,
    /// Dev evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub log_every: usize,
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 70_000,
            warmup_frac: 0.1,
            lr_encoder: 3e-5,
            lr_decoder: 7e-5,
            lr_other: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            augment_max: 5,
            ordering: Ordering::Sorted,
            seed: 0,
            eval_every: 1000,
            log_every: 50,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad(format!("warmup_frac must lie in (0, 1), got {}", self.warmup_frac));
        }
        if self.augment_max == 0 || self.batch_size == 0 || self.max_steps == 0 {
            return bad("augment_max, batch_size and max_steps must be positive".into());
        }
        if [self.lr_encoder, self.lr_decoder, self.lr_other, self.weight_decay]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return bad("learning rates and weight decay must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Learning rate of each parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub encoder: f64,
    pub decoder: f64,
    pub other: f64,
}

impl GroupRates {
    pub fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::Other => self.other,
        }
    }
}

/// Linear warmup to the base rates over `warmup_frac · max_steps`, then
/// linear decay to zero at `max_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> GroupRates {
    let total = config.max_steps as f64;
    let warm = config.warmup_frac * total;
    let s = (step as f64).min(total);
    let f = if s < warm { s / warm } else { (total - s) / (total - warm) };
    GroupRates {
        encoder: config.lr_encoder * f,
        decoder: config.lr_decoder * f,
        other: config.lr_other * f,
    }
}

/// Concatenates `n ~ U[1, b]` sentences drawn uniformly with replacement,
/// shifting each sentence's spans by the length of the text before it.
pub fn augment<R: Rng + ?Sized>(data: &[Example], rng: &mut R, b: usize) -> Example {
    assert!(!data.is_empty(), "augment needs a non-empty dataset");
    let n = rng.gen_range(1..=b.max(1));
    let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..data.len())).collect();
    concat_examples(picks.iter().map(|&i| &data[i]))
}

/// Joins examples left to right into one document and graph.
pub fn concat_examples<'a>(parts: impl IntoIterator<Item = &'a Example>) -> Example {
    let mut tokens = Vec::new();
    let mut ids = Vec::new();
    let mut entities = Vec::new();
    let mut relations = Vec::new();
    for ex in parts {
        let offset = tokens.len();
        let base = entities.len();
        tokens.extend(ex.doc.tokens.iter().cloned());
        ids.push(ex.doc.id.clone());
        entities.extend(ex.graph.entities.iter().map(|e| e.shifted(offset)));
        relations.extend(
            ex.graph
                .relations
                .iter()
                .map(|r| Relation::new(r.head + base, r.tail + base, r.rel_type_id)),
        );
    }
    Example {
        doc: Document {
            id: ids.join("+"),
            tokens,
        },
        graph: IEGraph::new(entities, relations),
    }
}

/// Mean negative log-likelihood of `targets` under `logits` restricted by
/// the per-position grammar `masks`.
pub fn nll_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], masks: &[Vec<bool>]) -> Result<Var> {
    for (position, (&t, m)) in targets.iter().zip(masks).enumerate() {
        if !m.get(t).copied().unwrap_or(false) {
            return Err(TrainError::GoldIllegalUnderMask { position: position + 1 });
        }
    }
    let flat: Vec<bool> = masks.iter().flatten().copied().collect();
    Ok(g.cross_entropy(logits, targets, Some(&flat))?)
}

/// Decoupled weight-decay Adam with per-group learning rates.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, lr: &GroupRates) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::one() - T::of(self.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::of(self.beta2.powi(self.t as i32));
        let eps = T::of(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let rate = T::of(lr.of(p.group));
            let decay = if p.decay { rate * T::of(self.weight_decay) } else { T::zero() };
            for (((x, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x = *x - decay * *x - rate * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    fn state_tensors(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            out.push((format!("adam.m.{}", p.name), Tensor::new(p.value.shape().to_vec(), m.clone()).expect("shape")));
            out.push((format!("adam.v.{}", p.name), Tensor::new(p.value.shape().to_vec(), v.clone()).expect("shape")));
        }
        out
    }

    fn load_state(&mut self, params: &ParamStore<T>, ckpt: &Checkpoint<T>, t: u64) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut self.m[i]), ("adam.v", &mut self.v[i])] {
                let name = format!("{prefix}.{}", p.name);
                let t = ckpt
                    .get(&name)
                    .ok_or_else(|| TrainError::Checkpoint(format!("missing optimizer tensor {name}")))?;
                if t.numel() != slot.len() {
                    return Err(TrainError::Checkpoint(format!("optimizer tensor {name} has the wrong size")));
                }
                slot.copy_from_slice(t.data());
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Everything besides tensors that a checkpoint records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub precision: String,
    pub model: ModelConfig,
    pub vocab: WordVocab,
    pub schema: SchemaFile,
    pub train: TrainConfig,
    pub step: usize,
    pub optimizer_steps: u64,
    pub best_dev: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: GroupRates,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<ScoreReport>,
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Atg<T>,
    pub schema: Schema,
    pub config: TrainConfig,
    optimizer: AdamW<T>,
    step: usize,
    best_dev: Option<f64>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// One prepared training sample: token ids, labels and masks of the gold
/// sequence.
struct Sample {
    example: Example,
    ids: Vec<usize>,
    labels: Vec<crate::grammar::Phase>,
    masks: Vec<Vec<bool>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Atg<T>, schema: Schema, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(model.params(), config.weight_decay);
        Ok(Self {
            model,
            schema,
            config,
            optimizer,
            step: 0,
            best_dev: None,
        })
    }

    /// Updates taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn best_dev(&self) -> Option<f64> {
        self.best_dev
    }

    fn prepare_sample<R: Rng + ?Sized>(&self, example: Example, rng: &mut R) -> Result<Sample> {
        let seq = linearize(&example.graph, self.config.ordering, rng);
        let layout = self.model.layout_for(&example.doc)?;
        let grammar = Grammar::new(&layout, &self.schema);
        let (replay, end) = grammar.replay(&seq.symbols).map_err(|e| match e {
            GrammarError::IllegalTransition { .. } => {
                let position = (1..seq.symbols.len())
                    .find(|&i| grammar.replay(&seq.symbols[..=i]).is_err())
                    .unwrap_or(0);
                TrainError::GoldIllegalUnderMask { position }
            }
            other => TrainError::GoldRejected(other),
        })?;
        if !end.finished {
            return Err(TrainError::GoldRejected(GrammarError::Unterminated));
        }
        let ids = layout.ids_of(&seq.symbols)?;
        Ok(Sample {
            example,
            ids,
            labels: replay.labels,
            masks: replay.masks,
        })
    }

    /// Draws the augmented batch for `step`, dropping trailing sentences
    /// that would overflow the encoder position table.
    fn draw_batch(&self, data: &[Example], rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        let cap = self.model.config().max_positions;
        let mut out = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let n = rng.gen_range(1..=self.config.augment_max);
            let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..data.len())).collect();
            let mut kept = Vec::new();
            let mut len = 0;
            for &i in &picks {
                if !kept.is_empty() && len + data[i].doc.len() > cap {
                    break;
                }
                len += data[i].doc.len();
                kept.push(&data[i]);
            }
            let ex = concat_examples(kept);
            out.push(self.prepare_sample(ex, rng)?);
        }
        Ok(out)
    }

    /// Teacher-forced loss of one sample; gradients are added to the store
    /// scaled by `weight` when `backprop` is set.
    fn sample_loss(&mut self, s: &Sample, rng: &mut ChaCha8Rng, weight: T, backprop: bool) -> Result<f64> {
        let mut g = Graph::new();
        let layout = self.model.layout_for(&s.example.doc)?;
        let p = self.model.config().dropout;
        let mut drop = if backprop { Dropout::train(p, rng) } else { Dropout::off() };
        let logits = self
            .model
            .teacher_forcing_logits(&mut g, &s.example.doc, &layout, &s.ids, &s.labels, &mut drop)?;
        let loss = nll_loss(&mut g, logits, &s.ids[1..], &s.masks)?;
        let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
        if backprop {
            let scaled = g.scale(loss, weight)?;
            g.backward(scaled)?;
            g.accumulate_param_grads(self.model.params_mut());
        }
        Ok(value)
    }

    /// One optimizer update on a freshly drawn batch. Returns the batch loss
    /// measured before the update.
    pub fn train_step(&mut self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut rng = step_rng(self.config.seed, self.step);
        let batch = self.draw_batch(data, &mut rng)?;
        self.model.params_mut().zero_grads();
        let weight = T::one() / T::of(batch.len() as f64);
        let mut total = 0.0;
        for s in &batch {
            total += self.sample_loss(s, &mut rng, weight, true)?;
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(self.step));
        }
        if let Some(max) = self.config.max_grad_norm {
            let norm = self.model.params().grad_norm().to_f64().unwrap_or(f64::INFINITY);
            if norm > max {
                self.model.params_mut().scale_grads(T::of(max / norm));
            }
        }
        let rates = lr_at(self.step + 1, &self.config);
        self.optimizer.step(self.model.params_mut(), &rates);
        self.step += 1;
        Ok(loss)
    }

    /// Mean teacher-forced loss of fixed examples (no augmentation, no update).
    pub fn eval_loss(&mut self, data: &[Example]) -> Result<f64> {
        let mut rng = step_rng(self.config.seed, usize::MAX);
        let mut total = 0.0;
        for ex in data {
            let s = self.prepare_sample(ex.clone(), &mut rng)?;
            total += self.sample_loss(&s, &mut rng, T::one(), false)?;
        }
        Ok(total / data.len().max(1) as f64)
    }

    pub fn evaluate(&self, data: &[Example], decode: &DecodeConfig) -> Result<ScoreReport> {
        score_model(&self.model, &self.schema, data, decode)
    }

    /// Runs until `max_steps`, evaluating on `dev` and keeping the best
    /// checkpoint by dev REL+ (ENT when the schema has no relation types).
    /// With `out_dir`, writes `best.ckpt`, `last.ckpt` and `metrics.jsonl`.
    pub fn train_loop(
        &mut self,
        train: &[Example],
        dev: Option<&[Example]>,
        out_dir: Option<&Path>,
        mut on_log: impl FnMut(&LogRecord),
    ) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        let mut lines = String::new();
        let decode = DecodeConfig::greedy();
        while self.step < self.config.max_steps {
            let loss = self.train_step(train)?;
            let step = self.step;
            let at_end = step == self.config.max_steps;
            let eval_now = at_end || (self.config.eval_every > 0 && step.is_multiple_of(self.config.eval_every));
            let log_now = eval_now || (self.config.log_every > 0 && step.is_multiple_of(self.config.log_every)) || step == 1;
            if !log_now {
                continue;
            }
            let dev_report = match (eval_now, dev) {
                (true, Some(d)) if !d.is_empty() => Some(self.evaluate(d, &decode)?),
                _ => None,
            };
            if let Some(r) = &dev_report {
                let score = if self.schema.num_relation_types() > 0 { r.rel_plus.f1 } else { r.ent.f1 };
                if self.best_dev.is_none_or(|b| score > b) {
                    self.best_dev = Some(score);
                    if let Some(dir) = out_dir {
                        self.save(&dir.join("best.ckpt"))?;
                    }
                }
            }
            let rec = LogRecord {
                step,
                loss,
                lr: lr_at(step, &self.config),
                dev: dev_report,
            };
            on_log(&rec);
            lines.push_str(&serde_json::to_string(&rec).expect("log record serializes"));
            lines.push('\n');
            if let Some(dir) = out_dir {
                crate::io::write_atomic(&dir.join("metrics.jsonl"), lines.as_bytes())?;
            }
            log.push(rec);
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join("last.ckpt"))?;
            if self.best_dev.is_none() {
                self.save(&dir.join("best.ckpt"))?;
            }
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let meta = CheckpointMeta {
            precision: T::NAME.to_string(),
            model: self.model.config().clone(),
            vocab: self.model.vocab().clone(),
            schema: SchemaFile::from_schema(&self.schema),
            train: self.config.clone(),
            step: self.step,
            optimizer_steps: self.optimizer.steps_taken(),
            best_dev: self.best_dev,
        };
        let mut tensors = self.model.params().named_tensors();
        tensors.extend(self.optimizer.state_tensors(self.model.params()));
        Checkpoint {
            metadata: serde_json::to_string(&meta).expect("metadata serializes"),
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_checkpoint(path, &self.checkpoint())?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&ckpt.metadata).map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?;
        if meta.precision != T::NAME {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint holds {} values, expected {}",
                meta.precision,
                T::NAME
            )));
        }
        let schema = meta
            .schema
            .to_schema()
            .map_err(|e| TrainError::Checkpoint(format!("schema: {e}")))?;
        let mut model = Atg::new(meta.model.clone(), meta.vocab.clone(), 0)?;
        model.load_tensors(&ckpt.tensors)?;
        let mut trainer = Trainer::new(model, schema, meta.train.clone())?;
        trainer.optimizer.load_state(trainer.model.params(), ckpt, meta.optimizer_steps)?;
        trainer.step = meta.step;
        trainer.best_dev = meta.best_dev;
        Ok(trainer)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint::<T>(path)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Greedy (or configured) predictions on `data`, scored against its gold graphs.
pub fn score_model<T: Scalar>(model: &Atg<T>, schema: &Schema, data: &[Example], decode: &DecodeConfig) -> Result<ScoreReport> {
    let docs: Vec<&Document> = data.iter().map(|e| &e.doc).collect();
    let pred = predict_all(model, &docs, schema, decode)?;
    let gold: Vec<IEGraph> = data.iter().map(|e| e.graph.clone()).collect();
    Ok(score_corpus(&pred, &gold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EntitySpan;

    fn cfg(max_steps: usize) -> TrainConfig {
        TrainConfig {
            max_steps,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(1000);
        let r0 = lr_at(0, &c);
        assert_eq!((r0.encoder, r0.decoder, r0.other), (0.0, 0.0, 0.0));
        let peak = lr_at(100, &c);
        assert_eq!((peak.encoder, peak.decoder, peak.other), (3e-5, 7e-5, 1e-4));
        assert_eq!(lr_at(1000, &c).other, 0.0);
        assert!((lr_at(550, &c).other - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn invalid_configs() {
        for c in [
            TrainConfig {
                warmup_frac: 0.0,
                ..cfg(10)
            },
            TrainConfig {
                warmup_frac: 1.0,
                ..cfg(10)
            },
            TrainConfig {
                augment_max: 0,
                ..cfg(10)
            },
        ] {
            assert!(c.validate().is_err());
        }
    }

    fn ex(len: usize, ents: Vec<EntitySpan>, rels: Vec<Relation>) -> Example {
        Example {
            doc: Document::new("x", (0..len).map(|i| format!("w{i}")).collect()).unwrap(),
            graph: IEGraph::new(ents, rels),
        }
    }

    #[test]
    fn concat_shifts_second_sentence() {
        let a = ex(4, vec![EntitySpan::new(0, 0, 0)], vec![]);
        let b = ex(6, vec![EntitySpan::new(1, 2, 1), EntitySpan::new(4, 4, 0)], vec![Relation::new(0, 1, 0)]);
        let m = concat_examples([&a, &b]);
        assert_eq!(m.doc.len(), 10);
        assert_eq!(m.graph.entities[1], EntitySpan::new(5, 6, 1));
        assert_eq!(m.graph.relations, vec![Relation::new(1, 2, 0)]);
    }

    #[test]
    fn augment_with_b1_is_identity() {
        let data = vec![ex(3, vec![EntitySpan::new(0, 1, 0)], vec![])];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(augment(&data, &mut rng, 1), data[0]);
        }
    }

    #[test]
    fn uniform_logits_give_log_m() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 4]));
        let masks = vec![vec![true, true, false, false], vec![true, true, true, true]];
        let l = nll_loss(&mut g, logits, &[1, 3], &masks).unwrap();
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);
        assert!(matches!(
            nll_loss(&mut g, logits, &[2, 3], &masks),
            Err(TrainError::GoldIllegalUnderMask { position: 1 })
        ));
    }

    #[test]
    fn peaked_logits_give_zero_loss() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1e6, 0.0]).unwrap());
        let l = nll_loss(&mut g, logits, &[1], &[vec![true; 3]]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
