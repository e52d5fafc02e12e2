//! Grammar-constrained generation: greedy argmax or nucleus sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{initial_state, DecodeState, Grammar, GrammarError, Phase};
use crate::graph::{Document, IEGraph, Schema};
use crate::linearize::{delinearize, GraphSequence, LinearizeError, Ordering, Symbol, START};
use crate::model::{Atg, AttentionMaps, Encoded, ModelError};
use crate::tensor::{kernels, Scalar};
use crate::vocab::VocabError;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("no legal symbol at step {0}")]
    DeadEnd(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub top_p: f64,
    /// Sequence budget including `<START>` and `<END>`; `None` means
    /// `3 + 4·L`. Always capped by the decoder position table.
    pub max_len: Option<usize>,
    pub seed: u64,
    /// Use the cached-state decoder instead of recomputing the prefix.
    pub incremental: bool,
    /// Record attention maps of the finished sequence.
    pub capture_attention: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            top_p: 0.9,
            max_len: None,
            seed: 0,
            incremental: true,
            capture_attention: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodeError::InvalidConfig(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.max_len.is_some_and(|m| m < 3) {
            return Err(DecodeError::InvalidConfig("max_len must be at least 3".into()));
        }
        Ok(())
    }

    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn nucleus(top_p: f64, seed: u64) -> Self {
        Self {
            mode: DecodeMode::Nucleus,
            top_p,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Step {
    pub id: usize,
    pub symbol: Symbol,
    pub phase: Phase,
    /// Probability of the chosen symbol under the masked distribution.
    pub prob: f64,
    /// Number of grammar-legal symbols at this step.
    pub legal: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Trace<T> {
    pub steps: Vec<Step>,
    /// The length budget forced an early close of the sequence.
    pub truncated: bool,
    pub attention: Option<AttentionMaps<T>>,
}

#[derive(Debug, Clone)]
pub struct Generation<T> {
    pub sequence: GraphSequence,
    pub graph: IEGraph,
    pub trace: Trace<T>,
    pub encoded: Encoded<T>,
}

/// Symbols still needed to finish from `phase`.
fn closing_cost(phase: Phase) -> usize {
    match phase {
        Phase::Head => 1,
        Phase::Node | Phase::Rel => 2,
        Phase::Tail => 3,
    }
}

fn next_phase(phase: Phase, sym: &Symbol) -> Option<Phase> {
    match (phase, sym) {
        (Phase::Node, Symbol::Span(_)) => Some(Phase::Node),
        (Phase::Node, _) => Some(Phase::Head),
        (Phase::Head, Symbol::Span(_)) => Some(Phase::Tail),
        (Phase::Head, _) => None,
        (Phase::Tail, _) => Some(Phase::Rel),
        (Phase::Rel, _) => Some(Phase::Head),
    }
}

/// Samples from the smallest set of highest-probability candidates whose
/// mass reaches `top_p`, renormalised. Candidates are `(id, prob)`; among
/// equal probabilities the input order is kept.
pub fn nucleus_select<R: Rng + ?Sized>(candidates: &[(usize, f64)], top_p: f64, rng: &mut R) -> usize {
    assert!(!candidates.is_empty(), "nucleus over an empty candidate set");
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut mass = 0.0;
    let mut keep = 0;
    for &(_, p) in &sorted {
        mass += p;
        keep += 1;
        if mass >= top_p {
            break;
        }
    }
    if keep == 1 {
        return sorted[0].0;
    }
    let u = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &(id, p) in &sorted[..keep] {
        acc += p;
        if u < acc {
            return id;
        }
    }
    sorted[keep - 1].0
}

/// Generates with a generator seeded from `config.seed`.
pub fn generate<T: Scalar>(
    model: &Atg<T>,
    doc: &Document,
    schema: &Schema,
    config: &DecodeConfig,
) -> Result<Generation<T>, DecodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    generate_with_rng(model, doc, schema, config, &mut rng)
}

pub fn generate_with_rng<T: Scalar, R: Rng + ?Sized>(
    model: &Atg<T>,
    doc: &Document,
    schema: &Schema,
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<Generation<T>, DecodeError> {
    config.validate()?;
    let enc = model.prepare(doc)?;
    let layout = enc.layout;
    let grammar = Grammar::new(&layout, schema);
    let cap = model.config().max_dec_positions + 1;
    let max_len = config.max_len.unwrap_or(3 + 4 * doc.len()).min(cap).max(3);

    let start = layout.symbol_to_id(&START)?;
    let mut ids = vec![start];
    let mut symbols = vec![START];
    let mut labels = vec![Phase::Node];
    let mut state: DecodeState = initial_state();
    let mut trace = Trace::default();
    let mut inc = if config.incremental { Some(model.incremental(&enc)?) } else { None };

    while !state.finished {
        let logits = match inc.as_mut() {
            Some(d) => d.step(*ids.last().expect("non-empty"), *labels.last().expect("non-empty"))?,
            None => model.full_step_logits(&enc, &ids, &labels)?,
        };
        let mut mask = grammar.legal_mask(&state)?;
        let legal = mask.iter().filter(|&&m| m).count();
        let remaining = max_len - ids.len();
        for (id, m) in mask.iter_mut().enumerate() {
            if !*m {
                continue;
            }
            let sym = layout.id_to_symbol(id)?;
            let fits = match next_phase(state.phase, &sym) {
                Some(p) => remaining > closing_cost(p),
                None => remaining >= 1,
            };
            if !fits {
                *m = false;
                trace.truncated = true;
            }
        }
        let logits64: Vec<f64> = logits.iter().map(|x| x.to_f64().expect("finite")).collect();
        let probs = kernels::softmax_rows(&logits64, logits64.len(), Some(&mask));
        let choice = match config.mode {
            DecodeMode::Greedy => kernels::masked_argmax(&logits, &mask),
            DecodeMode::Nucleus => {
                let mut cands: Vec<(usize, f64)> =
                    (0..mask.len()).filter(|&i| mask[i]).map(|i| (i, probs[i])).collect();
                cands.sort_by(|a, b| logits[b.0].partial_cmp(&logits[a.0]).unwrap_or(std::cmp::Ordering::Equal));
                (!cands.is_empty()).then(|| nucleus_select(&cands, config.top_p, rng))
            }
        }
        .ok_or(DecodeError::DeadEnd(ids.len()))?;
        let sym = layout.id_to_symbol(choice)?;
        trace.steps.push(Step {
            id: choice,
            symbol: sym,
            phase: state.phase,
            prob: probs[choice],
            legal,
        });
        labels.push(state.phase);
        state = grammar.advance(&state, &sym)?;
        ids.push(choice);
        symbols.push(sym);
    }

    if config.capture_attention {
        trace.attention = Some(model.attention_maps(&enc, &ids, &labels)?);
    }
    let graph = delinearize(&symbols, true)?;
    Ok(Generation {
        sequence: GraphSequence {
            symbols,
            ordering: Ordering::Sorted,
        },
        graph,
        trace,
        encoded: enc,
    })
}

/// Greedy predictions for a list of documents.
pub fn predict_all<T: Scalar>(
    model: &Atg<T>,
    docs: &[&Document],
    schema: &Schema,
    config: &DecodeConfig,
) -> Result<Vec<IEGraph>, DecodeError> {
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let cfg = DecodeConfig {
                seed: config.seed.wrapping_add(i as u64),
                capture_attention: false,
                ..config.clone()
            };
            generate(model, d, schema, &cfg).map(|g| g.graph)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element_nucleus_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(nucleus_select(&[(5, 0.7), (2, 0.2), (9, 0.1)], 0.6, &mut rng), 5);
        }
    }

    #[test]
    fn nucleus_ties_keep_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(nucleus_select(&[(4, 0.5), (1, 0.5)], 1e-9, &mut rng), 4);
    }

    #[test]
    fn closing_costs_reach_end() {
        assert_eq!(closing_cost(Phase::Node), 2);
        assert_eq!(next_phase(Phase::Head, &crate::linearize::END), None);
    }

    #[test]
    fn invalid_configs() {
        assert!(DecodeConfig::nucleus(0.0, 0).validate().is_err());
        assert!(DecodeConfig::nucleus(1.0, 0).validate().is_ok());
        let c = DecodeConfig {
            max_len: Some(2),
            ..DecodeConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
