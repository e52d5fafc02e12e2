//! Finite-state machine for constrained decoding.
//!
//! States and their legal next symbols:
//!
//! | phase | legal                                                    | next  |
//! |-------|----------------------------------------------------------|-------|
//! | Node  | unseen realizable span                                   | Node  |
//! | Node  | `<SEP>`                                                  | Head  |
//! | Head  | generated span that has at least one admissible tail     | Tail  |
//! | Head  | `<END>`                                                  | done  |
//! | Tail  | generated span other than the head with an allowed relation | Rel |
//! | Rel   | relation allowed for (head type, tail type)              | Head  |
//!
//! `<START>` is input-only and never legal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntitySpan, Schema};
use crate::linearize::{GraphSequence, Ordering, Special, Symbol, START};
use crate::vocab::VocabLayout;

/// Structural role; doubles as the decoder's structural-embedding label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Node,
    Head,
    Tail,
    Rel,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Node, Phase::Head, Phase::Tail, Phase::Rel];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Node => "Node",
            Phase::Head => "Head",
            Phase::Tail => "Tail",
            Phase::Rel => "Relation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeState {
    pub phase: Phase,
    /// Entity section so far, in generation order, without repeats.
    pub generated: Vec<EntitySpan>,
    pub pending_head: Option<EntitySpan>,
    pub pending_tail: Option<EntitySpan>,
    pub finished: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("decoding already finished")]
    FinishedState,
    #[error("{symbol:?} is not legal in phase {phase:?}")]
    IllegalTransition { phase: Phase, symbol: Symbol },
    #[error("enumeration visited more than {0} states")]
    EnumerationBudgetExceeded(usize),
    #[error("sequence must start with <START>")]
    MissingStart,
    #[error("sequence ended before <END>")]
    Unterminated,
}

/// The grammar for one input: its vocabulary layout plus the schema.
#[derive(Debug, Clone, Copy)]
pub struct Grammar<'a> {
    pub layout: &'a VocabLayout,
    pub schema: &'a Schema,
}

/// Labels and masks obtained by replaying a full gold sequence.
#[derive(Debug, Clone)]
pub struct Replay {
    /// Phase in which each symbol was produced (`<START>` counts as Node).
    pub labels: Vec<Phase>,
    /// `masks[j]` is the legal mask used to predict symbol `j + 1`.
    pub masks: Vec<Vec<bool>>,
}

pub fn initial_state() -> DecodeState {
    DecodeState {
        phase: Phase::Node,
        generated: Vec::new(),
        pending_head: None,
        pending_tail: None,
        finished: false,
    }
}

impl<'a> Grammar<'a> {
    pub fn new(layout: &'a VocabLayout, schema: &'a Schema) -> Self {
        Self { layout, schema }
    }

    fn has_tail_for(&self, state: &DecodeState, head: &EntitySpan) -> bool {
        state
            .generated
            .iter()
            .any(|t| t != head && self.schema.any_relation(head.type_id, t.type_id))
    }

    /// Legality of a single symbol, without building the full mask.
    pub fn is_legal(&self, state: &DecodeState, sym: &Symbol) -> bool {
        if state.finished {
            return false;
        }
        match (state.phase, sym) {
            (Phase::Node, Symbol::Special(Special::Sep)) => true,
            (Phase::Node, Symbol::Span(e)) => {
                e.end < self.layout.len()
                    && self.layout.symbol_to_id(sym).is_ok()
                    && !state.generated.contains(e)
            }
            (Phase::Head, Symbol::Special(Special::End)) => true,
            (Phase::Head, Symbol::Span(e)) => state.generated.contains(e) && self.has_tail_for(state, e),
            (Phase::Tail, Symbol::Span(e)) => {
                let head = state.pending_head.expect("tail phase has a head");
                *e != head && state.generated.contains(e) && self.schema.any_relation(head.type_id, e.type_id)
            }
            (Phase::Rel, Symbol::Rel(r)) => {
                let (h, t) = (state.pending_head.unwrap(), state.pending_tail.unwrap());
                *r < self.layout.relation_types() && self.schema.allows(h.type_id, t.type_id, *r)
            }
            _ => false,
        }
    }

    /// Boolean mask over the `V` vocabulary ids.
    pub fn legal_mask(&self, state: &DecodeState) -> Result<Vec<bool>, GrammarError> {
        if state.finished {
            return Err(GrammarError::FinishedState);
        }
        let l = self.layout;
        let mut mask = vec![false; l.size()];
        let set_span = |mask: &mut Vec<bool>, e: &EntitySpan| {
            if let Ok(id) = l.symbol_to_id(&Symbol::Span(*e)) {
                mask[id] = true;
            }
        };
        match state.phase {
            Phase::Node => {
                for (id, m) in mask.iter_mut().enumerate().take(l.span_slots()) {
                    *m = l.is_realizable(id);
                }
                for e in &state.generated {
                    if let Ok(id) = l.symbol_to_id(&Symbol::Span(*e)) {
                        mask[id] = false;
                    }
                }
                mask[l.special_id(Special::Sep)] = true;
            }
            Phase::Head => {
                for e in &state.generated {
                    if self.has_tail_for(state, e) {
                        set_span(&mut mask, e);
                    }
                }
                mask[l.special_id(Special::End)] = true;
            }
            Phase::Tail => {
                let head = state.pending_head.expect("tail phase has a head");
                for e in &state.generated {
                    if *e != head && self.schema.any_relation(head.type_id, e.type_id) {
                        set_span(&mut mask, e);
                    }
                }
            }
            Phase::Rel => {
                let (h, t) = (state.pending_head.unwrap(), state.pending_tail.unwrap());
                for r in 0..l.relation_types() {
                    mask[l.relation_id(r)] = self.schema.allows(h.type_id, t.type_id, r);
                }
            }
        }
        Ok(mask)
    }

    pub fn advance(&self, state: &DecodeState, sym: &Symbol) -> Result<DecodeState, GrammarError> {
        if state.finished {
            return Err(GrammarError::FinishedState);
        }
        if !self.is_legal(state, sym) {
            return Err(GrammarError::IllegalTransition {
                phase: state.phase,
                symbol: *sym,
            });
        }
        let mut next = state.clone();
        match (state.phase, sym) {
            (Phase::Node, Symbol::Span(e)) => next.generated.push(*e),
            (Phase::Node, _) => next.phase = Phase::Head,
            (Phase::Head, Symbol::Span(e)) => {
                next.pending_head = Some(*e);
                next.phase = Phase::Tail;
            }
            (Phase::Head, _) => next.finished = true,
            (Phase::Tail, Symbol::Span(e)) => {
                next.pending_tail = Some(*e);
                next.phase = Phase::Rel;
            }
            (Phase::Rel, _) => {
                next.pending_head = None;
                next.pending_tail = None;
                next.phase = Phase::Head;
            }
            _ => unreachable!("legality checked above"),
        }
        Ok(next)
    }

    /// Replays `symbols` (starting with `<START>`) through the FSM.
    ///
    /// Unfinished sequences are accepted so prefixes can be replayed; the
    /// caller decides whether `<END>` is required.
    pub fn replay(&self, symbols: &[Symbol]) -> Result<(Replay, DecodeState), GrammarError> {
        if symbols.first() != Some(&START) {
            return Err(GrammarError::MissingStart);
        }
        let mut state = initial_state();
        let mut labels = vec![Phase::Node];
        let mut masks = Vec::with_capacity(symbols.len().saturating_sub(1));
        for sym in &symbols[1..] {
            masks.push(self.legal_mask(&state)?);
            labels.push(state.phase);
            state = self.advance(&state, sym)?;
        }
        Ok((Replay { labels, masks }, state))
    }

    /// Structural label of every symbol in a prefix.
    pub fn structural_labels(&self, symbols: &[Symbol]) -> Result<Vec<Phase>, GrammarError> {
        if symbols.first() != Some(&START) {
            return Err(GrammarError::MissingStart);
        }
        let mut state = initial_state();
        let mut labels = vec![Phase::Node];
        for sym in &symbols[1..] {
            labels.push(state.phase);
            state = self.advance(&state, sym)?;
        }
        Ok(labels)
    }

    /// Every complete sequence of at most `max_len` symbols (including
    /// `<START>` and `<END>`), by depth-first search in id order.
    ///
    /// Fails once more than `budget` states have been expanded.
    pub fn enumerate_valid_sequences(&self, max_len: usize, budget: usize) -> Result<Vec<GraphSequence>, GrammarError> {
        let mut out = Vec::new();
        let mut prefix = vec![START];
        let mut visited = 0;
        self.dfs(&initial_state(), &mut prefix, max_len, budget, &mut visited, &mut out)?;
        Ok(out)
    }

    fn dfs(
        &self,
        state: &DecodeState,
        prefix: &mut Vec<Symbol>,
        max_len: usize,
        budget: usize,
        visited: &mut usize,
        out: &mut Vec<GraphSequence>,
    ) -> Result<(), GrammarError> {
        *visited += 1;
        if *visited > budget {
            return Err(GrammarError::EnumerationBudgetExceeded(budget));
        }
        if state.finished {
            out.push(GraphSequence {
                symbols: prefix.clone(),
                ordering: Ordering::Sorted,
            });
            return Ok(());
        }
        if prefix.len() >= max_len {
            return Ok(());
        }
        let mask = self.legal_mask(state)?;
        for (id, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let sym = self.layout.id_to_symbol(id).expect("mask is within layout");
            let next = self.advance(state, &sym)?;
            prefix.push(sym);
            self.dfs(&next, prefix, max_len, budget, visited, out)?;
            prefix.pop();
        }
        Ok(())
    }
}
