//! Per-input dynamic vocabulary layout.
//!
//! Ids are laid out as `[spans | specials | relations]` so that the
//! vocabulary size is exactly `L·K·C + T + R`. A span `(start, width w, type c)`
//! gets id `((start·K) + w)·C + c`, where `w = end - start`. Slots whose span
//! would overhang the input (`start + w ≥ L`) keep their id but are never
//! realizable.

use std::fmt;

use thiserror::Error;

use crate::graph::{EntitySpan, Schema};
use crate::linearize::{Special, Symbol};

pub const NUM_SPECIAL: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("symbol {0:?} does not fit the vocabulary layout")]
    SymbolOutOfLayout(Symbol),
    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("layout needs L >= 1 and K >= 1 (got L={len}, K={max_width})")]
    EmptyLayout { len: usize, max_width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    len: usize,
    max_width: usize,
    entity_types: usize,
    relation_types: usize,
}

impl VocabLayout {
    pub fn new(len: usize, max_width: usize, entity_types: usize, relation_types: usize) -> Result<Self, VocabError> {
        if len == 0 || max_width == 0 {
            return Err(VocabError::EmptyLayout { len, max_width });
        }
        Ok(Self {
            len,
            max_width,
            entity_types,
            relation_types,
        })
    }

    /// Sequence length `L`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Maximum span width `K`.
    pub fn max_width(&self) -> usize {
        self.max_width
    }

    /// Entity type count `C`.
    pub fn entity_types(&self) -> usize {
        self.entity_types
    }

    /// Relation type count `R`.
    pub fn relation_types(&self) -> usize {
        self.relation_types
    }

    /// Number of span slots, `L·K·C`.
    pub fn span_slots(&self) -> usize {
        self.len * self.max_width * self.entity_types
    }

    pub fn special_offset(&self) -> usize {
        self.span_slots()
    }

    pub fn relation_offset(&self) -> usize {
        self.span_slots() + NUM_SPECIAL
    }

    /// Vocabulary size `V = L·K·C + R + T`.
    pub fn size(&self) -> usize {
        self.span_slots() + self.relation_types + NUM_SPECIAL
    }

    pub fn special_id(&self, s: Special) -> usize {
        self.special_offset() + s.index()
    }

    pub fn relation_id(&self, r: usize) -> usize {
        self.relation_offset() + r
    }

    /// Id of the span slot `(start, w, c)`, realizable or not.
    pub fn slot_id(&self, start: usize, w: usize, c: usize) -> usize {
        (start * self.max_width + w) * self.entity_types + c
    }

    /// `(start, width index, type)` of a span slot id.
    pub fn slot_parts(&self, id: usize) -> (usize, usize, usize) {
        let c = id % self.entity_types;
        let sw = id / self.entity_types;
        (sw / self.max_width, sw % self.max_width, c)
    }

    pub fn is_span_id(&self, id: usize) -> bool {
        id < self.span_slots()
    }

    /// Whether a span slot lies inside the input.
    pub fn is_realizable(&self, id: usize) -> bool {
        if !self.is_span_id(id) {
            return false;
        }
        let (start, w, _) = self.slot_parts(id);
        start + w < self.len
    }

    pub fn realizable_span_count(&self) -> usize {
        let per_type: usize = (0..self.len).map(|s| self.max_width.min(self.len - s)).sum();
        per_type * self.entity_types
    }

    pub fn symbol_to_id(&self, sym: &Symbol) -> Result<usize, VocabError> {
        match *sym {
            Symbol::Span(EntitySpan { start, end, type_id }) => {
                if start >= self.len || end < start || end - start >= self.max_width || type_id >= self.entity_types {
                    return Err(VocabError::SymbolOutOfLayout(*sym));
                }
                Ok(self.slot_id(start, end - start, type_id))
            }
            Symbol::Special(s) => Ok(self.special_id(s)),
            Symbol::Rel(r) if r < self.relation_types => Ok(self.relation_id(r)),
            Symbol::Rel(_) => Err(VocabError::SymbolOutOfLayout(*sym)),
        }
    }

    pub fn id_to_symbol(&self, id: usize) -> Result<Symbol, VocabError> {
        if id < self.span_slots() {
            let (start, w, c) = self.slot_parts(id);
            Ok(Symbol::Span(EntitySpan::new(start, start + w, c)))
        } else if id < self.relation_offset() {
            Ok(Symbol::Special(Special::ALL[id - self.special_offset()]))
        } else if id < self.size() {
            Ok(Symbol::Rel(id - self.relation_offset()))
        } else {
            Err(VocabError::IdOutOfRange { id, size: self.size() })
        }
    }

    pub fn ids_of(&self, symbols: &[Symbol]) -> Result<Vec<usize>, VocabError> {
        symbols.iter().map(|s| self.symbol_to_id(s)).collect()
    }
}

/// Layout for an input of `len` words under `schema` and maximum width `max_width`.
pub fn build_layout(len: usize, schema: &Schema, max_width: usize) -> Result<VocabLayout, VocabError> {
    VocabLayout::new(len, max_width, schema.num_entity_types(), schema.num_relation_types())
}

impl fmt::Display for VocabLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "L (sequence length)      {:>8}", self.len)?;
        writeln!(f, "K (max span width)       {:>8}", self.max_width)?;
        writeln!(f, "C (entity types)         {:>8}", self.entity_types)?;
        writeln!(f, "R (relation types)       {:>8}", self.relation_types)?;
        writeln!(f, "T (special tokens)       {:>8}", NUM_SPECIAL)?;
        writeln!(f, "span slots (L*K*C)       {:>8}", self.span_slots())?;
        writeln!(f, "realizable spans         {:>8}", self.realizable_span_count())?;
        write!(f, "V = L*K*C + R + T        {:>8}", self.size())
    }
}
