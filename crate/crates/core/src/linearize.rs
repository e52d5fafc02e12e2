//! Flattening an [`IEGraph`] into the decoder's symbol sequence and back.
//!
//! The layout is `<START>`, the entity spans, `<SEP>`, one
//! `head tail relation` triplet per edge, and `<END>`.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntitySpan, IEGraph, Relation, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Special {
    Start,
    End,
    Sep,
}

impl Special {
    /// Fixed id order inside the vocabulary's special block.
    pub const ALL: [Special; 3] = [Special::Start, Special::End, Special::Sep];

    pub fn index(self) -> usize {
        match self {
            Special::Start => 0,
            Special::End => 1,
            Special::Sep => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    Span(EntitySpan),
    Rel(usize),
    Special(Special),
}

pub const START: Symbol = Symbol::Special(Special::Start);
pub const END: Symbol = Symbol::Special(Special::End);
pub const SEP: Symbol = Symbol::Special(Special::Sep);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    #[default]
    Sorted,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSequence {
    pub symbols: Vec<Symbol>,
    pub ordering: Ordering,
}

impl GraphSequence {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Human-readable rendering, e.g. `<START> (0,1,Peop) <SEP> ... <END>`.
    pub fn render(&self, schema: &Schema) -> String {
        self.symbols
            .iter()
            .map(|s| render_symbol(s, schema))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn render_symbol(sym: &Symbol, schema: &Schema) -> String {
    match sym {
        Symbol::Span(e) => {
            let name = schema
                .entity_types()
                .get(e.type_id)
                .cloned()
                .unwrap_or_else(|| e.type_id.to_string());
            format!("({},{},{})", e.start, e.end, name)
        }
        Symbol::Rel(r) => schema
            .relation_types()
            .get(*r)
            .cloned()
            .unwrap_or_else(|| format!("rel{r}")),
        Symbol::Special(s) => s.to_string(),
    }
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Special::Start => "<START>",
            Special::End => "<END>",
            Special::Sep => "<SEP>",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinearizeError {
    #[error("malformed sequence at position {position}: {reason}")]
    MalformedSequence { position: usize, reason: &'static str },
    #[error("relation argument at position {position} is not in the entity section")]
    UnknownArgumentSpan { position: usize },
}

/// Linearizes a validated graph.
///
/// `Sorted` orders entities by `(start, end, type)` and relations by
/// `(head.start, head.end, tail.start, tail.end, type)`; `Random` shuffles
/// both lists independently with `rng`.
pub fn linearize<R: Rng + ?Sized>(graph: &IEGraph, ordering: Ordering, rng: &mut R) -> GraphSequence {
    let mut entities = graph.entities.clone();
    let mut triples = graph.triples();
    match ordering {
        Ordering::Sorted => {
            entities.sort();
            triples.sort_by_key(|(h, t, r)| (h.start, h.end, t.start, t.end, *r, h.type_id, t.type_id));
        }
        Ordering::Random => {
            entities.shuffle(rng);
            triples.shuffle(rng);
        }
    }
    let mut symbols = Vec::with_capacity(3 + entities.len() + 3 * triples.len());
    symbols.push(START);
    symbols.extend(entities.into_iter().map(Symbol::Span));
    symbols.push(SEP);
    for (h, t, r) in triples {
        symbols.extend([Symbol::Span(h), Symbol::Span(t), Symbol::Rel(r)]);
    }
    symbols.push(END);
    GraphSequence { symbols, ordering }
}

/// Rebuilds a graph from a sequence.
///
/// Entities keep their first-occurrence order and are de-duplicated, as are
/// relation triples. A relation argument missing from the entity section is
/// appended to the entity list, or rejected when `strict` is set.
pub fn delinearize(symbols: &[Symbol], strict: bool) -> Result<IEGraph, LinearizeError> {
    let bad = |position, reason| LinearizeError::MalformedSequence { position, reason };
    if symbols.first() != Some(&START) {
        return Err(bad(0, "sequence must begin with <START>"));
    }
    let mut entities: Vec<EntitySpan> = Vec::new();
    let mut index: HashMap<EntitySpan, usize> = HashMap::new();
    let mut pos = 1;
    loop {
        match symbols.get(pos) {
            Some(Symbol::Span(e)) => {
                if !index.contains_key(e) {
                    index.insert(*e, entities.len());
                    entities.push(*e);
                }
                pos += 1;
            }
            Some(&SEP) => {
                pos += 1;
                break;
            }
            Some(_) => return Err(bad(pos, "expected an entity span or <SEP>")),
            None => return Err(bad(pos, "sequence ended before <SEP>")),
        }
    }
    let mut relations: Vec<Relation> = Vec::new();
    loop {
        match symbols.get(pos) {
            Some(&END) => {
                if pos + 1 != symbols.len() {
                    return Err(bad(pos + 1, "symbols after <END>"));
                }
                break;
            }
            Some(Symbol::Span(_)) => {
                let (Some(Symbol::Span(h)), Some(Symbol::Span(t)), Some(Symbol::Rel(r))) =
                    (symbols.get(pos), symbols.get(pos + 1), symbols.get(pos + 2))
                else {
                    return Err(bad(pos, "expected a head span, tail span and relation"));
                };
                if h == t {
                    return Err(bad(pos + 1, "relation tail equals its head"));
                }
                let mut resolve = |e: &EntitySpan, at: usize| -> Result<usize, LinearizeError> {
                    if let Some(&i) = index.get(e) {
                        return Ok(i);
                    }
                    if strict {
                        return Err(LinearizeError::UnknownArgumentSpan { position: at });
                    }
                    index.insert(*e, entities.len());
                    entities.push(*e);
                    Ok(entities.len() - 1)
                };
                let head = resolve(h, pos)?;
                let tail = resolve(t, pos + 1)?;
                let rel = Relation::new(head, tail, *r);
                if !relations.contains(&rel) {
                    relations.push(rel);
                }
                pos += 3;
            }
            Some(_) => return Err(bad(pos, "expected a head span or <END>")),
            None => return Err(bad(pos, "sequence ended before <END>")),
        }
    }
    Ok(IEGraph { entities, relations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{validate_graph, Document};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sp(s: usize, e: usize, t: usize) -> Symbol {
        Symbol::Span(EntitySpan::new(s, e, t))
    }

    /// Running example: Peop=0, Org=1, Loc=2; Work_For=0, Based_In=1.
    fn fig6() -> IEGraph {
        IEGraph::new(
            vec![EntitySpan::new(7, 7, 2), EntitySpan::new(0, 1, 0), EntitySpan::new(4, 5, 1)],
            vec![Relation::new(2, 0, 1), Relation::new(1, 2, 0)],
        )
    }

    fn fig6_sequence() -> Vec<Symbol> {
        vec![
            START,
            sp(0, 1, 0),
            sp(4, 5, 1),
            sp(7, 7, 2),
            SEP,
            sp(0, 1, 0),
            sp(4, 5, 1),
            Symbol::Rel(0),
            sp(4, 5, 1),
            sp(7, 7, 2),
            Symbol::Rel(1),
            END,
        ]
    }

    #[test]
    fn sorted_running_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = linearize(&fig6(), Ordering::Sorted, &mut rng);
        assert_eq!(seq.symbols, fig6_sequence());
        let schema = Schema::from_names(&["Peop", "Org", "Loc"], &["Work_For", "Based_In"]).unwrap();
        assert_eq!(
            seq.render(&schema),
            "<START> (0,1,Peop) (4,5,Org) (7,7,Loc) <SEP> (0,1,Peop) (4,5,Org) Work_For (4,5,Org) (7,7,Loc) Based_In <END>"
        );
    }

    #[test]
    fn empty_graph_linearizes_to_three_symbols() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = linearize(&IEGraph::default(), Ordering::Sorted, &mut rng);
        assert_eq!(seq.symbols, vec![START, SEP, END]);
        assert_eq!(delinearize(&seq.symbols, true), Ok(IEGraph::default()));
    }

    #[test]
    fn delinearize_running_example() {
        let g = delinearize(&fig6_sequence(), true).unwrap();
        assert_eq!(g.entities.len(), 3);
        assert_eq!(g.relations.len(), 2);
        assert!(g.same_as(&fig6()));
    }

    #[test]
    fn lenient_appends_unknown_arguments() {
        let seq = vec![START, sp(0, 0, 0), SEP, sp(0, 0, 0), sp(2, 3, 1), Symbol::Rel(0), END];
        let g = delinearize(&seq, false).unwrap();
        assert_eq!(g.entities, vec![EntitySpan::new(0, 0, 0), EntitySpan::new(2, 3, 1)]);
        assert_eq!(g.relations, vec![Relation::new(0, 1, 0)]);
        assert_eq!(
            delinearize(&seq, true),
            Err(LinearizeError::UnknownArgumentSpan { position: 4 })
        );
    }

    #[test]
    fn duplicates_are_collapsed() {
        let seq = vec![
            START,
            sp(0, 0, 0),
            sp(0, 0, 0),
            sp(1, 1, 0),
            SEP,
            sp(0, 0, 0),
            sp(1, 1, 0),
            Symbol::Rel(0),
            sp(0, 0, 0),
            sp(1, 1, 0),
            Symbol::Rel(0),
            END,
        ];
        let g = delinearize(&seq, true).unwrap();
        assert_eq!(g.entities.len(), 2);
        assert_eq!(g.relations.len(), 1);
    }

    #[test]
    fn malformed_sequences_are_rejected() {
        let cases: Vec<Vec<Symbol>> = vec![
            vec![],
            vec![SEP, END],
            vec![START, END],
            vec![START, SEP],
            vec![START, SEP, sp(0, 0, 0), END],
            vec![START, SEP, sp(0, 0, 0), sp(1, 1, 0), END],
            vec![START, SEP, Symbol::Rel(0), END],
            vec![START, Symbol::Rel(0), SEP, END],
            vec![START, SEP, END, END],
            vec![START, sp(0, 0, 0), SEP, sp(0, 0, 0), sp(0, 0, 0), Symbol::Rel(0), END],
        ];
        for c in cases {
            assert!(
                matches!(delinearize(&c, false), Err(LinearizeError::MalformedSequence { .. })),
                "{c:?}"
            );
        }
    }

    fn arb_graph() -> impl Strategy<Value = IEGraph> {
        let spans = proptest::collection::btree_set((0usize..10, 0usize..3, 0usize..3), 0..8);
        (spans, proptest::collection::vec((0usize..64, 0usize..64, 0usize..4), 0..8)).prop_map(|(spans, rels)| {
            let entities: Vec<EntitySpan> = spans.into_iter().map(|(s, w, t)| EntitySpan::new(s, s + w, t)).collect();
            let n = entities.len();
            let mut relations = Vec::new();
            if n >= 2 {
                for (h, t, r) in rels {
                    let rel = Relation::new(h % n, t % n, r);
                    if rel.head != rel.tail && !relations.contains(&rel) {
                        relations.push(rel);
                    }
                }
            }
            IEGraph::new(entities, relations)
        })
    }

    proptest! {
        #[test]
        fn round_trip_both_orderings(g in arb_graph(), seed in any::<u64>()) {
            let doc = Document::new("d", (0..12).map(|i| i.to_string()).collect()).unwrap();
            let g = validate_graph(g, &doc, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for ordering in [Ordering::Sorted, Ordering::Random] {
                let seq = linearize(&g, ordering, &mut rng);
                prop_assert_eq!(seq.len(), 3 + g.entities.len() + 3 * g.relations.len());
                let back = delinearize(&seq.symbols, true).unwrap();
                prop_assert!(back.same_as(&g));
            }
            let sorted = linearize(&g, Ordering::Sorted, &mut rng);
            let back = delinearize(&sorted.symbols, true).unwrap();
            prop_assert_eq!(&back.entities, &g.canonical().entities);
            prop_assert!(back.same_as(&g));
            prop_assert_eq!(sorted, linearize(&g, Ordering::Sorted, &mut rng));
        }
    }
}
