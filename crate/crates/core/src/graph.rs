//! Documents, typed entity spans, directed relations and their schema.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A tokenised input text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self, GraphError> {
        if tokens.is_empty() {
            return Err(GraphError::EmptyDocument);
        }
        if let Some(i) = tokens.iter().position(String::is_empty) {
            return Err(GraphError::EmptyToken(i));
        }
        Ok(Self { id: id.into(), tokens })
    }

    /// Splits on whitespace.
    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self, GraphError> {
        Self::new(id, text.split_whitespace().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A typed span with word-level, end-inclusive boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub type_id: usize,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, type_id: usize) -> Self {
        Self { start, end, type_id }
    }

    /// Number of words covered; zero for an inverted span.
    pub fn width(&self) -> usize {
        (self.end + 1).saturating_sub(self.start)
    }

    pub fn shifted(self, offset: usize) -> Self {
        Self {
            start: self.start + offset,
            end: self.end + offset,
            type_id: self.type_id,
        }
    }
}

/// A directed relation between two entries of the owning graph's entity list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub head: usize,
    pub tail: usize,
    pub rel_type_id: usize,
}

impl Relation {
    pub fn new(head: usize, tail: usize, rel_type_id: usize) -> Self {
        Self {
            head,
            tail,
            rel_type_id,
        }
    }
}

/// A relation with its arguments resolved to spans.
pub type Triple = (EntitySpan, EntitySpan, usize);

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IEGraph {
    pub entities: Vec<EntitySpan>,
    pub relations: Vec<Relation>,
}

impl IEGraph {
    pub fn new(entities: Vec<EntitySpan>, relations: Vec<Relation>) -> Self {
        Self { entities, relations }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }

    pub fn entity_set(&self) -> BTreeSet<EntitySpan> {
        self.entities.iter().copied().collect()
    }

    /// Relations with arguments resolved; dangling indices are skipped.
    pub fn triples(&self) -> Vec<Triple> {
        self.relations
            .iter()
            .filter_map(|r| {
                let h = self.entities.get(r.head)?;
                let t = self.entities.get(r.tail)?;
                Some((*h, *t, r.rel_type_id))
            })
            .collect()
    }

    pub fn triple_set(&self) -> BTreeSet<Triple> {
        self.triples().into_iter().collect()
    }

    /// Same graph with entities sorted and relations re-indexed and sorted.
    pub fn canonical(&self) -> IEGraph {
        let mut entities = self.entities.clone();
        entities.sort();
        entities.dedup();
        let index: BTreeMap<EntitySpan, usize> = entities.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        let mut relations: Vec<Relation> = self
            .triples()
            .into_iter()
            .map(|(h, t, r)| Relation::new(index[&h], index[&t], r))
            .collect();
        relations.sort();
        relations.dedup();
        IEGraph { entities, relations }
    }

    /// Equality as sets of entities and resolved relation triples.
    pub fn same_as(&self, other: &IEGraph) -> bool {
        self.entity_set() == other.entity_set() && self.triple_set() == other.triple_set()
    }
}

/// A document paired with its gold graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub doc: Document,
    pub graph: IEGraph,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("document has no tokens")]
    EmptyDocument,
    #[error("token {0} is empty")]
    EmptyToken(usize),
    #[error("entity {index} span ({start},{end}) is out of range for a document of {len} tokens")]
    OutOfRangeSpan {
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("entity {index} is {width} words wide, maximum is {max}")]
    SpanTooWide { index: usize, width: usize, max: usize },
    #[error("entity {index} duplicates an earlier entity")]
    DuplicateEntity { index: usize },
    #[error("relation {index} duplicates an earlier relation")]
    DuplicateRelation { index: usize },
    #[error("relation {index} refers to entity {entity}, but the graph has {count}")]
    DanglingRelationIndex { index: usize, entity: usize, count: usize },
    #[error("relation {index} has identical head and tail")]
    SelfRelation { index: usize },
    #[error("{kind} type id {type_id} is out of range ({count} declared)")]
    UnknownTypeId {
        kind: &'static str,
        type_id: usize,
        count: usize,
    },
    #[error("duplicate {kind} type name {name:?}")]
    DuplicateTypeName { kind: &'static str, name: String },
    #[error("schema needs at least one entity type")]
    NoEntityTypes,
    #[error("unknown {kind} type name {name:?}")]
    UnknownTypeName { kind: &'static str, name: String },
}

/// Checks every structural invariant of `graph` against `doc` and a maximum
/// span width, returning the graph unchanged when it holds.
pub fn validate_graph(graph: IEGraph, doc: &Document, max_width: usize) -> Result<IEGraph, GraphError> {
    let len = doc.len();
    let mut seen = HashSet::new();
    for (index, e) in graph.entities.iter().enumerate() {
        if e.start > e.end || e.end >= len {
            return Err(GraphError::OutOfRangeSpan {
                index,
                start: e.start,
                end: e.end,
                len,
            });
        }
        if e.width() > max_width {
            return Err(GraphError::SpanTooWide {
                index,
                width: e.width(),
                max: max_width,
            });
        }
        if !seen.insert(*e) {
            return Err(GraphError::DuplicateEntity { index });
        }
    }
    let count = graph.entities.len();
    let mut seen = HashSet::new();
    for (index, r) in graph.relations.iter().enumerate() {
        for entity in [r.head, r.tail] {
            if entity >= count {
                return Err(GraphError::DanglingRelationIndex { index, entity, count });
            }
        }
        if r.head == r.tail {
            return Err(GraphError::SelfRelation { index });
        }
        if !seen.insert(*r) {
            return Err(GraphError::DuplicateRelation { index });
        }
    }
    Ok(graph)
}

/// Checks that every type id used by `graph` is declared in `schema`.
pub fn validate_types(graph: &IEGraph, schema: &Schema) -> Result<(), GraphError> {
    for e in &graph.entities {
        if e.type_id >= schema.num_entity_types() {
            return Err(GraphError::UnknownTypeId {
                kind: "entity",
                type_id: e.type_id,
                count: schema.num_entity_types(),
            });
        }
    }
    for r in &graph.relations {
        if r.rel_type_id >= schema.num_relation_types() {
            return Err(GraphError::UnknownTypeId {
                kind: "relation",
                type_id: r.rel_type_id,
                count: schema.num_relation_types(),
            });
        }
    }
    Ok(())
}

/// Entity and relation type inventories, with an optional table restricting
/// which relations may link a given (head type, tail type) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
    allowed_pairs: Option<BTreeMap<(usize, usize), BTreeSet<usize>>>,
}

impl Schema {
    pub fn new(entity_types: Vec<String>, relation_types: Vec<String>) -> Result<Self, GraphError> {
        if entity_types.is_empty() {
            return Err(GraphError::NoEntityTypes);
        }
        check_unique("entity", &entity_types)?;
        check_unique("relation", &relation_types)?;
        Ok(Self {
            entity_types,
            relation_types,
            allowed_pairs: None,
        })
    }

    /// Convenience constructor from string slices.
    pub fn from_names(entity_types: &[&str], relation_types: &[&str]) -> Result<Self, GraphError> {
        Self::new(
            entity_types.iter().map(|s| s.to_string()).collect(),
            relation_types.iter().map(|s| s.to_string()).collect(),
        )
    }

    /// Enables pair filtering. Pairs missing from the table admit no relation.
    pub fn with_allowed_pairs(mut self, table: BTreeMap<(usize, usize), BTreeSet<usize>>) -> Result<Self, GraphError> {
        for (&(h, t), rels) in &table {
            for (kind, id, count) in [("entity", h, self.num_entity_types()), ("entity", t, self.num_entity_types())] {
                if id >= count {
                    return Err(GraphError::UnknownTypeId { kind, type_id: id, count });
                }
            }
            if let Some(&r) = rels.iter().find(|&&r| r >= self.num_relation_types()) {
                return Err(GraphError::UnknownTypeId {
                    kind: "relation",
                    type_id: r,
                    count: self.num_relation_types(),
                });
            }
        }
        self.allowed_pairs = Some(table);
        Ok(self)
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn relation_types(&self) -> &[String] {
        &self.relation_types
    }

    pub fn allowed_pairs(&self) -> Option<&BTreeMap<(usize, usize), BTreeSet<usize>>> {
        self.allowed_pairs.as_ref()
    }

    pub fn num_entity_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn num_relation_types(&self) -> usize {
        self.relation_types.len()
    }

    pub fn entity_type_id(&self, name: &str) -> Result<usize, GraphError> {
        self.entity_types
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| GraphError::UnknownTypeName {
                kind: "entity",
                name: name.to_string(),
            })
    }

    pub fn relation_type_id(&self, name: &str) -> Result<usize, GraphError> {
        self.relation_types
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| GraphError::UnknownTypeName {
                kind: "relation",
                name: name.to_string(),
            })
    }

    /// Whether relation `rel` may link a head of type `head` to a tail of type `tail`.
    pub fn allows(&self, head: usize, tail: usize, rel: usize) -> bool {
        match &self.allowed_pairs {
            None => rel < self.num_relation_types(),
            Some(table) => table.get(&(head, tail)).is_some_and(|s| s.contains(&rel)),
        }
    }

    /// Whether any relation may link the two entity types.
    pub fn any_relation(&self, head: usize, tail: usize) -> bool {
        match &self.allowed_pairs {
            None => self.num_relation_types() > 0,
            Some(table) => table.get(&(head, tail)).is_some_and(|s| !s.is_empty()),
        }
    }
}

fn check_unique(kind: &'static str, names: &[String]) -> Result<(), GraphError> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(GraphError::DuplicateTypeName { kind, name: n.clone() });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(n: usize) -> Document {
        Document::new("d", (0..n).map(|i| format!("w{i}")).collect()).unwrap()
    }

    fn fig6() -> IEGraph {
        IEGraph::new(
            vec![EntitySpan::new(0, 1, 0), EntitySpan::new(4, 5, 1)],
            vec![Relation::new(0, 1, 0)],
        )
    }

    #[test]
    fn accepts_running_example() {
        let g = fig6();
        assert_eq!(validate_graph(g.clone(), &doc(8), 12), Ok(g));
    }

    #[test]
    fn accepts_empty_graph() {
        assert_eq!(validate_graph(IEGraph::default(), &doc(1), 1), Ok(IEGraph::default()));
    }

    #[test]
    fn rejects_inverted_span() {
        let g = IEGraph::new(vec![EntitySpan::new(3, 2, 0)], vec![]);
        assert!(matches!(
            validate_graph(g, &doc(8), 12),
            Err(GraphError::OutOfRangeSpan { index: 0, .. })
        ));
    }

    #[test]
    fn rejects_each_violation() {
        let d = doc(6);
        let e = |s, t| EntitySpan::new(s, t, 0);
        let cases = [
            (IEGraph::new(vec![e(4, 6)], vec![]), "range"),
            (IEGraph::new(vec![e(0, 3)], vec![]), "wide"),
            (IEGraph::new(vec![e(0, 0), e(0, 0)], vec![]), "dup"),
            (IEGraph::new(vec![e(0, 0), e(1, 1)], vec![Relation::new(0, 1, 0), Relation::new(0, 1, 0)]), "duprel"),
            (IEGraph::new(vec![e(0, 0)], vec![Relation::new(0, 2, 0)]), "dangling"),
            (IEGraph::new(vec![e(0, 0)], vec![Relation::new(0, 0, 0)]), "self"),
        ];
        for (g, what) in cases {
            let err = validate_graph(g, &d, 3).unwrap_err();
            let ok = match what {
                "range" => matches!(err, GraphError::OutOfRangeSpan { .. }),
                "wide" => matches!(err, GraphError::SpanTooWide { width: 4, max: 3, .. }),
                "dup" => matches!(err, GraphError::DuplicateEntity { index: 1 }),
                "duprel" => matches!(err, GraphError::DuplicateRelation { index: 1 }),
                "dangling" => matches!(err, GraphError::DanglingRelationIndex { entity: 2, .. }),
                _ => matches!(err, GraphError::SelfRelation { index: 0 }),
            };
            assert!(ok, "{what}: {err:?}");
        }
    }

    #[test]
    fn overlapping_and_retyped_spans_are_allowed() {
        let g = IEGraph::new(
            vec![EntitySpan::new(0, 2, 0), EntitySpan::new(1, 1, 0), EntitySpan::new(0, 2, 1)],
            vec![Relation::new(0, 1, 0), Relation::new(0, 1, 1)],
        );
        assert!(validate_graph(g, &doc(3), 3).is_ok());
    }

    #[test]
    fn validation_is_idempotent() {
        let once = validate_graph(fig6(), &doc(8), 12).unwrap();
        assert_eq!(validate_graph(once.clone(), &doc(8), 12), Ok(once));
    }

    #[test]
    fn schema_rejects_duplicates_and_empty() {
        assert!(Schema::from_names(&[], &["r"]).is_err());
        assert!(Schema::from_names(&["a", "a"], &[]).is_err());
        let s = Schema::from_names(&["Peop", "Org"], &[]).unwrap();
        assert!(!s.any_relation(0, 1));
        assert_eq!(s.entity_type_id("Org"), Ok(1));
    }

    #[test]
    fn allowed_pairs_filter_relations() {
        let s = Schema::from_names(&["Peop", "Org"], &["Work_For", "Kill"]).unwrap();
        let table = BTreeMap::from([((0, 1), BTreeSet::from([0]))]);
        let s = s.with_allowed_pairs(table).unwrap();
        assert!(s.allows(0, 1, 0));
        assert!(!s.allows(0, 1, 1));
        assert!(!s.any_relation(1, 0));
    }

    #[test]
    fn canonical_form_is_order_free() {
        let a = IEGraph::new(
            vec![EntitySpan::new(4, 5, 1), EntitySpan::new(0, 1, 0)],
            vec![Relation::new(1, 0, 0)],
        );
        assert_eq!(a.canonical(), fig6());
        assert!(a.same_as(&fig6()));
    }
}
