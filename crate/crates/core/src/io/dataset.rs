use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{validate_graph, Document, EntitySpan, Example, GraphError, IEGraph, Relation, Schema};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: cannot parse record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    SchemaMismatch { line: usize, message: String },
    #[error("line {line}: invalid record: {source}")]
    Validation {
        line: usize,
        #[source]
        source: GraphError,
    },
    #[error("schema: {0}")]
    Schema(String),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
}

/// Relations admitted between one (head type, tail type) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRule {
    pub head: String,
    pub tail: String,
    pub relations: Vec<String>,
}

/// On-disk schema. Type ids follow declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaFile {
    pub entity_types: Vec<String>,
    #[serde(default)]
    pub relation_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_pairs: Option<Vec<PairRule>>,
}

impl SchemaFile {
    pub fn to_schema(&self) -> Result<Schema, GraphError> {
        let schema = Schema::new(self.entity_types.clone(), self.relation_types.clone())?;
        let Some(rules) = &self.allowed_pairs else {
            return Ok(schema);
        };
        let mut table: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for rule in rules {
            let key = (schema.entity_type_id(&rule.head)?, schema.entity_type_id(&rule.tail)?);
            let set = table.entry(key).or_default();
            for r in &rule.relations {
                set.insert(schema.relation_type_id(r)?);
            }
        }
        schema.with_allowed_pairs(table)
    }

    pub fn from_schema(schema: &Schema) -> Self {
        let ents = schema.entity_types();
        let rels = schema.relation_types();
        Self {
            entity_types: ents.to_vec(),
            relation_types: rels.to_vec(),
            allowed_pairs: schema.allowed_pairs().map(|t| {
                t.iter()
                    .map(|(&(h, tl), rs)| PairRule {
                        head: ents[h].clone(),
                        tail: ents[tl].clone(),
                        relations: rs.iter().map(|&r| rels[r].clone()).collect(),
                    })
                    .collect()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRecord {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    #[serde(rename = "type")]
    pub type_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationRecord {
    /// Index into the record's entity list.
    pub head: usize,
    pub tail: usize,
    #[serde(rename = "type")]
    pub type_name: String,
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    #[serde(default)]
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub entities: Vec<EntityRecord>,
    #[serde(default)]
    pub relations: Vec<RelationRecord>,
}

impl Record {
    pub fn from_example(ex: &Example, schema: &Schema) -> Self {
        Self {
            id: ex.doc.id.clone(),
            tokens: ex.doc.tokens.clone(),
            entities: ex
                .graph
                .entities
                .iter()
                .map(|e| EntityRecord {
                    start: e.start,
                    end: e.end,
                    type_name: schema.entity_types()[e.type_id].clone(),
                })
                .collect(),
            relations: ex
                .graph
                .relations
                .iter()
                .map(|r| RelationRecord {
                    head: r.head,
                    tail: r.tail,
                    type_name: schema.relation_types()[r.rel_type_id].clone(),
                })
                .collect(),
        }
    }

    /// Resolves type names and validates the record; `line` is used in errors.
    pub fn into_example(self, schema: &Schema, max_width: usize, line: usize) -> Result<Example, IoError> {
        let mismatch = |e: GraphError| IoError::SchemaMismatch {
            line,
            message: e.to_string(),
        };
        let invalid = |source| IoError::Validation { line, source };
        let id = if self.id.is_empty() { format!("line{line}") } else { self.id };
        let doc = Document::new(id, self.tokens).map_err(invalid)?;
        let entities = self
            .entities
            .iter()
            .map(|e| Ok(EntitySpan::new(e.start, e.end, schema.entity_type_id(&e.type_name).map_err(mismatch)?)))
            .collect::<Result<Vec<_>, IoError>>()?;
        let relations = self
            .relations
            .iter()
            .map(|r| Ok(Relation::new(r.head, r.tail, schema.relation_type_id(&r.type_name).map_err(mismatch)?)))
            .collect::<Result<Vec<_>, IoError>>()?;
        let graph = validate_graph(IEGraph::new(entities, relations), &doc, max_width).map_err(invalid)?;
        for (i, r) in graph.relations.iter().enumerate() {
            let (h, t) = (graph.entities[r.head].type_id, graph.entities[r.tail].type_id);
            if !schema.allows(h, t, r.rel_type_id) {
                return Err(IoError::SchemaMismatch {
                    line,
                    message: format!(
                        "relation {i} ({}) is not allowed between {} and {}",
                        schema.relation_types()[r.rel_type_id],
                        schema.entity_types()[h],
                        schema.entity_types()[t]
                    ),
                });
            }
        }
        Ok(Example { doc, graph })
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    super::write_atomic(path, bytes).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_schema(path: &Path) -> Result<Schema, IoError> {
    let text = read_text(path)?;
    let file: SchemaFile = serde_json::from_str(&text).map_err(|e| IoError::Schema(format!("{}: {e}", path.display())))?;
    file.to_schema().map_err(|e| IoError::Schema(format!("{}: {e}", path.display())))
}

pub fn save_schema(path: &Path, schema: &Schema) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(&SchemaFile::from_schema(schema)).expect("schema serializes");
    text.push('\n');
    write(path, text.as_bytes())
}

/// Parses JSONL text; blank lines are skipped, line numbers are 1-based.
pub fn parse_dataset(text: &str, schema: &Schema, max_width: usize) -> Result<Vec<Example>, IoError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|source| IoError::Parse { line, source })?;
        out.push(rec.into_example(schema, max_width, line)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, schema: &Schema, max_width: usize) -> Result<Vec<Example>, IoError> {
    parse_dataset(&read_text(path)?, schema, max_width)
}

/// Canonical JSONL: one compact record per line, fields in declaration order.
pub fn render_dataset(examples: &[Example], schema: &Schema) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(&Record::from_example(ex, schema)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, examples: &[Example], schema: &Schema) -> Result<(), IoError> {
    write(path, render_dataset(examples, schema).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::from_names(&["Peop", "Org"], &["Work_For"]).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let text = concat!(
            r#"{"id":"a","tokens":["Alain","works","at","McGill"],"entities":[{"start":0,"end":0,"type":"Peop"},{"start":3,"end":3,"type":"Org"}],"relations":[{"head":0,"tail":1,"type":"Work_For"}]}"#,
            "\n",
            r#"{"id":"b","tokens":["nothing"],"entities":[],"relations":[]}"#,
            "\n"
        );
        let ex = parse_dataset(text, &schema(), 3).unwrap();
        assert_eq!(render_dataset(&ex, &schema()), text);
    }

    #[test]
    fn errors_name_the_line() {
        let text = "\n{\"tokens\":[\"a\",\"b\"],\"entities\":[{\"start\":1,\"end\":0,\"type\":\"Peop\"}]}\n";
        let err = parse_dataset(text, &schema(), 3).unwrap_err();
        assert!(matches!(err, IoError::Validation { line: 2, .. }));
        assert!(err.to_string().starts_with("line 2:"));
        let text = "{\"tokens\":[\"a\"],\"entities\":[{\"start\":0,\"end\":0,\"type\":\"Loc\"}]}";
        assert!(matches!(parse_dataset(text, &schema(), 3), Err(IoError::SchemaMismatch { line: 1, .. })));
        assert!(matches!(parse_dataset("{", &schema(), 3), Err(IoError::Parse { line: 1, .. })));
    }

    #[test]
    fn schema_file_round_trip_with_pairs() {
        let f: SchemaFile = serde_json::from_str(
            r#"{"entity_types":["Peop","Org","Loc","Other"],"relation_types":["Work_For","Kill","OrgBased_In","Live_In","Located_In"],
                "allowed_pairs":[{"head":"Peop","tail":"Org","relations":["Work_For"]}]}"#,
        )
        .unwrap();
        let s = f.to_schema().unwrap();
        assert_eq!((s.num_entity_types(), s.num_relation_types()), (4, 5));
        assert!(s.allows(0, 1, 0));
        assert!(!s.allows(1, 0, 0));
        assert_eq!(SchemaFile::from_schema(&s), f);
    }

    #[test]
    fn disallowed_pair_is_rejected() {
        let f = SchemaFile {
            entity_types: vec!["Peop".into(), "Org".into()],
            relation_types: vec!["Work_For".into()],
            allowed_pairs: Some(vec![PairRule {
                head: "Peop".into(),
                tail: "Org".into(),
                relations: vec!["Work_For".into()],
            }]),
        };
        let s = f.to_schema().unwrap();
        let text = r#"{"tokens":["x","y"],"entities":[{"start":0,"end":0,"type":"Org"},{"start":1,"end":1,"type":"Peop"}],"relations":[{"head":0,"tail":1,"type":"Work_For"}]}"#;
        assert!(matches!(parse_dataset(text, &s, 2), Err(IoError::SchemaMismatch { line: 1, .. })));
    }
}
