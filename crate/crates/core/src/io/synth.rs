//! Template-generated corpora with deterministic labels.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Document, EntitySpan, Example, IEGraph, Relation, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthProfile {
    /// People and organisations; `Work_For` and `Founded_By`.
    #[default]
    Small,
    /// Adds locations and `Based_In`.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Every split draws from every template.
    #[default]
    SameTemplate,
    /// Dev and test use templates never seen in training.
    Compositional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub profile: SynthProfile,
    pub split_mode: SplitMode,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            profile: SynthProfile::Small,
            split_mode: SplitMode::SameTemplate,
            train: 50,
            dev: 20,
            test: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub schema: Schema,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// Template index of every example, per split.
    pub train_templates: Vec<usize>,
    pub dev_templates: Vec<usize>,
    pub test_templates: Vec<usize>,
}

/// Longest name in the pools, in words.
pub const SYNTH_MAX_WIDTH: usize = 3;

const PEOPLE: &[&str] = &[
    "Alain",
    "Maria Garcia",
    "John Smith",
    "Wei Chen",
    "Fatima",
    "Olga Ivanova",
    "Kenji Sato",
    "Amara",
    "Luis Gomez",
    "Sara Cohen",
];

const ORGS: &[&str] = &[
    "McGill",
    "Acme Corp",
    "Bank of Montreal",
    "Globex",
    "Initech",
    "Umbrella Labs",
    "Stark Industries",
    "Hooli",
];

const PLACES: &[&str] = &["Montreal", "New York", "Paris", "Tokyo", "Cape Town", "Lima"];

struct Template {
    pattern: &'static str,
    /// `(head slot, tail slot, relation name)`.
    relations: &'static [(&'static str, &'static str, &'static str)],
    full_only: bool,
}

const fn t(
    pattern: &'static str,
    relations: &'static [(&'static str, &'static str, &'static str)],
    full_only: bool,
) -> Template {
    Template {
        pattern,
        relations,
        full_only,
    }
}

const TEMPLATES: &[Template] = &[
    t("{P0} works for {O0} .", &[("P0", "O0", "Work_For")], false),
    t("{P0} is employed by {O0} .", &[("P0", "O0", "Work_For")], false),
    t("{O0} was founded by {P0} .", &[("O0", "P0", "Founded_By")], false),
    t("{P0} founded {O0} in 1998 .", &[("O0", "P0", "Founded_By")], false),
    t(
        "{P0} and {P1} founded {O0} .",
        &[("O0", "P0", "Founded_By"), ("O0", "P1", "Founded_By")],
        false,
    ),
    t(
        "{O0} , founded by {P0} , hired {P1} .",
        &[("O0", "P0", "Founded_By"), ("P1", "O0", "Work_For")],
        false,
    ),
    t("{P0} met {P1} yesterday .", &[], false),
    t("{P0} , an engineer at {O0} , met {P1} .", &[("P0", "O0", "Work_For")], false),
    t("last year {P0} joined {O0} .", &[("P0", "O0", "Work_For")], false),
    t("{O0} hired {P0} last week .", &[("P0", "O0", "Work_For")], false),
    t("{O0} is based in {L0} .", &[("O0", "L0", "Based_In")], true),
    t(
        "{P0} works for {O0} in {L0} .",
        &[("P0", "O0", "Work_For"), ("O0", "L0", "Based_In")],
        true,
    ),
    t(
        "{O0} , a company in {L0} , was founded by {P0} .",
        &[("O0", "L0", "Based_In"), ("O0", "P0", "Founded_By")],
        true,
    ),
];

fn schema_for(profile: SynthProfile) -> Schema {
    let (ents, rels): (&[&str], &[&str]) = match profile {
        SynthProfile::Small => (&["Peop", "Org"], &["Work_For", "Founded_By"]),
        SynthProfile::Full => (&["Peop", "Org", "Loc"], &["Work_For", "Founded_By", "Based_In"]),
    };
    let mut pairs: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    pairs.entry((0, 1)).or_default().insert(0);
    pairs.entry((1, 0)).or_default().insert(1);
    if profile == SynthProfile::Full {
        pairs.entry((1, 2)).or_default().insert(2);
    }
    Schema::from_names(ents, rels)
        .and_then(|s| s.with_allowed_pairs(pairs))
        .expect("built-in schema is valid")
}

fn fill<R: Rng + ?Sized>(tpl: &Template, schema: &Schema, id: String, rng: &mut R) -> Example {
    let mut people: Vec<&str> = PEOPLE.to_vec();
    people.shuffle(rng);
    let org = ORGS[rng.gen_range(0..ORGS.len())];
    let place = PLACES[rng.gen_range(0..PLACES.len())];
    let mut tokens: Vec<String> = Vec::new();
    let mut entities = Vec::new();
    let mut slots: BTreeMap<&str, usize> = BTreeMap::new();
    for word in tpl.pattern.split_whitespace() {
        let Some(slot) = word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) else {
            tokens.push(word.to_string());
            continue;
        };
        let (name, ty) = match slot {
            "P0" => (people[0], "Peop"),
            "P1" => (people[1], "Peop"),
            "O0" => (org, "Org"),
            _ => (place, "Loc"),
        };
        let start = tokens.len();
        tokens.extend(name.split_whitespace().map(str::to_string));
        let type_id = schema.entity_type_id(ty).expect("template types are in the schema");
        slots.insert(slot, entities.len());
        entities.push(EntitySpan::new(start, tokens.len() - 1, type_id));
    }
    let relations = tpl
        .relations
        .iter()
        .map(|(h, t, r)| Relation::new(slots[h], slots[t], schema.relation_type_id(r).expect("template relation")))
        .collect();
    Example {
        doc: Document::new(id, tokens).expect("templates are non-empty"),
        graph: IEGraph::new(entities, relations),
    }
}

/// Generates train/dev/test splits. The output depends only on `config`
/// and the state of `rng`.
pub fn make_synthetic<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> SynthCorpus {
    let schema = schema_for(config.profile);
    let mut usable: Vec<usize> = (0..TEMPLATES.len())
        .filter(|&i| config.profile == SynthProfile::Full || !TEMPLATES[i].full_only)
        .collect();
    let (train_pool, eval_pool) = match config.split_mode {
        SplitMode::SameTemplate => (usable.clone(), usable),
        SplitMode::Compositional => {
            usable.shuffle(rng);
            let held = (usable.len() * 3).div_ceil(10);
            let eval = usable.split_off(usable.len() - held);
            (usable, eval)
        }
    };
    let mut split = |name: &str, n: usize, pool: &[usize]| -> (Vec<Example>, Vec<usize>) {
        (0..n)
            .map(|i| {
                let k = pool[rng.gen_range(0..pool.len())];
                (fill(&TEMPLATES[k], &schema, format!("{name}-{i:04}"), rng), k)
            })
            .unzip()
    };
    let (train, train_templates) = split("train", config.train, &train_pool);
    let (dev, dev_templates) = split("dev", config.dev, &eval_pool);
    let (test, test_templates) = split("test", config.test, &eval_pool);
    SynthCorpus {
        schema,
        train,
        dev,
        test,
        train_templates,
        dev_templates,
        test_templates,
    }
}
