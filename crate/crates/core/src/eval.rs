//! Micro-averaged precision/recall/F1 for entities (ENT), relations with
//! exact argument boundaries (REL) and relations that also require the
//! argument types (REL+).

use std::collections::BTreeSet;
use std::fmt;
use std::ops::AddAssign;

use serde::Serialize;

use crate::graph::IEGraph;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.pred += o.pred;
        self.gold += o.gold;
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.pred == 0 {
            0.0
        } else {
            self.tp as f64 / self.pred as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            self.tp as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn prf(&self) -> Prf {
        Prf {
            counts: *self,
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-document counts for the three metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DocCounts {
    pub ent: Counts,
    pub rel: Counts,
    pub rel_plus: Counts,
}

impl AddAssign for DocCounts {
    fn add_assign(&mut self, o: Self) {
        self.ent += o.ent;
        self.rel += o.rel;
        self.rel_plus += o.rel_plus;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreReport {
    pub ent: Prf,
    pub rel: Prf,
    pub rel_plus: Prf,
}

fn count<T: Ord>(pred: BTreeSet<T>, gold: BTreeSet<T>) -> Counts {
    Counts {
        tp: pred.intersection(&gold).count(),
        pred: pred.len(),
        gold: gold.len(),
    }
}

/// Exact `(start, end, type)` matches.
pub fn score_entities(pred: &IEGraph, gold: &IEGraph) -> Counts {
    count(pred.entity_set(), gold.entity_set())
}

/// Directed relation matches. Without `strict` only the argument boundaries
/// and the relation type must agree; `strict` also compares argument types,
/// which are read from the entities each relation references.
pub fn score_relations(pred: &IEGraph, gold: &IEGraph, strict: bool) -> Counts {
    if strict {
        count(pred.triple_set(), gold.triple_set())
    } else {
        let key = |g: &IEGraph| -> BTreeSet<(usize, usize, usize, usize, usize)> {
            g.triples()
                .into_iter()
                .map(|(h, t, r)| (h.start, h.end, t.start, t.end, r))
                .collect()
        };
        count(key(pred), key(gold))
    }
}

pub fn score_document(pred: &IEGraph, gold: &IEGraph) -> DocCounts {
    DocCounts {
        ent: score_entities(pred, gold),
        rel: score_relations(pred, gold, false),
        rel_plus: score_relations(pred, gold, true),
    }
}

/// Pools counts over documents, then derives P/R/F1.
pub fn micro_f1<'a>(docs: impl IntoIterator<Item = &'a DocCounts>) -> ScoreReport {
    let mut total = DocCounts::default();
    for d in docs {
        total += *d;
    }
    ScoreReport {
        ent: total.ent.prf(),
        rel: total.rel.prf(),
        rel_plus: total.rel_plus.prf(),
    }
}

/// Scores aligned prediction/gold lists.
pub fn score_corpus(pred: &[IEGraph], gold: &[IEGraph]) -> ScoreReport {
    assert_eq!(pred.len(), gold.len(), "prediction and gold lists differ in length");
    let counts: Vec<DocCounts> = pred.iter().zip(gold).map(|(p, g)| score_document(p, g)).collect();
    micro_f1(&counts)
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "metric", "P", "R", "F1", "tp", "pred", "gold")?;
        for (name, m) in [("ENT", &self.ent), ("REL", &self.rel), ("REL+", &self.rel_plus)] {
            writeln!(
                f,
                "{:<6} {:>7.1} {:>7.1} {:>7.1} {:>7} {:>7} {:>7}",
                name,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                m.counts.tp,
                m.counts.pred,
                m.counts.gold
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EntitySpan, Relation};

    fn fig6() -> IEGraph {
        IEGraph::new(
            vec![EntitySpan::new(0, 1, 0), EntitySpan::new(4, 5, 1), EntitySpan::new(7, 7, 2)],
            vec![Relation::new(0, 1, 0), Relation::new(1, 2, 1)],
        )
    }

    #[test]
    fn exact_prediction_scores_one() {
        let r = score_corpus(&[fig6()], &[fig6()]);
        assert_eq!(r.ent.counts, Counts { tp: 3, pred: 3, gold: 3 });
        for m in [r.ent, r.rel, r.rel_plus] {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn boundaries_must_be_exact() {
        let p = IEGraph::new(vec![EntitySpan::new(0, 1, 0)], vec![]);
        let g = IEGraph::new(vec![EntitySpan::new(0, 2, 0)], vec![]);
        assert_eq!(score_entities(&p, &g).tp, 0);
    }

    #[test]
    fn wrong_head_type_keeps_rel_but_not_rel_plus() {
        let mut p = fig6();
        p.entities[0].type_id = 1;
        let d = score_document(&p, &fig6());
        assert_eq!(d.rel.tp, 2);
        assert_eq!(d.rel_plus.tp, 1);
        assert_eq!(d.ent.tp, 2);
    }

    #[test]
    fn direction_matters() {
        let g = fig6();
        let mut p = fig6();
        for r in &mut p.relations {
            std::mem::swap(&mut r.head, &mut r.tail);
        }
        assert_eq!(score_relations(&p, &g, false).tp, 0);
        assert_eq!(score_relations(&p, &g, true).tp, 0);
    }

    #[test]
    fn pooled_worked_example() {
        let a = DocCounts {
            ent: Counts { tp: 1, pred: 2, gold: 1 },
            ..Default::default()
        };
        let b = DocCounts {
            ent: Counts { tp: 1, pred: 1, gold: 2 },
            ..Default::default()
        };
        let r = micro_f1(&[a, b]);
        assert!((r.ent.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.ent.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.ent.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_corpus_is_zero() {
        let r = micro_f1(&[]);
        assert_eq!(r.ent.f1, 0.0);
        assert_eq!(r.rel_plus.precision, 0.0);
    }

    #[test]
    fn duplicate_predictions_count_once() {
        let mut p = fig6();
        p.relations.push(Relation::new(0, 1, 0));
        assert_eq!(score_relations(&p, &fig6(), true), Counts { tp: 2, pred: 2, gold: 2 });
    }
}
