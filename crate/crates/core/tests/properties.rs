use atg::decode::nucleus_select;
use atg::eval::{score_corpus, score_document};
use atg::grammar::{initial_state, Grammar};
use atg::graph::{validate_graph, Document, EntitySpan, IEGraph, Relation, Schema};
use atg::linearize::{delinearize, linearize, Ordering, Symbol, START};
use atg::tensor::{kernels, Graph, Tensor};
use atg::vocab::VocabLayout;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_graph(len: usize, max_width: usize, types: usize, rels: usize) -> impl Strategy<Value = IEGraph> {
    let spans = proptest::collection::btree_set((0..len, 0..max_width, 0..types), 0..8);
    let pairs = proptest::collection::vec((0usize..64, 0usize..64, 0..rels.max(1)), 0..8);
    (spans, pairs).prop_map(move |(spans, pairs)| {
        let entities: Vec<EntitySpan> = spans
            .into_iter()
            .filter(|&(s, w, _)| s + w < len)
            .map(|(s, w, t)| EntitySpan::new(s, s + w, t))
            .collect();
        let n = entities.len();
        let mut relations = Vec::new();
        if n >= 2 && rels > 0 {
            for (h, t, r) in pairs {
                let rel = Relation::new(h % n, t % n, r);
                if rel.head != rel.tail && !relations.contains(&rel) {
                    relations.push(rel);
                }
            }
        }
        IEGraph::new(entities, relations)
    })
}

fn doc(len: usize) -> Document {
    Document::new("d", (0..len).map(|i| format!("w{i}")).collect()).unwrap()
}

fn dedup<T: PartialEq + Clone>(xs: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for x in xs {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// `(tp, pred, gold)` by pairwise comparison of de-duplicated lists.
fn brute<T: PartialEq + Clone>(pred: Vec<T>, gold: Vec<T>) -> (usize, usize, usize) {
    let (p, g) = (dedup(pred), dedup(gold));
    let tp = p.iter().filter(|x| g.iter().any(|y| y == *x)).count();
    (tp, p.len(), g.len())
}

fn rel_keys(g: &IEGraph, typed: bool) -> Vec<(usize, usize, usize, usize, usize, usize, usize)> {
    g.relations
        .iter()
        .map(|r| {
            let (h, t) = (g.entities[r.head], g.entities[r.tail]);
            let (ht, tt) = if typed { (h.type_id, t.type_id) } else { (0, 0) };
            (h.start, h.end, t.start, t.end, r.rel_type_id, ht, tt)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn vocab_ids_are_a_bijection(l in 1usize..12, k in 1usize..5, c in 1usize..4, r in 0usize..4) {
        let layout = VocabLayout::new(l, k, c, r).unwrap();
        prop_assert_eq!(layout.size(), l * k * c + r + 3);
        let mut realizable = 0;
        for id in 0..layout.size() {
            let sym = layout.id_to_symbol(id).unwrap();
            prop_assert_eq!(layout.symbol_to_id(&sym).unwrap(), id);
            if let Symbol::Span(e) = sym {
                prop_assert_eq!(layout.is_realizable(id), e.end < l);
                realizable += usize::from(e.end < l);
            }
        }
        prop_assert_eq!(realizable, layout.realizable_span_count());
        prop_assert!(layout.id_to_symbol(layout.size()).is_err());
    }

    #[test]
    fn round_trip_preserves_sets(g in arb_graph(10, 3, 3, 4), seed in any::<u64>()) {
        let g = validate_graph(g, &doc(10), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ordering in [Ordering::Sorted, Ordering::Random] {
            let back = delinearize(&linearize(&g, ordering, &mut rng).symbols, true).unwrap();
            prop_assert_eq!(back.entity_set(), g.entity_set());
            prop_assert_eq!(back.triple_set(), g.triple_set());
        }
    }

    #[test]
    fn gold_sequences_replay_and_masks_admit_gold(g in arb_graph(8, 3, 2, 3), seed in any::<u64>()) {
        let g = validate_graph(g, &doc(8), 3).unwrap();
        let schema = Schema::from_names(&["A", "B"], &["r0", "r1", "r2"]).unwrap();
        let layout = VocabLayout::new(8, 3, 2, 3).unwrap();
        let grammar = Grammar::new(&layout, &schema);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ordering in [Ordering::Sorted, Ordering::Random] {
            let seq = linearize(&g, ordering, &mut rng);
            let (replay, state) = grammar.replay(&seq.symbols).unwrap();
            prop_assert!(state.finished);
            prop_assert_eq!(replay.labels.len(), seq.len());
            prop_assert_eq!(replay.masks.len(), seq.len() - 1);
            for (j, mask) in replay.masks.iter().enumerate() {
                prop_assert!(mask[layout.symbol_to_id(&seq.symbols[j + 1]).unwrap()]);
            }
        }
    }

    #[test]
    fn random_legal_walks_delinearize(seed in any::<u64>(), l in 1usize..7) {
        let schema = Schema::from_names(&["A", "B"], &["r0", "r1"]).unwrap();
        let layout = VocabLayout::new(l, 2, 2, 2).unwrap();
        let grammar = Grammar::new(&layout, &schema);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = initial_state();
        let mut symbols = vec![START];
        while !state.finished {
            let mask = grammar.legal_mask(&state).unwrap();
            let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            prop_assert!(!legal.is_empty());
            let sym = layout.id_to_symbol(legal[rng.gen_range(0..legal.len())]).unwrap();
            state = grammar.advance(&state, &sym).unwrap();
            symbols.push(sym);
        }
        let g = delinearize(&symbols, true).unwrap();
        validate_graph(g, &doc(l), 2).unwrap();
    }

    #[test]
    fn metric_counts_match_brute_force(
        pred in arb_graph(8, 2, 2, 2),
        gold in arb_graph(8, 2, 2, 2),
    ) {
        let c = score_document(&pred, &gold);
        prop_assert_eq!((c.ent.tp, c.ent.pred, c.ent.gold), brute(pred.entities.clone(), gold.entities.clone()));
        prop_assert_eq!((c.rel.tp, c.rel.pred, c.rel.gold), brute(rel_keys(&pred, false), rel_keys(&gold, false)));
        prop_assert_eq!(
            (c.rel_plus.tp, c.rel_plus.pred, c.rel_plus.gold),
            brute(rel_keys(&pred, true), rel_keys(&gold, true))
        );
        prop_assert!(c.rel_plus.tp <= c.rel.tp);
    }

    #[test]
    fn masked_softmax_is_a_distribution(
        xs in proptest::collection::vec(-30.0f64..30.0, 2..40),
        bits in any::<u64>(),
    ) {
        let n = xs.len();
        let mut mask: Vec<bool> = (0..n).map(|i| bits >> (i % 64) & 1 == 1).collect();
        mask[0] = true;
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::new(vec![1, n], xs).unwrap());
        let p = g.softmax_last_dim(x, Some(&mask)).unwrap();
        let probs = g.value(p).data();
        let mut total = 0.0;
        for i in 0..n {
            if mask[i] { total += probs[i]; } else { prop_assert_eq!(probs[i], 0.0); }
        }
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nucleus_picks_inside_the_nucleus(
        ws in proptest::collection::vec(0.01f64..1.0, 1..12),
        top_p in 0.05f64..1.0,
        seed in any::<u64>(),
    ) {
        let total: f64 = ws.iter().sum();
        let mut cands: Vec<(usize, f64)> = ws.iter().enumerate().map(|(i, w)| (i, w / total)).collect();
        cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut mass = 0.0;
        let mut nucleus = Vec::new();
        for &(id, p) in &cands {
            nucleus.push(id);
            mass += p;
            if mass >= top_p { break; }
        }
        let pick = nucleus_select(&cands, top_p, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(nucleus.contains(&pick));
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties(n in 2usize..20, winner in 0usize..20) {
        let winner = winner % n;
        let x: Vec<f64> = (0..n).map(|i| if i >= winner { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(kernels::masked_argmax(&x, &vec![true; n]), Some(winner));
    }
}

#[test]
fn worked_two_document_example() {
    let e = |s, t| EntitySpan::new(s, s, t);
    // Document A: one of two predictions is right. Document B: one of two gold entities found.
    let gold = [IEGraph::new(vec![e(0, 0)], vec![]), IEGraph::new(vec![e(0, 0), e(2, 1)], vec![])];
    let pred = [IEGraph::new(vec![e(0, 0), e(1, 1)], vec![]), IEGraph::new(vec![e(0, 0)], vec![])];
    let r = score_corpus(&pred, &gold);
    assert_eq!((r.ent.counts.tp, r.ent.counts.pred, r.ent.counts.gold), (2, 3, 3));
    for v in [r.ent.precision, r.ent.recall, r.ent.f1] {
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }
    assert_eq!(score_corpus(&[], &[]).rel_plus.f1, 0.0);
}

#[test]
fn reversed_relation_earns_no_credit() {
    let ents = vec![EntitySpan::new(0, 0, 0), EntitySpan::new(2, 2, 1)];
    let gold = IEGraph::new(ents.clone(), vec![Relation::new(0, 1, 0)]);
    let pred = IEGraph::new(ents, vec![Relation::new(1, 0, 0)]);
    let c = score_document(&pred, &gold);
    assert_eq!((c.rel.tp, c.rel_plus.tp, c.ent.tp), (0, 0, 2));
}

#[test]
fn symbol_ordering_of_sorted_linearization() {
    let g = IEGraph::new(
        vec![EntitySpan::new(3, 3, 1), EntitySpan::new(0, 0, 0)],
        vec![Relation::new(0, 1, 1), Relation::new(1, 0, 0)],
    );
    let seq = linearize(&g, Ordering::Sorted, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(seq.symbols[1], Symbol::Span(EntitySpan::new(0, 0, 0)));
    assert_eq!(seq.symbols[4], Symbol::Span(EntitySpan::new(0, 0, 0)));
    assert_eq!(seq.symbols[6], Symbol::Rel(0));
}
