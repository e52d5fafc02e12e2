use atg::decode::{generate, DecodeConfig, Generation};
use atg::graph::{Document, Schema};
use atg::introspect::{export_attention, struct_similarity, struct_values, AttentionKind, IntrospectError};
use atg::io::{make_synthetic, render_dataset, SynthConfig};
use atg::linearize::render_symbol;
use atg::model::{Atg, ModelConfig, WordVocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn traced() -> (Atg<f64>, Schema, Document, Generation<f64>) {
    let schema = Schema::from_names(&["Peop", "Org"], &["Work_For"]).unwrap();
    let doc = Document::from_text("d", "Alain works at McGill in Montreal").unwrap();
    let config = ModelConfig {
        d_model: 16,
        heads: 4,
        enc_layers: 1,
        dec_layers: 2,
        max_width: 2,
        entity_types: 2,
        relation_types: 1,
        ..ModelConfig::default()
    };
    let model = Atg::new(config, WordVocab::build([&doc]), 3).unwrap();
    let cfg = DecodeConfig {
        capture_attention: true,
        ..DecodeConfig::nucleus(1.0, 4)
    };
    let gen = generate(&model, &doc, &schema, &cfg).unwrap();
    (model, schema, doc, gen)
}

#[test]
fn attention_rows_are_distributions() {
    let (_, schema, doc, gen) = traced();
    let labels: Vec<String> = gen.sequence.symbols.iter().map(|s| render_symbol(s, &schema)).collect();
    let n = labels.len();
    for layer in 0..2 {
        for head in [None, Some(0), Some(3)] {
            let s = export_attention(&gen.trace, &labels, &doc.tokens, layer, head, AttentionKind::SelfAttention).unwrap();
            assert_eq!((s.values.len(), s.values[0].len()), (n, n));
            for (i, row) in s.values.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
            let c = export_attention(&gen.trace, &labels, &doc.tokens, layer, head, AttentionKind::Cross).unwrap();
            assert_eq!((c.values.len(), c.values[0].len()), (n, doc.len()));
            assert_eq!(c.col_labels, doc.tokens);
            for row in &c.values {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
    assert!(matches!(
        export_attention(&gen.trace, &labels, &doc.tokens, 2, None, AttentionKind::Cross),
        Err(IntrospectError::LayerOutOfRange { layer: 2, layers: 2 })
    ));
    assert!(matches!(
        export_attention(&gen.trace, &labels, &doc.tokens, 0, Some(4), AttentionKind::Cross),
        Err(IntrospectError::HeadOutOfRange { head: 4, heads: 4 })
    ));
}

#[test]
fn exports_are_deterministic() {
    let (_, schema, doc, a) = traced();
    let (_, _, _, b) = traced();
    let labels: Vec<String> = a.sequence.symbols.iter().map(|s| render_symbol(s, &schema)).collect();
    let ea = export_attention(&a.trace, &labels, &doc.tokens, 1, None, AttentionKind::Cross).unwrap();
    let eb = export_attention(&b.trace, &labels, &doc.tokens, 1, None, AttentionKind::Cross).unwrap();
    assert_eq!(ea.to_csv(), eb.to_csv());
}

#[test]
fn struct_similarity_of_a_model() {
    let (model, ..) = traced();
    let table = model.struct_embeddings();
    let sim = struct_similarity(table).unwrap();
    for i in 0..4 {
        assert!((sim.values[i][i] - 1.0).abs() < 1e-6);
        for j in 0..4 {
            assert_eq!(sim.values[i][j], sim.values[j][i]);
            assert!((-1.0..=1.0).contains(&sim.values[i][j]));
        }
    }
    let raw = struct_values(table);
    assert_eq!((raw.values.len(), raw.values[0].len()), (4, 16));
    assert_eq!(raw.row_labels, ["Node", "Head", "Tail", "Relation"]);
}

#[test]
fn synthetic_corpus_is_seed_determined() {
    let cfg = SynthConfig::default();
    let a = make_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(11));
    let b = make_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(11));
    let c = make_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(12));
    assert_eq!(render_dataset(&a.train, &a.schema), render_dataset(&b.train, &b.schema));
    assert_ne!(render_dataset(&a.train, &a.schema), render_dataset(&c.train, &c.schema));
    assert_eq!(a.train.len(), 50);
    assert_eq!((a.schema.num_entity_types(), a.schema.num_relation_types()), (2, 2));
}
