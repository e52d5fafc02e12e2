use atg::decode::{generate, DecodeConfig};
use atg::grammar::Grammar;
use atg::graph::Example;
use atg::io::{
    load_dataset, load_run_config, load_schema, make_synthetic, save_dataset, save_schema, RunConfig, SynthConfig,
    SYNTH_MAX_WIDTH,
};
use atg::linearize::{delinearize, linearize, Ordering};
use atg::model::{Atg, ModelConfig, WordVocab};
use atg::train::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> atg::io::SynthCorpus {
    make_synthetic(
        &SynthConfig {
            train: 12,
            dev: 4,
            test: 4,
            ..SynthConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(3),
    )
}

fn trainer<T: atg::tensor::Scalar>(train: &[Example], schema: &atg::graph::Schema, seed: u64) -> Trainer<T> {
    let config = ModelConfig {
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        max_width: SYNTH_MAX_WIDTH,
        entity_types: schema.num_entity_types(),
        relation_types: schema.num_relation_types(),
        ..ModelConfig::default()
    };
    let vocab = WordVocab::build(train.iter().map(|e| &e.doc));
    let model = Atg::new(config, vocab, seed).unwrap();
    let tc = TrainConfig {
        max_steps: 20,
        batch_size: 2,
        augment_max: 2,
        lr_encoder: 1e-3,
        lr_decoder: 1e-3,
        lr_other: 1e-3,
        seed,
        eval_every: 0,
        log_every: 0,
        ..TrainConfig::default()
    };
    Trainer::new(model, schema.clone(), tc).unwrap()
}

fn bits(t: &Trainer<f64>) -> Vec<u64> {
    t.model.params().iter().flat_map(|p| p.value.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn fixed_seed_training_is_bit_identical() {
    let c = corpus();
    let mut a = trainer::<f64>(&c.train, &c.schema, 5);
    let mut b = trainer::<f64>(&c.train, &c.schema, 5);
    for _ in 0..5 {
        assert_eq!(a.train_step(&c.train).unwrap().to_bits(), b.train_step(&c.train).unwrap().to_bits());
    }
    assert_eq!(bits(&a), bits(&b));
    let mut other = trainer::<f64>(&c.train, &c.schema, 6);
    other.train_step(&c.train).unwrap();
    assert_ne!(bits(&a), bits(&other));
}

#[test]
fn checkpoint_resumes_exactly() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    for _ in 0..2 {
        let mut t = trainer::<f64>(&c.train, &c.schema, 1);
        for _ in 0..3 {
            t.train_step(&c.train).unwrap();
        }
        t.save(&path).unwrap();
        let mut back = Trainer::<f64>::load(&path).unwrap();
        assert_eq!(back.step(), 3);
        assert_eq!(bits(&back), bits(&t));
        let (x, y) = (t.train_step(&c.train).unwrap(), back.train_step(&c.train).unwrap());
        assert_eq!(x.to_bits(), y.to_bits());
        assert_eq!(bits(&back), bits(&t));
    }
    assert!(Trainer::<f32>::load(&path).is_err());
}

#[test]
fn f32_checkpoint_round_trip() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut t = trainer::<f32>(&c.train, &c.schema, 2);
    t.train_step(&c.train).unwrap();
    t.save(&path).unwrap();
    let back = Trainer::<f32>::load(&path).unwrap();
    let d = DecodeConfig::greedy();
    for ex in &c.test {
        let a = generate(&t.model, &ex.doc, &t.schema, &d).unwrap();
        let b = generate(&back.model, &ex.doc, &back.schema, &d).unwrap();
        assert_eq!(a.sequence, b.sequence);
    }
}

#[test]
fn incremental_and_full_decoding_agree() {
    let c = corpus();
    let t = trainer::<f64>(&c.train, &c.schema, 4);
    for (i, ex) in c.test.iter().enumerate() {
        for base in [DecodeConfig::greedy(), DecodeConfig::nucleus(0.9, i as u64)] {
            let inc = generate(&t.model, &ex.doc, &t.schema, &base).unwrap();
            let full = generate(
                &t.model,
                &ex.doc,
                &t.schema,
                &DecodeConfig {
                    incremental: false,
                    ..base.clone()
                },
            )
            .unwrap();
            assert_eq!(inc.sequence, full.sequence);
            let probs = |g: &atg::decode::Generation<f64>| g.trace.steps.iter().map(|s| s.prob.to_bits()).collect::<Vec<_>>();
            assert_eq!(probs(&inc), probs(&full));
        }
    }
}

#[test]
fn short_budget_still_yields_valid_sequences() {
    let c = corpus();
    let t = trainer::<f64>(&c.train, &c.schema, 8);
    for max_len in [3, 4, 6, 9] {
        for (i, ex) in c.train.iter().enumerate() {
            let cfg = DecodeConfig {
                max_len: Some(max_len),
                ..DecodeConfig::nucleus(1.0, i as u64)
            };
            let g = generate(&t.model, &ex.doc, &t.schema, &cfg).unwrap();
            assert!(g.sequence.len() <= max_len);
            let layout = t.model.layout_for(&ex.doc).unwrap();
            let (_, state) = Grammar::new(&layout, &t.schema).replay(&g.sequence.symbols).unwrap();
            assert!(state.finished);
            assert_eq!(delinearize(&g.sequence.symbols, true).unwrap(), g.graph);
        }
    }
}

#[test]
fn gold_training_sequences_are_legal_under_the_schema() {
    let c = corpus();
    let t = trainer::<f64>(&c.train, &c.schema, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ex in &c.train {
        let layout = t.model.layout_for(&ex.doc).unwrap();
        for ordering in [Ordering::Sorted, Ordering::Random] {
            let seq = linearize(&ex.graph, ordering, &mut rng);
            Grammar::new(&layout, &t.schema).replay(&seq.symbols).unwrap();
        }
    }
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let c = corpus();
    let mut t = trainer::<f64>(&c.train, &c.schema, 9);
    let before = t.eval_loss(&c.train[..4]).unwrap();
    for _ in 0..20 {
        t.train_step(&c.train[..4]).unwrap();
    }
    assert!(t.eval_loss(&c.train[..4]).unwrap() < before);
}

#[test]
fn dataset_and_config_files_round_trip() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    save_schema(&dir.path().join("schema.json"), &c.schema).unwrap();
    save_dataset(&dir.path().join("train.jsonl"), &c.train, &c.schema).unwrap();
    let schema = load_schema(&dir.path().join("schema.json")).unwrap();
    assert_eq!(schema, c.schema);
    let back = load_dataset(&dir.path().join("train.jsonl"), &schema, SYNTH_MAX_WIDTH).unwrap();
    assert_eq!(back.len(), c.train.len());
    for (a, b) in back.iter().zip(&c.train) {
        assert_eq!(a.doc, b.doc);
        assert_eq!(a.graph, b.graph);
    }
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, "[paths]\ntrain = \"train.jsonl\"\n[train]\nmax_steps = 7\n").unwrap();
    let cfg = load_run_config(&cfg_path).unwrap();
    assert_eq!(cfg.paths.train.as_deref(), Some(dir.path().join("train.jsonl").as_path()));
    assert_eq!(cfg.train.max_steps, 7);
    assert_eq!(cfg.model, RunConfig::default().model);
}

#[test]
fn train_loop_writes_artifacts() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer::<f32>(&c.train, &c.schema, 1);
    t.config.max_steps = 6;
    t.config.eval_every = 3;
    let mut seen = Vec::new();
    let log = t.train_loop(&c.train, Some(&c.dev), Some(dir.path()), |r| seen.push(r.step)).unwrap();
    assert_eq!(seen, [1, 3, 6]);
    assert_eq!(log.iter().filter(|r| r.dev.is_some()).count(), 2);
    for f in ["best.ckpt", "last.ckpt", "metrics.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
    assert_eq!(Trainer::<f32>::load(&dir.path().join("last.ckpt")).unwrap().step(), 6);
}
