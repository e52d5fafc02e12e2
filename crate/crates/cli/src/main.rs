use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use atg::decode::{generate, DecodeConfig, DecodeError, DecodeMode};
use atg::eval::{score_corpus, ScoreReport};
use atg::graph::{Document, Example, Schema};
use atg::introspect::{export_attention, struct_similarity, struct_values, AttentionKind};
use atg::io::{
    load_dataset, load_run_config, load_schema, make_synthetic, render_dataset, save_dataset, save_schema, write_atomic,
    IoError, Precision, RunConfig, SplitMode, SynthConfig, SynthProfile, SYNTH_MAX_WIDTH,
};
use atg::linearize::{render_symbol, Ordering};
use atg::model::{Atg, ModelError, WordVocab};
use atg::tensor::{checkpoint_precision, Scalar};
use atg::train::{TrainError, Trainer};
use atg::vocab::VocabLayout;

/// Output-directory override.
const OUTPUT_ENV: &str = "ATG_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "atg", version, about = "Autoregressive text-to-graph entity and relation extraction")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (schema.json and train/dev/test JSONL).
    Synth(SynthArgs),
    /// Print the dynamic vocabulary layout for given sizes.
    VocabInfo(VocabArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score predictions against gold annotations.
    Evaluate(EvalArgs),
    /// Predict graphs for a dataset or a single sentence.
    Generate(GenerateArgs),
    /// Export attention maps or structural-embedding similarity.
    #[command(subcommand)]
    Inspect(InspectCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Small,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    SameTemplate,
    Compositional,
}

#[derive(Args)]
struct SynthArgs {
    /// Destination directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "small")]
    profile: ProfileArg,
    #[arg(long, value_enum, default_value = "same-template")]
    split: SplitArg,
    #[arg(long, default_value_t = 50)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    dev: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VocabArgs {
    /// Input length in words.
    #[arg(long = "L")]
    len: Option<usize>,
    /// Maximum span width.
    #[arg(long = "K")]
    max_width: Option<usize>,
    /// Entity type count.
    #[arg(long = "C")]
    entity_types: Option<usize>,
    /// Relation type count.
    #[arg(long = "R")]
    relation_types: Option<usize>,
    /// Take C and R from a schema file instead.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderingArg {
    Sorted,
    Random,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long, value_enum)]
    ordering: Option<OrderingArg>,
    /// Maximum number of concatenated sentences per sample.
    #[arg(long = "augment-max")]
    augment_max: Option<usize>,
    #[arg(long = "dec-layers")]
    dec_layers: Option<usize>,
    #[arg(long = "pos-off")]
    pos_off: bool,
    #[arg(long = "struct-off")]
    struct_off: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Nucleus sampling with this top-p instead of greedy decoding.
    #[arg(long = "top-p")]
    top_p: Option<f64>,
    #[arg(long = "decode-seed")]
    decode_seed: Option<u64>,
    #[arg(long = "max-len")]
    max_len: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted graphs (dataset format).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Gold graphs (dataset format).
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Predict with this checkpoint instead of reading --pred.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Emit the report as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose documents are annotated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// A single whitespace-tokenised sentence.
    #[arg(long)]
    text: Option<String>,
    /// Write predictions here (dataset format) instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the generated symbol sequence of each document.
    #[arg(long)]
    linearized: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    #[value(name = "self")]
    SelfAttention,
    Cross,
}

#[derive(Subcommand)]
enum InspectCommand {
    /// Attention of one decoder layer over a generated sequence (CSV).
    Attention(AttentionArgs),
    /// Cosine similarity and raw values of the structural embeddings (CSV).
    StructSim(StructArgs),
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentence to decode.
    #[arg(long)]
    doc: String,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Head index; omit to average the heads.
    #[arg(long)]
    head: Option<usize>,
    #[arg(long, value_enum, default_value = "self")]
    kind: KindArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for struct_sim.csv and struct_values.csv; prints otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = categorize(&e);
            eprintln!("error ({category}): {}", render_chain(&e));
            ExitCode::from(code)
        }
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            out.push_str(": ");
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn categorize(e: &anyhow::Error) -> (&'static str, u8) {
    for cause in e.chain() {
        if cause.is::<IoError>() || cause.is::<std::io::Error>() {
            return ("input", 3);
        }
        if cause.is::<ModelError>() || cause.is::<TrainError>() || cause.is::<DecodeError>() {
            return ("model", 4);
        }
    }
    ("usage", 2)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::VocabInfo(a) => vocab_info(a),
        Command::Train(a) => train(&mut cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Generate(a) => generate_cmd(&cfg, a),
        Command::Inspect(InspectCommand::Attention(a)) => inspect_attention(&cfg, a),
        Command::Inspect(InspectCommand::StructSim(a)) => inspect_struct(a),
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.paths.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        profile: match a.profile {
            ProfileArg::Small => SynthProfile::Small,
            ProfileArg::Full => SynthProfile::Full,
        },
        split_mode: match a.split {
            SplitArg::SameTemplate => SplitMode::SameTemplate,
            SplitArg::Compositional => SplitMode::Compositional,
        },
        train: a.train,
        dev: a.dev,
        test: a.test,
    };
    let dir = output_dir(a.out, &RunConfig::default(), "data/synth");
    let corpus = make_synthetic(&config, &mut ChaCha8Rng::seed_from_u64(a.seed));
    save_schema(&dir.join("schema.json"), &corpus.schema)?;
    for (name, split) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        save_dataset(&dir.join(format!("{name}.jsonl")), split, &corpus.schema)?;
    }
    println!(
        "wrote {} train / {} dev / {} test records to {} (max span width {SYNTH_MAX_WIDTH})",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        dir.display()
    );
    Ok(())
}

fn vocab_info(a: VocabArgs) -> Result<()> {
    let (c, r) = match &a.schema {
        Some(p) => {
            let s = load_schema(p)?;
            (s.num_entity_types(), s.num_relation_types())
        }
        None => (
            a.entity_types.ok_or_else(|| anyhow!("--C (or --schema) is required"))?,
            a.relation_types.ok_or_else(|| anyhow!("--R (or --schema) is required"))?,
        ),
    };
    let len = a.len.ok_or_else(|| anyhow!("--L is required"))?;
    let k = a.max_width.ok_or_else(|| anyhow!("--K is required"))?;
    let layout = VocabLayout::new(len, k, c, r).map_err(|e| anyhow!("{e}"))?;
    println!("{layout}");
    Ok(())
}

fn train(cfg: &mut RunConfig, a: TrainArgs) -> Result<()> {
    let p = &mut cfg.paths;
    for (slot, flag) in [(&mut p.schema, a.schema), (&mut p.train, a.train), (&mut p.dev, a.dev), (&mut p.test, a.test)] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    if let Some(s) = a.steps {
        cfg.train.max_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(pr) = a.precision {
        cfg.precision = match pr {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if let Some(o) = a.ordering {
        cfg.train.ordering = match o {
            OrderingArg::Sorted => Ordering::Sorted,
            OrderingArg::Random => Ordering::Random,
        };
    }
    if let Some(b) = a.augment_max {
        cfg.train.augment_max = b;
    }
    if let Some(d) = a.dec_layers {
        cfg.model.dec_layers = d;
    }
    cfg.model.pos_off |= a.pos_off;
    cfg.model.struct_off |= a.struct_off;
    let out = output_dir(a.out, cfg, "runs/atg");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    if let Some(ckpt) = &a.resume {
        return match precision_of(ckpt)? {
            Precision::F32 => resume_with::<f32>(cfg, a.steps, ckpt, &out),
            Precision::F64 => resume_with::<f64>(cfg, a.steps, ckpt, &out),
        };
    }
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, &out),
        Precision::F64 => train_with::<f64>(cfg, &out),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| anyhow!("no {what} path given (flag or [paths] in the config)"))
}

fn load_split(path: &Option<PathBuf>, schema: &Schema, k: usize) -> Result<Option<Vec<Example>>> {
    path.as_deref()
        .map(|p| load_dataset(p, schema, k).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn print_log(r: &atg::train::LogRecord) {
    match &r.dev {
        Some(d) => println!(
            "step {:>6}  loss {:.5}  dev ENT {:.1}  REL {:.1}  REL+ {:.1}",
            r.step,
            r.loss,
            100.0 * d.ent.f1,
            100.0 * d.rel.f1,
            100.0 * d.rel_plus.f1
        ),
        None => println!("step {:>6}  loss {:.5}", r.step, r.loss),
    }
}

fn train_with<T: Scalar>(cfg: &mut RunConfig, out: &Path) -> Result<()> {
    let schema = load_schema(required(&cfg.paths.schema, "schema")?)?;
    cfg.model.entity_types = schema.num_entity_types();
    cfg.model.relation_types = schema.num_relation_types();
    cfg.validate().map_err(|e| anyhow!("invalid config: {e}"))?;
    let k = cfg.model.max_width;
    let train = load_split(&cfg.paths.train, &schema, k)?.ok_or_else(|| anyhow!("no training data given"))?;
    let dev = load_split(&cfg.paths.dev, &schema, k)?;
    let test = load_split(&cfg.paths.test, &schema, k)?;
    let vocab = WordVocab::build(train.iter().map(|e| &e.doc));
    let model = Atg::<T>::new(cfg.model.clone(), vocab, cfg.train.seed)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let mut trainer = Trainer::new(model, schema, cfg.train.clone())?;
    println!(
        "training {} parameters at {} for {} steps on {} sentences",
        trainer.model.params().numel(),
        T::NAME,
        cfg.train.max_steps,
        train.len()
    );
    finish_training(&mut trainer, &train, dev.as_deref(), test.as_deref(), &cfg.decode, out)
}

fn resume_with<T: Scalar>(cfg: &RunConfig, steps: Option<usize>, ckpt: &Path, out: &Path) -> Result<()> {
    let mut trainer = Trainer::<T>::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if let Some(s) = steps {
        trainer.config.max_steps = s;
    }
    let k = trainer.model.config().max_width;
    let train = load_split(&cfg.paths.train, &trainer.schema, k)?.ok_or_else(|| anyhow!("no training data given"))?;
    let dev = load_split(&cfg.paths.dev, &trainer.schema, k)?;
    let test = load_split(&cfg.paths.test, &trainer.schema, k)?;
    println!("resuming at step {} of {}", trainer.step(), trainer.config.max_steps);
    finish_training(&mut trainer, &train, dev.as_deref(), test.as_deref(), &cfg.decode, out)
}

fn finish_training<T: Scalar>(
    trainer: &mut Trainer<T>,
    train: &[Example],
    dev: Option<&[Example]>,
    test: Option<&[Example]>,
    decode: &DecodeConfig,
    out: &Path,
) -> Result<()> {
    trainer.train_loop(train, dev, Some(out), print_log)?;
    println!("checkpoints and metrics written to {}", out.display());
    if let Some(test) = test {
        let best_path = out.join("best.ckpt");
        let report = if best_path.exists() {
            Trainer::<T>::load(&best_path)?.evaluate(test, decode)?
        } else {
            trainer.evaluate(test, decode)?
        };
        println!("test\n{report}");
    }
    Ok(())
}

fn precision_of(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match checkpoint_precision(&bytes) {
        Some(4) => Ok(Precision::F32),
        Some(8) => Ok(Precision::F64),
        _ => bail!("{} is not a checkpoint", path.display()),
    }
}

fn decode_config(base: &DecodeConfig, a: &DecodeArgs) -> DecodeConfig {
    let mut d = base.clone();
    if let Some(p) = a.top_p {
        d.mode = DecodeMode::Nucleus;
        d.top_p = p;
    }
    if let Some(s) = a.decode_seed {
        d.seed = s;
    }
    if a.max_len.is_some() {
        d.max_len = a.max_len;
    }
    d
}

fn print_report(report: &ScoreReport, json: bool) -> Result<()> {
    let text = if json {
        serde_json::to_string_pretty(report)? + "\n"
    } else {
        report.to_string()
    };
    emit(&None, &text)
}

fn evaluate(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let gold_path = a.gold.clone().or_else(|| cfg.paths.test.clone());
    let gold_path = required(&gold_path, "gold")?;
    if let Some(ckpt) = &a.checkpoint {
        let decode = decode_config(&cfg.decode, &a.decode);
        let report = match precision_of(ckpt)? {
            Precision::F32 => evaluate_checkpoint::<f32>(ckpt, gold_path, &decode)?,
            Precision::F64 => evaluate_checkpoint::<f64>(ckpt, gold_path, &decode)?,
        };
        print_report(&report, a.json)?;
        return Ok(());
    }
    let schema_path = a.schema.clone().or_else(|| cfg.paths.schema.clone());
    let schema = load_schema(required(&schema_path, "schema")?)?;
    let pred_path = a.pred.as_deref().ok_or_else(|| anyhow!("give --pred or --checkpoint"))?;
    let k = usize::MAX;
    let gold = load_dataset(gold_path, &schema, k).with_context(|| format!("loading {}", gold_path.display()))?;
    let pred = load_dataset(pred_path, &schema, k).with_context(|| format!("loading {}", pred_path.display()))?;
    if gold.len() != pred.len() {
        bail!("{} predictions for {} gold records", pred.len(), gold.len());
    }
    for (i, (p, g)) in pred.iter().zip(&gold).enumerate() {
        if p.doc.tokens != g.doc.tokens {
            bail!("record {} differs in tokens between prediction and gold", i + 1);
        }
    }
    let pg: Vec<_> = pred.into_iter().map(|e| e.graph).collect();
    let gg: Vec<_> = gold.into_iter().map(|e| e.graph).collect();
    print_report(&score_corpus(&pg, &gg), a.json)?;
    Ok(())
}

fn evaluate_checkpoint<T: Scalar>(ckpt: &Path, gold: &Path, decode: &DecodeConfig) -> Result<ScoreReport> {
    let trainer = Trainer::<T>::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let data = load_dataset(gold, &trainer.schema, trainer.model.config().max_width)?;
    Ok(trainer.evaluate(&data, decode)?)
}

fn generate_cmd(cfg: &RunConfig, a: GenerateArgs) -> Result<()> {
    match precision_of(&a.checkpoint)? {
        Precision::F32 => generate_with::<f32>(cfg, &a),
        Precision::F64 => generate_with::<f64>(cfg, &a),
    }
}

fn generate_with<T: Scalar>(cfg: &RunConfig, a: &GenerateArgs) -> Result<()> {
    let trainer = Trainer::<T>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (model, schema) = (&trainer.model, &trainer.schema);
    let docs: Vec<Document> = match (&a.data, &a.text) {
        (Some(p), None) => load_dataset(p, schema, usize::MAX)?.into_iter().map(|e| e.doc).collect(),
        (None, Some(t)) => vec![Document::from_text("text", t)?],
        _ => bail!("give exactly one of --data or --text"),
    };
    let decode = decode_config(&cfg.decode, &a.decode);
    let mut out = Vec::with_capacity(docs.len());
    for (i, doc) in docs.into_iter().enumerate() {
        let d = DecodeConfig {
            seed: decode.seed.wrapping_add(i as u64),
            ..decode.clone()
        };
        let gen = generate(model, &doc, schema, &d)?;
        if a.linearized {
            let flag = if gen.trace.truncated { " [truncated]" } else { "" };
            eprintln!("{}\t{}{flag}", doc.id, gen.sequence.render(schema));
        }
        out.push(Example { doc, graph: gen.graph });
    }
    match &a.out {
        Some(p) => save_dataset(p, &out, schema)?,
        None => emit(&None, &render_dataset(&out, schema))?,
    }
    Ok(())
}

fn inspect_attention(cfg: &RunConfig, a: AttentionArgs) -> Result<()> {
    match precision_of(&a.checkpoint)? {
        Precision::F32 => attention_with::<f32>(cfg, &a),
        Precision::F64 => attention_with::<f64>(cfg, &a),
    }
}

fn attention_with<T: Scalar>(cfg: &RunConfig, a: &AttentionArgs) -> Result<()> {
    let trainer = Trainer::<T>::load(&a.checkpoint)?;
    let doc = Document::from_text("doc", &a.doc)?;
    let d = DecodeConfig {
        capture_attention: true,
        ..cfg.decode.clone()
    };
    let gen = generate(&trainer.model, &doc, &trainer.schema, &d)?;
    let labels: Vec<String> = gen
        .sequence
        .symbols
        .iter()
        .map(|s| render_symbol(s, &trainer.schema))
        .collect();
    let kind = match a.kind {
        KindArg::SelfAttention => AttentionKind::SelfAttention,
        KindArg::Cross => AttentionKind::Cross,
    };
    let m = export_attention(&gen.trace, &labels, &doc.tokens, a.layer, a.head, kind)?;
    emit(&a.out, &m.to_csv())
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))?),
        None => {
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn inspect_struct(a: StructArgs) -> Result<()> {
    let (sim, raw) = match precision_of(&a.checkpoint)? {
        Precision::F32 => struct_tables::<f32>(&a.checkpoint)?,
        Precision::F64 => struct_tables::<f64>(&a.checkpoint)?,
    };
    match &a.out {
        Some(dir) => {
            emit(&Some(dir.join("struct_sim.csv")), &sim)?;
            emit(&Some(dir.join("struct_values.csv")), &raw)?;
        }
        None => emit(&None, &sim)?,
    }
    Ok(())
}

fn struct_tables<T: Scalar>(ckpt: &Path) -> Result<(String, String)> {
    let trainer = Trainer::<T>::load(ckpt)?;
    let table = trainer.model.struct_embeddings();
    Ok((struct_similarity(table)?.to_csv(), struct_values(table).to_csv()))
}

