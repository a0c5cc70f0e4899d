//! Command-line entry point wiring all modules together: corpus
//! generation, vocabulary building, training, translation, evaluation.
//!
//! One binary with subcommands; training options resolve with the
//! precedence *flags > config file > defaults*, and the effective
//! configuration is echoed into the training log header so every run is
//! reproducible from its artifacts. `EMB_NMT_THREADS` caps translation
//! worker threads (default 1, which keeps outputs deterministic).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{generate_toy_corpus, load_parallel, make_batches, ToyCorpusSpec};
use crate::embeddings::{align_to_vocab, load_text_embeddings, EmbeddingStore};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::inference::{beam_search, greedy_decode};
use crate::model::{Checkpoint, ModelDims, ModelParams};
use crate::trainer::{
    format_log, run_strategy, PretrainTermination, StrategyKind, TrainConfig, TrainingStrategy,
};
use crate::vocab::Vocabulary;

/// Parse arguments, dispatch, and map errors to exit codes
/// (0 success, 1 data/runtime error, 2 usage error).
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Parser)]
#[command(
    name = "embnmt",
    version,
    about = "Attentional encoder-decoder translation with an embedding-based training loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic synonym-cluster corpus and its embeddings
    GenToy(GenToyArgs),
    /// Build a vocabulary file from a tokenized corpus
    BuildVocab(BuildVocabArgs),
    /// Train a model under a loss strategy
    Train(Box<TrainArgs>),
    /// Translate a tokenized file with a trained checkpoint
    Translate(TranslateArgs),
    /// Score a hypothesis file against a reference file
    Evaluate(EvaluateArgs),
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenToy(a) => cmd_gen_toy(&a),
        Command::BuildVocab(a) => cmd_build_vocab(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Translate(a) => cmd_translate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

// ---- shared file helpers ----

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Whitespace-tokenized lines; empty lines stay as empty sentences so
/// line counts are preserved.
fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_to_string(path)?
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn sentences_to_text<'a>(sides: impl Iterator<Item = &'a [String]>) -> String {
    let mut out = String::new();
    for sentence in sides {
        out.push_str(&sentence.join(" "));
        out.push('\n');
    }
    out
}

// ---- gen-toy ----

#[derive(Args)]
struct GenToyArgs {
    /// Directory for the generated files (created if missing)
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 3)]
    cluster_size: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 2000)]
    train_size: usize,
    #[arg(long, default_value_t = 200)]
    valid_size: usize,
    #[arg(long, default_value_t = 200)]
    test_size: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
}

fn cmd_gen_toy(args: &GenToyArgs) -> Result<()> {
    let spec = ToyCorpusSpec {
        clusters: args.clusters,
        cluster_size: args.cluster_size,
        min_len: args.min_len,
        max_len: args.max_len,
        train_size: args.train_size,
        valid_size: args.valid_size,
        test_size: args.test_size,
        embed_dim: args.embed_dim,
    };
    let toy = generate_toy_corpus(&spec, args.seed)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;

    let mut emitted = Vec::new();
    let mut emit = |name: &str, content: String| -> Result<()> {
        let path = args.out_dir.join(name);
        write_file(&path, &content)?;
        emitted.push(path);
        Ok(())
    };
    for (name, corpus) in [
        ("train", &toy.train),
        ("valid", &toy.valid),
        ("test", &toy.test),
    ] {
        emit(&format!("{name}.src"), sentences_to_text(corpus.source_sides()))?;
        emit(&format!("{name}.tgt"), sentences_to_text(corpus.target_sides()))?;
    }
    emit("embeddings.txt", toy.embedding_text.clone())?;

    // vocabularies: the full source side, the full target side, and the
    // truncated target side that makes each cluster's most frequent
    // synonym OOV
    let vocab_files = [
        ("vocab.src", spec.source_words()),
        ("vocab.tgt", spec.target_words()),
        ("vocab.tgt.oov", spec.oov_target_words()),
    ];
    for (name, words) in vocab_files {
        let path = args.out_dir.join(name);
        Vocabulary::from_words(words).save(&path)?;
        emitted.push(path);
    }

    for path in &emitted {
        println!("{}", path.display());
    }
    Ok(())
}

// ---- build-vocab ----

#[derive(Args)]
struct BuildVocabArgs {
    /// Tokenized corpus, one sentence per line
    #[arg(long)]
    corpus: PathBuf,
    /// Output vocabulary file
    #[arg(long)]
    out: PathBuf,
    /// Maximum vocabulary size including the four special tokens
    #[arg(long, default_value_t = 20000)]
    max_size: usize,
}

fn cmd_build_vocab(args: &BuildVocabArgs) -> Result<()> {
    if args.max_size <= 4 {
        return Err(Error::Usage(format!(
            "--max-size must exceed the 4 special tokens, got {}",
            args.max_size
        )));
    }
    let sentences = read_token_lines(&args.corpus)?;
    let vocab = Vocabulary::build(sentences.iter().map(Vec::as_slice), args.max_size);
    vocab.save(&args.out)?;
    println!(
        "{} ({} entries)",
        args.out.display(),
        vocab.len()
    );
    Ok(())
}

// ---- train ----

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train_src: PathBuf,
    #[arg(long)]
    train_tgt: PathBuf,
    #[arg(long)]
    valid_src: PathBuf,
    #[arg(long)]
    valid_tgt: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    /// Where the best checkpoint is written
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where the per-epoch training log is written
    #[arg(long)]
    log: PathBuf,
    /// Word embeddings (required by every strategy except `ent`)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Optional key=value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,

    /// ent | combined | combined-after-ent | emb-after-ent | emb-only
    #[arg(long)]
    strategy: Option<String>,
    /// Pre-training epochs for two-phase strategies (default: first
    /// validation plateau)
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

/// Parse a flat `key=value` config file; `#` starts a comment, blank
/// lines are ignored.
fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "config line {}: expected key=value, got {raw:?}",
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Training settings after applying precedence: defaults, then the
/// config file, then explicit flags.
struct TrainSettings {
    cfg: TrainConfig,
    strategy: TrainingStrategy,
    pretrain_epochs: Option<usize>,
}

fn resolve_train_settings(
    args: &TrainArgs,
    file: &BTreeMap<String, String>,
) -> Result<TrainSettings> {
    let mut cfg = TrainConfig::default();
    let mut strategy_name = "ent".to_string();
    let mut pretrain_epochs: Option<usize> = None;

    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("config key {key}: bad value {value:?}")))
    }
    for (key, value) in file {
        match key.as_str() {
            "strategy" => strategy_name = value.clone(),
            "pretrain_epochs" => pretrain_epochs = Some(parse(key, value)?),
            "hidden_dim" => cfg.hidden_dim = parse(key, value)?,
            "embed_dim" => cfg.embed_dim = parse(key, value)?,
            "batch_size" => cfg.batch_size = parse(key, value)?,
            "max_epochs" => cfg.max_epochs = parse(key, value)?,
            "seed" => cfg.seed = parse(key, value)?,
            "dropout" => cfg.dropout = parse(key, value)?,
            "learning_rate" => cfg.learning_rate = parse(key, value)?,
            "weight_decay" => cfg.weight_decay = parse(key, value)?,
            "grad_clip" => cfg.grad_clip = parse(key, value)?,
            "lr_decay_factor" => cfg.lr_decay_factor = parse(key, value)?,
            "lambda" => cfg.lambda = parse(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
    }

    macro_rules! flag {
        ($field:ident, $target:expr) => {
            if let Some(v) = args.$field {
                $target = v;
            }
        };
    }
    if let Some(s) = &args.strategy {
        strategy_name = s.clone();
    }
    if let Some(n) = args.pretrain_epochs {
        pretrain_epochs = Some(n);
    }
    flag!(hidden_dim, cfg.hidden_dim);
    flag!(embed_dim, cfg.embed_dim);
    flag!(batch_size, cfg.batch_size);
    flag!(max_epochs, cfg.max_epochs);
    flag!(seed, cfg.seed);
    flag!(dropout, cfg.dropout);
    flag!(learning_rate, cfg.learning_rate);
    flag!(weight_decay, cfg.weight_decay);
    flag!(grad_clip, cfg.grad_clip);
    flag!(lr_decay_factor, cfg.lr_decay_factor);
    flag!(lambda, cfg.lambda);

    cfg.validate()?;
    let kind = StrategyKind::parse(&strategy_name)?;
    let strategy = TrainingStrategy {
        kind,
        pretrain_termination: match pretrain_epochs {
            Some(n) => PretrainTermination::FixedEpochs(n),
            None => PretrainTermination::Plateau,
        },
    };
    Ok(TrainSettings {
        cfg,
        strategy,
        pretrain_epochs,
    })
}

fn effective_config_header(
    settings: &TrainSettings,
    args: &TrainArgs,
) -> Vec<(String, String)> {
    let cfg = &settings.cfg;
    let p = |path: &PathBuf| path.display().to_string();
    let mut header: Vec<(String, String)> = vec![
        ("strategy".into(), settings.strategy.kind.label().into()),
        (
            "pretrain_termination".into(),
            match settings.pretrain_epochs {
                Some(n) => format!("fixed_epochs={n}"),
                None => "plateau".into(),
            },
        ),
        ("hidden_dim".into(), cfg.hidden_dim.to_string()),
        ("embed_dim".into(), cfg.embed_dim.to_string()),
        ("batch_size".into(), cfg.batch_size.to_string()),
        ("max_epochs".into(), cfg.max_epochs.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("dropout".into(), cfg.dropout.to_string()),
        ("learning_rate".into(), cfg.learning_rate.to_string()),
        ("weight_decay".into(), cfg.weight_decay.to_string()),
        ("grad_clip".into(), cfg.grad_clip.to_string()),
        ("lr_decay_factor".into(), cfg.lr_decay_factor.to_string()),
        ("lambda".into(), cfg.lambda.to_string()),
        ("train_src".into(), p(&args.train_src)),
        ("train_tgt".into(), p(&args.train_tgt)),
        ("valid_src".into(), p(&args.valid_src)),
        ("valid_tgt".into(), p(&args.valid_tgt)),
        ("src_vocab".into(), p(&args.src_vocab)),
        ("tgt_vocab".into(), p(&args.tgt_vocab)),
    ];
    header.push((
        "embeddings".into(),
        args.embeddings.as_ref().map_or("-".into(), p),
    ));
    header
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file_map = match &args.config {
        Some(path) => parse_config_file(&read_to_string(path)?)?,
        None => BTreeMap::new(),
    };
    let settings = resolve_train_settings(args, &file_map)?;
    if settings.strategy.kind.needs_embeddings() && args.embeddings.is_none() {
        return Err(Error::Usage(format!(
            "strategy {} requires --embeddings",
            settings.strategy.kind.label()
        )));
    }

    let train_corpus = load_parallel(&args.train_src, &args.train_tgt)?;
    let valid_corpus = load_parallel(&args.valid_src, &args.valid_tgt)?;
    let src_vocab = Vocabulary::load(&args.src_vocab)?;
    let tgt_vocab = Vocabulary::load(&args.tgt_vocab)?;

    let store: Option<EmbeddingStore> = match &args.embeddings {
        Some(path) => {
            let raw = load_text_embeddings(path)?;
            let aligned = align_to_vocab(&raw, &tgt_vocab, settings.cfg.seed);
            println!(
                "embeddings: coverage {:.1}% of target vocabulary",
                aligned.coverage * 100.0
            );
            Some(aligned)
        }
        None => None,
    };

    let cfg = &settings.cfg;
    let train_batches = make_batches(
        &train_corpus,
        &src_vocab,
        &tgt_vocab,
        cfg.batch_size,
        Some(cfg.seed),
    );
    let valid_batches = make_batches(&valid_corpus, &src_vocab, &tgt_vocab, cfg.batch_size, None);

    let dims = ModelDims {
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
    };
    let params = ModelParams::new(dims, cfg.seed);
    let outcome = run_strategy(
        params,
        &train_batches,
        &valid_batches,
        cfg,
        settings.strategy,
        store.as_ref(),
    )?;

    let header = effective_config_header(&settings, args);
    write_file(&args.log, &format_log(&header, &outcome.records))?;

    let best_phase = outcome.records[outcome.best_epoch - 1].phase;
    let mut extra = Vec::new();
    for (name, t) in outcome
        .best_params
        .names()
        .iter()
        .zip(outcome.best_adam.m.iter())
    {
        extra.push((format!("adam.m.{name}"), t.clone()));
    }
    for (name, t) in outcome
        .best_params
        .names()
        .iter()
        .zip(outcome.best_adam.v.iter())
    {
        extra.push((format!("adam.v.{name}"), t.clone()));
    }
    let checkpoint = Checkpoint {
        params: outcome.best_params,
        src_vocab,
        tgt_vocab,
        meta: vec![
            ("epoch".into(), outcome.best_epoch.to_string()),
            ("valid_loss".into(), format!("{}", outcome.best_valid_loss)),
            ("lr".into(), format!("{}", outcome.best_lr)),
            ("phase".into(), best_phase.label().into()),
            ("strategy".into(), settings.strategy.kind.label().into()),
            ("seed".into(), cfg.seed.to_string()),
            ("adam_step".into(), outcome.best_adam.step.to_string()),
        ],
        extra_tensors: extra,
    };
    if let Some(parent) = args.checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    checkpoint.save(&args.checkpoint)?;

    println!(
        "best epoch {} ({} phase), validation loss {}",
        outcome.best_epoch,
        best_phase.label(),
        outcome.best_valid_loss
    );
    println!("checkpoint: {}", args.checkpoint.display());
    println!("log: {}", args.log.display());
    Ok(())
}

// ---- translate ----

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tokenized source file, one sentence per line
    #[arg(long)]
    input: PathBuf,
    /// Output file, one translation per input line
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Beam width; omitted means greedy decoding
    #[arg(long)]
    beam: Option<usize>,
    /// Length-normalization exponent for beam scores
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
}

fn worker_threads() -> usize {
    std::env::var("EMB_NMT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn translate_line(
    params: &ModelParams,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    line: &[String],
    args: &TranslateArgs,
) -> Result<String> {
    if line.is_empty() {
        return Ok(String::new());
    }
    let ids = src_vocab.encode(line);
    let out_ids = match args.beam {
        Some(width) => beam_search(params, &ids, width, args.max_len, args.alpha)
            .emitted()
            .to_vec(),
        None => greedy_decode(params, &ids, args.max_len),
    };
    Ok(tgt_vocab.decode(&out_ids)?.join(" "))
}

fn cmd_translate(args: &TranslateArgs) -> Result<()> {
    if let Some(width) = args.beam {
        if width == 0 {
            return Err(Error::Usage("--beam must be ≥ 1".into()));
        }
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let lines = read_token_lines(&args.input)?;

    let threads = worker_threads().min(lines.len().max(1));
    let mut outputs: Vec<Result<String>> = Vec::with_capacity(lines.len());
    if threads <= 1 {
        for line in &lines {
            outputs.push(translate_line(
                &ckpt.params,
                &ckpt.src_vocab,
                &ckpt.tgt_vocab,
                line,
                args,
            ));
        }
    } else {
        // contiguous chunks per worker keep the output order trivial
        let chunk = lines.len().div_ceil(threads);
        let mut results: Vec<Vec<Result<String>>> = Vec::new();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for piece in lines.chunks(chunk) {
                let ckpt = &ckpt;
                handles.push(scope.spawn(move || {
                    piece
                        .iter()
                        .map(|line| {
                            translate_line(
                                &ckpt.params,
                                &ckpt.src_vocab,
                                &ckpt.tgt_vocab,
                                line,
                                args,
                            )
                        })
                        .collect::<Vec<_>>()
                }));
            }
            for h in handles {
                results.push(h.join().expect("translation worker panicked"));
            }
        });
        outputs = results.into_iter().flatten().collect();
    }

    let mut text = String::new();
    for line in outputs {
        text.push_str(&line?);
        text.push('\n');
    }
    if lines.is_empty() {
        text.clear();
    }
    write_file(&args.output, &text)?;
    println!("{} ({} lines)", args.output.display(), lines.len());
    Ok(())
}

// ---- evaluate ----

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hypotheses: PathBuf,
    #[arg(long)]
    references: PathBuf,
    /// Word embeddings; with --vocab, enables near-miss accuracy
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Target vocabulary the embeddings align to
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Neighborhood size for near-miss accuracy
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Add-one smoothing on n ≥ 2 BLEU precisions
    #[arg(long)]
    smooth: bool,
    /// Emit the single-line tab-separated record instead of the block
    #[arg(long)]
    tsv: bool,
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let store = match (&args.embeddings, &args.vocab) {
        (Some(emb), Some(vocab)) => {
            let raw = load_text_embeddings(emb)?;
            let vocab = Vocabulary::load(vocab)?;
            Some(align_to_vocab(&raw, &vocab, 0))
        }
        (None, None) => None,
        _ => {
            return Err(Error::Usage(
                "--embeddings and --vocab must be given together".into(),
            ))
        }
    };
    let hyps = read_token_lines(&args.hypotheses)?;
    let refs = read_token_lines(&args.references)?;
    let report = EvalReport::compute(&hyps, &refs, store.as_ref(), args.k, args.smooth)?;
    if args.tsv {
        println!("{}", report.tsv_line());
    } else {
        print!("{}", report.text_block());
    }
    Ok(())
}
