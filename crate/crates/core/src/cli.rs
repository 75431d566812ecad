//! Command-line front end. Every command resolves a run configuration from
//! built-in defaults, an optional `--config` file and explicit flags (in that
//! order of precedence) and writes the result to `run_config.txt` next to its
//! outputs, so `--config <out>/run_config.txt` repeats the run.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{build_vocab, content_len, generate_synthetic_splits, read_text_corpus, write_corpus, MultiRefSample, TextSample};
use crate::diagnostics::{default_u_grid, direction_cosines, fusion_scatter, interpolation_perplexity, interpolation_table};
use crate::error::{Error, Result};
use crate::inference::{context_rng, generate_pool, select_top, tune_lambda, RankerConfig, DEFAULT_MAX_DECODE_LEN};
use crate::kv::{fmt_f64, KvBlock};
use crate::metrics::evaluate_corpus;
use crate::model::{ModelConfig, SpaceFusionModel};
use crate::trainer::{load_checkpoint, save_checkpoint, train_with_progress, CheckpointMeta, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const PRECISION_ENV: &str = "SPACEFUSION_PRECISION";

#[derive(Parser, Debug)]
#[command(name = "spacefusion", version, about = "Train and probe a fused-latent response generation model")]
pub struct Cli {
    /// key=value file overriding built-in defaults (flags override it in turn)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write topic-disjoint synthetic train/valid/test corpora
    Synth(SynthArgs),
    /// Train a model and write a checkpoint directory
    Train(TrainArgs),
    /// Sample, rank and print responses for each context
    Generate(GenerateArgs),
    /// Multi-reference precision/recall/F1 on a test corpus
    Eval(EvalArgs),
    /// Latent geometry CSVs
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub contexts: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Overwrite existing corpus files
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Directory holding train.txt and valid.txt
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// `full` (128 units) or `desk` (32 units)
    #[arg(long)]
    pub profile: Option<String>,
    /// Reconstruction terms only (no interpolation or fusion loss)
    #[arg(long)]
    pub mtask: bool,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Contexts, one per line (only the first tab-separated field is used)
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Responses printed per context
    #[arg(long)]
    pub responses: Option<usize>,
    /// Append `^score` to each response
    #[arg(long)]
    pub scores: bool,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Validation corpus used to tune the length bonus
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Fixed length bonus; skips tuning
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub pool: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub table_context: Option<String>,
    #[arg(long)]
    pub table_target: Option<String>,
    #[arg(long)]
    pub max_contexts: Option<usize>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
}

fn set_opt<T: ToString>(kv: &mut KvBlock, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        kv.set(key, v.to_string());
    }
}

fn set_path(kv: &mut KvBlock, key: &str, v: &Option<PathBuf>) {
    if let Some(p) = v {
        kv.set(key, p.display());
    }
}

/// Name, built-in defaults and flag overrides of a parsed command line.
fn command_layers(cli: &Cli) -> (&'static str, KvBlock, KvBlock) {
    let mut d = KvBlock::new();
    let mut f = KvBlock::new();
    d.set("seed", 0);
    set_opt(&mut f, "seed", &cli.seed);
    set_path(&mut f, "out", &cli.out);
    let name = match &cli.command {
        Command::Synth(a) => {
            d.set("out", "data");
            d.set("contexts", 200);
            d.set("clusters", 3);
            d.set("force", false);
            set_opt(&mut f, "contexts", &a.contexts);
            set_opt(&mut f, "clusters", &a.clusters);
            if a.force {
                f.set("force", true);
            }
            "synth"
        }
        Command::Train(a) => {
            d.set("out", "checkpoint");
            d.set("data", "data");
            d.set("profile", "full");
            d.set("max_vocab", 10_000);
            TrainConfig::default().write_kv(&mut d);
            // resolved against max_epochs when not given
            d.remove("patience");
            set_path(&mut f, "data", &a.data);
            set_path(&mut f, "train_file", &a.train);
            set_path(&mut f, "valid_file", &a.valid);
            set_opt(&mut f, "profile", &a.profile);
            if a.mtask {
                f.set("regularization_enabled", false);
            }
            set_opt(&mut f, "hidden_size", &a.hidden);
            set_opt(&mut f, "max_epochs", &a.epochs);
            set_opt(&mut f, "batch_size", &a.batch_size);
            set_opt(&mut f, "learning_rate", &a.lr.map(fmt_f64));
            set_opt(&mut f, "patience", &a.patience);
            set_opt(&mut f, "max_vocab", &a.max_vocab);
            "train"
        }
        Command::Generate(a) => {
            d.set("out", "out");
            d.set("checkpoint", "checkpoint");
            d.set("pool_size", 100);
            d.set("lambda", "0.0");
            d.set("responses", 3);
            d.set("scores", false);
            d.set("max_decode_len", DEFAULT_MAX_DECODE_LEN);
            set_path(&mut f, "checkpoint", &a.checkpoint);
            set_path(&mut f, "input", &a.input);
            set_opt(&mut f, "radius", &a.radius.map(fmt_f64));
            set_opt(&mut f, "pool_size", &a.pool);
            set_opt(&mut f, "lambda", &a.lambda.map(fmt_f64));
            set_opt(&mut f, "responses", &a.responses);
            if a.scores {
                f.set("scores", true);
            }
            "generate"
        }
        Command::Eval(a) => {
            d.set("out", "out");
            d.set("checkpoint", "checkpoint");
            d.set("pool_size", 100);
            d.set("length_tolerance", "0.5");
            d.set("max_decode_len", DEFAULT_MAX_DECODE_LEN);
            set_path(&mut f, "checkpoint", &a.checkpoint);
            set_path(&mut f, "test_file", &a.test);
            set_path(&mut f, "valid_file", &a.valid);
            set_opt(&mut f, "lambda", &a.lambda.map(fmt_f64));
            set_opt(&mut f, "radius", &a.radius.map(fmt_f64));
            set_opt(&mut f, "pool_size", &a.pool);
            "eval"
        }
        Command::Diagnose(a) => {
            d.set("out", "out");
            d.set("checkpoint", "checkpoint");
            d.set("max_contexts", crate::diagnostics::DEFAULT_MAX_CONTEXTS);
            d.set("max_pairs", crate::diagnostics::DEFAULT_MAX_PAIRS);
            set_path(&mut f, "checkpoint", &a.checkpoint);
            set_path(&mut f, "data_file", &a.data);
            set_opt(&mut f, "table_context", &a.table_context);
            set_opt(&mut f, "table_target", &a.table_target);
            set_opt(&mut f, "max_contexts", &a.max_contexts);
            set_opt(&mut f, "max_pairs", &a.max_pairs);
            "diagnose"
        }
    };
    (name, d, f)
}

/// Defaults, then the config file, then flags.
pub fn resolve(cli: &Cli) -> Result<KvBlock> {
    let (name, mut kv, flags) = command_layers(cli);
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = KvBlock::parse(&text)?;
        if let Some(cmd) = file.get("command") {
            if cmd != name {
                return Err(Error::Config(format!("config file was written by `{cmd}`, not `{name}`")));
            }
        }
        kv.merge(&file);
    }
    kv.merge(&flags);
    kv.set("command", name);
    kv.set("precision", precision_mode()?);
    Ok(kv)
}

/// Arithmetic is always f64; the variable is accepted for compatibility.
fn precision_mode() -> Result<&'static str> {
    match std::env::var(PRECISION_ENV) {
        Err(_) => Ok("double"),
        Ok(v) if v.eq_ignore_ascii_case("double") => Ok("double"),
        Ok(v) => Err(Error::Config(format!("{PRECISION_ENV}={v:?} is not supported; only `double` is available"))),
    }
}

fn path_of(kv: &KvBlock, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(kv.require(key)?))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_out(kv: &KvBlock) -> Result<PathBuf> {
    let out = path_of(kv, "out")?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn write_run_config(out: &Path, kv: &KvBlock) -> Result<()> {
    write_file(&out.join(RUN_CONFIG_FILE), &kv.to_text())
}

/// Parses arguments and runs a command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let kv = resolve(cli)?;
    match kv.require("command")? {
        "synth" => cmd_synth(&kv),
        "train" => cmd_train(&kv),
        "generate" => cmd_generate(&kv),
        "eval" => cmd_eval(&kv),
        "diagnose" => cmd_diagnose(&kv),
        other => Err(Error::Config(format!("unknown command {other}"))),
    }
}

pub const SPLIT_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];

pub fn cmd_synth(kv: &KvBlock) -> Result<()> {
    let contexts: usize = kv.parse_value("contexts")?;
    let clusters: usize = kv.parse_value("clusters")?;
    let seed: u64 = kv.parse_value("seed")?;
    let force: bool = kv.parse_value("force")?;
    if clusters < 2 {
        return Err(Error::Config("--clusters must be at least 2 (diagnostics compare responses)".into()));
    }
    let out = create_out(kv)?;
    if !force {
        if let Some(existing) = SPLIT_FILES.iter().map(|f| out.join(f)).find(|p| p.exists()) {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", existing.display())));
        }
    }
    let splits = generate_synthetic_splits(contexts, clusters, seed)?;
    for (name, part) in SPLIT_FILES.iter().zip([&splits.train, &splits.valid, &splits.test]) {
        write_corpus(out.join(name), part)?;
    }
    write_run_config(&out, kv)
}

fn corpus_path(kv: &KvBlock, key: &str, file: &str) -> Result<PathBuf> {
    match kv.get(key) {
        Some(p) => Ok(PathBuf::from(p)),
        None => Ok(path_of(kv, "data")?.join(file)),
    }
}

pub fn cmd_train(kv: &KvBlock) -> Result<()> {
    let train_path = corpus_path(kv, "train_file", "train.txt")?;
    let valid_path = corpus_path(kv, "valid_file", "valid.txt")?;
    let train_text = read_text_corpus(&train_path)?;
    let valid_text = read_text_corpus(&valid_path)?;
    let vocab = build_vocab(&train_text, kv.parse_value("max_vocab")?)?;
    let seed: u64 = kv.parse_value("seed")?;

    let base = match kv.require("profile")? {
        "full" => ModelConfig::full(vocab.len()),
        "desk" => ModelConfig::desk(vocab.len()),
        other => return Err(Error::Config(format!("unknown profile {other:?}; use full or desk"))),
    };
    let mut model_kv = kv.clone();
    model_kv.set("vocab_size", vocab.len());
    model_kv.set("model_seed", seed);
    let model_config = ModelConfig::read_kv(&model_kv, &base)?;

    let mut train_kv = kv.clone();
    train_kv.set("train_seed", seed);
    let defaults = TrainConfig::default();
    let max_epochs: usize = train_kv.parse_or("max_epochs", defaults.max_epochs)?;
    if !train_kv.contains("patience") {
        train_kv.set("patience", defaults.patience.min(max_epochs.max(1)));
    }
    let train_config = TrainConfig::read_kv(&train_kv, &defaults)?;

    let mut resolved = kv.clone();
    model_config.write_kv(&mut resolved);
    train_config.write_kv(&mut resolved);

    let encode = |s: &[TextSample]| s.iter().map(|t| t.encode(&vocab)).collect::<Vec<MultiRefSample>>();
    let mut model = SpaceFusionModel::new(model_config)?;
    let out = create_out(kv)?;
    let report = train_with_progress(&mut model, &encode(&train_text), &encode(&valid_text), &train_config, |e| {
        eprintln!("epoch {} train {:.4} valid {:.4}", e.epoch, e.train.total, e.valid_total);
    })?;
    save_checkpoint(
        &out,
        &model,
        &vocab,
        &CheckpointMeta {
            train_config: Some(train_config),
            epoch: report.best_epoch,
            valid_loss: report.best_valid,
        },
    )?;
    write_file(&out.join("loss_log.csv"), &report.to_csv())?;
    write_run_config(&out, &resolved)
}

fn ranker_from(kv: &KvBlock, model: &SpaceFusionModel) -> Result<RankerConfig> {
    let mut rc = RankerConfig::new(kv.parse_or("radius", model.config().radius)?);
    rc.pool_size = kv.parse_value("pool_size")?;
    rc.max_len = kv.parse_value("max_decode_len")?;
    if kv.contains("lambda") {
        rc.lambda = kv.parse_value("lambda")?;
    }
    rc.validate()?;
    Ok(rc)
}

pub fn cmd_generate(kv: &KvBlock) -> Result<()> {
    let ckpt = load_checkpoint(path_of(kv, "checkpoint")?)?;
    let input = path_of(kv, "input").map_err(|_| Error::Config("generate needs --input".into()))?;
    let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
    let rc = ranker_from(kv, &ckpt.model)?;
    let seed: u64 = kv.parse_value("seed")?;
    let count: usize = kv.parse_value("responses")?;
    let scores: bool = kv.parse_value("scores")?;
    let mut out_text = String::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let context = line.split('\t').next().unwrap_or_default().trim();
        let ids = ckpt.vocab.tokenize(context);
        let pool = generate_pool(&ckpt.model, &ids, &rc, &mut context_rng(seed, i))?;
        let picked = select_top(&pool, count, rc.lambda)?;
        let hyps: Vec<String> = picked
            .hypotheses
            .iter()
            .map(|h| {
                let words = ckpt.vocab.detokenize(&h.tokens);
                if scores {
                    format!("{words}^{:.4}", h.score(rc.lambda))
                } else {
                    words
                }
            })
            .collect();
        out_text.push_str(&format!("{context}\t{}\n", hyps.join("|")));
    }
    let mut resolved = kv.clone();
    resolved.set("radius", fmt_f64(rc.radius));
    let out = create_out(kv)?;
    write_file(&out.join("generations.txt"), &out_text)?;
    write_run_config(&out, &resolved)
}

fn load_refs(path: &Path, ckpt_vocab: &crate::corpus::Vocabulary) -> Result<(Vec<MultiRefSample>, usize)> {
    let samples = read_text_corpus(path)?;
    let mut skipped = 0;
    let encoded = samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if let Some(labels) = &mut s.cluster_labels {
                let keep: Vec<bool> = s.responses.iter().map(|r| !r.trim().is_empty()).collect();
                let mut k = keep.iter();
                labels.retain(|_| *k.next().expect("same length"));
            }
            s.responses.retain(|r| !r.trim().is_empty());
            if s.responses.is_empty() {
                skipped += 1;
            }
            s.encode(ckpt_vocab)
        })
        .collect();
    Ok((encoded, skipped))
}

pub fn cmd_eval(kv: &KvBlock) -> Result<()> {
    let ckpt = load_checkpoint(path_of(kv, "checkpoint")?)?;
    let test_path = path_of(kv, "test_file").map_err(|_| Error::Config("eval needs --test".into()))?;
    let (test, skipped) = load_refs(&test_path, &ckpt.vocab)?;
    if skipped > 0 {
        eprintln!("warning: skipping {skipped} test contexts without references");
    }
    let seed: u64 = kv.parse_value("seed")?;
    let mut rc = ranker_from(kv, &ckpt.model)?;
    let mut resolved = kv.clone();
    if !kv.contains("lambda") {
        let valid_path = path_of(kv, "valid_file")
            .map_err(|_| Error::Config("eval needs --valid to tune the length bonus, or --lambda".into()))?;
        let (valid, _) = load_refs(&valid_path, &ckpt.vocab)?;
        let lengths: Vec<usize> = valid.iter().flat_map(|s| s.responses.iter().map(|r| content_len(r))).collect();
        if lengths.is_empty() {
            return Err(Error::Data("validation corpus has no references".into()));
        }
        let target = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
        let tol: f64 = kv.parse_value("length_tolerance")?;
        let tuned = tune_lambda(&ckpt.model, &valid, &rc, target, tol, seed)?;
        if !tuned.attained {
            eprintln!(
                "warning: mean length {:.2} at lambda {} misses target {target:.2}",
                tuned.mean_length, tuned.lambda
            );
        }
        rc.lambda = tuned.lambda;
        resolved.set("target_length", fmt_f64(target));
        resolved.set("tuned_lambda", fmt_f64(tuned.lambda));
    }
    resolved.set("radius", fmt_f64(rc.radius));
    let report = evaluate_corpus(&ckpt.model, &test, &rc, seed)?;
    let out = create_out(kv)?;
    write_file(&out.join("eval_report.txt"), &report.to_text())?;
    write_run_config(&out, &resolved)
}

pub fn cmd_diagnose(kv: &KvBlock) -> Result<()> {
    let ckpt = load_checkpoint(path_of(kv, "checkpoint")?)?;
    let data_path = path_of(kv, "data_file").map_err(|_| Error::Config("diagnose needs --data".into()))?;
    let (samples, _) = load_refs(&data_path, &ckpt.vocab)?;
    if !samples.iter().any(|s| s.responses.len() >= 2) {
        return Err(Error::Data(format!(
            "{} has no context with at least 2 references; diagnostics need multi-reference samples",
            data_path.display()
        )));
    }
    let model = &ckpt.model;
    let seed: u64 = kv.parse_value("seed")?;
    let grid = default_u_grid();
    let hist = direction_cosines(model, &samples, kv.parse_value("max_contexts")?)?;
    let curve = interpolation_perplexity(model, &samples, &grid)?;
    let scatter = fusion_scatter(model, &samples, kv.parse_value("max_pairs")?, seed)?;

    let (context, target) = match (kv.get("table_context"), kv.get("table_target")) {
        (Some(c), Some(t)) => (ckpt.vocab.tokenize(c), ckpt.vocab.tokenize(t)),
        (None, None) => {
            let s = samples.iter().find(|s| !s.responses.is_empty()).expect("checked above");
            (s.context.clone(), s.responses[0].clone())
        }
        _ => return Err(Error::Config("--table-context and --table-target go together".into())),
    };
    let table = interpolation_table(model, &context, &target, &grid)?;
    let mut table_csv = String::from("u,text\n");
    for (u, tokens) in &table {
        table_csv.push_str(&format!("{u:.2},{}\n", ckpt.vocab.detokenize(tokens)));
    }

    let out = create_out(kv)?;
    write_file(&out.join("cosine_hist.csv"), &hist.to_csv())?;
    write_file(&out.join("perp_curve.csv"), &curve.to_csv())?;
    write_file(&out.join("fusion_scatter.csv"), &scatter.to_csv())?;
    write_file(&out.join("interp_table.csv"), &table_csv)?;
    write_run_config(&out, kv)
}
