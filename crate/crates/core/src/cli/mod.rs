//! The `mmd` command line: `gen-data`, `train`, `eval` and `compare`.

mod config;

pub use config::{DataConfig, ModelOverrides, Paths, RunConfig, SEED_ENV};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::datagen::{gen_corpus, read_jsonl, split, write_jsonl, ArithOp, Example, GenSpec, Regime};
use crate::error::{Error, Result};
use crate::eval::{evaluate, scatter_export, EvalMode, EvalOptions, MetricsReport};
use crate::model::Model;
use crate::textnum::{NumberScheme, Tokenizer};
use crate::train::{load_checkpoint, save_checkpoint, write_log_csv, Pair, Trainer};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "mmd", version, about = "Train and evaluate number-aware encoder-decoder models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test JSONL splits.
    GenData(GenDataArgs),
    /// Train one scheme on a generated dataset.
    Train(TrainArgs),
    /// Evaluate one checkpoint.
    Eval(EvalArgs),
    /// Evaluate several checkpoints on one test set.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long = "n")]
    pub n_examples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lo: Option<f64>,
    #[arg(long)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub max_decimals: Option<u32>,
    /// Comma-separated operators, e.g. "+,-".
    #[arg(long, value_delimiter = ',')]
    pub ops: Option<Vec<String>>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Overwrite existing files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory with train.jsonl and val.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints, log and frozen config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_enc_layers: Option<usize>,
    #[arg(long)]
    pub n_dec_layers: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub num_encoder_depth: Option<usize>,
    #[arg(long)]
    pub num_head_depth: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_route: Option<f64>,
    #[arg(long)]
    pub lambda_num: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL file to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Expected scheme; a checkpoint trained otherwise is rejected.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long, default_value = "free-running")]
    pub mode: EvalModeArg,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    /// Include (truth, prediction) pairs in the JSON report.
    #[arg(long)]
    pub pairs: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Checkpoints to compare; repeat the flag.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "free-running")]
    pub mode: EvalModeArg,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum EvalModeArg {
    TeacherForced,
    FreeRunning,
}

impl From<EvalModeArg> for EvalMode {
    fn from(m: EvalModeArg) -> Self {
        match m {
            EvalModeArg::TeacherForced => EvalMode::TeacherForced,
            EvalModeArg::FreeRunning => EvalMode::FreeRunning,
        }
    }
}

impl clap::ValueEnum for Regime {
    fn value_variants<'a>() -> &'a [Self] {
        &[Regime::NumbersOnly, Regime::TextAndNumbers]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Regime::NumbersOnly => "numbers-only",
            Regime::TextAndNumbers => "text-and-numbers",
        }))
    }
}

fn parse_ops(ops: &[String]) -> Result<Vec<ArithOp>> {
    ops.iter()
        .map(|o| match o.trim() {
            "+" => Ok(ArithOp::Add),
            "-" => Ok(ArithOp::Sub),
            "*" => Ok(ArithOp::Mul),
            "/" => Ok(ArithOp::Div),
            other => Err(Error::Usage(format!("unknown operator {other:?}; use + - * /"))),
        })
        .collect()
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(cfg)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Usage(format!("missing {what}")))
}

#[derive(Serialize)]
struct DataManifest<'a> {
    version: &'a str,
    seed: u64,
    spec: &'a GenSpec,
    train_frac: f64,
    val_frac: f64,
    files: Vec<(String, usize, String)>,
}

pub fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = base_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let d = &mut cfg.data;
    if let Some(r) = args.regime {
        d.regime = r;
    }
    d.n_examples = args.n_examples.or(d.n_examples);
    d.lo = args.lo.or(d.lo);
    d.hi = args.hi.or(d.hi);
    d.max_decimals = args.max_decimals.or(d.max_decimals);
    if let Some(ops) = &args.ops {
        d.ops = Some(parse_ops(ops)?);
    }
    d.train_frac = args.train_frac.unwrap_or(d.train_frac);
    d.val_frac = args.val_frac.unwrap_or(d.val_frac);
    let out = required(args.out.or(cfg.paths.data_dir.clone()), "--out")?;
    let cfg = cfg.finish()?;
    let spec = cfg.data.gen_spec(cfg.seed);

    let names = ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"];
    if !args.force && names.iter().any(|n| out.join(n).exists()) {
        return Err(Error::Usage(format!(
            "{} already holds a dataset; pass --force to overwrite",
            out.display()
        )));
    }
    create_dir(&out)?;
    let (tr, va, te) = split(gen_corpus(&spec)?, cfg.data.train_frac, cfg.data.val_frac);
    let mut files = Vec::new();
    for (name, set) in names.iter().zip([&tr, &va, &te]) {
        let path = out.join(name);
        write_jsonl(set, &path)?;
        files.push((name.to_string(), set.len(), sha256_file(&path)?));
    }
    let manifest = DataManifest {
        version: VERSION,
        seed: cfg.seed,
        spec: &spec,
        train_frac: cfg.data.train_frac,
        val_frac: cfg.data.val_frac,
        files,
    };
    write_file(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    eprintln!("wrote {}/{}/{} examples to {}", tr.len(), va.len(), te.len(), out.display());
    Ok(())
}

fn encode_all(tok: &Tokenizer, examples: &[Example]) -> Result<Vec<Pair>> {
    examples.iter().map(|e| tok.encode_example(e)).collect()
}

#[derive(Serialize)]
struct RunManifest {
    version: &'static str,
    seed: u64,
    scheme: NumberScheme,
    params: usize,
    data_manifest_sha256: Option<String>,
    last_sha256: String,
    best_sha256: Option<String>,
    best_epoch: Option<usize>,
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = base_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = &args.scheme {
        cfg.scheme = Some(s.parse()?);
    }
    cfg.model.merge(&ModelOverrides {
        d_model: args.d_model,
        n_heads: args.n_heads,
        n_enc_layers: args.n_enc_layers,
        n_dec_layers: args.n_dec_layers,
        ffn_mult: args.ffn_mult,
        num_encoder_depth: args.num_encoder_depth,
        num_head_depth: args.num_head_depth,
        max_seq_len: args.max_seq_len,
    });
    let t = &mut cfg.train;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.lr = args.lr.unwrap_or(t.lr);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.lambda_route = args.lambda_route.unwrap_or(t.lambda_route);
    t.lambda_num = args.lambda_num.unwrap_or(t.lambda_num);
    t.grad_clip = args.grad_clip.unwrap_or(t.grad_clip);
    t.eval_every = args.eval_every.unwrap_or(t.eval_every);
    if args.data.is_some() {
        cfg.paths.data_dir = args.data.clone();
    }
    if args.out.is_some() {
        cfg.paths.checkpoint_dir = args.out.clone();
    }
    let cfg = cfg.finish()?;
    let scheme = cfg.scheme.ok_or_else(|| {
        let names: Vec<&str> = NumberScheme::ALL.iter().map(|s| s.name()).collect();
        Error::Usage(format!("missing --scheme (one of {})", names.join(", ")))
    })?;
    let data = required(cfg.paths.data_dir.clone(), "--data")?;
    let out = required(cfg.paths.checkpoint_dir.clone(), "--out")?;
    let last = out.join("last.ckpt");
    let best = out.join("best.ckpt");
    if last.exists() && !args.resume && !args.force {
        return Err(Error::Usage(format!(
            "{} already holds a run; pass --resume or --force",
            out.display()
        )));
    }

    let train = read_jsonl(&data.join("train.jsonl"))?;
    let val = read_jsonl(&data.join("val.jsonl"))?;
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }

    let (mut trainer, tok) = if args.resume && last.exists() {
        let ckpt = load_checkpoint(&last)?;
        let state = ckpt
            .tokenizer
            .clone()
            .ok_or_else(|| Error::CorruptCheckpoint("checkpoint has no tokenizer".into()))?;
        if state.scheme != scheme {
            return Err(Error::Incompatible(format!(
                "run was trained with {}, not {scheme}",
                state.scheme
            )));
        }
        let tok = Tokenizer::from_state(state)?;
        let mut trainer = Trainer::from_checkpoint(ckpt)?;
        trainer.set_config(cfg.train.clone())?;
        (trainer, tok)
    } else {
        let tok = Tokenizer::fit_examples(&train, scheme, &cfg.tokenizer)?;
        let model_cfg = cfg.model.resolve(scheme, tok.vocab().len())?;
        let model = Model::new(model_cfg, cfg.seed)?;
        (Trainer::new(model, cfg.train.clone())?.with_tokenizer(tok.state()), tok)
    };
    create_dir(&out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;

    let train_pairs = encode_all(&tok, &train)?;
    let val_pairs = encode_all(&tok, &val)?;
    trainer.fit(&train_pairs, &val_pairs, |tr, report| {
        let ckpt = tr.checkpoint();
        save_checkpoint(&ckpt, &last)?;
        if report.improved {
            save_checkpoint(&ckpt, &best)?;
        }
        let val = report.val.map(|v| format!(" val {:.6e}", v.total)).unwrap_or_default();
        eprintln!("epoch {:>3}: train {:.6e}{val}", report.epoch, report.train.total);
        Ok(())
    })?;
    if !last.exists() {
        save_checkpoint(&trainer.checkpoint(), &last)?;
    }
    write_log_csv(trainer.log(), &out.join("log.csv"))?;
    let data_manifest = data.join("manifest.json");
    let manifest = RunManifest {
        version: VERSION,
        seed: cfg.seed,
        scheme,
        params: trainer.model().params().numel(),
        data_manifest_sha256: data_manifest.exists().then(|| sha256_file(&data_manifest)).transpose()?,
        last_sha256: sha256_file(&last)?,
        best_sha256: best.exists().then(|| sha256_file(&best)).transpose()?,
        best_epoch: trainer.best_val().map(|b| b.0),
    };
    write_file(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_for_eval(path: &Path) -> Result<(Model, Tokenizer)> {
    let ckpt = load_checkpoint(path)?;
    let state = ckpt
        .tokenizer
        .ok_or_else(|| Error::CorruptCheckpoint(format!("{} has no tokenizer", path.display())))?;
    Ok((ckpt.model, Tokenizer::from_state(state)?))
}

fn read_eval_set(path: &Path) -> Result<Vec<Example>> {
    let set = read_jsonl(path)?;
    if set.is_empty() {
        return Err(Error::Usage(format!("{} has no examples", path.display())));
    }
    Ok(set)
}

pub fn cmd_eval(args: EvalArgs) -> Result<MetricsReport> {
    let (model, tok) = load_for_eval(&args.checkpoint)?;
    if let Some(s) = &args.scheme {
        let want: NumberScheme = s.parse()?;
        if want != model.config().scheme {
            return Err(Error::Incompatible(format!(
                "checkpoint uses {}, expected {want}",
                model.config().scheme
            )));
        }
    }
    let set = read_eval_set(&args.data)?;
    let opts = EvalOptions {
        mode: args.mode.into(),
        max_len: args.max_len,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &tok, &set, opts)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("report.json"), &report.to_json(args.pairs)?)?;
    scatter_export(&report, &args.out.join("scatter.csv"))?;
    Ok(report)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "-".into())
}

/// Rows of `(label, report)` as a table with columns F1, MAE, RMSE, MRE, R².
pub fn comparison_table(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("| scheme | F1 | MAE | RMSE | MRE | R2 |\n|---|---|---|---|---|---|\n");
    for (label, r) in rows {
        out.push_str(&format!(
            "| {label} | {} | {} | {} | {} | {} |\n",
            r.f1.map(|f| format!("{f:.3}")).unwrap_or_else(|| "-".into()),
            fmt_metric(r.mae),
            fmt_metric(r.rmse),
            fmt_metric(r.mre),
            r.r2.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
        ));
    }
    out
}

pub fn cmd_compare(args: CompareArgs) -> Result<String> {
    let set = read_eval_set(&args.data)?;
    let opts = EvalOptions {
        mode: args.mode.into(),
        max_len: args.max_len,
        ..EvalOptions::default()
    };
    let mut rows = Vec::new();
    for path in &args.checkpoints {
        let (model, tok) = load_for_eval(path)?;
        let report = evaluate(&model, &tok, &set, opts)?;
        rows.push((model.config().scheme.to_string(), report));
    }
    let table = comparison_table(&rows);
    create_dir(&args.out)?;
    write_file(&args.out.join("compare.md"), &table)?;
    let mut csv = String::from("scheme,f1,mae,rmse,mre,r2\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (label, r) in &rows {
        csv.push_str(&format!(
            "{label},{},{},{},{},{}\n",
            cell(r.f1),
            cell(r.mae),
            cell(r.rmse),
            cell(r.mre),
            cell(r.r2)
        ));
    }
    write_file(&args.out.join("compare.csv"), &csv)?;
    Ok(table)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a).map(|r| match r.to_json(false) {
            Ok(json) => println!("{json}"),
            Err(e) => eprintln!("{e}"),
        }),
        Command::Compare(a) => cmd_compare(a).map(|t| print!("{t}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
