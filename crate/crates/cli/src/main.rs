use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldf_core::autodiff::Rng;
use ldf_core::embeddings::EmbeddingTable;
use ldf_core::episodes::{make_synthetic_splits, Corpus, SyntheticSpec};
use ldf_core::model::Checkpoint;
use ldf_core::trainer::{
    self, build_report, load_runs, Ablation, RunRecord, TrainConfig, TrainData, DEFAULT_SEEDS,
};
use ldf_core::{Error, ErrorCategory, Result};

#[derive(Debug, Parser)]
#[command(name = "ldf", version, about = "Label-driven denoising for few-shot aspect category detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and evaluate it on the test corpus if configured.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus over one or more episode seeds.
    Eval(EvalArgs),
    /// Write a synthetic train/dev/test corpus, word vectors and a config.
    GenSynth(GenArgs),
    /// Summarize run records as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Where checkpoints and the run record go; overrides `checkpoint_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Word vectors; defaults to the file the checkpoint was trained with.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    /// Episodes per seed; defaults to the training configuration's value.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class counts of the train, dev and test splits.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 8, 8])]
    classes: Vec<usize>,
    #[arg(long, default_value_t = 40)]
    instances_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    keyword_strength: f64,
    #[arg(long, default_value_t = 0)]
    noise_vocab: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_fraction: f64,
    #[arg(long, default_value_t = 0)]
    similarity_groups: usize,
    #[arg(long, default_value_t = 50)]
    dim: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    /// Print JSON instead of the text table.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numeric => 3,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::Report(a) => report(a),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(a) = args.ablation {
        config = config.with_ablation(a);
    }
    let setting = config
        .ablation()
        .map_or_else(|| "custom".to_string(), |a| a.to_string());
    let out = args
        .out
        .or(config.checkpoint_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(format!("{setting}-seed{}", config.seed));
    config.checkpoint_dir = Some(out.clone());
    config.validate()?;

    let data = TrainData::load(&config)?;
    let outcome = trainer::train(&config, &data)?;
    let test = match &data.test {
        Some(test) => {
            let r = trainer::evaluate(&outcome.best, test, &data.table, &config, &[config.seed])?;
            Some(r.per_seed[0].metrics)
        }
        None => None,
    };
    let record = RunRecord {
        setting,
        seed: config.seed,
        best_dev_auc: outcome.best_dev_auc,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.log.len(),
        test,
    };
    let path = record.write(&out)?;
    println!(
        "best dev AUC {:.4} at epoch {}; checkpoints and run record in {}",
        record.best_dev_auc,
        record.best_epoch,
        path.parent().unwrap_or(Path::new(".")).display()
    );
    if let Some(t) = test {
        println!("test Macro-F1 {:.4}  AUC {:.4}", t.macro_f1, t.auc);
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut config: TrainConfig = match &ck.train {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?,
        None => TrainConfig::default(),
    };
    if let Some(n) = args.episodes {
        config.eval_episodes = n;
    }
    let vectors = args
        .embeddings
        .or(config.embeddings.clone())
        .ok_or_else(|| Error::Config("no --embeddings given and none recorded in the checkpoint".into()))?;
    let table = EmbeddingTable::load_vectors(&vectors)?;
    let corpus = Corpus::load(&args.corpus)?;
    let model = ck.into_model()?;
    let report = trainer::evaluate(&model, &corpus, &table, &config, &args.seeds)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn gen_synth(args: GenArgs) -> Result<()> {
    if args.classes.len() != 3 {
        return Err(Error::Config("--classes takes three counts: train,dev,test".into()));
    }
    let spec = SyntheticSpec {
        instances_per_class: args.instances_per_class,
        keyword_strength: args.keyword_strength,
        noise_vocab_size: args.noise_vocab,
        noise_fraction: args.noise_fraction,
        similarity_groups: args.similarity_groups,
        dim: args.dim,
        ..SyntheticSpec::default()
    };
    let (splits, table) = make_synthetic_splits(&spec, &args.classes, &mut Rng::new(args.seed))?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for (corpus, name) in splits.iter().zip(["train", "dev", "test"]) {
        corpus.write_jsonl(args.out.join(format!("{name}.jsonl")))?;
    }
    table.write_text(args.out.join("vectors.txt"))?;
    let config = TrainConfig {
        train_corpus: Some("train.jsonl".into()),
        dev_corpus: Some("dev.jsonl".into()),
        test_corpus: Some("test.jsonl".into()),
        embeddings: Some("vectors.txt".into()),
        checkpoint_dir: Some("runs".into()),
        ..TrainConfig::default()
    };
    let path = args.out.join("config.toml");
    fs::write(&path, config.to_toml()).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let report = build_report(&load_runs(&args.runs)?)?;
    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}
