use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vulnmatch::codebook::VulnerabilityCollection;
use vulnmatch::config::{Profile, RunConfig};
use vulnmatch::corpus::{load_records, synthesize_corpus, write_records, SourceFunction};
use vulnmatch::matcher::{evaluate, match_all, write_results};
use vulnmatch::model::EncodedFunction;
use vulnmatch::pipeline::{self, Prepared, Variant};
use vulnmatch::tokenizer::Vocab;
use vulnmatch::trainer::{Checkpoint, EpochMetrics, Phase};
use vulnmatch::{Error, ErrorKind};

const CONFIG_ECHO: &str = "config.resolved.toml";
const CORPUS_FILE: &str = "corpus.jsonl";
const VOCAB_FILE: &str = "vocab.txt";
const WARMUP_CKPT: &str = "warmup.ckpt";
const WARMUP_METRICS: &str = "warmup_metrics.jsonl";
const MAIN_CKPT: &str = "main.ckpt";
const MAIN_METRICS: &str = "main_metrics.jsonl";
const RESULTS_FILE: &str = "results.jsonl";
const METRICS_FILE: &str = "metrics.json";
const INSPECTION_FILE: &str = "codebook_inspection.json";
const ABLATION_TABLE: &str = "ablation.md";
const ABLATION_JSON: &str = "ablation.json";

#[derive(Parser)]
#[command(name = "vulnmatch", version, about = "Statement-level vulnerability detection with a learned vulnerability codebook")]
struct Cli {
    /// TOML file overlaid on the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Data {
    /// Record file (one JSON function per line).
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary file; trained on the fly from the training split when
    /// omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled corpus.
    GenCorpus {
        #[arg(long)]
        num: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Train the BPE vocabulary on the training split.
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Warm-up phase: ground-truth scope conditioning.
    Warmup {
        #[command(flatten)]
        data: Data,
    },
    /// Main phase: codebook training from a warm-up checkpoint.
    Train {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        warm: PathBuf,
        #[arg(long)]
        centroids: Option<usize>,
    },
    /// Matching inference; writes one result record per function.
    Match {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Matching inference plus function- and statement-level metrics.
    Eval {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// List the nearest training scopes of every centroid.
    InspectCodebook {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Train and score ablation variants, then write a comparison table.
    Ablate {
        #[command(flatten)]
        data: Data,
        /// Variants: full, no_codebook, pooling_mean, pooling_max, pooling_rnn.
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
        /// Centroid counts to sweep, e.g. 50,150.
        #[arg(long, value_delimiter = ',')]
        sweep_k: Vec<usize>,
    },
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.profile, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_history(path: &Path, history: &[EpochMetrics]) -> anyhow::Result<()> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h)?);
        text.push('\n');
    }
    write(path, &text)
}

fn load_corpus(path: &Path) -> anyhow::Result<Vec<SourceFunction>> {
    let loaded = load_records(path)?;
    if !loaded.errors.is_empty() {
        log::warn!("{} records rejected", loaded.errors.len());
    }
    Ok(loaded.functions)
}

fn prepared(data: &Data, cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let corpus = load_corpus(&data.corpus)?;
    let vocab = match &data.vocab {
        Some(p) => Vocab::load(p)?,
        None => pipeline::train_vocab(&corpus, cfg)?,
    };
    Ok(pipeline::prepare(&corpus, vocab, cfg)?)
}

fn pick(prep: &Prepared, split: SplitName) -> Vec<EncodedFunction> {
    match split {
        SplitName::Train => prep.train.clone(),
        SplitName::Validation => prep.validation.clone(),
        SplitName::Test => prep.test.clone(),
        SplitName::All => [&prep.train[..], &prep.validation, &prep.test].concat(),
    }
}

fn load_main(path: &Path, prep: &Prepared) -> anyhow::Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_config(&prep.model)?;
    if ckpt.phase != Phase::Main {
        return Err(Error::Usage(format!("{} is not a main-phase checkpoint", path.display())).into());
    }
    Ok(ckpt)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenCorpus { num, ratio } => {
            if let Some(n) = num {
                cfg.generator.num_functions = *n;
            }
            if let Some(r) = ratio {
                cfg.generator.vulnerable_ratio = *r;
            }
        }
        Command::TrainTokenizer { vocab_size: Some(v), .. } => cfg.vocab_size = *v,
        Command::Train { centroids: Some(k), .. } => cfg.train.centroids = *k,
        _ => {}
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    write(&cli.out.join(CONFIG_ECHO), &cfg.to_toml())?;
    let out = |name: &str| cli.out.join(name);

    match &cli.command {
        Command::GenCorpus { .. } => {
            let corpus = synthesize_corpus(&cfg.generator)?;
            write_records(&out(CORPUS_FILE), &corpus)?;
            println!("wrote {} functions to {}", corpus.len(), out(CORPUS_FILE).display());
        }
        Command::TrainTokenizer { corpus, .. } => {
            let corpus = load_corpus(corpus)?;
            let vocab = pipeline::train_vocab(&corpus, &cfg)?;
            vocab.save(&out(VOCAB_FILE))?;
            println!("vocabulary of {} tokens written to {}", vocab.size(), out(VOCAB_FILE).display());
        }
        Command::Warmup { data } => {
            let prep = prepared(data, &cfg)?;
            let (ckpt, history) = pipeline::warmup(&prep, &cfg, prep.model.pooling)?;
            ckpt.save(&out(WARMUP_CKPT))?;
            write_history(&out(WARMUP_METRICS), &history)?;
            println!(
                "warm-up best validation statement F1 {:.4} (epoch {})",
                ckpt.best_val_statement_f1, ckpt.epoch
            );
        }
        Command::Train { data, warm, .. } => {
            let prep = prepared(data, &cfg)?;
            let warm = Checkpoint::load(warm)?;
            warm.check_config(&prep.model)?;
            let (ckpt, history) = pipeline::main_phase(&prep, &cfg, &warm)?;
            ckpt.save(&out(MAIN_CKPT))?;
            write_history(&out(MAIN_METRICS), &history)?;
            println!(
                "main phase best validation statement F1 {:.4} (epoch {})",
                ckpt.best_val_statement_f1, ckpt.epoch
            );
        }
        Command::Match { data, checkpoint, split } => {
            let prep = prepared(data, &cfg)?;
            let ckpt = load_main(checkpoint, &prep)?;
            let model = ckpt.model()?;
            let codebook = ckpt.codebook.as_ref().expect("main checkpoints carry a codebook");
            let results = match_all(&model, codebook, &pick(&prep, *split))?;
            write_results(&out(RESULTS_FILE), &results)?;
            println!("{} results written to {}", results.len(), out(RESULTS_FILE).display());
        }
        Command::Eval { data, checkpoint, split } => {
            let prep = prepared(data, &cfg)?;
            let ckpt = load_main(checkpoint, &prep)?;
            let model = ckpt.model()?;
            let codebook = ckpt.codebook.as_ref().expect("main checkpoints carry a codebook");
            let golds = pick(&prep, *split);
            let results = match_all(&model, codebook, &golds)?;
            let report = evaluate(&results, &golds)?;
            write_json(&out(METRICS_FILE), &report)?;
            println!(
                "function F1 {:.4}  statement F1 {:.4}",
                report.function.f1, report.statement.f1
            );
        }
        Command::InspectCodebook { data, checkpoint, top } => {
            let prep = prepared(data, &cfg)?;
            let ckpt = load_main(checkpoint, &prep)?;
            let model = ckpt.model()?;
            let codebook = ckpt.codebook.as_ref().expect("main checkpoints carry a codebook");
            let vulnerable: Vec<&EncodedFunction> = prep.train.iter().filter(|e| e.label_y).collect();
            let rows = vulnerable
                .iter()
                .map(|e| model.scope_vector(&e.scope))
                .collect::<vulnmatch::Result<Vec<_>>>()?;
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            let vectors = if views.is_empty() {
                ndarray::Array2::zeros((0, model.config.h))
            } else {
                ndarray::concatenate(ndarray::Axis(0), &views)?
            };
            let collection = VulnerabilityCollection {
                ids: vulnerable.iter().map(|e| e.id.clone()).collect(),
                vectors,
            };
            #[derive(Serialize)]
            struct Entry {
                centroid: usize,
                nearest: Vec<(String, f64)>,
            }
            let listing: Vec<Entry> = collection
                .nearest_per_centroid(codebook, *top)
                .into_iter()
                .enumerate()
                .map(|(centroid, nearest)| Entry { centroid, nearest })
                .collect();
            write_json(&out(INSPECTION_FILE), &listing)?;
            println!("{} centroids listed in {}", listing.len(), out(INSPECTION_FILE).display());
        }
        Command::Ablate { data, variant, sweep_k } => {
            let prep = prepared(data, &cfg)?;
            let mut variants = Vec::new();
            for v in variant {
                variants.push(Variant::parse(v).ok_or_else(|| Error::Config(format!("unknown variant {v}")))?);
            }
            variants.extend(sweep_k.iter().map(|&k| Variant::Centroids(k)));
            if variants.is_empty() {
                variants.push(Variant::Full);
            }
            let results = pipeline::run_variants(&prep, &cfg, &variants)?;
            let table = pipeline::comparison_table(&results);
            write(&out(ABLATION_TABLE), &table)?;
            write_json(&out(ABLATION_JSON), &results)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.downcast_ref::<Error>().map(Error::kind) {
                Some(ErrorKind::Config) => ("config", 2),
                Some(ErrorKind::Data) => ("data", 3),
                Some(ErrorKind::Runtime) | None => ("runtime", 1),
            };
            let message = format!("{e:#}");
            eprintln!("error kind={kind} exit={code} message={}", serde_json::Value::String(message));
            ExitCode::from(code)
        }
    }
}
