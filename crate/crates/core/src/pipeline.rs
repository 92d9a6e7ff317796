//! End-to-end glue: split, vocabulary, encoding, the two training phases,
//! test-split scoring, and the ablation comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{split_corpus, SourceFunction};
use crate::error::Result;
use crate::matcher::{evaluate, predict_with_aux, MetricsReport};
use crate::model::{EncodedFunction, Model, ModelConfig, PoolingMode};
use crate::tokenizer::{train_bpe, Vocab};
use crate::trainer::{evaluate_split, run_main, run_warmup, Checkpoint, EpochMetrics};

pub struct Prepared {
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub train: Vec<EncodedFunction>,
    pub validation: Vec<EncodedFunction>,
    pub test: Vec<EncodedFunction>,
}

/// Trains the vocabulary on the training split's statements.
pub fn train_vocab(corpus: &[SourceFunction], cfg: &RunConfig) -> Result<Vocab> {
    let split = split_corpus(corpus, cfg.split, cfg.seed)?;
    let texts: Vec<&str> = split
        .train
        .iter()
        .flat_map(|f| f.statements.iter().map(String::as_str))
        .collect();
    train_bpe(texts, cfg.vocab_size)
}

/// Splits the corpus and encodes every split with `vocab`; the model config
/// takes the vocabulary's actual size.
pub fn prepare(corpus: &[SourceFunction], vocab: Vocab, cfg: &RunConfig) -> Result<Prepared> {
    let split = split_corpus(corpus, cfg.split, cfg.seed)?;
    let mut model = cfg.model.clone();
    model.vocab_size = vocab.size();
    Ok(Prepared {
        train: EncodedFunction::encode_all(&split.train, &vocab, &model),
        validation: EncodedFunction::encode_all(&split.validation, &vocab, &model),
        test: EncodedFunction::encode_all(&split.test, &vocab, &model),
        model,
        vocab,
    })
}

pub fn warmup(prepared: &Prepared, cfg: &RunConfig, pooling: PoolingMode) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let mut model_cfg = prepared.model.clone();
    model_cfg.pooling = pooling;
    let model = Model::new(model_cfg, cfg.seed)?;
    let out = run_warmup(model, &prepared.train, &prepared.validation, &cfg.train, &cfg.to_toml())?;
    Ok((out.checkpoint, out.history))
}

pub fn main_phase(prepared: &Prepared, cfg: &RunConfig, warm: &Checkpoint) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let out = run_main(warm, &prepared.train, &prepared.validation, &cfg.train, &cfg.to_toml())?;
    Ok((out.checkpoint, out.history))
}

/// Test-split metrics of a main-phase checkpoint under matching inference.
pub fn score_main(ckpt: &Checkpoint, data: &[EncodedFunction]) -> Result<MetricsReport> {
    let model = ckpt.model()?;
    let (_, report) = evaluate_split(&model, ckpt.codebook.as_ref(), data)?;
    Ok(report)
}

/// Test-split metrics of a warm-up model that never saw a codebook: the
/// auxiliary row comes from the benign stand-in scope, the only scope-free
/// input such a model has.
pub fn score_without_codebook(ckpt: &Checkpoint, data: &[EncodedFunction]) -> Result<MetricsReport> {
    let model = ckpt.model()?;
    let aux = model.benign_aux()?;
    let results = data
        .iter()
        .map(|ex| predict_with_aux(&model, &aux, ex))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&results, data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    Pooling(PoolingMode),
    NoCodebook,
    Centroids(usize),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Full => "full method".into(),
            Variant::Pooling(p) => format!("{p} pooling statement embedding"),
            Variant::NoCodebook => "without codebook & matching".into(),
            Variant::Centroids(k) => format!("{k} centroids"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Variant::Full),
            "no_codebook" => Some(Variant::NoCodebook),
            "pooling_mean" | "mean" => Some(Variant::Pooling(PoolingMode::Mean)),
            "pooling_max" | "max" => Some(Variant::Pooling(PoolingMode::Max)),
            "pooling_rnn" | "rnn" => Some(Variant::Pooling(PoolingMode::Rnn)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub label: String,
    pub test: MetricsReport,
    pub history: Vec<EpochMetrics>,
}

/// Runs each variant, sharing warm-up runs between variants with the same
/// pooling mode.
pub fn run_variants(prepared: &Prepared, cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<VariantResult>> {
    let mut warm_cache: BTreeMap<String, (Checkpoint, Vec<EpochMetrics>)> = BTreeMap::new();
    let mut out = Vec::new();
    for variant in variants {
        let pooling = match variant {
            Variant::Pooling(p) => *p,
            _ => prepared.model.pooling,
        };
        let key = pooling.to_string();
        if !warm_cache.contains_key(&key) {
            log::info!("warm-up with {pooling} pooling");
            warm_cache.insert(key.clone(), warmup(prepared, cfg, pooling)?);
        }
        let (warm, warm_history) = &warm_cache[&key];
        log::info!("variant: {}", variant.label());
        let (test, history) = match variant {
            Variant::NoCodebook => (score_without_codebook(warm, &prepared.test)?, warm_history.clone()),
            _ => {
                let mut run_cfg = cfg.clone();
                if let Variant::Centroids(k) = variant {
                    run_cfg.train.centroids = *k;
                }
                let (ckpt, main_history) = main_phase(prepared, &run_cfg, warm)?;
                let mut history = warm_history.clone();
                history.extend(main_history);
                (score_main(&ckpt, &prepared.test)?, history)
            }
        };
        out.push(VariantResult {
            label: variant.label(),
            variant: variant.clone(),
            test,
            history,
        });
    }
    Ok(out)
}

/// Markdown comparison table, one row per variant.
pub fn comparison_table(results: &[VariantResult]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "| Variant | Func Acc | Func Pre | Func Re | Func F1 | Stmt Acc | Stmt Pre | Stmt Re | Stmt F1 |"
    )
    .unwrap();
    writeln!(s, "|---|---|---|---|---|---|---|---|---|").unwrap();
    for r in results {
        let (f, st) = (&r.test.function, &r.test.statement);
        writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.label,
            100.0 * f.accuracy,
            100.0 * f.precision,
            100.0 * f.recall,
            100.0 * f.f1,
            100.0 * st.accuracy,
            100.0 * st.precision,
            100.0 * st.recall,
            100.0 * st.f1
        )
        .unwrap();
    }
    s
}
