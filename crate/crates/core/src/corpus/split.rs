use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::SourceFunction;
use crate::diffcore::rng::{purpose, RngStream};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<SourceFunction>,
    pub validation: Vec<SourceFunction>,
    pub test: Vec<SourceFunction>,
}

/// Shuffles with a seeded permutation, then cuts `round(train·N)` and
/// `round(validation·N)` functions off the front; the test split takes the
/// rest.
pub fn split_corpus(corpus: &[SourceFunction], ratios: SplitRatios, seed: u64) -> Result<CorpusSplit> {
    if corpus.is_empty() {
        return Err(Error::Split("empty corpus".into()));
    }
    let sum = ratios.train + ratios.validation + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.validation, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::Split(format!("ratios must be non-negative and sum to 1, got {sum}")));
    }
    let mut ids = HashSet::new();
    if let Some(dup) = corpus.iter().find(|f| !ids.insert(f.id.as_str())) {
        return Err(Error::Split(format!("duplicate function id {}", dup.id)));
    }

    let total = corpus.len();
    let mut order: Vec<usize> = (0..total).collect();
    RngStream::new(seed, purpose::SPLIT).shuffle(&mut order);
    let n_train = (ratios.train * total as f64).round() as usize;
    let n_val = ((ratios.validation * total as f64).round() as usize).min(total - n_train.min(total));
    let n_train = n_train.min(total);
    let take = |range: std::ops::Range<usize>| -> Vec<SourceFunction> {
        order[range].iter().map(|&i| corpus[i].clone()).collect()
    };
    let split = CorpusSplit {
        train: take(0..n_train),
        validation: take(n_train..n_train + n_val),
        test: take(n_train + n_val..total),
    };
    for (name, part) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        if part.is_empty() {
            return Err(Error::Split(format!("{name} partition is empty for {total} functions")));
        }
    }
    Ok(split)
}
