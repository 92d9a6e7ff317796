//! Matching inference against every codebook centroid, and confusion-count
//! metrics at function and statement level.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::model::{EncodedFunction, Model};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub id: String,
    /// Function probability (max over centroids).
    pub y_hat: f64,
    pub decision: bool,
    /// Statement probabilities over the kept statements (mean over
    /// centroids, or all zero when the function is predicted benign).
    pub z_hat: Vec<f64>,
    pub statement_decisions: Vec<bool>,
    /// Centroid attaining the max; `None` for single-aux inference.
    pub best_centroid: Option<usize>,
}

impl MatchResult {
    /// Applies the 0.5 thresholds and the zero-vector rule for functions
    /// predicted benign.
    pub fn decide(id: &str, y_hat: f64, z_hat: Vec<f64>, best_centroid: Option<usize>) -> Self {
        let decision = y_hat > THRESHOLD;
        let z_hat = if decision { z_hat } else { vec![0.0; z_hat.len()] };
        let statement_decisions = z_hat.iter().map(|&p| p > THRESHOLD).collect();
        MatchResult {
            id: id.to_string(),
            y_hat,
            decision,
            z_hat,
            statement_decisions,
            best_centroid,
        }
    }
}

/// Runs the function against every centroid in evaluation mode; ŷ is the
/// max over centroids and ẑ the per-statement mean.
pub fn match_function(model: &Model, codebook: Option<&Codebook>, ex: &EncodedFunction) -> Result<MatchResult> {
    let codebook = codebook.ok_or_else(|| Error::Usage("matching needs a trained codebook".into()))?;
    if codebook.h() != model.config.h {
        return Err(Error::dim("match codebook", &[codebook.k(), codebook.h()], &[codebook.k(), model.config.h]));
    }
    let s = model.statement_values(&ex.statements)?;
    let mut best = (f64::NEG_INFINITY, 0);
    let mut sum = vec![0.0; s.nrows()];
    for j in 0..codebook.k() {
        let aux = model.centroid_aux(codebook.centroid(j));
        let (y, z) = model.predict_with_aux(s.view(), aux.view())?;
        if y > best.0 {
            best = (y, j);
        }
        for (acc, p) in sum.iter_mut().zip(z) {
            *acc += p;
        }
    }
    let k = codebook.k() as f64;
    let mean = sum.into_iter().map(|x| x / k).collect();
    Ok(MatchResult::decide(&ex.id, best.0, mean, Some(best.1)))
}

/// One evaluation-mode forward with a fixed `1×d` auxiliary row.
pub fn predict_with_aux(model: &Model, aux: &ndarray::Array2<f64>, ex: &EncodedFunction) -> Result<MatchResult> {
    let s = model.statement_values(&ex.statements)?;
    let (y, z) = model.predict_with_aux(s.view(), aux.view())?;
    Ok(MatchResult::decide(&ex.id, y, z, None))
}

pub fn match_all(model: &Model, codebook: &Codebook, data: &[EncodedFunction]) -> Result<Vec<MatchResult>> {
    data.par_iter()
        .map(|ex| match_function(model, Some(codebook), ex))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> LevelMetrics {
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, precision_undefined) = ratio(self.tp, self.tp + self.fp);
        let (recall, recall_undefined) = ratio(self.tp, self.tp + self.fn_);
        let (accuracy, _) = ratio(self.tp + self.tn, self.total());
        let f1_undefined = precision + recall == 0.0;
        let f1 = if f1_undefined {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        LevelMetrics {
            accuracy,
            precision,
            recall,
            f1,
            precision_undefined,
            recall_undefined,
            f1_undefined,
            counts: *self,
        }
    }
}

/// Rates derived from a confusion table; an `_undefined` flag marks a 0/0
/// ratio that was reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
    pub counts: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub function: LevelMetrics,
    pub statement: LevelMetrics,
    /// Statements past the `n` cap, left out of the statement counts.
    pub excluded_statements: usize,
    pub statement_population: String,
}

pub const STATEMENT_POPULATION: &str = "all kept statements of all functions, benign functions included";

pub fn evaluate(results: &[MatchResult], golds: &[EncodedFunction]) -> Result<MetricsReport> {
    if results.len() != golds.len() {
        return Err(Error::Usage(format!(
            "{} results for {} gold functions",
            results.len(),
            golds.len()
        )));
    }
    let mut function = Confusion::default();
    let mut statement = Confusion::default();
    let mut excluded = 0;
    for (r, g) in results.iter().zip(golds) {
        if r.id != g.id {
            return Err(Error::Usage(format!("result id {} does not match gold id {}", r.id, g.id)));
        }
        if r.statement_decisions.len() != g.kept() {
            return Err(Error::Usage(format!(
                "{}: {} statement decisions for {} kept statements",
                r.id,
                r.statement_decisions.len(),
                g.kept()
            )));
        }
        function.record(r.decision, g.label_y);
        for (&p, &a) in r.statement_decisions.iter().zip(&g.label_z) {
            statement.record(p, a);
        }
        excluded += g.truncated();
    }
    if excluded > 0 {
        log::info!("{excluded} statements beyond the n cap excluded from statement metrics");
    }
    Ok(MetricsReport {
        function: function.metrics(),
        statement: statement.metrics(),
        excluded_statements: excluded,
        statement_population: STATEMENT_POPULATION.to_string(),
    })
}

#[derive(Serialize)]
struct ResultLine<'a> {
    id: &'a str,
    y_hat: f64,
    decision: bool,
    z_hat: &'a [f64],
    best_centroid: Option<usize>,
}

pub fn write_results(path: &Path, results: &[MatchResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in results {
        let line = ResultLine {
            id: &r.id,
            y_hat: r.y_hat,
            decision: r.decision,
            z_hat: &r.z_hat,
            best_centroid: r.best_centroid,
        };
        let text = serde_json::to_string(&line).expect("result serialises");
        writeln!(out, "{text}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
