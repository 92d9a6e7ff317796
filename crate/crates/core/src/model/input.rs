use crate::corpus::SourceFunction;
use crate::tokenizer::{encode_function, encode_scope, ScopeMatrix, StatementMatrix, Vocab};

use super::ModelConfig;

/// A function in model-ready form: token grids plus the labels of the kept
/// statements.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedFunction {
    pub id: String,
    pub statements: StatementMatrix,
    pub scope: ScopeMatrix,
    pub label_y: bool,
    /// Labels of the first `min(n, statement_count)` statements.
    pub label_z: Vec<bool>,
    /// Statement count before truncation to `n`.
    pub total_statements: usize,
}

impl EncodedFunction {
    pub fn new(func: &SourceFunction, vocab: &Vocab, config: &ModelConfig) -> Self {
        let statements = encode_function(func, vocab, config.n, config.r);
        let kept = statements.real_statements();
        EncodedFunction {
            id: func.id.clone(),
            scope: encode_scope(func, vocab, config.q, config.r),
            statements,
            label_y: func.label_y,
            label_z: func.label_z[..kept].to_vec(),
            total_statements: func.statement_count(),
        }
    }

    pub fn encode_all(funcs: &[SourceFunction], vocab: &Vocab, config: &ModelConfig) -> Vec<Self> {
        funcs.iter().map(|f| Self::new(f, vocab, config)).collect()
    }

    /// Real statements that fit under the `n` cap.
    pub fn kept(&self) -> usize {
        self.label_z.len()
    }

    pub fn truncated(&self) -> usize {
        self.total_statements - self.kept()
    }
}
