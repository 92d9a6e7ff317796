//! Statement segmentation, BPE vocabulary training, and fixed-shape encoding
//! of functions and vulnerable scopes into token-id grids.

mod bpe;

use ndarray::Array2;

pub use bpe::{pretokenize, train_bpe, Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use crate::corpus::{extract_scope, SourceFunction};
use crate::error::{Error, Result};

/// One statement per physical line, inner whitespace collapsed to single
/// spaces, blank lines dropped.
pub fn segment_statements(code: &str) -> Result<Vec<String>> {
    let statements: Vec<String> = code
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect();
    if statements.is_empty() {
        return Err(Error::Segmentation("code has no non-blank lines".into()));
    }
    Ok(statements)
}

/// `n×r` token grid for a function plus its statement mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatementMatrix {
    pub ids: Array2<u32>,
    pub statement_mask: Vec<bool>,
    pub token_counts: Vec<usize>,
}

impl StatementMatrix {
    pub fn n(&self) -> usize {
        self.ids.nrows()
    }

    pub fn r(&self) -> usize {
        self.ids.ncols()
    }

    /// Number of real statements; always a prefix of the rows.
    pub fn real_statements(&self) -> usize {
        self.statement_mask.iter().filter(|&&m| m).count()
    }

    /// Real token ids of row `j`.
    pub fn tokens(&self, j: usize) -> &[u32] {
        let row = self.ids.row(j);
        &row.to_slice().expect("row-major grid")[..self.token_counts[j]]
    }
}

/// `q×r` token grid for the vulnerable statements of a function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeMatrix {
    pub ids: Array2<u32>,
    pub scope_mask: Vec<bool>,
    pub token_counts: Vec<usize>,
    pub is_benign: bool,
}

impl ScopeMatrix {
    pub fn q(&self) -> usize {
        self.ids.nrows()
    }

    pub fn real_statements(&self) -> usize {
        self.scope_mask.iter().filter(|&&m| m).count()
    }

    pub fn tokens(&self, j: usize) -> &[u32] {
        let row = self.ids.row(j);
        &row.to_slice().expect("row-major grid")[..self.token_counts[j]]
    }
}

fn encode_rows<'a, I>(rows: I, vocab: &Vocab, height: usize, r: usize) -> (Array2<u32>, Vec<bool>, Vec<usize>)
where
    I: IntoIterator<Item = &'a str>,
{
    let mut ids = Array2::from_elem((height, r), PAD);
    let mut mask = vec![false; height];
    let mut counts = vec![0; height];
    for (j, text) in rows.into_iter().take(height).enumerate() {
        let mut toks = vocab.encode(text);
        // A statement always occupies at least one cell.
        if toks.is_empty() {
            toks.push(UNK);
        }
        toks.truncate(r);
        for (t, &id) in toks.iter().enumerate() {
            ids[[j, t]] = id;
        }
        mask[j] = true;
        counts[j] = toks.len();
    }
    (ids, mask, counts)
}

/// Keeps the first `n` statements, each truncated or padded to `r` ids.
pub fn encode_function(func: &SourceFunction, vocab: &Vocab, n: usize, r: usize) -> StatementMatrix {
    assert!(n >= 1 && r >= 1, "shape constants must be positive");
    let (ids, statement_mask, token_counts) =
        encode_rows(func.statements.iter().map(String::as_str), vocab, n, r);
    StatementMatrix {
        ids,
        statement_mask,
        token_counts,
    }
}

/// Encodes the vulnerable statements (ascending index order, first `q`
/// kept). Benign functions get an all-PAD grid with `is_benign` set.
pub fn encode_scope(func: &SourceFunction, vocab: &Vocab, q: usize, r: usize) -> ScopeMatrix {
    assert!(q >= 1 && r >= 1, "shape constants must be positive");
    let scope = extract_scope(func);
    let (ids, scope_mask, token_counts) = encode_rows(
        scope.iter().map(|&j| func.statements[j].as_str()),
        vocab,
        q,
        r,
    );
    ScopeMatrix {
        ids,
        scope_mask,
        token_counts,
        is_benign: scope.is_empty(),
    }
}

#[cfg(test)]
mod tests;
