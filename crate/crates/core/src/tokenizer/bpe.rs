use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

const HEADER: &str = "#bpe-vocab v1";

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Word,
    Punct,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphanumeric() || c == '_' {
        CharClass::Word
    } else {
        CharClass::Punct
    }
}

/// Splits on whitespace, then into maximal runs of word characters
/// (alphanumerics and `_`) or punctuation.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        let mut prev: Option<CharClass> = None;
        for (i, c) in chunk.char_indices() {
            let cls = class_of(c);
            if let Some(p) = prev {
                if p != cls {
                    out.push(&chunk[start..i]);
                    start = i;
                }
            }
            prev = Some(cls);
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

/// Byte-pair-encoding vocabulary over characters.
///
/// Ids: `<pad>` = 0, `<unk>` = 1, then the base alphabet in code-point order,
/// then one id per merge result in merge order (a merge whose result already
/// exists reuses that id).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
}

impl Vocab {
    fn from_parts(alphabet: Vec<char>, merges: Vec<(String, String)>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut token_to_id: HashMap<String, u32> = HashMap::new();
        token_to_id.insert(PAD_TOKEN.to_string(), PAD);
        token_to_id.insert(UNK_TOKEN.to_string(), UNK);
        let mut push = |t: String, tokens: &mut Vec<String>| {
            if !token_to_id.contains_key(&t) {
                token_to_id.insert(t.clone(), tokens.len() as u32);
                tokens.push(t);
            }
        };
        for c in &alphabet {
            push(c.to_string(), &mut tokens);
        }
        for (a, b) in &merges {
            push(format!("{a}{b}"), &mut tokens);
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Vocab {
            alphabet,
            merges,
            tokens,
            token_to_id,
            ranks,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        out.extend(
            symbols
                .iter()
                .map(|s| self.token_to_id.get(s).copied().unwrap_or(UNK)),
        );
    }

    /// Token ids for one statement, in order.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in pretokenize(text) {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Concatenates token strings; whitespace is not reconstructed and
    /// padding is skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        writeln!(s, "#specials {PAD_TOKEN} {UNK_TOKEN}").unwrap();
        let alpha: Vec<String> = self.alphabet.iter().map(|c| c.to_string()).collect();
        writeln!(s, "#alphabet {}", alpha.join(" ")).unwrap();
        for (a, b) in &self.merges {
            writeln!(s, "{a} {b}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, message: &str| Error::Record {
            line: line + 1,
            message: message.to_string(),
        };
        match lines.next() {
            Some((_, l)) if l == HEADER => {}
            _ => return Err(bad(0, "missing vocab header")),
        }
        match lines.next() {
            Some((_, l)) if l == format!("#specials {PAD_TOKEN} {UNK_TOKEN}") => {}
            _ => return Err(bad(1, "missing or unexpected specials line")),
        }
        let alphabet: Vec<char> = match lines.next() {
            Some((i, l)) => {
                let rest = match l.strip_prefix("#alphabet") {
                    Some(rest) if rest.is_empty() || rest.starts_with(' ') => rest,
                    _ => return Err(bad(i, "missing alphabet line")),
                };
                let mut chars = Vec::new();
                for sym in rest.split_whitespace() {
                    let mut it = sym.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => chars.push(c),
                        _ => return Err(bad(i, "alphabet entries must be single characters")),
                    }
                }
                chars
            }
            None => return Err(bad(2, "missing alphabet line")),
        };
        let mut merges = Vec::new();
        for (i, l) in lines {
            if l.is_empty() {
                continue;
            }
            let mut parts = l.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => return Err(bad(i, "merge lines hold exactly two tokens")),
            }
        }
        Ok(Vocab::from_parts(alphabet, merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Greedy BPE training: repeatedly merges the most frequent adjacent symbol
/// pair (ties broken by the lexicographically smallest pair) until the
/// vocabulary reaches `vocab_size` or no pair is left.
pub fn train_bpe<'a, I>(texts: I, vocab_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for w in pretokenize(text) {
            *word_counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Config("cannot train a vocabulary on an empty corpus".into()));
    }
    let alphabet: Vec<char> = word_counts
        .keys()
        .flat_map(|w| w.chars())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let base = alphabet.len() + 2;
    if vocab_size <= base {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} must exceed the {base} base symbols"
        )));
    }

    // Sorted for a deterministic iteration order.
    let mut words: Vec<(Vec<String>, usize)> = {
        let mut ws: Vec<_> = word_counts.into_iter().collect();
        ws.sort();
        ws.into_iter()
            .map(|(w, c)| (w.chars().map(|ch| ch.to_string()).collect(), c))
            .collect()
    };

    let mut merges: Vec<(String, String)> = Vec::new();
    let mut known: BTreeSet<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mut size = base;
    while size < vocab_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        let joined = format!("{a}{b}");
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == a && syms[i + 1] == b {
                    syms[i] = joined.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(joined) {
            size += 1;
        }
        merges.push((a, b));
    }
    Ok(Vocab::from_parts(alphabet, merges))
}
