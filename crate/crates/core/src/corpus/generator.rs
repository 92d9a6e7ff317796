use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::SourceFunction;
use crate::diffcore::rng::{purpose, RngStream};
use crate::error::{Error, Result};

/// A vulnerability family: the statements that form its scope plus benign
/// statements used to pad functions of this family.
///
/// Templates are single statements. `{name}` is an identifier placeholder,
/// renamed consistently within one function from the identifier pool;
/// `{NUM}` becomes a fresh integer literal at every occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternTemplate {
    pub name: String,
    pub scope_statements: Vec<String>,
    pub filler_statements: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub num_functions: usize,
    pub vulnerable_ratio: f64,
    pub pattern_families: Vec<PatternTemplate>,
    /// Inclusive range of statements per function, header and closing brace
    /// included.
    pub statements_per_function: (usize, usize),
    pub identifier_pool: Vec<String>,
    pub seed: u64,
    /// Largest scope a family may plant (the downstream `q`).
    pub max_scope: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_functions: 2000,
            vulnerable_ratio: 0.1,
            pattern_families: default_pattern_library(),
            statements_per_function: (8, 20),
            identifier_pool: default_identifier_pool(),
            seed: 0,
            max_scope: 12,
        }
    }
}

const HEADER: &str = "int {fname}(char *{src}, int {len}) {";
const FOOTER: &str = "}";

const COMMON_FILLERS: &[&str] = &[
    "int {a} = {NUM};",
    "int {b} = {a} + {NUM};",
    "{a} = {a} + {b};",
    "{b} = {a} * {NUM};",
    "if ({a} > {b}) {a} = {b};",
    "printf(\"%d\\n\", {a});",
    "{cnt}++;",
    "while ({a} > {NUM}) {a}--;",
    "{total} += {len};",
    "log_debug(\"{fname}\", {a});",
];

fn family(name: &str, scope: &[&str], extra_fillers: &[&str]) -> PatternTemplate {
    PatternTemplate {
        name: name.to_string(),
        scope_statements: scope.iter().map(|s| s.to_string()).collect(),
        filler_statements: COMMON_FILLERS
            .iter()
            .chain(extra_fillers)
            .map(|s| s.to_string())
            .collect(),
    }
}

/// Five families of 2-4 scope statements. The first is the two-statement
/// out-of-bounds write (a loop whose body indexes a fixed buffer at an
/// offset).
pub fn default_pattern_library() -> Vec<PatternTemplate> {
    vec![
        family(
            "out-of-bounds-write",
            &[
                "for (int {i} = 0; {i} < {len}; {i}++)",
                "{buf}[{off} + {i}] = {src}[{i}];",
            ],
            &[
                "char {buf}[{NUM}];",
                "int {off} = {NUM};",
                "if ({off} + {len} < {NUM}) {buf}[{off}] = {src}[0];",
                "memset({buf}, 0, sizeof({buf}));",
            ],
        ),
        family(
            "unbounded-copy",
            &["char {dst}[{NUM}];", "strcpy({dst}, {src});"],
            &[
                "char {tmp}[{NUM}];",
                "strncpy({tmp}, {src}, sizeof({tmp}) - 1);",
                "{tmp}[sizeof({tmp}) - 1] = '\\0';",
            ],
        ),
        family(
            "use-after-free",
            &[
                "free({ptr});",
                "{val} = {ptr}->{field};",
                "{ptr}->{field} = {val} + 1;",
            ],
            &[
                "struct node *{ptr} = get_node({len});",
                "{ptr} = NULL;",
                "if ({ptr} != NULL) {val} = {ptr}->{field};",
            ],
        ),
        family(
            "integer-overflow-alloc",
            &[
                "size_t {size} = {cnt} * {len};",
                "char *{dst} = malloc({size});",
                "memcpy({dst}, {src}, {cnt} * {len});",
            ],
            &[
                "if ({cnt} > SIZE_MAX / {len}) return -1;",
                "char *{tmp} = calloc({cnt}, {len});",
            ],
        ),
        family(
            "null-dereference",
            &[
                "{ptr} = lookup_entry({tbl}, {key});",
                "{val} = {ptr}->{field};",
                "{ptr}->{field} = {val} + {NUM};",
                "update_entry({tbl}, {ptr});",
            ],
            &[
                "if ({ptr} == NULL) return -1;",
                "int {key} = hash({src}, {len});",
                "release_table({tbl});",
            ],
        ),
    ]
}

pub fn default_identifier_pool() -> Vec<String> {
    [
        "buffer", "buf", "data", "offset", "start", "idx", "pos", "len", "size", "count", "n",
        "total", "ptr", "p", "node", "entry", "item", "elem", "value", "val", "result", "res",
        "tmp", "temp", "dest", "dst", "src", "input", "output", "table", "map", "key", "field",
        "next", "prev", "head", "memoryBlock", "block", "chunk", "acc", "limit", "step", "width",
        "height", "index", "cursor", "base", "mem",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn placeholders(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    out.push(name);
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

fn render(template: &str, names: &[(String, String)], rng: &mut RngStream) -> String {
    let mut out = String::with_capacity(template.len() + 16);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let key = close.map(|c| &after[..c]);
        match key {
            Some("NUM") => {
                out.push_str(&(1 + rng.below(64)).to_string());
                rest = &after[close.unwrap() + 1..];
            }
            Some(k) => match names.iter().find(|(p, _)| p == k) {
                Some((_, v)) => {
                    out.push_str(v);
                    rest = &after[close.unwrap() + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            },
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_functions < 10 {
            return bad(format!("num_functions {} < 10", self.num_functions));
        }
        if !(self.vulnerable_ratio > 0.0 && self.vulnerable_ratio < 1.0) {
            return bad(format!("vulnerable_ratio {} outside (0,1)", self.vulnerable_ratio));
        }
        if self.vulnerable_ratio * (self.num_functions as f64) < 1.0 {
            return bad("vulnerable_ratio * num_functions < 1".into());
        }
        if self.pattern_families.is_empty() {
            return bad("no pattern families".into());
        }
        for f in &self.pattern_families {
            let len = f.scope_statements.len();
            if len == 0 || len > self.max_scope {
                return bad(format!(
                    "family {} has {len} scope statements (allowed 1..={})",
                    f.name, self.max_scope
                ));
            }
            if f.filler_statements.is_empty() {
                return bad(format!("family {} has no filler statements", f.name));
            }
        }
        let (lo, hi) = self.statements_per_function;
        let largest = self
            .pattern_families
            .iter()
            .map(|f| f.scope_statements.len())
            .max()
            .unwrap_or(0);
        if lo > hi || lo < largest + 2 {
            return bad(format!(
                "statement range {lo}..={hi} cannot host a {largest}-statement scope plus header and closing brace"
            ));
        }
        Ok(())
    }

    fn vulnerable_count(&self) -> usize {
        (self.vulnerable_ratio * self.num_functions as f64).round() as usize
    }
}

fn build_function(
    id: String,
    family: &PatternTemplate,
    planted: bool,
    spec: &GeneratorSpec,
    rng: &mut RngStream,
) -> Result<SourceFunction> {
    let (lo, hi) = spec.statements_per_function;
    let total = rng.range_inclusive(lo, hi);
    let body = total - 2;
    let scope_len = if planted { family.scope_statements.len() } else { 0 };
    let filler_count = body - scope_len;
    let fillers: Vec<&str> = (0..filler_count)
        .map(|_| family.filler_statements[rng.below(family.filler_statements.len())].as_str())
        .collect();
    let position = rng.below(filler_count + 1);

    let mut templates: Vec<(&str, bool)> = Vec::with_capacity(total);
    templates.push((HEADER, false));
    templates.extend(fillers[..position].iter().map(|t| (*t, false)));
    if planted {
        templates.extend(family.scope_statements.iter().map(|t| (t.as_str(), true)));
    }
    templates.extend(fillers[position..].iter().map(|t| (*t, false)));
    templates.push((FOOTER, false));

    let distinct: BTreeSet<&str> = templates
        .iter()
        .flat_map(|(t, _)| placeholders(t))
        .filter(|p| *p != "NUM")
        .collect();
    if distinct.len() > spec.identifier_pool.len() {
        return Err(Error::Config(format!(
            "identifier pool of {} names cannot cover {} placeholders",
            spec.identifier_pool.len(),
            distinct.len()
        )));
    }
    let mut pool: Vec<&String> = spec.identifier_pool.iter().collect();
    rng.shuffle(&mut pool);
    let names: Vec<(String, String)> = distinct
        .into_iter()
        .zip(pool)
        .map(|(p, n)| (p.to_string(), n.clone()))
        .collect();

    let mut lines = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let last = templates.len() - 1;
    for (i, (t, vulnerable)) in templates.iter().enumerate() {
        let indent = if i == 0 || i == last { "" } else { "    " };
        lines.push(format!("{indent}{}", render(t, &names, rng)));
        labels.push(*vulnerable as u8);
    }
    let mut tags = vec![format!("family:{}", family.name)];
    if !planted {
        tags = vec!["benign".to_string()];
    }
    SourceFunction::new(id, lines.join("\n"), &labels, tags)
}

/// Generates `num_functions` functions, exactly
/// `round(vulnerable_ratio * num_functions)` of which carry one planted scope
/// at a uniformly random position. Pure in `spec`.
pub fn synthesize_corpus(spec: &GeneratorSpec) -> Result<Vec<SourceFunction>> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed, purpose::GENERATOR);
    let mut planted = vec![false; spec.num_functions];
    for p in planted.iter_mut().take(spec.vulnerable_count()) {
        *p = true;
    }
    rng.shuffle(&mut planted);
    planted
        .iter()
        .enumerate()
        .map(|(i, &vul)| {
            let family = &spec.pattern_families[rng.below(spec.pattern_families.len())];
            build_function(format!("syn-{}-{i:05}", spec.seed), family, vul, spec, &mut rng)
        })
        .collect()
}
