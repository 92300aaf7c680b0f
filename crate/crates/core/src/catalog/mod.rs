//! Token catalog: parse source files and enumerate every maskable code
//! token as an infilling task.
//!
//! A task masks one code token (a variable use, a callee name, a binary
//! operator or a numeric/string literal) and carries the surrounding text
//! under one of three context strategies:
//!
//! * [`ContextStrategy::Function`]: the enclosing top-level function only,
//! * [`ContextStrategy::File`]: the whole file,
//! * [`ContextStrategy::SlicedFile`]: the function plus file-level globals
//!   and declarations, other functions reduced to their signatures.
//!
//! Nested functions are folded into their outermost definition: spans never
//! overlap, each token is masked once, and every task records the innermost
//! function it belongs to.

mod classify;
mod similarity;
mod slice;

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::OnceLock;
use tree_sitter::{Node, Tree};

use crate::lang::{Language, LexemeClass, LineIndex};

pub use slice::slice_file_context;

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("no grammar for {0}")]
    UnsupportedLanguage(PathBuf),
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("{0}: file does not parse")]
    WholeFileParseFailure(PathBuf),
}

/// The four kinds of code tokens that can be masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeTokenKind {
    VariableUse,
    FunctionCall,
    Operator,
    Literal,
}

impl CodeTokenKind {
    pub const ALL: [CodeTokenKind; 4] = [
        CodeTokenKind::VariableUse,
        CodeTokenKind::FunctionCall,
        CodeTokenKind::Operator,
        CodeTokenKind::Literal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeTokenKind::VariableUse => "variable_use",
            CodeTokenKind::FunctionCall => "function_call",
            CodeTokenKind::Operator => "operator",
            CodeTokenKind::Literal => "literal",
        }
    }

    /// Lexeme classes a token of this kind may belong to.
    pub fn lexeme_classes(self) -> &'static [LexemeClass] {
        match self {
            CodeTokenKind::VariableUse | CodeTokenKind::FunctionCall => &[LexemeClass::Identifier],
            CodeTokenKind::Operator => &[LexemeClass::Operator],
            CodeTokenKind::Literal => &[LexemeClass::Number, LexemeClass::String],
        }
    }
}

impl fmt::Display for CodeTokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextStrategy {
    #[default]
    Function,
    File,
    SlicedFile,
}

impl ContextStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextStrategy::Function => "function",
            ContextStrategy::File => "file",
            ContextStrategy::SlicedFile => "sliced_file",
        }
    }
}

/// A top-level (outermost) function definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FunctionSpan {
    pub name: String,
    /// Half-open byte offsets, from the start of the definition's first line
    /// (decorators and indentation included) to the end of the body.
    pub byte_range: Range<usize>,
    /// 1-based inclusive lines.
    pub line_range: (usize, usize),
    pub token_count: Option<usize>,
    #[serde(skip)]
    pub(crate) def_range: Range<usize>,
    #[serde(skip)]
    pub(crate) outer_node_range: Range<usize>,
}

/// A function that failed to parse and was left out of the unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedFunction {
    pub name: String,
    pub line_range: (usize, usize),
}

/// A parsed source file. Immutable once built and safe to share.
#[derive(Debug, Clone)]
pub struct SourceUnit {
    pub path: PathBuf,
    pub language: Language,
    pub text: Arc<str>,
    pub functions: Vec<FunctionSpan>,
    pub skipped: Vec<SkippedFunction>,
    pub(crate) tree: Tree,
    pub(crate) lines: LineIndex,
}

impl SourceUnit {
    pub fn function_text(&self, func: &FunctionSpan) -> &str {
        &self.text[func.byte_range.clone()]
    }

    pub fn line_index(&self) -> &LineIndex {
        &self.lines
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn fill_token_counts(&mut self, counter: &dyn TokenCounter) {
        for func in &mut self.functions {
            func.token_count = Some(counter.count(&self.text[func.byte_range.clone()]));
        }
    }
}

/// Counts model-tokenizer text tokens.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Approximate subword count for code: identifier runs cost one token per
/// four characters, digit runs one per three, every other visible character
/// one token.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenCounter;

impl TokenCounter for ApproxTokenCounter {
    fn count(&self, text: &str) -> usize {
        static PIECES: OnceLock<Regex> = OnceLock::new();
        let re = PIECES.get_or_init(|| Regex::new(r"[\p{L}_]+|[0-9]+|[^\s\p{L}_0-9]").unwrap());
        re.find_iter(text)
            .map(|m| {
                let s = m.as_str();
                let n = s.chars().count();
                if s.as_bytes()[0].is_ascii_digit() {
                    n.div_ceil(3)
                } else if s.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_') {
                    n.div_ceil(4)
                } else {
                    1
                }
            })
            .sum()
    }
}

/// Reads and parses a file, choosing the grammar from its extension.
pub fn read_unit(path: &Path) -> Result<SourceUnit, CatalogError> {
    let language = Language::from_extension(path).ok_or_else(|| CatalogError::UnsupportedLanguage(path.to_path_buf()))?;
    let bytes = fs::read(path).map_err(|e| CatalogError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let text = String::from_utf8(bytes).map_err(|e| CatalogError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_unit(path, language, &text)
}

/// Parses `text` and records every outermost function definition. A function
/// containing a syntax error is skipped on its own; the file fails as a whole
/// only if it has errors and no clean function at all.
pub fn parse_unit(path: &Path, language: Language, text: &str) -> Result<SourceUnit, CatalogError> {
    let tree = language
        .parse(text)
        .ok_or_else(|| CatalogError::WholeFileParseFailure(path.to_path_buf()))?;
    let lines = LineIndex::new(text);
    let root = tree.root_node();

    let mut functions = Vec::new();
    let mut skipped = Vec::new();
    let mut defs = Vec::new();
    outermost_functions(language, root, &mut defs);
    for def in defs {
        let outer = match def.parent() {
            Some(p) if p.kind() == "decorated_definition" => p,
            _ => def,
        };
        let start = line_start_if_indented(text, outer.start_byte());
        let end = outer.end_byte();
        let line_range = (lines.line_of(start), lines.line_of(end.saturating_sub(1).max(start)));
        let name = classify::function_name(language, def, text);
        if outer.has_error() {
            tracing::debug!(path = %path.display(), function = %name, "skipping function with syntax errors");
            skipped.push(SkippedFunction { name, line_range });
            continue;
        }
        functions.push(FunctionSpan {
            name,
            byte_range: start..end,
            line_range,
            token_count: None,
            def_range: def.byte_range(),
            outer_node_range: outer.byte_range(),
        });
    }

    if root.has_error() && functions.is_empty() {
        tracing::warn!(path = %path.display(), "whole-file parse failure; file skipped");
        return Err(CatalogError::WholeFileParseFailure(path.to_path_buf()));
    }

    Ok(SourceUnit {
        path: path.to_path_buf(),
        language,
        text: Arc::from(text),
        functions,
        skipped,
        tree,
        lines,
    })
}

fn outermost_functions<'t>(lang: Language, node: Node<'t>, out: &mut Vec<Node<'t>>) {
    if classify::is_function_node(lang, node) {
        out.push(node);
        return;
    }
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        outermost_functions(lang, child, out);
    }
}

fn line_start_if_indented(text: &str, offset: usize) -> usize {
    let start = text[..offset].rfind('\n').map_or(0, |i| i + 1);
    if text[start..offset].chars().all(|c| c == ' ' || c == '\t') {
        start
    } else {
        offset
    }
}

/// Limits applied while enumerating tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskLimits {
    /// Tasks whose strategy context exceeds this many text tokens are dropped.
    pub max_context_tokens: usize,
    /// When set, only functions with a structural near-duplicate sibling
    /// (subtree-hash Jaccard similarity at or above this value) yield tasks.
    pub similarity_gate: Option<f64>,
}

impl Default for TaskLimits {
    fn default() -> Self {
        TaskLimits {
            max_context_tokens: 4000,
            similarity_gate: None,
        }
    }
}

/// One masked code token with its context.
#[derive(Debug, Clone, PartialEq)]
pub struct InfillingTask {
    pub task_id: String,
    pub path: PathBuf,
    pub language: Language,
    /// Outermost function the token belongs to.
    pub function: String,
    pub function_index: usize,
    /// Innermost enclosing function, which differs from `function` only for
    /// nested definitions.
    pub inner_function: String,
    pub function_lines: (usize, usize),
    /// Byte offsets of the masked token in the file.
    pub mask_byte_range: Range<usize>,
    pub original: String,
    pub kind: CodeTokenKind,
    pub strategy: ContextStrategy,
    /// 1-based file line of the mask.
    pub line_no: usize,
    context: Arc<str>,
    mask_in_context: Range<usize>,
}

impl InfillingTask {
    pub fn prefix(&self) -> &str {
        &self.context[..self.mask_in_context.start]
    }

    pub fn suffix(&self) -> &str {
        &self.context[self.mask_in_context.end..]
    }

    /// Full context text; equals `prefix + original + suffix`.
    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn record(&self) -> TaskRecord<'_> {
        TaskRecord {
            task_id: &self.task_id,
            path: self.path.to_string_lossy().into_owned(),
            line_no: self.line_no,
            kind: self.kind,
            original: &self.original,
            context_strategy: self.strategy,
            prefix: self.prefix(),
            suffix: self.suffix(),
        }
    }
}

/// JSONL shape of a task.
#[derive(Debug, Serialize)]
pub struct TaskRecord<'a> {
    pub task_id: &'a str,
    pub path: String,
    pub line_no: usize,
    pub kind: CodeTokenKind,
    pub original: &'a str,
    pub context_strategy: ContextStrategy,
    pub prefix: &'a str,
    pub suffix: &'a str,
}

/// Stable identifier of a masked position.
pub fn task_id(path: &Path, range: &Range<usize>, original: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(path.to_string_lossy().as_bytes());
    hasher.update([0u8]);
    hasher.update(format!("{}:{}", range.start, range.end).as_bytes());
    hasher.update([0u8]);
    hasher.update(original.as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

/// Tasks of one unit plus what was left out.
#[derive(Debug, Clone, Default)]
pub struct TaskSet {
    pub tasks: Vec<InfillingTask>,
    /// Tasks dropped because their context exceeded the token limit.
    pub dropped_too_long: usize,
    /// Tasks in functions rejected by the similarity gate.
    pub gated_out: usize,
}

/// Enumerates one task per maskable token, in file order.
pub fn enumerate_tasks(
    unit: &SourceUnit,
    strategy: ContextStrategy,
    limits: &TaskLimits,
    counter: &dyn TokenCounter,
) -> TaskSet {
    let mut set = TaskSet::default();
    let root = unit.tree.root_node();

    let gate: Option<Vec<bool>> = limits.similarity_gate.map(|threshold| {
        let prints: Vec<_> = unit
            .functions
            .iter()
            .map(|f| {
                let node = root
                    .descendant_for_byte_range(f.def_range.start, f.def_range.end)
                    .expect("function node");
                similarity::fingerprint(node)
            })
            .collect();
        similarity::has_near_duplicate(&prints, threshold)
    });

    let file_tokens = (strategy == ContextStrategy::File).then(|| counter.count(&unit.text));

    for (index, func) in unit.functions.iter().enumerate() {
        let def = def_node(unit, func);
        let sites = classify::mask_sites(unit.language, def, &unit.text);
        if gate.as_ref().is_some_and(|g| !g[index]) {
            set.gated_out += sites.len();
            continue;
        }

        let (context, base): (Arc<str>, isize) = match strategy {
            ContextStrategy::Function => (
                Arc::from(unit.function_text(func)),
                -(func.byte_range.start as isize),
            ),
            ContextStrategy::File => (unit.text.clone(), 0),
            ContextStrategy::SlicedFile => {
                let (pre, post) = slice_file_context(unit, func);
                let text = format!("{pre}{}{post}", unit.function_text(func));
                (Arc::from(text), pre.len() as isize - func.byte_range.start as isize)
            }
        };
        let tokens = file_tokens.unwrap_or_else(|| counter.count(&context));
        if tokens > limits.max_context_tokens {
            set.dropped_too_long += sites.len();
            continue;
        }

        for site in sites {
            let original = unit.text[site.range.clone()].to_string();
            let start = (site.range.start as isize + base) as usize;
            let end = (site.range.end as isize + base) as usize;
            set.tasks.push(InfillingTask {
                task_id: task_id(&unit.path, &site.range, &original),
                path: unit.path.clone(),
                language: unit.language,
                function: func.name.clone(),
                function_index: index,
                inner_function: site.inner_function,
                function_lines: func.line_range,
                line_no: unit.lines.line_of(site.range.start),
                mask_byte_range: site.range,
                original,
                kind: site.kind,
                strategy,
                context: context.clone(),
                mask_in_context: start..end,
            });
        }
    }
    set
}

pub(crate) fn def_node<'t>(unit: &'t SourceUnit, func: &FunctionSpan) -> Node<'t> {
    let root = unit.tree.root_node();
    let mut node = root
        .descendant_for_byte_range(func.def_range.start, func.def_range.end)
        .expect("function node exists");
    while !(classify::is_function_node(unit.language, node) && node.byte_range() == func.def_range) {
        node = node.parent().expect("function node is an ancestor");
    }
    node
}

/// Kind of the token spanning exactly `range` in `unit`, if it is maskable.
/// Used to re-check that a masked span is a single token of a given kind.
pub fn token_kind_at(unit: &SourceUnit, range: Range<usize>) -> Option<CodeTokenKind> {
    let root = unit.tree.root_node();
    let mut node = root.descendant_for_byte_range(range.start, range.end)?;
    loop {
        if node.byte_range() == range {
            if let Some(kind) = classify::classify(unit.language, node, &unit.text) {
                return Some(kind);
            }
        } else if node.start_byte() < range.start || node.end_byte() > range.end {
            return None;
        }
        node = node.parent()?;
    }
}

/// Every maskable token in the unit with its kind, functions in file order.
/// Synthesis uses this to gather in-scope substitutes.
pub fn scope_tokens(unit: &SourceUnit, func: &FunctionSpan) -> Vec<(String, CodeTokenKind)> {
    let def = def_node(unit, func);
    classify::mask_sites(unit.language, def, &unit.text)
        .into_iter()
        .map(|s| (unit.text[s.range].to_string(), s.kind))
        .collect()
}

/// Every identifier spelled inside a function, in order of first
/// appearance. Includes parameters and assignment targets, which are never
/// masked themselves but are valid substitutes for variable uses.
pub fn identifiers_in(unit: &SourceUnit, func: &FunctionSpan) -> Vec<String> {
    let def = def_node(unit, func);
    let mut out = Vec::new();
    collect_identifiers(def, &unit.text, &mut out);
    let mut seen = std::collections::HashSet::new();
    out.retain(|n| seen.insert(n.clone()));
    out
}

fn collect_identifiers(node: Node, text: &str, out: &mut Vec<String>) {
    if node.kind() == "identifier" {
        out.push(text[node.byte_range()].to_string());
        return;
    }
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        collect_identifiers(child, text, out);
    }
}

#[cfg(test)]
mod tests;
