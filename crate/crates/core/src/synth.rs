//! Benchmark synthesis: a clean corpus and a mutated twin in which every
//! function carries exactly one plausible token substitution.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    self, enumerate_tasks, ApproxTokenCounter, CodeTokenKind, ContextStrategy, FunctionSpan, InfillingTask, SourceUnit,
    TaskLimits,
};
use crate::lang::{self, Language, LexemeClass};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("no substitute candidates for {0}")]
    NoCandidates(String),
    #[error("embedding provider: {0}")]
    Embedding(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Similarity between two token spellings, in [0, 1].
pub trait EmbeddingProvider: Send + Sync {
    /// `Ok(None)` means the provider has no opinion on this pair.
    fn similarity(&self, a: &str, b: &str) -> Result<Option<f64>, SynthError>;
}

/// No embedding service configured.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoEmbeddings;

impl EmbeddingProvider for NoEmbeddings {
    fn similarity(&self, _: &str, _: &str) -> Result<Option<f64>, SynthError> {
        Ok(None)
    }
}

/// Pairwise scores computed once by an embedding service and frozen to disk.
///
/// File format: `{"pairs": [["params", "query", 0.81], ...]}`. Lookups are
/// symmetric.
#[derive(Debug, Default, Clone)]
pub struct FrozenScores {
    scores: HashMap<(String, String), f64>,
}

#[derive(Deserialize, Serialize)]
struct FrozenFile {
    pairs: Vec<(String, String, f64)>,
}

impl FrozenScores {
    pub fn load(path: &Path) -> Result<FrozenScores, SynthError> {
        let file: FrozenFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(FrozenScores::from_pairs(file.pairs))
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String, f64)>) -> FrozenScores {
        let mut scores = HashMap::new();
        for (a, b, s) in pairs {
            scores.insert((b.clone(), a.clone()), s);
            scores.insert((a, b), s);
        }
        FrozenScores { scores }
    }
}

impl EmbeddingProvider for FrozenScores {
    fn similarity(&self, a: &str, b: &str) -> Result<Option<f64>, SynthError> {
        Ok(self.scores.get(&(a.to_string(), b.to_string())).copied())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Levenshtein distance over characters divided by the longer length.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let len = a.chars().count().max(b.chars().count());
    if len == 0 {
        0.0
    } else {
        strsim::levenshtein(a, b) as f64 / len as f64
    }
}

/// A substitute for one masked position.
#[derive(Debug, Clone)]
pub struct MutationCandidate {
    pub task: InfillingTask,
    pub substitute: String,
    /// Embedding similarity to the original, or `1 - normalized edit
    /// distance` when the provider has no score for the pair.
    pub similarity: f64,
    pub same_kind: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Closest candidate by embedding similarity, excluding exact synonyms.
    #[default]
    EmbeddingNearest,
    /// Smallest normalized edit distance, ties broken lexicographically.
    DeterministicFallback,
}

fn lexeme_class_of(lang: Language, kind: CodeTokenKind, text: &str) -> Option<LexemeClass> {
    kind.lexeme_classes()
        .iter()
        .copied()
        .find(|&class| lang::is_complete_lexeme(lang, class, text))
}

/// Counts ERROR and MISSING nodes in a parse.
fn error_count(lang: Language, text: &str) -> usize {
    let Some(tree) = lang.parse(text) else { return usize::MAX };
    let mut count = 0;
    let mut cursor = tree.walk();
    let mut visited_children = false;
    loop {
        if !visited_children {
            let node = cursor.node();
            if node.is_error() || node.is_missing() {
                count += 1;
            }
            if node.has_error() && cursor.goto_first_child() {
                continue;
            }
        }
        if cursor.goto_next_sibling() {
            visited_children = false;
        } else if cursor.goto_parent() {
            visited_children = true;
        } else {
            break;
        }
    }
    count
}

/// True if substituting `substitute` into the task's context parses no worse
/// than the original and the new token is still one token of a compatible
/// kind.
pub fn substitution_parses(task: &InfillingTask, substitute: &str) -> bool {
    let mutated = format!("{}{}{}", task.prefix(), substitute, task.suffix());
    if error_count(task.language, &mutated) > error_count(task.language, task.context()) {
        return false;
    }
    let Ok(unit) = catalog::parse_unit(&task.path, task.language, &mutated) else {
        return false;
    };
    let start = task.prefix().len();
    let kind = catalog::token_kind_at(&unit, start..start + substitute.len());
    match task.kind {
        CodeTokenKind::VariableUse | CodeTokenKind::FunctionCall => {
            matches!(kind, Some(CodeTokenKind::VariableUse | CodeTokenKind::FunctionCall))
        }
        other => kind == Some(other),
    }
}

/// Substitutes for the masked token, most similar first.
///
/// Identifiers draw from `scope_tokens` (names of a compatible kind),
/// operators from the operator's interchangeability group, literals from
/// scope literals of the same lexeme class plus the integer's neighbours.
pub fn enumerate_mutations(
    task: &InfillingTask,
    scope_tokens: &[(String, CodeTokenKind)],
    embeddings: &dyn EmbeddingProvider,
) -> Result<Vec<MutationCandidate>, SynthError> {
    let lang = task.language;
    let mut pool: BTreeSet<(String, bool)> = BTreeSet::new();
    match task.kind {
        CodeTokenKind::VariableUse | CodeTokenKind::FunctionCall => {
            for (text, kind) in scope_tokens {
                let compatible = matches!(kind, CodeTokenKind::VariableUse | CodeTokenKind::FunctionCall);
                if compatible
                    && lang::is_complete_lexeme(lang, LexemeClass::Identifier, text)
                    && !lang::is_keyword(lang, text)
                {
                    pool.insert((text.clone(), *kind == task.kind));
                }
            }
        }
        CodeTokenKind::Operator => {
            if let Some(group) = lang.operator_group(&task.original) {
                pool.extend(group.iter().map(|op| (op.to_string(), true)));
            }
        }
        CodeTokenKind::Literal => {
            let class = lexeme_class_of(lang, CodeTokenKind::Literal, &task.original);
            for (text, kind) in scope_tokens {
                if *kind == CodeTokenKind::Literal && class.is_some() && lexeme_class_of(lang, *kind, text) == class {
                    pool.insert((text.clone(), true));
                }
            }
            if let Ok(n) = task.original.parse::<u64>() {
                if n > 0 {
                    pool.insert(((n - 1).to_string(), true));
                }
                pool.insert(((n + 1).to_string(), true));
            }
        }
    }
    // an identifier spelled both as a use and as a call keeps the same-kind flag
    let mut merged: HashMap<String, bool> = HashMap::new();
    for (text, same) in pool {
        *merged.entry(text).or_insert(false) |= same;
    }

    let mut out = Vec::new();
    let mut names: Vec<_> = merged.into_iter().collect();
    names.sort();
    for (substitute, same_kind) in names {
        if substitute == task.original || !substitution_parses(task, &substitute) {
            continue;
        }
        let similarity = match embeddings.similarity(&task.original, &substitute)? {
            Some(s) => s.clamp(0.0, 1.0),
            None => 1.0 - normalized_edit_distance(&task.original, &substitute),
        };
        out.push(MutationCandidate {
            task: task.clone(),
            substitute,
            similarity,
            same_kind,
        });
    }
    if out.is_empty() {
        return Err(SynthError::NoCandidates(format!(
            "{}:{} `{}`",
            task.path.display(),
            task.line_no,
            task.original
        )));
    }
    out.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.substitute.cmp(&b.substitute))
    });
    Ok(out)
}

const IDENTITY: f64 = 1.0 - 1e-9;

/// Picks one candidate. Panics on an empty list.
pub fn select_mutation(candidates: &[MutationCandidate], policy: SelectionPolicy) -> &MutationCandidate {
    assert!(!candidates.is_empty(), "select_mutation needs candidates");
    match policy {
        SelectionPolicy::EmbeddingNearest => candidates
            .iter()
            .filter(|c| c.similarity < IDENTITY)
            .max_by(|a, b| {
                a.similarity
                    .total_cmp(&b.similarity)
                    .then_with(|| b.substitute.cmp(&a.substitute))
            })
            .unwrap_or(&candidates[0]),
        SelectionPolicy::DeterministicFallback => candidates
            .iter()
            .min_by(|a, b| {
                let da = normalized_edit_distance(&a.task.original, &a.substitute);
                let db = normalized_edit_distance(&b.task.original, &b.substitute);
                da.total_cmp(&db).then_with(|| a.substitute.cmp(&b.substitute))
            })
            .unwrap(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Clean,
    Mutated,
}

/// Where a function came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repo: Option<String>,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit: Option<String>,
    /// File line of the function's first line.
    pub first_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutation {
    /// 1-based line within `function_text`.
    pub line_no: usize,
    pub original: String,
    pub substitute: String,
    pub kind: CodeTokenKind,
    /// Byte offset of the substitution within `function_text`.
    pub offset: usize,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    /// Shared by a clean sample and its mutated twin.
    pub pair: String,
    pub label: Label,
    pub language: Language,
    pub function_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation: Option<Mutation>,
    pub source_ref: SourceRef,
}

impl LabeledSample {
    /// File line carrying the mutation.
    pub fn mutated_file_line(&self) -> Option<usize> {
        self.mutation.as_ref().map(|m| self.source_ref.first_line + m.line_no - 1)
    }

    /// Reverts the recorded mutation, returning the clean text.
    pub fn reverted_text(&self) -> Option<String> {
        let m = self.mutation.as_ref()?;
        let end = m.offset + m.substitute.len();
        Some(format!(
            "{}{}{}",
            &self.function_text[..m.offset],
            m.original,
            &self.function_text[end..]
        ))
    }
}

/// A curated TIB-free function.
#[derive(Debug, Clone)]
pub struct CleanFunction {
    pub unit: Arc<SourceUnit>,
    pub index: usize,
    pub repo: Option<String>,
    pub commit: Option<String>,
}

impl CleanFunction {
    pub fn span(&self) -> &FunctionSpan {
        &self.unit.functions[self.index]
    }

    pub fn text(&self) -> &str {
        self.unit.function_text(self.span())
    }

    fn pair_id(&self) -> String {
        let span = self.span();
        catalog::task_id(&self.unit.path, &span.byte_range, &span.name)
    }
}

/// Every function of every unit, in order.
pub fn clean_functions(units: &[Arc<SourceUnit>]) -> Vec<CleanFunction> {
    units
        .iter()
        .flat_map(|unit| {
            (0..unit.functions.len()).map(move |index| CleanFunction {
                unit: unit.clone(),
                index,
                repo: None,
                commit: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub seed: u64,
    /// Number of functions to sample by length decile; `None` keeps all.
    pub sample_size: Option<usize>,
    pub policy: SelectionPolicy,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            seed: 0,
            sample_size: None,
            policy: SelectionPolicy::DeterministicFallback,
        }
    }
}

/// The bipartite dataset.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// TIB-free samples.
    pub clean: Vec<LabeledSample>,
    /// One mutation per sample.
    pub mutated: Vec<LabeledSample>,
    /// Pair ids of sampled functions for which no substitute parsed; they
    /// appear in `clean` only.
    pub unmutable: Vec<String>,
}

fn stable_hash(text: &str) -> u64 {
    let mut h = std::hash::DefaultHasher::new();
    text.hash(&mut h);
    h.finish()
}

/// Indices chosen by proportional sampling over length deciles. `lengths`
/// are ranked (ties by index), split into ten rank deciles, and each decile
/// receives a largest-remainder share of `n`. The result is in input order.
pub fn sample_by_length_decile(lengths: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let total = lengths.len();
    if n >= total {
        return (0..total).collect();
    }
    let mut ranked: Vec<usize> = (0..total).collect();
    ranked.sort_by_key(|&i| (lengths[i], i));
    let deciles: Vec<&[usize]> = (0..10).map(|d| &ranked[d * total / 10..(d + 1) * total / 10]).collect();

    let mut quotas: Vec<usize> = deciles.iter().map(|d| n * d.len() / total).collect();
    let mut remainders: Vec<(usize, usize)> = deciles
        .iter()
        .enumerate()
        .map(|(i, d)| ((n * d.len()) % total, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - quotas.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(short) {
        quotas[i] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (decile, quota) in deciles.iter().zip(quotas) {
        let mut members = decile.to_vec();
        members.shuffle(&mut rng);
        chosen.extend(members.into_iter().take(quota));
    }
    chosen.sort_unstable();
    chosen
}

fn dedent(text: &str) -> (String, Vec<(usize, usize)>) {
    // returns the dedented text and, per original line, (line start, bytes removed)
    let indent = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start_matches([' ', '\t']).len())
        .min()
        .unwrap_or(0);
    let mut out = String::with_capacity(text.len());
    let mut removed = Vec::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let lead = line.len() - line.trim_start_matches([' ', '\t']).len();
        let cut = lead.min(indent);
        out.push_str(&line[cut..]);
        removed.push((start, cut));
        start += line.len();
    }
    (out, removed)
}

fn shift_offset(offset: usize, removed: &[(usize, usize)]) -> usize {
    let mut shift = 0;
    for &(line_start, cut) in removed {
        if line_start > offset {
            break;
        }
        shift += cut;
    }
    offset - shift
}

fn mutate_function(
    func: &CleanFunction,
    cfg: &SynthesisConfig,
    embeddings: &dyn EmbeddingProvider,
    file_scope: &[(String, CodeTokenKind)],
) -> Result<Option<LabeledSample>, SynthError> {
    let unit = &func.unit;
    let span = func.span();
    let pair = func.pair_id();
    let limits = TaskLimits {
        max_context_tokens: usize::MAX,
        similarity_gate: None,
    };
    let set = enumerate_tasks(unit, ContextStrategy::Function, &limits, &ApproxTokenCounter);
    let mut tasks: Vec<InfillingTask> = set.tasks.into_iter().filter(|t| t.function_index == func.index).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_hash(&pair));
    tasks.shuffle(&mut rng);

    let mut fn_scope = catalog::scope_tokens(unit, span);
    fn_scope.extend(
        catalog::identifiers_in(unit, span)
            .into_iter()
            .map(|n| (n, CodeTokenKind::VariableUse)),
    );

    let (clean_text, removed) = dedent(unit.function_text(span));
    for task in tasks {
        let candidates = match enumerate_mutations(&task, &fn_scope, embeddings) {
            Ok(c) => c,
            Err(SynthError::NoCandidates(_)) => match enumerate_mutations(&task, file_scope, embeddings) {
                Ok(c) => c,
                Err(SynthError::NoCandidates(_)) => continue,
                Err(e) => return Err(e),
            },
            Err(e) => return Err(e),
        };
        let chosen = select_mutation(&candidates, cfg.policy);
        let local = task.mask_byte_range.start - span.byte_range.start;
        let offset = shift_offset(local, &removed);
        let end = offset + task.original.len();
        debug_assert_eq!(&clean_text[offset..end], task.original);
        let mutated_text = format!("{}{}{}", &clean_text[..offset], chosen.substitute, &clean_text[end..]);
        let reparsed = unit.language.parse(&mutated_text);
        if reparsed.is_none_or(|t| t.root_node().has_error()) {
            continue;
        }
        let line_no = clean_text[..offset].matches('\n').count() + 1;
        return Ok(Some(LabeledSample {
            id: format!("m-{pair}"),
            pair: pair.clone(),
            label: Label::Mutated,
            language: unit.language,
            function_text: mutated_text,
            mutation: Some(Mutation {
                line_no,
                original: task.original.clone(),
                substitute: chosen.substitute.clone(),
                kind: task.kind,
                offset,
            }),
            source_ref: source_ref(func),
        }));
    }
    Ok(None)
}

fn source_ref(func: &CleanFunction) -> SourceRef {
    SourceRef {
        repo: func.repo.clone(),
        path: func.unit.path.to_string_lossy().into_owned(),
        commit: func.commit.clone(),
        first_line: func.span().line_range.0,
    }
}

/// Builds the clean corpus and its mutated twin. Reproducible from
/// `cfg.seed` regardless of worker scheduling.
pub fn build_dataset(
    functions: &[CleanFunction],
    cfg: &SynthesisConfig,
    embeddings: &dyn EmbeddingProvider,
) -> Result<Dataset, SynthError> {
    let chosen: Vec<&CleanFunction> = match cfg.sample_size {
        Some(n) => {
            let lengths: Vec<usize> = functions.iter().map(|f| f.text().lines().count()).collect();
            sample_by_length_decile(&lengths, n, cfg.seed)
                .into_iter()
                .map(|i| &functions[i])
                .collect()
        }
        None => functions.iter().collect(),
    };

    // file-level substitutes, keyed by unit path
    let mut file_scopes: HashMap<&Path, Vec<(String, CodeTokenKind)>> = HashMap::new();
    for f in &chosen {
        file_scopes.entry(f.unit.path.as_path()).or_insert_with(|| {
            f.unit
                .functions
                .iter()
                .flat_map(|span| catalog::scope_tokens(&f.unit, span))
                .collect()
        });
    }

    let results: Vec<Result<(LabeledSample, Option<LabeledSample>), SynthError>> = chosen
        .par_iter()
        .map(|f| {
            let mutated = mutate_function(f, cfg, embeddings, &file_scopes[f.unit.path.as_path()])?;
            let pair = f.pair_id();
            let clean = LabeledSample {
                id: format!("c-{pair}"),
                pair,
                label: Label::Clean,
                language: f.unit.language,
                function_text: dedent(f.text()).0,
                mutation: None,
                source_ref: source_ref(f),
            };
            Ok((clean, mutated))
        })
        .collect();

    let mut dataset = Dataset::default();
    for result in results {
        let (clean, mutated) = result?;
        match mutated {
            Some(m) => dataset.mutated.push(m),
            None => dataset.unmutable.push(clean.pair.clone()),
        }
        dataset.clean.push(clean);
    }
    if !dataset.unmutable.is_empty() {
        tracing::info!(count = dataset.unmutable.len(), "functions without a parseable substitute kept clean-only");
    }
    Ok(dataset)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SynthError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<LabeledSample>, SynthError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SynthError::from))
        .collect()
}
