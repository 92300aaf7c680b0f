//! End-to-end runs: scan a repository through the cascade, synthesize the
//! bipartite dataset, and measure one stage or template against it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    enumerate_tasks, parse_unit, ApproxTokenCounter, ContextStrategy, InfillingTask, SourceUnit, TaskLimits,
};
use crate::config::{looks_generated, ConfigError, RunConfig};
use crate::consistency::{timed_check, ConsistencyConfig, VerdictRecord};
use crate::gateway::{
    BackendKind, ChatBackend, ChatMessage, CompletionBackend, GatewayError, HttpEmbeddings, PropertySchema,
};
use crate::metrics::{score_infilling, score_run, InfillingScore, MetricsSummary, SampleFindings};
use crate::prompt::{
    filter_findings, run_exchange, BugFinding, FilterPolicy, FindingsRecord, HighlightSet, PromptTemplate, Snippet,
    TemplateSet,
};
use crate::synth::{
    build_dataset, clean_functions, EmbeddingProvider, FrozenScores, Label, LabeledSample, NoEmbeddings, SynthError,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("worker pool: {0}")]
    Pool(String),
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Parsed files under the configured root, keyed by relative path.
#[derive(Debug, Default)]
pub struct Corpus {
    pub units: Vec<Arc<SourceUnit>>,
    pub failed_files: Vec<PathBuf>,
    pub generated_files: Vec<PathBuf>,
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus, PipelineError> {
    let mut corpus = Corpus::default();
    for rel in cfg.discover()? {
        let abs = cfg.root.join(&rel);
        let text = match fs::read_to_string(&abs) {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!(path = %rel.display(), error = %e, "unreadable file skipped");
                corpus.failed_files.push(rel);
                continue;
            }
        };
        if looks_generated(&text) {
            corpus.generated_files.push(rel);
            continue;
        }
        let lang = crate::lang::Language::from_extension(&rel).expect("discovered files have a language");
        match parse_unit(&rel, lang, &text) {
            Ok(unit) => corpus.units.push(Arc::new(unit)),
            Err(e) => {
                tracing::warn!(path = %rel.display(), error = %e, "file skipped");
                corpus.failed_files.push(rel);
            }
        }
    }
    Ok(corpus)
}

/// Backends of a scan, in stage order.
#[derive(Clone)]
pub struct Backends {
    pub locals: Vec<Arc<dyn CompletionBackend>>,
    pub chat: Arc<dyn ChatBackend>,
}

impl Backends {
    pub fn from_config(cfg: &RunConfig) -> Result<Backends, PipelineError> {
        cfg.validate_scan()?;
        let (chat, locals) = cfg.stages.split_last().expect("validated");
        Ok(Backends {
            locals: locals
                .iter()
                .map(|p| p.completion_backend())
                .collect::<Result<_, _>>()?,
            chat: chat.chat_backend()?,
        })
    }
}

/// Counts every chat request, reformat retries included.
struct CountingChat<'a> {
    inner: &'a dyn ChatBackend,
    calls: &'a AtomicU64,
}

impl ChatBackend for CountingChat<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, messages: &[ChatMessage], schema: &PropertySchema) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(messages, schema)
    }
}

/// Task flow through one stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFunnel {
    pub name: String,
    pub entered: u64,
    pub dropped: u64,
    pub survived: u64,
    /// Tasks whose check failed; they are passed on.
    pub errors: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub api: f64,
    pub compute: f64,
    pub total: f64,
}

/// Accounting of a scan. `initial_tasks` equals the sum of `dropped` over
/// all stages plus the final stage's `survived` plus `unprocessed_tasks`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub files_scanned: u64,
    pub files_failed: u64,
    pub files_generated: u64,
    pub tasks_too_long: u64,
    pub tasks_gated_out: u64,
    pub initial_tasks: u64,
    pub stages: Vec<StageFunnel>,
    pub unprocessed_tasks: u64,
    pub functions_escalated: u64,
    pub chat_calls: u64,
    pub chat_failures: u64,
    pub findings: u64,
    pub findings_excluded: u64,
    /// Kept findings on lines without a surviving task.
    pub findings_untraced: u64,
    pub reports: u64,
    pub partial: bool,
    pub cost: CostEstimate,
}

impl RunSummary {
    pub fn accounted_tasks(&self) -> u64 {
        self.stages.iter().map(|s| s.dropped).sum::<u64>()
            + self.stages.last().map_or(0, |s| s.survived)
            + self.unprocessed_tasks
    }
}

/// One reported bug, ready for triage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repo: Option<String>,
    pub file: String,
    pub function: String,
    pub line_no: usize,
    pub original: String,
    pub task_ids: Vec<String>,
    pub finding: BugFinding,
    /// Stages that flagged the line, in order.
    pub stage_trace: Vec<String>,
    /// Local-stage time spent on the line's tasks.
    pub elapsed_ms: u64,
    pub cost_estimate: f64,
}

#[derive(Debug, Default)]
pub struct ScanOutput {
    pub tasks: Vec<Arc<InfillingTask>>,
    pub verdicts: Vec<VerdictRecord>,
    pub findings: Vec<FindingsRecord>,
    pub reports: Vec<DetectionReport>,
    pub summary: RunSummary,
}

enum ChatResult {
    Skipped,
    Failed,
    Done {
        record: FindingsRecord,
        kept: Vec<BugFinding>,
        excluded: usize,
    },
}

/// Loads the corpus, builds backends from the config and runs the cascade.
pub fn scan(cfg: &RunConfig) -> Result<ScanOutput, PipelineError> {
    let backends = Backends::from_config(cfg)?;
    let corpus = load_corpus(cfg)?;
    scan_with(cfg, &corpus, &backends)
}

/// Runs the cascade over a loaded corpus: local consistency stages keep
/// inconsistent tasks, survivors are grouped per function and reviewed by
/// the chat stage with their lines highlighted, and filtered findings on
/// surviving lines become reports.
pub fn scan_with(cfg: &RunConfig, corpus: &Corpus, backends: &Backends) -> Result<ScanOutput, PipelineError> {
    let started = Instant::now();
    let over_time = || cfg.budget.max_wall_secs.is_some_and(|s| started.elapsed().as_secs_f64() > s);
    let set = TemplateSet::builtin();
    let template = set.get(&cfg.template_id).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let workers = pool(cfg.workers)?;
    let mut out = ScanOutput::default();
    let s = &mut out.summary;
    s.files_scanned = corpus.units.len() as u64;
    s.files_failed = corpus.failed_files.len() as u64;
    s.files_generated = corpus.generated_files.len() as u64;

    let units: BTreeMap<&Path, &Arc<SourceUnit>> = corpus.units.iter().map(|u| (u.path.as_path(), u)).collect();
    let task_sets: Vec<_> = workers.install(|| {
        corpus
            .units
            .par_iter()
            .map(|u| enumerate_tasks(u, cfg.context_strategy, &cfg.limits, &ApproxTokenCounter))
            .collect()
    });
    for ts in task_sets {
        s.tasks_too_long += ts.dropped_too_long as u64;
        s.tasks_gated_out += ts.gated_out as u64;
        out.tasks.extend(ts.tasks.into_iter().map(Arc::new));
    }
    s.initial_tasks = out.tasks.len() as u64;

    let mut survivors: Vec<Arc<InfillingTask>> = out.tasks.clone();
    let mut elapsed: HashMap<String, u64> = HashMap::new();
    for backend in &backends.locals {
        let mut funnel = StageFunnel {
            name: backend.name().to_string(),
            entered: survivors.len() as u64,
            ..StageFunnel::default()
        };
        if over_time() {
            s.partial = true;
            s.unprocessed_tasks += survivors.len() as u64;
            survivors.clear();
            s.stages.push(funnel);
            continue;
        }
        let results: Vec<_> = workers.install(|| {
            survivors
                .par_iter()
                .map(|t| timed_check(t, backend.as_ref(), &cfg.consistency))
                .collect()
        });
        let mut next = Vec::new();
        for (task, result) in survivors.iter().zip(results) {
            match result {
                Ok(record) => {
                    *elapsed.entry(task.task_id.clone()).or_default() += record.elapsed_ms;
                    if !record.verdict.consistent {
                        next.push(task.clone());
                    }
                    out.verdicts.push(record);
                }
                Err(e) => {
                    tracing::warn!(task = %task.task_id, error = %e, "check failed; task passed on");
                    funnel.errors += 1;
                    next.push(task.clone());
                }
            }
        }
        funnel.survived = next.len() as u64;
        funnel.dropped = funnel.entered - funnel.survived;
        s.stages.push(funnel);
        survivors = next;
    }

    // survivors per function, in file order
    let mut groups: BTreeMap<(PathBuf, usize), Vec<Arc<InfillingTask>>> = BTreeMap::new();
    for t in &survivors {
        groups.entry((t.path.clone(), t.function_index)).or_default().push(t.clone());
    }
    let rounds = template.rounds.len() as u64;
    let admitted = cfg.budget.max_api_calls.map_or(usize::MAX, |m| (m / rounds.max(1)) as usize);
    let calls = AtomicU64::new(0);
    let counting = CountingChat {
        inner: backends.chat.as_ref(),
        calls: &calls,
    };
    let group_list: Vec<(&(PathBuf, usize), &Vec<Arc<InfillingTask>>)> = groups.iter().collect();
    let results: Vec<ChatResult> = workers.install(|| {
        group_list
            .par_iter()
            .enumerate()
            .map(|(i, ((path, index), tasks))| {
                if i >= admitted || over_time() {
                    return ChatResult::Skipped;
                }
                let unit = units[path.as_path()];
                let span = &unit.functions[*index];
                let snippet = Snippet::new(
                    format!("{}::{}", path.display(), span.name),
                    unit.language,
                    unit.function_text(span),
                    span.line_range.0,
                );
                let highlights = template
                    .takes_highlights()
                    .then(|| HighlightSet::new(&snippet, tasks.iter().map(|t| t.line_no), cfg.highlight_cap))
                    .transpose();
                let result = highlights
                    .map_err(crate::prompt::ExchangeError::from)
                    .and_then(|hl| run_exchange(set, template, &snippet, hl.as_ref(), &counting));
                match result {
                    Ok(outcome) => {
                        let (kept, excluded) = filter_findings(&outcome.findings, &cfg.filter);
                        ChatResult::Done {
                            record: FindingsRecord {
                                snippet_id: snippet.id.clone(),
                                findings: outcome.findings,
                                template_id: template.template_id.clone(),
                                rounds_used: outcome.rounds_used,
                                token_cost: Some(outcome.token_cost),
                            },
                            kept,
                            excluded: excluded.len(),
                        }
                    }
                    Err(e) => {
                        tracing::warn!(snippet = %snippet.id, error = %e, "chat review failed");
                        ChatResult::Failed
                    }
                }
            })
            .collect()
    });

    let chat_name = backends.chat.name().to_string();
    let price = cfg
        .stages
        .last()
        .and_then(|p| p.price_per_call)
        .unwrap_or(cfg.cost.c_api);
    let local_names: Vec<String> = backends.locals.iter().map(|b| b.name().to_string()).collect();
    let mut chat_funnel = StageFunnel {
        name: chat_name.clone(),
        entered: survivors.len() as u64,
        ..StageFunnel::default()
    };
    for ((_, tasks), result) in group_list.into_iter().zip(results) {
        let n = tasks.len() as u64;
        let (record, kept, excluded) = match result {
            ChatResult::Skipped => {
                s.partial = true;
                chat_funnel.entered -= n;
                s.unprocessed_tasks += n;
                continue;
            }
            ChatResult::Failed => {
                s.functions_escalated += 1;
                s.chat_failures += 1;
                chat_funnel.errors += n;
                chat_funnel.dropped += n;
                continue;
            }
            ChatResult::Done { record, kept, excluded } => (record, kept, excluded),
        };
        s.functions_escalated += 1;
        s.findings += record.findings.len() as u64;
        s.findings_excluded += excluded as u64;
        let mut by_line: BTreeMap<usize, Vec<&Arc<InfillingTask>>> = BTreeMap::new();
        for t in tasks {
            by_line.entry(t.line_no).or_default().push(t);
        }
        let mut reported_lines = BTreeSet::new();
        let share = price * record.rounds_used as f64;
        for finding in kept {
            let Some(line) = finding.line().filter(|l| by_line.contains_key(l)) else {
                s.findings_untraced += 1;
                continue;
            };
            if !reported_lines.insert(line) {
                continue;
            }
            let line_tasks = &by_line[&line];
            let first = line_tasks[0];
            out.reports.push(DetectionReport {
                repo: cfg.repo.clone(),
                file: first.path.to_string_lossy().into_owned(),
                function: first.function.clone(),
                line_no: line,
                original: first.original.clone(),
                task_ids: line_tasks.iter().map(|t| t.task_id.clone()).collect(),
                finding,
                stage_trace: local_names.iter().cloned().chain([chat_name.clone()]).collect(),
                elapsed_ms: line_tasks.iter().map(|t| elapsed.get(&t.task_id).copied().unwrap_or(0)).sum(),
                cost_estimate: share,
            });
        }
        let reported: u64 = reported_lines.iter().map(|l| by_line[l].len() as u64).sum();
        chat_funnel.survived += reported;
        chat_funnel.dropped += n - reported;
        out.findings.push(record);
    }
    s.stages.push(chat_funnel);
    s.reports = out.reports.len() as u64;
    s.chat_calls = calls.load(Ordering::Relaxed);
    let local_secs: f64 = out.verdicts.iter().map(|v| v.elapsed_ms as f64 / 1000.0).sum();
    s.cost.api = s.chat_calls as f64 * price;
    s.cost.compute = local_secs * cfg.cost.c_comp;
    s.cost.total = s.cost.api + s.cost.compute;
    if s.partial {
        tracing::warn!(unprocessed = s.unprocessed_tasks, "budget exhausted; results are partial");
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const FINDINGS_FILE: &str = "findings.jsonl";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CLEAN_FILE: &str = "clean.jsonl";
pub const MUTATED_FILE: &str = "mutated.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

impl ScanOutput {
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(TASKS_FILE), self.tasks.iter().map(|t| t.record()))?;
        write_jsonl(&dir.join(VERDICTS_FILE), &self.verdicts)?;
        write_jsonl(&dir.join(FINDINGS_FILE), &self.findings)?;
        write_jsonl(&dir.join(REPORTS_FILE), &self.reports)?;
        write_json(&dir.join(SUMMARY_FILE), &self.summary)
    }
}

/// Human-readable triage list followed by the stage funnel.
pub fn render_report(reports: &[DetectionReport], summary: Option<&RunSummary>) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    for (i, r) in reports.iter().enumerate() {
        let f = &r.finding;
        let _ = writeln!(out, "[{}] {}:{} in {} (token `{}`)", i + 1, r.file, r.line_no, r.function, r.original);
        let _ = writeln!(out, "    line: {}", f.code_line.trim());
        if let Some(fix) = &f.fixed_line {
            let _ = writeln!(out, "    fix:  {}", fix.trim());
        }
        if let Some(c) = &f.category {
            let _ = writeln!(out, "    category: {c}");
        }
        let _ = writeln!(out, "    {}", f.explanation);
        let _ = writeln!(out, "    stages: {}", r.stage_trace.join(" -> "));
    }
    if reports.is_empty() {
        out.push_str("no reports\n");
    }
    if let Some(s) = summary {
        let _ = writeln!(out, "\n{} files, {} tasks", s.files_scanned, s.initial_tasks);
        for st in &s.stages {
            let _ = writeln!(
                out,
                "  {:<16} in {:>7}  dropped {:>7}  kept {:>7}  errors {}",
                st.name, st.entered, st.dropped, st.survived, st.errors
            );
        }
        if s.unprocessed_tasks > 0 {
            let _ = writeln!(out, "  unprocessed      {:>7}", s.unprocessed_tasks);
        }
        let _ = writeln!(
            out,
            "{} reports, {} chat calls, est. cost ${:.2}{}",
            s.reports,
            s.chat_calls,
            s.cost.total,
            if s.partial { " (partial)" } else { "" }
        );
    }
    out
}

/// Reads the artifacts written by [`ScanOutput::write`].
pub fn read_scan_dir(dir: &Path) -> Result<(Vec<DetectionReport>, Option<RunSummary>), PipelineError> {
    let text = fs::read_to_string(dir.join(REPORTS_FILE))?;
    let reports = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::from))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = match fs::read_to_string(dir.join(SUMMARY_FILE)) {
        Ok(t) => Some(serde_json::from_str(&t).map_err(std::io::Error::from)?),
        Err(_) => None,
    };
    Ok((reports, summary))
}

/// Counts of a synthesis run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub files: u64,
    pub functions: u64,
    pub clean: u64,
    pub mutated: u64,
    pub unmutable: Vec<String>,
}

fn embeddings(cfg: &RunConfig) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
    Ok(match &cfg.embeddings {
        None => Box::new(NoEmbeddings),
        Some(p) if p.kind == BackendKind::Http => Box::new(HttpEmbeddings::new(p.clone())),
        Some(p) => match &p.fixture {
            Some(path) => Box::new(FrozenScores::load(path)?),
            None => Box::new(NoEmbeddings),
        },
    })
}

/// Builds D and D′ from the configured corpus and writes them to the
/// output directory.
pub fn synthesize(cfg: &RunConfig) -> Result<(crate::synth::Dataset, SynthesisSummary), PipelineError> {
    let corpus = load_corpus(cfg)?;
    let provider = embeddings(cfg)?;
    let functions = clean_functions(&corpus.units);
    let dataset = pool(cfg.workers)?.install(|| build_dataset(&functions, &cfg.synthesis, provider.as_ref()))?;
    let summary = SynthesisSummary {
        files: corpus.units.len() as u64,
        functions: functions.len() as u64,
        clean: dataset.clean.len() as u64,
        mutated: dataset.mutated.len() as u64,
        unmutable: dataset.unmutable.clone(),
    };
    fs::create_dir_all(&cfg.output_dir)?;
    write_jsonl(&cfg.output_dir.join(CLEAN_FILE), &dataset.clean)?;
    write_jsonl(&cfg.output_dir.join(MUTATED_FILE), &dataset.mutated)?;
    write_json(&cfg.output_dir.join("synthesis.json"), &summary)?;
    Ok((dataset, summary))
}

/// The masked position a sample is judged at: the substitute in a mutated
/// sample, the original token at the same offset in its clean twin.
pub fn sample_task(sample: &LabeledSample, twin: Option<&LabeledSample>) -> Option<InfillingTask> {
    let m = sample.mutation.as_ref().or(twin?.mutation.as_ref())?;
    let len = match sample.label {
        Label::Mutated => m.substitute.len(),
        Label::Clean => m.original.len(),
    };
    let range = m.offset..m.offset + len;
    let unit = parse_unit(Path::new(&sample.id), sample.language, &sample.function_text).ok()?;
    let limits = TaskLimits {
        max_context_tokens: usize::MAX,
        similarity_gate: None,
    };
    enumerate_tasks(&unit, ContextStrategy::Function, &limits, &ApproxTokenCounter)
        .tasks
        .into_iter()
        .find(|t| t.mask_byte_range == range)
}

fn pair_index(clean: &[LabeledSample], mutated: &[LabeledSample]) -> HashMap<String, LabeledSample> {
    mutated
        .iter()
        .chain(clean)
        .map(|s| (s.pair.clone(), s.clone()))
        .filter(|(_, s)| s.label == Label::Mutated)
        .collect()
}

/// Runs one completion stage on every labeled masked position. Clean
/// samples without a mutated twin have no position and are skipped.
pub fn measure_stage(
    clean: &[LabeledSample],
    mutated: &[LabeledSample],
    backend: &dyn CompletionBackend,
    cfg: &ConsistencyConfig,
    workers: usize,
) -> Result<(InfillingScore, Vec<VerdictRecord>), PipelineError> {
    if clean.is_empty() && mutated.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let twins = pair_index(clean, mutated);
    let samples: Vec<&LabeledSample> = mutated.iter().chain(clean).collect();
    let results: Vec<Option<(Label, VerdictRecord)>> = pool(workers)?.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let Some(task) = sample_task(s, twins.get(&s.pair)) else {
                    tracing::debug!(sample = %s.id, "no masked position");
                    return Ok(None);
                };
                match timed_check(&Arc::new(task), backend, cfg) {
                    Ok(r) => Ok(Some((s.label, r))),
                    Err(crate::consistency::ConsistencyError::Gateway(e)) => {
                        tracing::warn!(sample = %s.id, error = %e, "check failed; scored as consistent");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_, _>>()
    })
    .map_err(|e: crate::consistency::ConsistencyError| ConfigError::Invalid(e.to_string()))?;
    let records: Vec<(Label, VerdictRecord)> = results.into_iter().flatten().collect();
    let score = score_infilling(records.iter().map(|(l, r)| (*l, &r.verdict)));
    Ok((score, records.into_iter().map(|(_, r)| r).collect()))
}

/// Highlighted lines for a controlled run: the mutated line, if any, plus
/// random lines of the sample, at most `cap` in total.
pub fn random_highlights(sample: &LabeledSample, cap: usize, seed: u64) -> HighlightSet {
    let snippet = Snippet::from_sample(sample);
    let mut h = std::hash::DefaultHasher::new();
    sample.id.hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.finish());
    let mut lines: Vec<usize> = sample.mutated_file_line().into_iter().collect();
    let total = rng.random_range(1..=cap.max(1));
    let pool = (snippet.first_line..=snippet.last_line()).filter(|l| !lines.contains(l));
    let extra = total.saturating_sub(lines.len());
    lines.extend(pool.choose_multiple(&mut rng, extra));
    HighlightSet::new(&snippet, lines, cap).expect("lines drawn from the snippet")
}

/// Result of a template measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemplateMeasurement {
    pub summary: MetricsSummary,
    pub chat_calls: u64,
    pub cost: f64,
    #[serde(skip)]
    pub findings: Vec<FindingsRecord>,
}

/// Reviews every sample with `template` and scores the filtered findings.
pub fn measure_template(
    clean: &[LabeledSample],
    mutated: &[LabeledSample],
    template: &PromptTemplate,
    chat: &dyn ChatBackend,
    filter: &FilterPolicy,
    highlight: Option<(usize, u64)>,
    price_per_call: f64,
    workers: usize,
) -> Result<TemplateMeasurement, PipelineError> {
    if clean.is_empty() && mutated.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let set = TemplateSet::builtin();
    let calls = AtomicU64::new(0);
    let counting = CountingChat { inner: chat, calls: &calls };
    let samples: Vec<&LabeledSample> = mutated.iter().chain(clean).collect();
    let results: Vec<(SampleFindings, Option<FindingsRecord>)> = pool(workers)?.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let snippet = Snippet::from_sample(s);
                let hl = highlight.map(|(cap, seed)| random_highlights(s, cap, seed));
                match run_exchange(set, template, &snippet, hl.as_ref(), &counting) {
                    Ok(outcome) => {
                        let (kept, excluded) = filter_findings(&outcome.findings, filter);
                        let record = FindingsRecord {
                            snippet_id: s.id.clone(),
                            findings: outcome.findings,
                            template_id: template.template_id.clone(),
                            rounds_used: outcome.rounds_used,
                            token_cost: Some(outcome.token_cost),
                        };
                        (SampleFindings { kept, excluded, failed: false }, Some(record))
                    }
                    Err(e) => {
                        tracing::warn!(sample = %s.id, error = %e, "exchange failed");
                        (SampleFindings { failed: true, ..Default::default() }, None)
                    }
                }
            })
            .collect()
    });
    let mut by_id = HashMap::new();
    let mut findings = Vec::new();
    for (s, (f, record)) in samples.iter().zip(results) {
        by_id.insert(s.id.clone(), f);
        findings.extend(record);
    }
    let all: Vec<LabeledSample> = samples.into_iter().cloned().collect();
    let chat_calls = calls.load(Ordering::Relaxed);
    Ok(TemplateMeasurement {
        summary: score_run(&all, &by_id),
        chat_calls,
        cost: chat_calls as f64 * price_per_call,
        findings,
    })
}
