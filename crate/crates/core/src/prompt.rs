//! Multi-round chat review: prompt templates, structured exchanges,
//! line resolution and property-based filtering of findings.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::catalog::{ApproxTokenCounter, TokenCounter};
use crate::gateway::{chat_round, ChatBackend, ChatExchange, GatewayError, Property, PropertySchema};
use crate::lang::Language;

const TEMPLATE_FILE: &str = include_str!("../templates/prompts.toml");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template} has no round {round}")]
    NoSuchRound { template: String, round: usize },
    #[error("no value for placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("template {0} does not take highlighted lines")]
    HighlightsNotSupported(String),
    #[error("highlighted line {0} is outside the snippet")]
    HighlightOutOfRange(usize),
    #[error("template file: {0}")]
    TemplateFile(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ExchangeError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct RoundSpec {
    pub properties: Vec<Property>,
    pub prompt: String,
    /// Appended to `prompt` when suspicious lines are supplied.
    #[serde(default)]
    pub highlight: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct PromptTemplate {
    #[serde(rename = "id")]
    pub template_id: String,
    #[serde(rename = "round")]
    pub rounds: Vec<RoundSpec>,
}

impl PromptTemplate {
    pub fn takes_highlights(&self) -> bool {
        self.rounds.iter().any(|r| r.highlight.is_some())
    }

    pub fn schema(&self, round_index: usize) -> Option<PropertySchema> {
        self.rounds
            .get(round_index)
            .map(|r| PropertySchema::new(r.properties.iter().copied()))
    }

    /// Every property requested in some round.
    pub fn requested(&self) -> BTreeSet<Property> {
        self.rounds.iter().flat_map(|r| r.properties.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct TemplateSet {
    pub system: String,
    #[serde(rename = "template")]
    pub templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn parse(text: &str) -> Result<TemplateSet, PromptError> {
        toml::from_str(text).map_err(|e| PromptError::TemplateFile(e.to_string()))
    }

    /// The bundled templates.
    pub fn builtin() -> &'static TemplateSet {
        static SET: OnceLock<TemplateSet> = OnceLock::new();
        SET.get_or_init(|| TemplateSet::parse(TEMPLATE_FILE).expect("bundled templates parse"))
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .iter()
            .find(|t| t.template_id == id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.templates.iter().map(|t| t.template_id.as_str()).collect()
    }
}

/// The code under review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub language: Language,
    pub text: String,
    /// File line of the snippet's first line.
    pub first_line: usize,
}

impl Snippet {
    pub fn new(id: impl Into<String>, language: Language, text: impl Into<String>, first_line: usize) -> Snippet {
        Snippet {
            id: id.into(),
            language,
            text: text.into(),
            first_line,
        }
    }

    pub fn from_sample(sample: &crate::synth::LabeledSample) -> Snippet {
        Snippet::new(
            sample.id.clone(),
            sample.language,
            sample.function_text.clone(),
            sample.source_ref.first_line,
        )
    }

    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.text.lines()
    }

    pub fn last_line(&self) -> usize {
        self.first_line + self.text.lines().count().max(1) - 1
    }

    pub fn contains_line(&self, line: usize) -> bool {
        (self.first_line..=self.last_line()).contains(&line)
    }
}

/// Suspicious file lines of one snippet, sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HighlightSet {
    line_numbers: Vec<usize>,
}

impl HighlightSet {
    pub const DEFAULT_CAP: usize = 4;

    /// Keeps at most `cap` lines: the first ones in file order.
    pub fn new(snippet: &Snippet, lines: impl IntoIterator<Item = usize>, cap: usize) -> Result<HighlightSet, PromptError> {
        let set: BTreeSet<usize> = lines.into_iter().collect();
        if let Some(&bad) = set.iter().find(|&&l| !snippet.contains_line(l)) {
            return Err(PromptError::HighlightOutOfRange(bad));
        }
        Ok(HighlightSet {
            line_numbers: set.into_iter().take(cap).collect(),
        })
    }

    pub fn line_numbers(&self) -> &[usize] {
        &self.line_numbers
    }

    pub fn is_empty(&self) -> bool {
        self.line_numbers.is_empty()
    }

    fn render(&self) -> String {
        self.line_numbers
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedRound {
    pub system: String,
    pub user: String,
    pub schema: PropertySchema,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

/// Single-pass substitution over the template text only, so braces inside
/// the substituted code are left alone.
fn substitute(text: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for caps in placeholder_re().captures_iter(text) {
        let whole = caps.get(0).unwrap();
        let name = &caps[1];
        let value = lookup(name).ok_or_else(|| PromptError::MissingPlaceholder(name.to_string()))?;
        out.push_str(&text[last..whole.start()]);
        out.push_str(&value);
        last = whole.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

/// Renders the system text, user text and schema of one round.
pub fn render_round(
    set: &TemplateSet,
    template: &PromptTemplate,
    round_index: usize,
    snippet: &Snippet,
    highlights: Option<&HighlightSet>,
) -> Result<RenderedRound, PromptError> {
    let round = template.rounds.get(round_index).ok_or_else(|| PromptError::NoSuchRound {
        template: template.template_id.clone(),
        round: round_index,
    })?;
    if highlights.is_some_and(|h| !h.is_empty()) && !template.takes_highlights() {
        return Err(PromptError::HighlightsNotSupported(template.template_id.clone()));
    }
    let code = snippet.text.trim_end_matches(['\n', '\r']).to_string();
    let language = snippet.language.display_name().to_string();
    let lines = highlights.filter(|h| !h.is_empty()).map(HighlightSet::render);
    let lookup = |name: &str| match name {
        "code" => Some(code.clone()),
        "language" => Some(language.clone()),
        "suspicious_lines" => lines.clone(),
        _ => None,
    };
    let mut user = substitute(&round.prompt, &lookup)?;
    if let (Some(clause), Some(_)) = (&round.highlight, &lines) {
        user.push_str(&substitute(clause, &lookup)?);
    }
    Ok(RenderedRound {
        system: substitute(&set.system, &lookup)?,
        user,
        schema: PropertySchema::new(round.properties.iter().copied()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Category {
    SecurityVulnerability,
    LogicBug,
    Enhancement,
    UnexpectedBehavior,
    SymbolNotDefined,
    ModuleNotImported,
    BadSmell,
    NotABug,
    Others(String),
}

impl Category {
    pub fn parse(text: &str) -> Category {
        let key: String = text
            .chars()
            .filter(char::is_ascii_alphanumeric)
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "securityvulnerability" => Category::SecurityVulnerability,
            "logicbug" => Category::LogicBug,
            "enhancement" => Category::Enhancement,
            "unexpectedbehavior" | "unexpectedbehaviour" => Category::UnexpectedBehavior,
            "symbolnotdefined" => Category::SymbolNotDefined,
            "modulenotimported" => Category::ModuleNotImported,
            "badsmell" => Category::BadSmell,
            "notabug" => Category::NotABug,
            _ => {
                let t = text.trim();
                let rest = t
                    .strip_prefix("Others")
                    .or_else(|| t.strip_prefix("others"))
                    .or_else(|| t.strip_prefix("Other"))
                    .map(|r| r.trim_start_matches([':', '-', ' ', '(']).trim_end_matches(')').trim())
                    .unwrap_or(t);
                Category::Others(rest.to_string())
            }
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::SecurityVulnerability => "Security Vulnerability",
            Category::LogicBug => "Logic Bug",
            Category::Enhancement => "Enhancement",
            Category::UnexpectedBehavior => "Unexpected Behavior",
            Category::SymbolNotDefined => "Symbol Not Defined",
            Category::ModuleNotImported => "Module Not Imported",
            Category::BadSmell => "Bad Smell",
            Category::NotABug => "Not a Bug",
            Category::Others(name) if name.is_empty() => "Others",
            Category::Others(name) => return write!(f, "Others: {name}"),
        };
        f.write_str(s)
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Category::parse(&String::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Priority {
    High,
    Medium,
    Low,
}

/// One reported bug.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugFinding {
    pub code_line: String,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_line: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_level: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<Priority>,
    /// File line whose text contains `code_line`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_line_no: Option<usize>,
    /// For unresolved findings, the single line sharing the most words.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearest_line_no: Option<usize>,
    #[serde(default)]
    pub unresolved: bool,
}

impl BugFinding {
    pub fn new(code_line: impl Into<String>, explanation: impl Into<String>) -> BugFinding {
        BugFinding {
            code_line: code_line.into(),
            explanation: explanation.into(),
            fixed_line: None,
            token_level: None,
            category: None,
            priority: None,
            resolved_line_no: None,
            nearest_line_no: None,
            unresolved: false,
        }
    }

    /// Resolved line, or the nearest line for unresolved findings.
    pub fn line(&self) -> Option<usize> {
        self.resolved_line_no.or(self.nearest_line_no)
    }

    fn from_json(v: &Value) -> BugFinding {
        let s = |k: &str| v[k].as_str().map(str::to_string);
        BugFinding {
            fixed_line: s("fixed_line"),
            token_level: v["token_level"].as_bool(),
            category: s("category").map(|c| Category::parse(&c)),
            priority: match v["priority"].as_str() {
                Some("High") => Some(Priority::High),
                Some("Medium") => Some(Priority::Medium),
                Some("Low") => Some(Priority::Low),
                _ => None,
            },
            ..BugFinding::new(s("code_line").unwrap_or_default(), s("explanation").unwrap_or_default())
        }
    }

    /// Fields present in `newer` override, absent ones are kept.
    fn merge(&mut self, newer: BugFinding) {
        self.code_line = newer.code_line;
        self.explanation = newer.explanation;
        self.fixed_line = newer.fixed_line.or(self.fixed_line.take());
        self.token_level = newer.token_level.or(self.token_level);
        self.category = newer.category.or(self.category.take());
        self.priority = newer.priority.or(self.priority);
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn words(s: &str) -> HashSet<&str> {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+").unwrap())
        .find_iter(s)
        .map(|m| m.as_str())
        .collect()
}

/// Locates `code_line` in the snippet. An exact whitespace-normalized match
/// wins, then a unique line containing it; otherwise the finding is marked
/// unresolved and the unique line with the largest word overlap, if any, is
/// recorded as nearest.
pub fn resolve_line(finding: &mut BugFinding, snippet: &Snippet) {
    let target = normalize_ws(&finding.code_line);
    let lines: Vec<String> = snippet.lines().map(normalize_ws).collect();
    let at = |i: usize| snippet.first_line + i;
    finding.resolved_line_no = None;
    finding.nearest_line_no = None;
    finding.unresolved = false;
    if !target.is_empty() {
        let exact: Vec<usize> = (0..lines.len()).filter(|&i| lines[i] == target).collect();
        if exact.len() == 1 {
            finding.resolved_line_no = Some(at(exact[0]));
            return;
        }
        let containing: Vec<usize> = (0..lines.len()).filter(|&i| lines[i].contains(&target)).collect();
        if exact.is_empty() && containing.len() == 1 {
            finding.resolved_line_no = Some(at(containing[0]));
            return;
        }
    }
    finding.unresolved = true;
    let want = words(&finding.code_line);
    if want.is_empty() {
        return;
    }
    let scores: Vec<usize> = lines.iter().map(|l| words(l).intersection(&want).count()).collect();
    let best = scores.iter().copied().max().unwrap_or(0);
    if best > 0 && scores.iter().filter(|&&s| s == best).count() == 1 {
        finding.nearest_line_no = scores.iter().position(|&s| s == best).map(at);
    }
}

/// Findings of one exchange.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExchangeOutcome {
    pub findings: Vec<BugFinding>,
    pub rounds_used: usize,
    /// Approximate text tokens sent and received.
    pub token_cost: usize,
    #[serde(skip)]
    pub exchange: ChatExchange,
}

fn findings_of(response: &Value) -> Vec<BugFinding> {
    response["bugs"]
        .as_array()
        .map(|items| items.iter().map(BugFinding::from_json).collect())
        .unwrap_or_default()
}

/// Runs the template's rounds in order. Each round's reply replaces the
/// finding list; fields from earlier rounds are carried over by matching
/// code lines. An empty list ends the exchange early.
pub fn run_exchange(
    set: &TemplateSet,
    template: &PromptTemplate,
    snippet: &Snippet,
    highlights: Option<&HighlightSet>,
    backend: &dyn ChatBackend,
) -> Result<ExchangeOutcome, ExchangeError> {
    let first = render_round(set, template, 0, snippet, highlights)?;
    let mut exchange = ChatExchange::new(first.system.clone(), backend.name());
    let mut findings: Vec<BugFinding> = Vec::new();
    let mut rounds_used = 0;
    for index in 0..template.rounds.len() {
        let rendered = if index == 0 {
            first.clone()
        } else {
            render_round(set, template, index, snippet, highlights)?
        };
        let (next, response) = chat_round(backend, &exchange, &rendered.user, &rendered.schema)?;
        exchange = next;
        rounds_used += 1;
        let mut current = findings_of(&response);
        for f in &mut current {
            let key = normalize_ws(&f.code_line);
            if let Some(prev) = findings.iter().find(|p| normalize_ws(&p.code_line) == key) {
                let mut merged = prev.clone();
                merged.merge(f.clone());
                *f = merged;
            }
        }
        findings = current;
        if findings.is_empty() {
            break;
        }
    }
    for f in &mut findings {
        resolve_line(f, snippet);
    }
    let token_cost = exchange
        .messages()
        .iter()
        .map(|m| ApproxTokenCounter.count(&m.content))
        .sum();
    Ok(ExchangeOutcome {
        findings,
        rounds_used,
        token_cost,
        exchange,
    })
}

/// Which findings survive review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    /// Drop findings the model says are not about single or few tokens.
    pub require_token_level: bool,
    /// Keep only these categories; `None` keeps all.
    pub categories: Option<Vec<String>>,
    /// Drop findings whose priority is not High.
    pub require_high_priority: bool,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            require_token_level: true,
            categories: Some(vec!["Logic Bug".into(), "Security Vulnerability".into(), "Bad Smell".into()]),
            require_high_priority: false,
        }
    }
}

impl FilterPolicy {
    /// True if the finding survives. Properties the finding lacks are not
    /// filtered on.
    pub fn keeps(&self, f: &BugFinding) -> bool {
        if self.require_token_level && f.token_level == Some(false) {
            return false;
        }
        if let (Some(allowed), Some(cat)) = (&self.categories, &f.category) {
            if !allowed.iter().any(|a| Category::parse(a) == *cat) {
                return false;
            }
        }
        if self.require_high_priority && f.priority.is_some_and(|p| p != Priority::High) {
            return false;
        }
        true
    }
}

/// Splits findings into kept and excluded, preserving order.
pub fn filter_findings(findings: &[BugFinding], policy: &FilterPolicy) -> (Vec<BugFinding>, Vec<BugFinding>) {
    if policy.require_high_priority {
        tracing::warn!("filtering on priority drops real bugs ranked below High");
    }
    findings.iter().cloned().partition(|f| policy.keeps(f))
}

/// One line of a findings stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FindingsRecord {
    pub snippet_id: String,
    pub findings: Vec<BugFinding>,
    pub template_id: String,
    pub rounds_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_cost: Option<usize>,
}

#[cfg(test)]
mod tests {
    use std::sync::{Arc, Mutex};

    use proptest::prelude::*;
    use serde_json::json;

    use super::*;
    use crate::gateway::{ChatMessage, ChatRule, ScriptedChat};

    const QUOTE_URL: &str = "def quote_url(url_text):
    (scheme, netloc, path, params, query, fragment) = six.moves.urllib.parse.urlparse(url_text)
    # netloc_quoted = quote(netloc)
    path_quoted = quote(path)
    params_quoted = quote(query)
    query_quoted = quote_plus(query)
    fragment_quoted = quote(fragment)
    url_quoted = six.moves.urllib.parse.urlunparse((scheme, netloc, path_quoted, params_quoted, query_quoted, fragment_quoted))
    return url_quoted
";

    fn quote_url() -> Snippet {
        Snippet::new("quote_url", Language::Python, QUOTE_URL, 987)
    }

    fn set() -> &'static TemplateSet {
        TemplateSet::builtin()
    }

    #[test]
    fn all_seven_templates_are_bundled() {
        assert_eq!(
            set().ids(),
            ["1", "1FT", "1/2FT", "1/2FT/3P", "1/2FT/3Ca", "1/2FTCa", "1/2FTCa+HL"]
        );
        for t in &set().templates {
            let r1 = &t.rounds[0].properties;
            assert!(r1.contains(&Property::CodeLine) && r1.contains(&Property::Explanation));
            assert!(t.rounds[0].prompt.starts_with("{code}\n"));
        }
    }

    #[test]
    fn template_ids_encode_rounds_and_properties() {
        for t in &set().templates {
            let id = t.template_id.trim_end_matches("+HL");
            let rounds: Vec<&str> = id.split('/').collect();
            assert_eq!(rounds.len(), t.rounds.len(), "{id}");
            for (layout, round) in rounds.iter().zip(&t.rounds) {
                let letters = layout.trim_start_matches(|c: char| c.is_ascii_digit());
                let want: BTreeSet<Property> = [
                    ("F", Property::FixedLine),
                    ("T", Property::TokenLevel),
                    ("Ca", Property::Category),
                    ("P", Property::Priority),
                ]
                .into_iter()
                .filter(|(abbr, _)| letters.contains(abbr))
                .map(|(_, p)| p)
                .collect();
                let got: BTreeSet<Property> = round.properties.iter().copied().filter(|p| !p.is_mandatory()).collect();
                // a round number without letters inherits nothing new
                assert_eq!(got, want, "{} round {layout}", t.template_id);
            }
        }
    }

    #[test]
    fn template_one_renders_code_then_instruction() {
        let t = set().get("1").unwrap();
        let r = render_round(set(), t, 0, &quote_url(), None).unwrap();
        assert_eq!(
            r.user,
            format!("{}\nOutput exact lines of semantic bugs and concise explanations of the bugs.", QUOTE_URL.trim_end())
        );
        assert!(r.system.starts_with("You're a Python expert."));
        assert!(r.system.contains("\n1. Check the given code line by line.\n"));
        assert_eq!(r.schema, PropertySchema::mandatory());
    }

    #[test]
    fn highlight_clause_is_appended_or_omitted() {
        let t = set().get("1/2FTCa+HL").unwrap();
        let hl = HighlightSet::new(&quote_url(), [991], 4).unwrap();
        let r = render_round(set(), t, 0, &quote_url(), Some(&hl)).unwrap();
        assert!(r.user.ends_with("variable/method name.\nAlso, pay additional attention to these lines: 991"));
        let empty = HighlightSet::default();
        let r = render_round(set(), t, 0, &quote_url(), Some(&empty)).unwrap();
        assert!(r.user.ends_with("variable/method name."));
        assert_eq!(r, render_round(set(), t, 0, &quote_url(), None).unwrap());
        let r2 = render_round(set(), t, 1, &quote_url(), Some(&hl)).unwrap();
        assert!(!r2.user.contains("pay additional attention"));
    }

    #[test]
    fn highlights_are_rejected_where_not_supported() {
        let hl = HighlightSet::new(&quote_url(), [991], 4).unwrap();
        let err = render_round(set(), set().get("1/2FTCa").unwrap(), 0, &quote_url(), Some(&hl)).unwrap_err();
        assert_eq!(err, PromptError::HighlightsNotSupported("1/2FTCa".into()));
        assert_eq!(
            HighlightSet::new(&quote_url(), [1200], 4).unwrap_err(),
            PromptError::HighlightOutOfRange(1200)
        );
    }

    #[test]
    fn highlight_set_sorts_dedups_and_caps() {
        let hl = HighlightSet::new(&quote_url(), [993, 991, 991, 988, 990, 995], 4).unwrap();
        assert_eq!(hl.line_numbers(), [988, 990, 991, 993]);
        assert_eq!(hl.render(), "988, 990, 991, 993");
    }

    #[test]
    fn braces_in_code_are_not_placeholders() {
        let s = Snippet::new("c", Language::C, "int f(void) { return g({language}); }\n", 1);
        let r = render_round(set(), set().get("1").unwrap(), 0, &s, None).unwrap();
        assert!(r.user.starts_with("int f(void) { return g({language}); }\nOutput"));
        assert!(r.system.starts_with("You're a C expert."));
    }

    #[test]
    fn unknown_placeholders_are_reported() {
        let custom = TemplateSet::parse(
            "system = \"x\"\n[[template]]\nid = \"t\"\n[[template.round]]\nproperties = [\"code_line\", \"explanation\"]\nprompt = \"{code} {who}\"\n",
        )
        .unwrap();
        let err = render_round(&custom, custom.get("t").unwrap(), 0, &quote_url(), None).unwrap_err();
        assert_eq!(err, PromptError::MissingPlaceholder("who".into()));
        assert!(matches!(
            render_round(&custom, custom.get("t").unwrap(), 3, &quote_url(), None),
            Err(PromptError::NoSuchRound { .. })
        ));
    }

    #[test]
    fn categories_parse_leniently() {
        assert_eq!(Category::parse("Logic Bug"), Category::LogicBug);
        assert_eq!(Category::parse("logic_bug"), Category::LogicBug);
        assert_eq!(Category::parse("Not a Bug"), Category::NotABug);
        assert_eq!(Category::parse("Others: Performance"), Category::Others("Performance".into()));
        assert_eq!(Category::parse("Race"), Category::Others("Race".into()));
        assert_eq!(Category::Others("Performance".into()).to_string(), "Others: Performance");
    }

    fn bug(line: &str) -> Value {
        json!({"code_line": line, "explanation": "passes query instead of params"})
    }

    #[test]
    fn exchange_cross_examines_and_merges() {
        let chat = ScriptedChat::from_rules(
            "gpt",
            vec![
                ChatRule {
                    round: Some(1),
                    contains: None,
                    response: json!({"bugs": [bug("params_quoted = quote(query)"), bug("# netloc_quoted = quote(netloc)")]}),
                },
                ChatRule {
                    round: Some(2),
                    contains: None,
                    response: json!({"bugs": [{
                        "code_line": "params_quoted = quote(query)",
                        "explanation": "wrong argument",
                        "fixed_line": "params_quoted = quote(params)",
                        "token_level": true,
                        "category": "Logic Bug"
                    }]}),
                },
            ],
        );
        let t = set().get("1/2FTCa").unwrap();
        let out = run_exchange(set(), t, &quote_url(), None, &chat).unwrap();
        assert_eq!(out.rounds_used, 2);
        assert_eq!(out.findings.len(), 1);
        let f = &out.findings[0];
        assert_eq!(f.token_level, Some(true));
        assert_eq!(f.category, Some(Category::LogicBug));
        assert_eq!(f.fixed_line.as_deref(), Some("params_quoted = quote(params)"));
        assert_eq!(f.resolved_line_no, Some(991));
        assert!(!f.unresolved);
        assert_eq!(out.exchange.rounds.len(), 2);
        assert!(out.token_cost > 0);
    }

    #[test]
    fn empty_first_round_skips_the_rest() {
        let chat = ScriptedChat::from_rules("gpt", vec![]);
        let out = run_exchange(set(), set().get("1/2FT/3P").unwrap(), &quote_url(), None, &chat).unwrap();
        assert_eq!((out.rounds_used, out.findings.len(), chat.calls()), (1, 0, 1));
    }

    #[test]
    fn selective_fields_follow_the_requests() {
        // the model volunteers extra fields; only requested ones survive
        let chat = ScriptedChat::from_fn("gpt", |_, _| {
            json!({"bugs": [{"code_line": "return url_quoted", "explanation": "e", "token_level": false, "priority": "Low"}]})
                .to_string()
        });
        let out = run_exchange(set(), set().get("1").unwrap(), &quote_url(), None, &chat).unwrap();
        let f = &out.findings[0];
        assert_eq!((f.token_level, f.priority), (None, None));
        let out = run_exchange(set(), set().get("1FT").unwrap(), &quote_url(), None, &chat);
        assert!(matches!(out, Err(ExchangeError::Gateway(GatewayError::SchemaViolation(_)))));
    }

    #[test]
    fn rounds_thread_prior_context() {
        let seen: Arc<Mutex<Vec<Vec<ChatMessage>>>> = Arc::default();
        let log = seen.clone();
        let chat = ScriptedChat::from_fn("gpt", move |msgs, _| {
            log.lock().unwrap().push(msgs.to_vec());
            json!({"bugs": [{"code_line": "path_quoted = quote(path)", "explanation": "e", "fixed_line": "x", "token_level": true}]})
                .to_string()
        });
        run_exchange(set(), set().get("1/2FT").unwrap(), &quote_url(), None, &chat).unwrap();
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[1].len(), 4);
        assert_eq!(seen[1][1], seen[0][1]);
    }

    #[test]
    fn line_resolution() {
        let s = quote_url();
        let mut f = BugFinding::new("  params_quoted  =  quote(query) ", "");
        resolve_line(&mut f, &s);
        assert_eq!((f.resolved_line_no, f.unresolved), (Some(991), false));
        let mut f = BugFinding::new("quote_plus(query)", "");
        resolve_line(&mut f, &s);
        assert_eq!(f.resolved_line_no, Some(992));
        // contained in two lines: ambiguous
        let mut f = BugFinding::new("quote(", "");
        resolve_line(&mut f, &s);
        assert!(f.unresolved && f.resolved_line_no.is_none());
        let mut f = BugFinding::new("fragment_quoted = quote(frag)", "");
        resolve_line(&mut f, &s);
        assert_eq!((f.resolved_line_no, f.nearest_line_no, f.unresolved), (None, Some(993), true));
    }

    #[test]
    fn default_filter_examples() {
        let mut enh = BugFinding::new("a", "e");
        enh.category = Some(Category::Enhancement);
        let mut nt = BugFinding::new("b", "e");
        nt.token_level = Some(false);
        let mut logic = BugFinding::new("c", "e");
        logic.category = Some(Category::LogicBug);
        logic.token_level = Some(true);
        logic.priority = Some(Priority::Medium);
        let all = vec![enh, nt, logic.clone()];
        let (kept, excluded) = filter_findings(&all, &FilterPolicy::default());
        assert_eq!(kept, [logic.clone()]);
        assert_eq!(excluded.len(), 2);
        assert!(filter_findings(&[], &FilterPolicy::default()).0.is_empty());
        let strict = FilterPolicy {
            require_high_priority: true,
            ..FilterPolicy::default()
        };
        assert!(filter_findings(&[logic], &strict).0.is_empty());
    }

    fn finding() -> impl Strategy<Value = BugFinding> {
        (
            prop::option::of(any::<bool>()),
            prop::option::of(prop::sample::select(vec![
                "Logic Bug", "Enhancement", "Bad Smell", "Security Vulnerability", "Not a Bug", "Others: X",
            ])),
            prop::option::of(prop::sample::select(vec![Priority::High, Priority::Medium, Priority::Low])),
        )
            .prop_map(|(t, c, p)| BugFinding {
                token_level: t,
                category: c.map(Category::parse),
                priority: p,
                ..BugFinding::new("x", "y")
            })
    }

    proptest! {
        #[test]
        fn filter_is_a_sound_idempotent_partition(
            fs in prop::collection::vec(finding(), 0..12),
            strict in any::<bool>(),
        ) {
            let policy = FilterPolicy { require_high_priority: strict, ..FilterPolicy::default() };
            let (kept, excluded) = filter_findings(&fs, &policy);
            prop_assert_eq!(kept.len() + excluded.len(), fs.len());
            prop_assert!(kept.iter().all(|k| fs.contains(k)));
            prop_assert_eq!(filter_findings(&kept, &policy).0, kept);
        }
    }
}
