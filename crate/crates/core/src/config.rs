//! Run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::cascade::CostParams;
use crate::catalog::{ContextStrategy, TaskLimits};
use crate::consistency::ConsistencyConfig;
use crate::gateway::BackendProfile;
use crate::lang::Language;
use crate::prompt::{FilterPolicy, HighlightSet, TemplateSet};
use crate::synth::SynthesisConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Caps that stop a run early. The result is then marked partial.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    /// Chat requests.
    pub max_api_calls: Option<u64>,
    pub max_wall_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Repository name recorded in reports.
    pub repo: Option<String>,
    /// Directory scanned; relative paths in the config resolve against the
    /// config file's directory.
    pub root: PathBuf,
    /// Only files of this language; `None` takes every supported extension.
    pub language: Option<Language>,
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    /// Paths containing any of these substrings (case-insensitive) are skipped.
    pub exclude_keywords: Vec<String>,
    pub context_strategy: ContextStrategy,
    pub limits: TaskLimits,
    /// Local completion stages followed by the chat stage.
    pub stages: Vec<BackendProfile>,
    pub consistency: ConsistencyConfig,
    pub template_id: String,
    pub filter: FilterPolicy,
    pub highlight_cap: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 picks one per core.
    pub workers: usize,
    pub budget: Budget,
    pub synthesis: SynthesisConfig,
    /// Similarity source for mutation selection; edit distance when absent.
    pub embeddings: Option<BackendProfile>,
    pub cost: CostParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            repo: None,
            root: PathBuf::from("."),
            language: None,
            include: vec!["**/*.py".into(), "**/*.c".into(), "**/*.h".into()],
            exclude: vec!["**/.git/**".into()],
            exclude_keywords: Vec::new(),
            context_strategy: ContextStrategy::default(),
            limits: TaskLimits::default(),
            stages: Vec::new(),
            consistency: ConsistencyConfig::default(),
            template_id: "1/2FTCa+HL".into(),
            filter: FilterPolicy::default(),
            highlight_cap: HighlightSet::DEFAULT_CAP,
            output_dir: PathBuf::from("out"),
            seed: 0,
            workers: 0,
            budget: Budget::default(),
            synthesis: SynthesisConfig::default(),
            embeddings: None,
            cost: CostParams::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads, rebases relative paths and validates.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.root);
        rebase(base, &mut cfg.output_dir);
        for stage in cfg.stages.iter_mut().chain(cfg.embeddings.as_mut()) {
            if let Some(f) = &mut stage.fixture {
                rebase(base, f);
            }
        }
        Ok(cfg)
    }

    /// Checks the fields that `scan` depends on.
    pub fn validate_scan(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let Some((chat, locals)) = self.stages.split_last() else {
            return invalid("at least one stage is required".into());
        };
        if !chat.capability.chat_json {
            return invalid(format!("final stage {} must be chat-capable", chat.name));
        }
        if let Some(s) = locals.iter().find(|s| !s.capability.completion_logprobs) {
            return invalid(format!("stage {} lacks completion logprobs", s.name));
        }
        TemplateSet::builtin()
            .get(&self.template_id)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.consistency
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.highlight_cap == 0 {
            return invalid("highlight_cap must be at least 1".into());
        }
        Ok(())
    }

    fn globset(patterns: &[String]) -> Result<GlobSet, ConfigError> {
        let mut b = GlobSetBuilder::new();
        for p in patterns {
            b.add(Glob::new(p).map_err(|e| ConfigError::Invalid(format!("glob {p:?}: {e}")))?);
        }
        b.build().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Source files under `root`, relative to it, in sorted order.
    pub fn discover(&self) -> Result<Vec<PathBuf>, ConfigError> {
        let include = RunConfig::globset(&self.include)?;
        let exclude = RunConfig::globset(&self.exclude)?;
        let keywords: Vec<String> = self.exclude_keywords.iter().map(|k| k.to_lowercase()).collect();
        let mut out = Vec::new();
        for entry in WalkDir::new(&self.root).sort_by_file_name() {
            let entry = entry.map_err(|e| ConfigError::Read {
                path: self.root.clone(),
                reason: e.to_string(),
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(&self.root).unwrap_or(entry.path()).to_path_buf();
            let lowered = rel.to_string_lossy().to_lowercase();
            let lang = Language::from_extension(&rel);
            if lang.is_none()
                || self.language.is_some_and(|l| Some(l) != lang)
                || !include.is_match(&rel)
                || exclude.is_match(&rel)
                || keywords.iter().any(|k| lowered.contains(k))
            {
                continue;
            }
            out.push(rel);
        }
        Ok(out)
    }
}

/// Files that announce they were generated.
pub fn looks_generated(text: &str) -> bool {
    text.lines().take(5).any(|l| {
        let l = l.to_ascii_lowercase();
        l.contains("@generated") || l.contains("do not edit") || l.contains("autogenerated") || l.contains("auto-generated")
    })
}
