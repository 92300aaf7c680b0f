//! Scan a generated repository with planted bugs using scripted models.

use std::sync::Arc;

use serde_json::json;
use tibscan::config::RunConfig;
use tibscan::gateway::{
    BackendProfile, Capability, ChatBackend, ChatRule, CompletionBackend, PredictionStep, ScriptedChat,
    ScriptedCompletion,
};
use tibscan::fixture::python_repo;
use tibscan::pipeline::{self, Backends};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut repo = python_repo(30, 10, 3);
    repo.plant(&[4, 17]);
    repo.write(&dir.path().join("repo"))?;

    let local = Capability { completion_logprobs: true, fim: true, chat_json: false };
    let cfg = RunConfig {
        root: dir.path().join("repo"),
        output_dir: dir.path().join("out"),
        stages: vec![
            BackendProfile::scripted("local", local),
            BackendProfile::scripted("chat", Capability { chat_json: true, ..Capability::default() }),
        ],
        ..RunConfig::default()
    };

    // the local model predicts the original token at every planted site
    let plants: Vec<_> = repo.planted().map(|f| (f.file.clone(), f.plant.clone())).collect();
    let sites = plants.clone();
    let local: Arc<dyn CompletionBackend> = Arc::new(ScriptedCompletion::from_fn("local", move |s, k| {
        let t = &s.task;
        match sites.iter().find(|(p, pl)| *p == t.path && pl.line_no == t.line_no && pl.substitute == t.original) {
            Some((_, pl)) if s.forced.is_empty() => PredictionStep::new([(pl.original.clone(), 0.95)], k),
            _ => ScriptedCompletion::echo_step(s, 0.9),
        }
    }));
    let rules = plants
        .iter()
        .map(|(_, pl)| ChatRule {
            round: None,
            contains: Some(pl.planted_line.clone()),
            response: json!({"bugs": [{
                "code_line": pl.planted_line,
                "explanation": format!("`{}` should be `{}`", pl.substitute, pl.original),
                "fixed_line": pl.planted_line.replacen(&pl.substitute, &pl.original, 1),
                "token_level": true,
                "category": "Logic Bug"
            }]}),
        })
        .collect();
    let chat: Arc<dyn ChatBackend> = Arc::new(ScriptedChat::from_rules("chat", rules));

    let corpus = pipeline::load_corpus(&cfg)?;
    let out = pipeline::scan_with(&cfg, &corpus, &Backends { locals: vec![local], chat })?;
    print!("{}", pipeline::render_report(&out.reports, Some(&out.summary)));
    Ok(())
}
