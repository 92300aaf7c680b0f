//! Describe HTTP model endpoints in TOML and preview the fill-in-the-middle prompt.
//! Nothing is sent over the network.

use std::sync::Arc;

use tibscan::catalog::{enumerate_tasks, parse_unit, ApproxTokenCounter, ContextStrategy, TaskLimits};
use tibscan::config::RunConfig;
use tibscan::gateway::{GenerationSession, HttpCompletion};
use tibscan::lang::Language;

const CONFIG: &str = r#"
[[stages]]
name = "starcoder"
base_url = "http://localhost:8080/v1"
capability = { completion_logprobs = true, fim = true }
sentinels = { prefix = "<fim_prefix>", suffix = "<fim_suffix>", middle = "<fim_middle>" }

[[stages]]
name = "gpt-4o"
base_url = "https://api.openai.com/v1"
api_key_env = "OPENAI_API_KEY"
capability = { chat_json = true }
price_per_call = 0.01
"#;

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::parse(CONFIG)?;
    cfg.validate_scan()?;
    for s in &cfg.stages {
        println!("{:<10} {:?} {} retries={} concurrency={}", s.name, s.kind, s.base_url, s.max_retries, s.concurrency);
    }
    let unit = parse_unit("m.py".as_ref(), Language::Python, "def f(a, b):\n    return a - b\n")?;
    let task = enumerate_tasks(&unit, ContextStrategy::Function, &TaskLimits::default(), &ApproxTokenCounter)
        .tasks
        .into_iter()
        .find(|t| t.original == "-")
        .expect("operator task");
    let session = GenerationSession::new(Arc::new(task));
    println!("{}", HttpCompletion::prompt(&cfg.stages[0], &session));
    Ok(())
}
