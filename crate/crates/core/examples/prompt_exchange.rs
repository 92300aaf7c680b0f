//! Render a multi-round template and run it against a scripted chat model.

use serde_json::json;
use tibscan::gateway::{ChatRule, ScriptedChat};
use tibscan::lang::Language;
use tibscan::prompt::{filter_findings, render_round, run_exchange, FilterPolicy, HighlightSet, Snippet, TemplateSet};

const CODE: &str = "def total(prices, rate):\n    net = sum(prices)\n    return net * prices\n";

fn main() -> anyhow::Result<()> {
    let set = TemplateSet::builtin();
    println!("templates: {}", set.ids().join(", "));
    let template = set.get("1/2FTCa+HL")?;
    let snippet = Snippet::new("demo", Language::Python, CODE, 10);
    let highlights = HighlightSet::new(&snippet, [12], HighlightSet::DEFAULT_CAP)?;
    let first = render_round(set, template, 0, &snippet, Some(&highlights))?;
    println!("--- round 1 ---\n{}\n", first.user);

    let chat = ScriptedChat::from_rules(
        "demo",
        vec![ChatRule {
            round: None,
            contains: None,
            response: json!({"bugs": [{
                "code_line": "return net * prices",
                "explanation": "multiplies by the list instead of the rate",
                "fixed_line": "return net * rate",
                "token_level": true,
                "category": "Logic Bug"
            }]}),
        }],
    );
    let out = run_exchange(set, template, &snippet, Some(&highlights), &chat)?;
    let (kept, excluded) = filter_findings(&out.findings, &FilterPolicy::default());
    println!("{} rounds, {} kept, {} excluded", out.rounds_used, kept.len(), excluded.len());
    for f in kept {
        println!("  line {:?}: {}", f.line(), f.explanation);
    }
    Ok(())
}
