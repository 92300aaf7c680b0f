//! Check masked tokens against a scripted model that disagrees on one of them.

use std::sync::Arc;

use tibscan::catalog::{enumerate_tasks, parse_unit, ApproxTokenCounter, ContextStrategy, TaskLimits};
use tibscan::consistency::{check_consistency, ConsistencyConfig};
use tibscan::gateway::{PredictionStep, ScriptedCompletion};
use tibscan::lang::Language;

const CODE: &str = "def clamp(lo, hi, x):\n    if x < lo:\n        return lo\n    if x > hi:\n        return lo\n    return x\n";

fn main() -> anyhow::Result<()> {
    let unit = parse_unit("clamp.py".as_ref(), Language::Python, CODE)?;
    let tasks = enumerate_tasks(&unit, ContextStrategy::Function, &TaskLimits::default(), &ApproxTokenCounter).tasks;
    // the model expects `hi` on line 5 and echoes everything else
    let model = ScriptedCompletion::from_fn("demo", |session, k| {
        let t = &session.task;
        if t.line_no == 5 && t.original == "lo" && session.forced.is_empty() {
            PredictionStep::new([("hi".to_string(), 0.92), ("lo".to_string(), 0.05)], k)
        } else {
            ScriptedCompletion::echo_step(session, 0.9)
        }
    });
    let cfg = ConsistencyConfig::default();
    for task in tasks.into_iter().map(Arc::new) {
        let v = check_consistency(&task, &model, &cfg)?;
        if !v.consistent {
            println!("line {} `{}`: {:?} {:?}", task.line_no, task.original, v.reason, v.deviation);
        }
    }
    Ok(())
}
