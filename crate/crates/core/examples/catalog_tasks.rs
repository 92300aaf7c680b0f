//! Parse a file and list the masked-token tasks it yields.
//!
//! cargo run --example catalog_tasks [-- path/to/file.py]

use std::path::PathBuf;

use tibscan::catalog::{enumerate_tasks, parse_unit, read_unit, ApproxTokenCounter, ContextStrategy, TaskLimits};
use tibscan::lang::Language;

const DEMO: &str = "def area(width, height):\n    scale = 2\n    return width * height / scale\n";

fn main() -> anyhow::Result<()> {
    let unit = match std::env::args().nth(1) {
        Some(p) => read_unit(&PathBuf::from(p))?,
        None => parse_unit("demo.py".as_ref(), Language::Python, DEMO)?,
    };
    println!("{}: {} functions", unit.path.display(), unit.functions.len());
    for f in &unit.functions {
        println!("  {} lines {}-{}", f.name, f.line_range.0, f.line_range.1);
    }
    let set = enumerate_tasks(&unit, ContextStrategy::Function, &TaskLimits::default(), &ApproxTokenCounter);
    println!("{} tasks ({} too long, {} gated out)", set.tasks.len(), set.dropped_too_long, set.gated_out);
    for t in &set.tasks {
        println!("  line {:>3} {:<14} {:?}", t.line_no, t.kind, t.original);
    }
    Ok(())
}
