//! Generate a small repository and build its clean and single-mutation datasets.

use tibscan::config::RunConfig;
use tibscan::fixture::python_repo;
use tibscan::pipeline;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    python_repo(40, 10, 1).write(&dir.path().join("repo"))?;
    let cfg = RunConfig {
        root: dir.path().join("repo"),
        output_dir: dir.path().join("out"),
        ..RunConfig::default()
    };
    let (dataset, summary) = pipeline::synthesize(&cfg)?;
    println!("{} functions: {} clean, {} mutated", summary.functions, summary.clean, summary.mutated);
    for m in dataset.mutated.iter().take(5) {
        let edit = m.mutation.as_ref().expect("mutated samples record their edit");
        println!("  {:<28} line {:>2}: {} -> {}", m.id, edit.line_no, edit.original, edit.substitute);
    }
    Ok(())
}
