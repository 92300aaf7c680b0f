use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tibscan::cascade::{
    best_per_n, render_ranking, simulate_pipeline, sweep_configurations, CostParams, StageProfile,
};
use tibscan::config::RunConfig;
use tibscan::metrics::{render_table, MetricsSummary, TableRow};
use tibscan::pipeline::{self, PipelineError};
use tibscan::prompt::TemplateSet;
use tibscan::synth::read_samples;

#[derive(Parser)]
#[command(version, about = "Token-inconsistency bug scanner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Overrides the configured worker count.
    #[arg(short, long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the cascade over a source tree and write reports.
    Scan(RunArgs),
    /// Build the clean and single-mutation datasets.
    Synthesize(RunArgs),
    /// Score one stage or prompt template on a labeled dataset.
    Measure {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        mutated: PathBuf,
        /// Completion stage to score, by name.
        #[arg(long, conflicts_with = "template")]
        stage: Option<String>,
        /// Prompt template to score with the final chat stage.
        #[arg(long)]
        template: Option<String>,
        /// Highlight the mutated line plus random lines.
        #[arg(long)]
        highlight: bool,
    },
    /// Rank cascade configurations by expected cost.
    SimulateCost {
        /// Candidate local stage as `p,q,t` (repeatable).
        #[arg(long = "pool", required = true, value_parser = parse_stage)]
        pool: Vec<(f64, f64, f64)>,
        /// Chat stage as `p,q,t`.
        #[arg(long, value_parser = parse_stage, default_value = "0.442,0.84,2")]
        chat: (f64, f64, f64),
        #[arg(long, default_value_t = 1000.0)]
        n0: f64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon0: f64,
        /// Largest stage count, chat included.
        #[arg(long, default_value_t = 5)]
        max_n: usize,
        #[arg(long, default_value_t = 10)]
        limit: usize,
        /// Also simulate the best configuration with this seed.
        #[arg(long)]
        monte_carlo: Option<u64>,
    },
    /// Render a scan directory or a metrics file.
    Report { path: PathBuf },
}

fn parse_stage(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [p, q, t] => Ok((p, q, t)),
        _ => Err("expected p,q,t".into()),
    }
}

fn write_json(path: &std::path::Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(std::path::Path::new(".")))?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn measure(
    cfg: &RunConfig,
    clean: &PathBuf,
    mutated: &PathBuf,
    stage: Option<&str>,
    template: Option<&str>,
    highlight: bool,
) -> Result<String> {
    let clean = read_samples(clean).with_context(|| clean.display().to_string())?;
    let mutated = read_samples(mutated).with_context(|| mutated.display().to_string())?;
    let out = cfg.output_dir.join(pipeline::METRICS_FILE);
    if let Some(name) = stage {
        let profile = cfg.stages.iter().find(|s| s.name == name).context("no such stage")?;
        let backend = profile.completion_backend()?;
        let (score, _) = pipeline::measure_stage(&clean, &mutated, backend.as_ref(), &cfg.consistency, cfg.workers)?;
        write_json(&out, &score)?;
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        return Ok(format!(
            "{name}: recall {} specificity {} (tp {} fn {} tn {} fp {})\n",
            pct(score.recall),
            pct(score.specificity),
            score.tp,
            score.fn_,
            score.tn,
            score.fp
        ));
    }
    let id = template.unwrap_or(&cfg.template_id);
    let template = TemplateSet::builtin().get(id)?;
    let chat = cfg.stages.last().context("no chat stage configured")?;
    let backend = chat.chat_backend()?;
    let hl = (highlight || template.takes_highlights()).then_some((cfg.highlight_cap, cfg.seed));
    let m = pipeline::measure_template(
        &clean,
        &mutated,
        template,
        backend.as_ref(),
        &cfg.filter,
        hl,
        chat.price_per_call.unwrap_or(cfg.cost.c_api),
        cfg.workers,
    )?;
    write_json(&out, &m)?;
    Ok(render_table(&[TableRow {
        label: id.to_string(),
        summary: m.summary,
        cost: Some(m.cost),
    }]))
}

fn report(path: &PathBuf) -> Result<String> {
    if path.is_dir() {
        let (reports, summary) = pipeline::read_scan_dir(path)?;
        return Ok(pipeline::render_report(&reports, summary.as_ref()));
    }
    #[derive(serde::Deserialize)]
    struct Stored {
        summary: MetricsSummary,
        cost: Option<f64>,
    }
    let text = std::fs::read_to_string(path)?;
    let stored: Stored = serde_json::from_str(&text).context("not a template metrics file")?;
    Ok(render_table(&[TableRow {
        label: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
        summary: stored.summary,
        cost: stored.cost,
    }]))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scan(args) => {
            let cfg = args.load()?;
            let out = pipeline::scan(&cfg)?;
            out.write(&cfg.output_dir)?;
            print!("{}", pipeline::render_report(&out.reports, Some(&out.summary)));
        }
        Command::Synthesize(args) => {
            let cfg = args.load()?;
            let (_, s) = pipeline::synthesize(&cfg)?;
            println!(
                "{} functions in {} files: {} clean, {} mutated, {} without a substitute",
                s.functions,
                s.files,
                s.clean,
                s.mutated,
                s.unmutable.len()
            );
        }
        Command::Measure { run, clean, mutated, stage, template, highlight } => {
            let cfg = run.load()?;
            print!("{}", measure(&cfg, &clean, &mutated, stage.as_deref(), template.as_deref(), highlight)?);
        }
        Command::SimulateCost { pool, chat, n0, epsilon0, max_n, limit, monte_carlo } => {
            if max_n < 1 {
                bail!("max-n must be at least 1");
            }
            let params = CostParams { epsilon0, ..CostParams::default() };
            let pool: Vec<StageProfile> = pool
                .iter()
                .enumerate()
                .map(|(i, &(p, q, t))| StageProfile::local(&format!("local{}", i + 1), p, q, t))
                .collect();
            let chat = StageProfile::chat("chat", chat.0, chat.1, chat.2);
            let ranked = sweep_configurations(&pool, &chat, 1..=max_n, n0, &params)?;
            print!("{}", render_ranking(&ranked, limit));
            println!("\nbest per stage count:");
            print!("{}", render_ranking(&best_per_n(&ranked).into_iter().cloned().collect::<Vec<_>>(), usize::MAX));
            if let (Some(seed), Some(best)) = (monte_carlo, ranked.first()) {
                let stages: Vec<StageProfile> = best
                    .names
                    .iter()
                    .map(|n| pool.iter().chain([&chat]).find(|s| &s.name == n).cloned().expect("known stage"))
                    .collect();
                let sim = simulate_pipeline(&stages, n0.round() as u64, &params, seed)?;
                println!(
                    "\nsimulated best: cost {:.2} (analytic {:.2}), missed {} of expected {:.2}",
                    sim.cost, best.outcome.cost, sim.missed, best.outcome.missed
                );
            }
        }
        Command::Report { path } => print!("{}", report(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<PipelineError>() {
                Some(PipelineError::EmptyDataset) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
