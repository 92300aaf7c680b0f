//! Acceptance criteria 1-9, one PASS/FAIL line each.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::hash::{Hash, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tibscan::cascade::{
    density_after, evaluate_pipeline, simulate_pipeline, sweep_configurations, CostParams, StageProfile,
};
use tibscan::catalog::{enumerate_tasks, parse_unit, ApproxTokenCounter, ContextStrategy, InfillingTask, TaskLimits};
use tibscan::config::RunConfig;
use tibscan::consistency::{check_consistency_with, ConsistencyConfig};
use tibscan::fixture::{python_repo, FixtureRepo};
use tibscan::gateway::{ChatRule, CompletionFixture, PredictionStep, ScriptedChat, ScriptedCompletion, StepRow};
use tibscan::lang::Language;
use tibscan::metrics::{precision, ConfusionCounts, MetricsSummary};
use tibscan::pipeline::{self, Backends};
use tibscan::prompt::{render_round, HighlightSet, Snippet, TemplateSet};
use tibscan::synth::LabeledSample;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(started: Instant, limit: Duration) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure(took < limit, format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(took)
}

fn stable_hash(parts: impl Hash) -> u64 {
    let mut h = std::hash::DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

// criterion 1

/// Candidate list served after `generated`, unsorted.
fn step_table(seed: u64, original: &str, generated: &str) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash((seed, generated)));
    let left = &original[generated.len().min(original.len())..];
    let width = rng.random_range(0..=10);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..width {
        let text: String = match rng.random_range(0..10) {
            0..=3 if !left.is_empty() => left[..rng.random_range(1..=left.len())].to_string(),
            4 if !left.is_empty() => format!("{}{}", &left[..1], ["a", "b", "c"][rng.random_range(0..3)]),
            _ => (0..rng.random_range(1..=3)).map(|_| ["a", "b", "c"][rng.random_range(0..3)]).collect(),
        };
        if seen.insert(text.clone()) {
            out.push(text);
        }
    }
    let mut probs: Vec<f64> = Vec::new();
    while probs.len() < out.len() {
        let p = (rng.random_range(1..=1000) as f64) / 1000.0;
        if !probs.contains(&p) {
            probs.push(p);
        }
    }
    out.into_iter().zip(probs).collect()
}

fn flag_valid(seed: u64, generated: &str, candidate: &str) -> bool {
    stable_hash((seed, "valid", generated, candidate)) % 10 < 7
}

/// Straightforward interpreter of the check loop. A step whose candidates contain no
/// continuation would be re-queried forever by a deterministic model, each
/// time adding its deviations to the rank sum, so it is inconsistent.
fn reference(seed: u64, original: &str, cfg: &ConsistencyConfig) -> bool {
    let mut rank_sum = 0u32;
    let mut generated = String::new();
    let mut left = original.to_string();
    let mut steps = 0;
    while !left.is_empty() {
        if steps == cfg.max_steps {
            return false;
        }
        steps += 1;
        let mut list = step_table(seed, original, &generated);
        list.sort_by(|a, b| b.1.total_cmp(&a.1));
        list.truncate(cfg.k);
        let mut matched = None;
        for (token, prob) in &list {
            if !flag_valid(seed, &generated, token) {
                continue;
            }
            if left.starts_with(token.as_str()) {
                matched = Some(token.clone());
                break;
            }
            if *prob > cfg.prob_thresh {
                return false;
            }
            rank_sum += 1;
        }
        let Some(token) = matched else {
            return false;
        };
        left.drain(..token.len());
        generated.push_str(&token);
        if rank_sum > cfg.rank_thresh {
            return false;
        }
    }
    true
}

fn identifier_task(name: &str) -> Arc<InfillingTask> {
    let text = format!("def f():\n    return {name}\n");
    let unit = parse_unit(Path::new("t.py"), Language::Python, &text).unwrap();
    let set = enumerate_tasks(&unit, ContextStrategy::Function, &TaskLimits::default(), &ApproxTokenCounter);
    Arc::new(set.tasks.into_iter().find(|t| t.original == name).expect("task for identifier"))
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tasks: HashMap<String, Arc<InfillingTask>> = HashMap::new();
    let (mut consistent, total) = (0, 1000);
    for case in 0..total {
        let original: String = (0..rng.random_range(1..=6)).map(|_| ["a", "b"][rng.random_range(0..2)]).collect();
        let cfg = ConsistencyConfig {
            prob_thresh: rng.random_range(0.05..0.99),
            rank_thresh: rng.random_range(0..=4),
            k: rng.random_range(1..=10),
            max_steps: 16,
        };
        let seed = rng.random();
        let task = tasks.entry(original.clone()).or_insert_with(|| identifier_task(&original)).clone();
        let orig = original.clone();
        let backend = ScriptedCompletion::from_fn("table", move |session, k| {
            PredictionStep::new(step_table(seed, &orig, &session.forced_text()), k)
        });
        let got = check_consistency_with(&task, &backend, &cfg, |done, cand| flag_valid(seed, done, cand))
            .map_err(|e| e.to_string())?;
        let want = reference(seed, &original, &cfg);
        ensure(got.consistent == want, format!("case {case}: {original:?} {cfg:?} got {got:?}, reference {want}"))?;
        consistent += want as usize;
    }
    let took = within(started, Duration::from_secs(10))?;
    Ok(format!("{total} tables agree ({consistent} consistent) in {took:.1?}"))
}

// criterion 2

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n0 = 1_000_000u64;
    let mut checks = 0;
    for config in 0..50 {
        let n = rng.random_range(2..=5);
        let stages: Vec<StageProfile> = (0..n)
            .map(|i| {
                let (p, q) = (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0));
                if i + 1 == n {
                    StageProfile::chat("chat", p, q, 2.0)
                } else {
                    StageProfile::local(&format!("s{i}"), p, q, 2.0)
                }
            })
            .collect();
        let epsilon0 = [1e-2, 1e-3, 1e-4][rng.random_range(0..3)];
        let params = CostParams { epsilon0, ..CostParams::default() };
        let analytic = evaluate_pipeline(&stages, n0 as f64, &params).map_err(|e| e.to_string())?;
        let sim = simulate_pipeline(&stages, n0, &params, 1000 + config).map_err(|e| e.to_string())?;
        for (a, s) in analytic.stages.iter().zip(&sim.stages) {
            let escalated = s.tp + s.fp;
            if escalated == 0.0 {
                continue;
            }
            let e = a.epsilon_after;
            let sigma = (e * (1.0 - e) / escalated).sqrt();
            ensure(
                (s.epsilon_after - e).abs() <= 3.0 * sigma,
                format!("config {config} stage {}: eps {} vs {e} (3σ = {})", a.name, s.epsilon_after, 3.0 * sigma),
            )?;
            checks += 1;
        }
        let pi = analytic.missed / n0 as f64;
        let sigma_m = (n0 as f64 * pi * (1.0 - pi)).sqrt();
        ensure(
            (sim.missed - analytic.missed).abs() <= 3.0 * sigma_m,
            format!("config {config}: M {} vs {} (3σ = {})", sim.missed, analytic.missed, 3.0 * sigma_m),
        )?;
        checks += 1;
    }
    let took = within(started, Duration::from_secs(60))?;
    Ok(format!("{checks} densities and miss counts within 3σ in {took:.1?}"))
}

// criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut grid: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..10_000 {
        grid.push((rng.random_range(1e-12..1.0), rng.random_range(0.0..=1.0), rng.random_range(1e-12..=1.0)));
    }
    for &(e, p, q) in &grid {
        let zero = density_after(0.0, p, q).map_err(|err| err.to_string())?;
        ensure(zero == 0.0, format!("density_after(0, {p}, {q}) = {zero}"))?;
        let one = density_after(e, 1.0, q).map_err(|err| err.to_string())?;
        ensure(one == 1.0, format!("density_after({e}, 1, {q}) = {one}"))?;
    }
    Ok(format!("{} random points exact at both fixed points", grid.len()))
}

// criterion 4

fn criterion_4() -> Outcome {
    let chat = StageProfile::chat("chat", 0.442, 0.84, 2.0);
    let mut table = Vec::new();
    let mut best_n: HashMap<(u64, usize), usize> = HashMap::new();
    let mut cost: HashMap<(u64, usize, usize), f64> = HashMap::new();
    for (pi, p) in [0.6, 0.8].into_iter().enumerate() {
        let pool: Vec<StageProfile> = (0..4).map(|i| StageProfile::local(&format!("m{i}"), p, 0.98, 2.0)).collect();
        for (ei, epsilon0) in [1e-4, 1e-3, 1e-2].into_iter().enumerate() {
            let params = CostParams { epsilon0, ..CostParams::default() };
            let ranked = sweep_configurations(&pool, &chat, 1..=5, 1000.0, &params).map_err(|e| e.to_string())?;
            best_n.insert((pi as u64, ei), ranked[0].n());
            for r in &ranked {
                let slot = cost.entry((pi as u64, ei, r.n())).or_insert(f64::INFINITY);
                *slot = slot.min(r.outcome.cost);
            }
        }
    }
    for pi in 0..2 {
        let ns: Vec<usize> = (0..3).map(|ei| best_n[&(pi, ei)]).collect();
        ensure(
            ns.windows(2).all(|w| w[0] >= w[1]) && ns[0] > ns[2],
            format!("optimal n over eps 1e-4, 1e-3, 1e-2 is {ns:?}, not decreasing"),
        )?;
        table.push(format!("p={}: n*={ns:?}", [0.6, 0.8][pi as usize]));
    }
    // n = 1 is the chat stage alone and does not depend on p
    for ei in 0..3 {
        for n in 2..=5 {
            let (lo, hi) = (cost[&(1, ei, n)], cost[&(0, ei, n)]);
            ensure(lo < hi, format!("eps index {ei}, n={n}: p=0.8 cost {lo} not below p=0.6 cost {hi}"))?;
        }
    }
    Ok(format!("{}; p=0.8 cheaper in all 12 cells with a local stage", table.join(", ")))
}

// criterion 5

fn criterion_5() -> Outcome {
    // tp_l, fp_l (D'), tp_f, fp_f (D'), fp_l (D), e.fp_l, fp_f (D), e.fp_f
    let rows = [
        ("1", [81, 203, 72, 28, 404, 0, 29, 0], "72.0", "0.0"),
        ("1/2FTCa", [78, 126, 72, 26, 294, 92, 23, 7], "72.0", "23.8"),
        ("1/2FTCa w/ HL", [92, 93, 84, 12, 174, 138, 56, 34], "84.0", "44.2"),
    ];
    let mut seen = Vec::new();
    for (name, c, rec, spe) in rows {
        let counts = ConfusionCounts {
            mutated_samples: 100,
            clean_samples: 100,
            tp_l: c[0],
            fp_l_mutated: c[1],
            tp_f: c[2],
            fp_f_mutated: c[3],
            fn_f: 100 - c[2],
            fp_l: c[4],
            excluded_fp_l: c[5],
            fp_f: c[6],
            excluded_fp_f: c[7],
            ..ConfusionCounts::default()
        };
        let s = MetricsSummary::from_counts(counts);
        let got = (format!("{:.1}", s.recall_f.unwrap()), format!("{:.1}", s.specificity_l.unwrap()));
        ensure(got == (rec.to_string(), spe.to_string()), format!("row {name}: got {got:?}"))?;
        seen.push(format!("{}/{}", got.0, got.1));
    }
    for (reports, correct, want) in [(314, 74, "23.57"), (77, 28, "36.36")] {
        let got = format!("{:.2}", precision(reports, correct).unwrap());
        ensure(got == want, format!("precision {correct}/{reports} = {got}"))?;
        seen.push(format!("{got}%"));
    }
    Ok(seen.join(", "))
}

// criterion 6

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn criterion_6() -> Outcome {
    let dir = golden_dir();
    let code = fs::read_to_string(dir.join("quote_url.py")).map_err(|e| e.to_string())?;
    let snippet = Snippet::new("quote_url", Language::Python, code, 987);
    let system = fs::read_to_string(dir.join("system.txt")).map_err(|e| e.to_string())?;
    let set = TemplateSet::builtin();
    let mut files = 0;
    for id in ["1", "1FT", "1/2FT", "1/2FT/3P", "1/2FT/3Ca", "1/2FTCa", "1/2FTCa+HL"] {
        let template = set.get(id).map_err(|e| e.to_string())?;
        let slug = id.replace('/', "_").replace('+', "_");
        let hl = HighlightSet::new(&snippet, [991], 4).unwrap();
        let highlights = template.takes_highlights().then_some(&hl);
        for round in 0..template.rounds.len() {
            let rendered = render_round(set, template, round, &snippet, highlights).map_err(|e| e.to_string())?;
            let path = dir.join(&slug).join(format!("round{}.txt", round + 1));
            let want = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            ensure(rendered.user == want, format!("{id} round {}: user text differs from {}", round + 1, path.display()))?;
            ensure(rendered.system == system, format!("{id}: system text differs"))?;
            files += 1;
        }
        let extra = dir.join(&slug).join(format!("round{}.txt", template.rounds.len() + 1));
        ensure(!extra.exists(), format!("{id}: golden has more rounds than the template"))?;
    }
    Ok(format!("7 templates, {files} rounds byte-identical"))
}

// criterion 7

fn leaves(lang: Language, text: &str) -> Result<Vec<(usize, String)>, String> {
    let tree = lang.parse(text).ok_or("no tree")?;
    let root = tree.root_node();
    ensure(!root.has_error(), "parse error")?;
    let mut out = Vec::new();
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        if node.child_count() == 0 {
            out.push((node.start_byte(), text[node.byte_range()].to_string()));
        } else {
            let mut cursor = node.walk();
            let children: Vec<_> = node.children(&mut cursor).collect();
            stack.extend(children.into_iter().rev());
        }
    }
    Ok(out)
}

fn one_edit(clean: &LabeledSample, mutated: &LabeledSample) -> Result<(), String> {
    let m = mutated.mutation.as_ref().ok_or("no mutation recorded")?;
    let a = leaves(clean.language, &clean.function_text)?;
    let b = leaves(mutated.language, &mutated.function_text).map_err(|e| format!("mutated: {e}"))?;
    ensure(a.len() == b.len(), "token counts differ")?;
    let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i].1 != b[i].1).collect();
    ensure(diffs.len() == 1, format!("{} tokens differ", diffs.len()))?;
    let i = diffs[0];
    ensure(a[i] == (m.offset, m.original.clone()), format!("clean token {:?} vs recorded {:?}", a[i], m))?;
    ensure(b[i] == (m.offset, m.substitute.clone()), format!("mutated token {:?} vs recorded {:?}", b[i], m))?;
    ensure(
        mutated.function_text.lines().nth(m.line_no - 1).is_some_and(|l| l.contains(m.substitute.as_str())),
        "recorded line does not carry the substitute",
    )
}

fn write_repo(repo: &FixtureRepo, dir: &Path) -> PathBuf {
    let root = dir.join("repo");
    repo.write(&root).unwrap();
    root
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = write_repo(&python_repo(500, 10, 7), tmp.path());
    let cfg = RunConfig {
        root,
        output_dir: tmp.path().join("out"),
        ..RunConfig::default()
    };
    let (dataset, summary) = pipeline::synthesize(&cfg).map_err(|e| e.to_string())?;
    ensure(summary.functions == 500, format!("{} functions", summary.functions))?;
    ensure(!dataset.mutated.is_empty(), "no mutated samples")?;
    let clean: HashMap<&str, &LabeledSample> = dataset.clean.iter().map(|s| (s.pair.as_str(), s)).collect();
    for m in &dataset.mutated {
        let c = clean.get(m.pair.as_str()).ok_or(format!("{}: no clean twin", m.id))?;
        one_edit(c, m).map_err(|e| format!("{}: {e}", m.id))?;
    }
    let took = within(started, Duration::from_secs(30))?;
    Ok(format!("{} of {} samples parse with one token edit in {took:.1?}", dataset.mutated.len(), summary.functions))
}

// criteria 8 and 9

struct FunnelFixture {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    repo: FixtureRepo,
    chat: ScriptedChat,
}

/// A 50-function repository with 5 planted bugs, two scripted local stages
/// with p = 0.8 and q = 1.0 over its tasks, and a scripted chat stage that
/// confirms planted lines and offers filtered-out decoys elsewhere.
fn funnel_fixture() -> FunnelFixture {
    let tmp = tempfile::tempdir().unwrap();
    let mut repo = python_repo(50, 10, 8);
    let mut picks: Vec<usize> = (0..50).collect();
    picks.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    repo.plant(&picks[..5]);
    write_repo(&repo, tmp.path());

    let base = format!(
        "root = \"repo\"\nrepo = \"fixture\"\noutput_dir = \"out\"\nseed = 8\ntemplate_id = \"1/2FTCa+HL\"\n\
         [[stages]]\nname = \"local-a\"\nkind = \"scripted\"\nfixture = \"local-a.json\"\ncapability = {{ completion_logprobs = true, fim = true }}\n\
         [[stages]]\nname = \"local-b\"\nkind = \"scripted\"\nfixture = \"local-b.json\"\ncapability = {{ completion_logprobs = true, fim = true }}\n\
         [[stages]]\nname = \"chat\"\nkind = \"scripted\"\nfixture = \"chat.json\"\ncapability = {{ chat_json = true }}\n"
    );
    let config = tmp.path().join("run.toml");
    fs::write(&config, base).unwrap();
    let cfg = RunConfig::load(&config).unwrap();
    let corpus = pipeline::load_corpus(&cfg).unwrap();
    let tasks: Vec<InfillingTask> = corpus
        .units
        .iter()
        .flat_map(|u| enumerate_tasks(u, cfg.context_strategy, &cfg.limits, &ApproxTokenCounter).tasks)
        .collect();
    let is_planted = |t: &InfillingTask| {
        repo.planted().any(|f| f.file == t.path && f.plant.line_no == t.line_no && f.plant.substitute == t.original)
    };
    let clean: Vec<&InfillingTask> = tasks.iter().filter(|t| !is_planted(t)).collect();
    for (stage, seed) in [("local-a", 81u64), ("local-b", 82)] {
        let mut order: Vec<usize> = (0..clean.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let flagged = (clean.len() as f64 * 0.2).round() as usize;
        let row = |t: &InfillingTask, cand: &str| StepRow {
            task_id: Some(t.task_id.clone()),
            path: None,
            line_no: None,
            original: None,
            forced: vec![],
            candidates: vec![(cand.to_string(), 0.97)],
        };
        let mut rows: Vec<StepRow> = order[..flagged].iter().map(|&i| row(clean[i], "zz_other")).collect();
        for f in repo.planted() {
            let t = tasks.iter().find(|t| is_planted(t) && t.path == f.file && t.line_no == f.plant.line_no).unwrap();
            rows.push(row(t, &f.plant.original));
        }
        let fixture = CompletionFixture { rows, ..CompletionFixture::default() };
        fs::write(tmp.path().join(format!("{stage}.json")), serde_json::to_string(&fixture).unwrap()).unwrap();
    }

    let mut rules: Vec<ChatRule> = repo
        .planted()
        .map(|f| ChatRule {
            round: None,
            contains: Some(format!("def {}(", f.name)),
            response: json!({"bugs": [{
                "code_line": f.plant.planted_line,
                "explanation": format!("`{}` is used where `{}` is expected", f.plant.substitute, f.plant.original),
                "fixed_line": f.plant.planted_line.replacen(&f.plant.substitute, &f.plant.original, 1),
                "token_level": true,
                "category": "Logic Bug"
            }]}),
        })
        .collect();
    // decoys the default filter removes
    for (i, f) in repo.functions.iter().filter(|f| !f.planted).take(6).enumerate() {
        let (token_level, category) = if i % 2 == 0 { (false, "Logic Bug") } else { (true, "Enhancement") };
        rules.push(ChatRule {
            round: None,
            contains: Some(format!("def {}(", f.name)),
            response: json!({"bugs": [{
                "code_line": format!("def {}(", f.name),
                "explanation": "could be clearer",
                "fixed_line": "",
                "token_level": token_level,
                "category": category
            }]}),
        });
    }
    fs::write(tmp.path().join("chat.json"), json!({ "rules": rules }).to_string()).unwrap();
    let chat = ScriptedChat::from_rules("chat", rules);
    FunnelFixture { _tmp: tmp, config, repo, chat }
}

fn criterion_8() -> Outcome {
    let fx = funnel_fixture();
    let cfg = RunConfig::load(&fx.config).map_err(|e| e.to_string())?;
    let built = Backends::from_config(&cfg).map_err(|e| e.to_string())?;
    let backends = Backends { locals: built.locals, chat: Arc::new(fx.chat.clone()) };
    let corpus = pipeline::load_corpus(&cfg).map_err(|e| e.to_string())?;
    let out = pipeline::scan_with(&cfg, &corpus, &backends).map_err(|e| e.to_string())?;
    let s = &out.summary;

    let want: BTreeSet<(String, usize)> =
        fx.repo.planted().map(|f| (f.file.display().to_string(), f.plant.line_no)).collect();
    let got: BTreeSet<(String, usize)> = out.reports.iter().map(|r| (r.file.clone(), r.line_no)).collect();
    ensure(want.len() == 5, "fixture must plant 5 bugs")?;
    ensure(out.reports.len() == 5 && got == want, format!("reports {got:?}, planted {want:?}"))?;
    for r in &out.reports {
        let f = fx.repo.planted().find(|f| f.plant.line_no == r.line_no && f.file.display().to_string() == r.file).unwrap();
        ensure(r.original == f.plant.substitute && r.function == f.name, format!("report {r:?}"))?;
    }
    ensure(s.accounted_tasks() == s.initial_tasks, format!("funnel sums to {} of {}", s.accounted_tasks(), s.initial_tasks))?;
    ensure(s.stages.len() == 3 && s.unprocessed_tasks == 0 && !s.partial, "unexpected stage layout")?;
    for w in s.stages.windows(2) {
        ensure(w[1].entered == w[0].survived, "stage inputs must equal previous survivors")?;
    }
    let clean_tasks = s.initial_tasks - 5;
    let expected_drop = clean_tasks - (clean_tasks as f64 * 0.2).round() as u64;
    ensure(s.stages[0].dropped == expected_drop, format!("stage 1 dropped {}, want {expected_drop}", s.stages[0].dropped))?;
    let escalated: BTreeSet<(String, String)> = out
        .verdicts
        .iter()
        .filter(|v| v.stage_name == "local-b" && !v.verdict.consistent)
        .map(|v| {
            let t = out.tasks.iter().find(|t| t.task_id == v.verdict.task_id).unwrap();
            (t.path.display().to_string(), t.function.clone())
        })
        .collect();
    ensure(s.functions_escalated == escalated.len() as u64, "chat must see exactly the functions with survivors")?;
    ensure(s.chat_calls == fx.chat.calls() as u64, format!("ledger {} vs served {}", s.chat_calls, fx.chat.calls()))?;
    ensure(s.findings_excluded > 0, "decoys should reach the filter")?;
    let funnel: Vec<String> = s.stages.iter().map(|st| format!("{}->{}", st.entered, st.survived)).collect();
    Ok(format!("5/5 planted reports; funnel {} of {} tasks; {} chat calls", funnel.join(", "), s.initial_tasks, s.chat_calls))
}

fn read_outputs(dir: &Path, names: &[&str]) -> Vec<(String, Vec<u8>)> {
    names.iter().map(|n| (n.to_string(), fs::read(dir.join(n)).unwrap_or_default())).collect()
}

fn criterion_9() -> Outcome {
    let fx = funnel_fixture();
    let scan_files = [pipeline::TASKS_FILE, pipeline::VERDICTS_FILE, pipeline::FINDINGS_FILE, pipeline::REPORTS_FILE];
    let synth_files = [pipeline::CLEAN_FILE, pipeline::MUTATED_FILE];
    let mut runs = Vec::new();
    for (i, workers) in [1usize, 8, 8].into_iter().enumerate() {
        let mut cfg = RunConfig::load(&fx.config).map_err(|e| e.to_string())?;
        cfg.workers = workers;
        cfg.output_dir = cfg.output_dir.join(format!("run{i}"));
        pipeline::scan(&cfg).and_then(|o| o.write(&cfg.output_dir)).map_err(|e| e.to_string())?;
        pipeline::synthesize(&cfg).map_err(|e| e.to_string())?;
        let mut files = read_outputs(&cfg.output_dir, &scan_files);
        files.extend(read_outputs(&cfg.output_dir, &synth_files));
        runs.push(files);
    }
    for (name, bytes) in &runs[0] {
        ensure(!bytes.is_empty() || name == pipeline::FINDINGS_FILE, format!("{name} is empty"))?;
    }
    for other in &runs[1..] {
        for ((name, a), (_, b)) in runs[0].iter().zip(other) {
            ensure(a == b, format!("{name} differs between runs"))?;
        }
    }
    let bytes: usize = runs[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!("{} JSONL files, {bytes} bytes, identical over 3 runs (workers 1, 8, 8)", runs[0].len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u8, &str, fn() -> Outcome); 9] = [
        (1, "consistency check matches reference interpreter", criterion_1),
        (2, "cascade closed form agrees with Monte Carlo", criterion_2),
        (3, "density recurrence fixed points are exact", criterion_3),
        (4, "cost sweep reproduces optimal-n and p orderings", criterion_4),
        (5, "metric arithmetic reproduces reference rows", criterion_5),
        (6, "rendered templates match golden transcriptions", criterion_6),
        (7, "synthesized samples differ by one parsed token", criterion_7),
        (8, "fixture funnel yields exactly the planted reports", criterion_8),
        (9, "scan and synthesize outputs are deterministic", criterion_9),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {id} PASS  {name}: {detail}"),
            Err(why) => {
                println!("criterion {id} FAIL  {name}: {why}");
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
