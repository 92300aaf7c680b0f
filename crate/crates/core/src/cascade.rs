//! Cascaded filtering: expected-value cost model, a Monte-Carlo check of
//! it, and an exhaustive search over stage selections.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageRole {
    /// A completion model running the consistency check.
    #[default]
    Local,
    /// The final chat model reviewing survivors.
    Chat,
}

/// Accuracy and speed of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub name: String,
    /// True-negative rate.
    pub p: f64,
    /// True-positive rate.
    pub q: f64,
    /// Seconds per case.
    pub t: f64,
    #[serde(default)]
    pub role: StageRole,
    /// Backend profile serving this stage, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

impl StageProfile {
    pub fn local(name: &str, p: f64, q: f64, t: f64) -> StageProfile {
        StageProfile {
            name: name.to_string(),
            p,
            q,
            t,
            role: StageRole::Local,
            backend: None,
        }
    }

    pub fn chat(name: &str, p: f64, q: f64, t: f64) -> StageProfile {
        StageProfile {
            role: StageRole::Chat,
            ..StageProfile::local(name, p, q, t)
        }
    }

    fn check(&self) -> Result<(), CascadeError> {
        let rate = |x: f64| (0.0..=1.0).contains(&x);
        if !rate(self.p) || !rate(self.q) || !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(CascadeError::InvalidStage(self.name.clone()));
        }
        Ok(())
    }
}

/// Unit costs of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Per final-stage call.
    pub c_api: f64,
    /// Per second of compute.
    pub c_comp: f64,
    /// Per missed bug.
    pub c_miss: f64,
    /// Per report inspected.
    pub c_check: f64,
    /// Bug density among the initial cases.
    pub epsilon0: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            c_api: 0.025,
            c_comp: 2.49 / 3600.0,
            c_miss: 500.0,
            c_check: 2.0,
            epsilon0: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CascadeError {
    #[error("density recurrence has a non-positive denominator (eps={epsilon}, p={p}, q={q})")]
    DegenerateStage { epsilon: f64, p: f64, q: f64 },
    #[error("stage {0} has rates outside [0, 1] or a negative time")]
    InvalidStage(String),
    #[error("a pipeline needs at least one stage")]
    Empty,
    #[error("epsilon0 must lie in [0, 1]")]
    Density,
}

/// Bug density among the cases a stage escalates.
pub fn density_after(epsilon_prev: f64, p: f64, q: f64) -> Result<f64, CascadeError> {
    // factored form of 1 - p - e + (p+q)e, exact at p = 1 and at e = 1
    let denom = (1.0 - p) * (1.0 - epsilon_prev) + q * epsilon_prev;
    if denom > 0.0 {
        return Ok(q * epsilon_prev / denom);
    }
    if epsilon_prev == 0.0 {
        // nothing escalates and nothing is a bug: the limit is 0
        return Ok(0.0);
    }
    Err(CascadeError::DegenerateStage {
        epsilon: epsilon_prev,
        p,
        q,
    })
}

/// Expected (or tallied) counts at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub name: String,
    /// Cases entering the stage.
    pub n: f64,
    pub tn: f64,
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    /// Density among the cases leaving the stage.
    pub epsilon_after: f64,
}

impl StageOutcome {
    pub fn escalated(&self) -> f64 {
        self.tp + self.fp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub api: f64,
    pub compute: f64,
    pub miss: f64,
    pub check: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub stages: Vec<StageOutcome>,
    /// Missed bugs over all stages.
    pub missed: f64,
    /// Total seconds.
    pub time: f64,
    /// Reports reaching inspection.
    pub reports: f64,
    pub cost: f64,
    pub breakdown: CostBreakdown,
}

fn validate(stages: &[StageProfile], params: &CostParams) -> Result<(), CascadeError> {
    if stages.is_empty() {
        return Err(CascadeError::Empty);
    }
    if !(0.0..=1.0).contains(&params.epsilon0) {
        return Err(CascadeError::Density);
    }
    stages.iter().try_for_each(StageProfile::check)
}

/// Closes the books on per-stage counts. The last stage is billed per call
/// on the cases it receives; its escalations are the inspected reports.
fn finish(stages: &[StageProfile], outcomes: Vec<StageOutcome>, params: &CostParams) -> PipelineOutcome {
    let missed: f64 = outcomes.iter().map(|o| o.fn_).sum();
    let time: f64 = outcomes.iter().zip(stages).map(|(o, s)| o.n * s.t).sum();
    let last = outcomes.last().expect("non-empty");
    let reports = last.escalated();
    let breakdown = CostBreakdown {
        api: params.c_api * last.n,
        compute: params.c_comp * time,
        miss: params.c_miss * missed,
        check: params.c_check * reports,
    };
    PipelineOutcome {
        cost: breakdown.api + breakdown.compute + breakdown.miss + breakdown.check,
        stages: outcomes,
        missed,
        time,
        reports,
        breakdown,
    }
}

/// Expected counts and cost of running `stages` in order over `n0` cases.
pub fn evaluate_pipeline(
    stages: &[StageProfile],
    n0: f64,
    params: &CostParams,
) -> Result<PipelineOutcome, CascadeError> {
    validate(stages, params)?;
    let mut n = n0;
    let mut eps = params.epsilon0;
    let mut outcomes = Vec::with_capacity(stages.len());
    for s in stages {
        let next_eps = density_after(eps, s.p, s.q)?;
        let o = StageOutcome {
            name: s.name.clone(),
            n,
            tn: n * s.p * (1.0 - eps),
            tp: n * s.q * eps,
            fp: n * (1.0 - s.p) * (1.0 - eps),
            fn_: n * (1.0 - s.q) * eps,
            epsilon_after: next_eps,
        };
        n = o.escalated();
        eps = next_eps;
        outcomes.push(o);
    }
    Ok(finish(stages, outcomes, params))
}

const CHUNK: u64 = 1 << 16;

#[derive(Clone, Default)]
struct Tally {
    tn: Vec<u64>,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl Tally {
    fn new(stages: usize) -> Tally {
        Tally {
            tn: vec![0; stages],
            tp: vec![0; stages],
            fp: vec![0; stages],
            fn_: vec![0; stages],
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for i in 0..self.tn.len() {
            self.tn[i] += other.tn[i];
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        self
    }
}

/// Draws `n0` cases, each a bug with probability `epsilon0`, and passes
/// every case through per-stage Bernoulli decisions. Cases are split into
/// fixed-size chunks, each with its own ChaCha stream of `seed`, so the
/// result does not depend on the number of worker threads.
pub fn simulate_pipeline(
    stages: &[StageProfile],
    n0: u64,
    params: &CostParams,
    seed: u64,
) -> Result<PipelineOutcome, CascadeError> {
    validate(stages, params)?;
    let chunks = n0.div_ceil(CHUNK);
    let tally = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let mut t = Tally::new(stages.len());
            let len = CHUNK.min(n0 - chunk * CHUNK);
            for _ in 0..len {
                let bug = rng.random_bool(params.epsilon0);
                for (i, s) in stages.iter().enumerate() {
                    if bug {
                        if rng.random_bool(s.q) {
                            t.tp[i] += 1;
                        } else {
                            t.fn_[i] += 1;
                            break;
                        }
                    } else if rng.random_bool(s.p) {
                        t.tn[i] += 1;
                        break;
                    } else {
                        t.fp[i] += 1;
                    }
                }
            }
            t
        })
        .reduce(|| Tally::new(stages.len()), Tally::merge);

    let mut n = n0 as f64;
    let outcomes = stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (tp, fp) = (tally.tp[i] as f64, tally.fp[i] as f64);
            let o = StageOutcome {
                name: s.name.clone(),
                n,
                tn: tally.tn[i] as f64,
                tp,
                fp,
                fn_: tally.fn_[i] as f64,
                epsilon_after: if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 },
            };
            n = tp + fp;
            o
        })
        .collect();
    Ok(finish(stages, outcomes, params))
}

/// One evaluated stage selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConfig {
    /// Stage names in order, chat stage last.
    pub names: Vec<String>,
    pub outcome: PipelineOutcome,
}

impl RankedConfig {
    pub fn n(&self) -> usize {
        self.names.len()
    }
}

/// Evaluates every ordered selection of distinct local stages from `pool`
/// followed by `chat`, for total stage counts in `n_range` (the chat stage
/// counts as one). Results are sorted by cost, ties by name sequence.
pub fn sweep_configurations(
    pool: &[StageProfile],
    chat: &StageProfile,
    n_range: impl IntoIterator<Item = usize>,
    n0: f64,
    params: &CostParams,
) -> Result<Vec<RankedConfig>, CascadeError> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for n in n_range {
        if n == 0 || n - 1 > pool.len() || !seen.insert(n) {
            continue;
        }
        let mut selection = Vec::with_capacity(n - 1);
        let mut used = vec![false; pool.len()];
        permute(pool, n - 1, &mut selection, &mut used, &mut |locals| {
            let mut stages: Vec<StageProfile> = locals.iter().map(|&i| pool[i].clone()).collect();
            stages.push(chat.clone());
            let outcome = evaluate_pipeline(&stages, n0, params)?;
            out.push(RankedConfig {
                names: stages.into_iter().map(|s| s.name).collect(),
                outcome,
            });
            Ok(())
        })?;
    }
    out.sort_by(|a, b| a.outcome.cost.total_cmp(&b.outcome.cost).then_with(|| a.names.cmp(&b.names)));
    Ok(out)
}

fn permute(
    pool: &[StageProfile],
    size: usize,
    selection: &mut Vec<usize>,
    used: &mut [bool],
    visit: &mut dyn FnMut(&[usize]) -> Result<(), CascadeError>,
) -> Result<(), CascadeError> {
    if selection.len() == size {
        return visit(selection);
    }
    for i in 0..pool.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        selection.push(i);
        permute(pool, size, selection, used, visit)?;
        selection.pop();
        used[i] = false;
    }
    Ok(())
}

/// Cheapest configuration for each stage count.
pub fn best_per_n(ranked: &[RankedConfig]) -> Vec<&RankedConfig> {
    let mut best: Vec<&RankedConfig> = Vec::new();
    for r in ranked {
        if !best.iter().any(|b| b.n() == r.n()) {
            best.push(r);
        }
    }
    best.sort_by_key(|r| r.n());
    best
}

/// Aligned text table of a ranked sweep.
pub fn render_ranking(ranked: &[RankedConfig], limit: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>4}  {:>2}  {:>10}  {:>9}  {:>9}  {:>9}  {:>9}  stages",
        "rank", "n", "cost", "api", "compute", "miss", "check"
    );
    for (i, r) in ranked.iter().take(limit).enumerate() {
        let b = &r.outcome.breakdown;
        let _ = writeln!(
            s,
            "{:>4}  {:>2}  {:>10.2}  {:>9.2}  {:>9.2}  {:>9.2}  {:>9.2}  {}",
            i + 1,
            r.n(),
            r.outcome.cost,
            b.api,
            b.compute,
            b.miss,
            b.check,
            r.names.join(" > ")
        );
    }
    s
}
