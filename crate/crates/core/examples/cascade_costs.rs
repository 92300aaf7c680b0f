//! Rank cascade layouts by expected cost and check the best one by simulation.

use tibscan::cascade::{render_ranking, simulate_pipeline, sweep_configurations, CostParams, StageProfile};

fn main() -> anyhow::Result<()> {
    let pool: Vec<StageProfile> = [(0.8, 0.98), (0.7, 0.99), (0.6, 0.97), (0.8, 0.95)]
        .iter()
        .enumerate()
        .map(|(i, &(p, q))| StageProfile::local(&format!("local{i}"), p, q, 2.0))
        .collect();
    let chat = StageProfile::chat("chat", 0.442, 0.84, 2.0);
    let params = CostParams { epsilon0: 1e-3, ..CostParams::default() };
    let ranked = sweep_configurations(&pool, &chat, 1..=5, 1000.0, &params)?;
    print!("{}", render_ranking(&ranked, 5));

    let best = &ranked[0];
    let stages: Vec<StageProfile> = best
        .names
        .iter()
        .map(|n| pool.iter().chain([&chat]).find(|s| &s.name == n).unwrap().clone())
        .collect();
    let sim = simulate_pipeline(&stages, 1_000_000, &params, 7)?;
    let scale = 1_000_000.0 / 1000.0;
    println!("simulated missed per 1000: {:.3} (expected {:.3})", sim.missed / scale, best.outcome.missed);
    Ok(())
}
