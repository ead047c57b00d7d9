//! Solve the reference instance with every strategy and print a summary.

use sleepwake_core::dp::solve;
use sleepwake_core::policy::extract_policy;
use sleepwake_core::{Problem, SolverConfig, Strategy};

fn main() -> sleepwake_core::Result<()> {
    let problem = Problem::reference();
    let config = SolverConfig::default();
    for strategy in [
        Strategy::ControlM,
        Strategy::ControlQ,
        Strategy::OpenLoop { q: 0.05 },
        Strategy::FixedM { m: 1 },
    ] {
        let sol = solve(&problem, strategy, &config)?;
        let policy = extract_policy(&sol)?;
        println!(
            "{strategy}: J*(0) = {:.3}, gamma = {:.4}, iterations = {}, {:.1}s",
            sol.initial_cost(),
            policy.gamma,
            sol.report.iterations,
            sol.report.wall_seconds
        );
        if let Some(map) = &policy.awake_map {
            let peak = map.iter().max().copied().unwrap_or(0);
            println!("  max M* = {peak}, check = {:?}", policy.check);
        }
    }
    Ok(())
}
