//! Shared fixtures for the criterion benches.

use sleepwake_core::{Problem, SolverConfig};

/// Reference instance with a reduced grid so a full solve fits in a bench
/// iteration.
pub fn bench_problem() -> Problem {
    Problem::reference()
}

pub fn coarse_solver(grid_size: usize) -> SolverConfig {
    SolverConfig {
        grid_size,
        ..SolverConfig::default()
    }
}
