//! Run configuration: a versioned JSON document validated before any compute.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sleepwake_core::dp::{QSearch, QuadratureMethod};
use sleepwake_core::sim::CalibrationConfig;
use sleepwake_core::{
    ChangePrior, Costs, Problem, QuadratureConfig, SensorModel, SimConfig, SolverConfig, Strategy,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub problem: ProblemBlock,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub sim: SimBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub calibration: CalibrationBlock,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_strategy() -> Strategy {
    Strategy::ControlM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub n: usize,
    pub rho: f64,
    pub p: f64,
    pub lambda_s: f64,
    pub lambda_f: f64,
    pub mu0: f64,
    pub sigma0: f64,
    pub mu1: f64,
    pub sigma1: f64,
}

impl ProblemBlock {
    pub fn to_problem(&self) -> sleepwake_core::Result<Problem> {
        Problem::new(
            SensorModel::new(self.mu0, self.sigma0, self.mu1, self.sigma1)?,
            ChangePrior::new(self.rho, self.p)?,
            Costs::new(self.lambda_s, self.lambda_f)?,
            self.n,
        )
    }

    pub fn reference() -> Self {
        let r = Problem::reference();
        Self {
            n: r.n,
            rho: r.prior.rho,
            p: r.prior.p,
            lambda_s: r.costs.lambda_s,
            lambda_f: r.costs.lambda_f,
            mu0: r.model.mu0,
            sigma0: r.model.sigma0,
            mu1: r.model.mu1,
            sigma1: r.model.sigma1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverBlock {
    pub grid_size: usize,
    /// `None` means `1e-6 * max(lambda_f, 1)`.
    pub tolerance: Option<f64>,
    pub max_iters: usize,
    pub q_grid_size: usize,
    pub q_refine_points: usize,
    pub quadrature: QuadratureMethod,
    pub quadrature_nodes: usize,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            grid_size: 1001,
            tolerance: None,
            max_iters: 10_000,
            q_grid_size: 101,
            q_refine_points: 21,
            quadrature: QuadratureMethod::Exact,
            quadrature_nodes: 129,
        }
    }
}

impl SolverBlock {
    pub fn to_solver(&self) -> SolverConfig {
        SolverConfig {
            grid_size: self.grid_size,
            tolerance: self.tolerance,
            max_iters: self.max_iters,
            q_search: QSearch::uniform(self.q_grid_size, self.q_refine_points),
            quadrature: QuadratureConfig {
                method: self.quadrature,
                nodes: self.quadrature_nodes,
                ..QuadratureConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimBlock {
    pub replications: usize,
    pub base_seed: u64,
    /// `None` means `ceil(100 / p)`.
    pub horizon_cap: Option<u64>,
}

impl Default for SimBlock {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            replications: d.replications,
            base_seed: d.base_seed,
            horizon_cap: d.horizon_cap,
        }
    }
}

impl SimBlock {
    pub fn to_sim(&self) -> SimConfig {
        SimConfig {
            replications: self.replications,
            base_seed: self.base_seed,
            horizon_cap: self.horizon_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    /// Explicit wake probabilities; when absent a uniform grid of
    /// `q_grid_size` points on `[0, 1]` is used.
    pub q_values: Option<Vec<f64>>,
    pub q_grid_size: usize,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            q_values: None,
            q_grid_size: 101,
        }
    }
}

impl SweepBlock {
    pub fn q_values(&self) -> Vec<f64> {
        match &self.q_values {
            Some(q) => q.clone(),
            None => QSearch::uniform(self.q_grid_size, 0).grid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationBlock {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub max_steps: usize,
    /// Accepted `|P_FA - alpha|`.
    pub tolerance: f64,
}

impl Default for CalibrationBlock {
    fn default() -> Self {
        Self {
            lambda_min: 0.0,
            lambda_max: 1000.0,
            max_steps: 40,
            tolerance: 0.005,
        }
    }
}

impl RunConfig {
    /// The reference instance with default solver and simulation settings.
    pub fn reference() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            problem: ProblemBlock::reference(),
            strategy: Strategy::ControlM,
            solver: SolverBlock::default(),
            sim: SimBlock::default(),
            sweep: SweepBlock::default(),
            calibration: CalibrationBlock::default(),
            out: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Check every field that any command may touch.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            bail!("schema: expected {SCHEMA_VERSION}, got {}", self.schema);
        }
        self.problem
            .to_problem()
            .context("problem block")?;
        self.strategy
            .validate(self.problem.n)
            .context("strategy")?;
        let s = &self.solver;
        if s.grid_size < 2 {
            bail!("solver.grid_size: need at least 2 points, got {}", s.grid_size);
        }
        if let Some(t) = s.tolerance {
            if !(t > 0.0 && t.is_finite()) {
                bail!("solver.tolerance: must be positive, got {t}");
            }
        }
        if s.max_iters == 0 {
            bail!("solver.max_iters: must be at least 1");
        }
        if s.q_grid_size < 1 {
            bail!("solver.q_grid_size: must be at least 1");
        }
        if s.quadrature_nodes < 1 {
            bail!("solver.quadrature_nodes: must be at least 1");
        }
        if self.sim.replications == 0 {
            bail!("sim.replications: must be at least 1");
        }
        if self.sim.horizon_cap == Some(0) {
            bail!("sim.horizon_cap: must be at least 1");
        }
        if let Some(q) = &self.sweep.q_values {
            if q.is_empty() {
                bail!("sweep.q_values: must not be empty");
            }
            if let Some(bad) = q.iter().find(|q| !(0.0..=1.0).contains(*q)) {
                bail!("sweep.q_values: {bad} is outside [0, 1]");
            }
        } else if self.sweep.q_grid_size < 1 {
            bail!("sweep.q_grid_size: must be at least 1");
        }
        let c = &self.calibration;
        if !(c.lambda_min >= 0.0 && c.lambda_max > c.lambda_min) {
            bail!("calibration.lambda_min/lambda_max: need 0 <= lambda_min < lambda_max");
        }
        if !(c.tolerance > 0.0) {
            bail!("calibration.tolerance: must be positive");
        }
        Ok(())
    }

    pub fn problem(&self) -> Problem {
        self.problem.to_problem().expect("validated problem block")
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        CalibrationConfig {
            lambda_min: self.calibration.lambda_min,
            lambda_max: self.calibration.lambda_max,
            max_steps: self.calibration.max_steps,
            solver: self.solver.to_solver(),
            sim: self.sim.to_sim(),
        }
    }
}
