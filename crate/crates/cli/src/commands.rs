//! Command implementations. Each writes its artifacts under an output
//! directory and returns a short summary for the terminal.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sleepwake_core::dp::{self, BeliefMdp, Solution, SolveReport};
use sleepwake_core::policy::{differential_cost, extract_policy, ThresholdRuleCheck};
use sleepwake_core::sim::{self, Calibration, CalibrationStep, SweepRow};
use sleepwake_core::{
    Action, BeliefGrid, Metrics, Policy, Problem, SimConfig, Strategy, ValueFunction,
};

use crate::config::{RunConfig, SCHEMA_VERSION};

/// Hex SHA-256 of the canonical JSON form of a problem.
pub fn fingerprint(problem: &Problem) -> String {
    let json = serde_json::to_string(problem).expect("problem serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Policy artifact: the policy plus what is needed to check it against a
/// later configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub schema: u32,
    pub problem_fingerprint: String,
    pub problem: Problem,
    pub strategy: Strategy,
    /// `J*(pi_0)` of the solve that produced the policy.
    pub initial_cost: f64,
    pub policy: Policy,
}

impl PolicyFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading policy {}", path.display()))?;
        let file: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing policy {}", path.display()))?;
        if file.schema != SCHEMA_VERSION {
            bail!("policy schema {} is not {SCHEMA_VERSION}", file.schema);
        }
        file.policy.validate()?;
        Ok(file)
    }

    /// Refuse a policy built for a different instance.
    pub fn check_against(&self, problem: &Problem) -> Result<()> {
        if self.policy.n != problem.n {
            bail!(
                "policy mismatch: policy has n = {}, config has n = {}",
                self.policy.n,
                problem.n
            );
        }
        let expected = fingerprint(problem);
        if self.problem_fingerprint != expected {
            bail!(
                "policy mismatch: problem fingerprint {} does not match config {}",
                self.problem_fingerprint,
                expected
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub strategy: String,
    pub pi0: f64,
    pub initial_cost: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub final_sup_norm_delta: f64,
    pub tolerance: f64,
    pub wall_seconds: f64,
    pub grid_size: usize,
    pub max_awake: Option<usize>,
    pub max_wake_prob: Option<f64>,
    pub threshold_rule_check: Option<ThresholdRuleCheck>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct ValueRow {
    pi: f64,
    #[serde(rename = "J")]
    j: f64,
    action_kind: &'static str,
    m_or_q: f64,
}

#[derive(Serialize)]
struct PolicyRow {
    pi: f64,
    action: &'static str,
    m_or_q: f64,
}

fn action_columns(action: Action) -> (&'static str, f64) {
    match action {
        Action::Stop => ("stop", 0.0),
        Action::Wake(m) => ("wake", m as f64),
        Action::WakeProb(q) => ("wake-prob", q),
    }
}

/// `J.csv`, `policy.csv`, `policy.json` and `report.json` for one solve.
pub fn write_solution(out: &Path, solution: &Solution, policy: &Policy) -> Result<SolveSummary> {
    ensure_dir(out)?;
    let grid = solution.value.grid();
    let mut jw = csv_writer(&out.join("J.csv"))?;
    let mut pw = csv_writer(&out.join("policy.csv"))?;
    for (i, &pi) in grid.points().iter().enumerate() {
        let action = policy.action(pi);
        let (kind, x) = action_columns(action);
        jw.serialize(ValueRow {
            pi,
            j: solution.value.values()[i],
            action_kind: if action == Action::Stop { "stop" } else { "continue" },
            m_or_q: x,
        })?;
        pw.serialize(PolicyRow {
            pi,
            action: kind,
            m_or_q: x,
        })?;
    }
    jw.flush()?;
    pw.flush()?;

    write_json(
        &out.join("policy.json"),
        &PolicyFile {
            schema: SCHEMA_VERSION,
            problem_fingerprint: fingerprint(&solution.problem),
            problem: solution.problem,
            strategy: solution.strategy,
            initial_cost: solution.initial_cost(),
            policy: policy.clone(),
        },
    )?;

    let cont = |pi: &f64| *pi < policy.gamma;
    let summary = SolveSummary {
        strategy: solution.strategy.to_string(),
        pi0: solution.problem.initial_belief(),
        initial_cost: solution.initial_cost(),
        gamma: policy.gamma,
        iterations: solution.report.iterations,
        final_sup_norm_delta: solution.report.final_sup_norm_delta,
        tolerance: solution.report.tolerance,
        wall_seconds: solution.report.wall_seconds,
        grid_size: grid.len(),
        max_awake: policy.awake_map.as_ref().map(|map| {
            grid.points()
                .iter()
                .zip(map)
                .filter(|(pi, _)| cont(pi))
                .map(|(_, &m)| m)
                .max()
                .unwrap_or(0)
        }),
        max_wake_prob: policy.wake_prob_map.as_ref().map(|map| {
            grid.points()
                .iter()
                .zip(map)
                .filter(|(pi, _)| cont(pi))
                .map(|(_, &q)| q)
                .fold(0.0, f64::max)
        }),
        threshold_rule_check: policy.check,
    };
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}

pub fn solve_and_extract(config: &RunConfig) -> Result<(Solution, Policy)> {
    let solution = dp::solve(&config.problem(), config.strategy, &config.solver.to_solver())?;
    let policy = extract_policy(&solution)?;
    Ok((solution, policy))
}

pub fn cmd_solve(config: &RunConfig, out: &Path) -> Result<SolveSummary> {
    let (solution, policy) = solve_and_extract(config)?;
    write_solution(out, &solution, &policy)
}

#[derive(Deserialize)]
struct ValueRowIn {
    pi: f64,
    #[serde(rename = "J")]
    j: f64,
}

/// Rebuild a policy from a previously written `J.csv`.
pub fn cmd_extract_policy(config: &RunConfig, values: &Path, out: &Path) -> Result<SolveSummary> {
    let mut reader = csv::Reader::from_path(values)
        .with_context(|| format!("reading {}", values.display()))?;
    let mut points = Vec::new();
    let mut j = Vec::new();
    for row in reader.deserialize() {
        let row: ValueRowIn = row.with_context(|| format!("parsing {}", values.display()))?;
        points.push(row.pi);
        j.push(row.j);
    }
    let grid = BeliefGrid::from_points(points)?;
    let value = ValueFunction::new(grid, j)?;
    let problem = config.problem();
    let solver = config.solver.to_solver();
    let solution = Solution {
        problem,
        strategy: config.strategy,
        mdp: BeliefMdp::from_problem(&problem, &solver.quadrature)?,
        value,
        report: SolveReport {
            iterations: 0,
            final_sup_norm_delta: f64::NAN,
            strategy: config.strategy.to_string(),
            wall_seconds: 0.0,
            tolerance: solver.tolerance_for(&problem.costs),
            delta_history: Vec::new(),
        },
        q_search: solver.q_search,
    };
    let policy = extract_policy(&solution)?;
    write_solution(out, &solution, &policy)
}

#[derive(Serialize)]
struct EpisodeRow {
    seed: u64,
    #[serde(rename = "T")]
    change_time: u64,
    tau: u64,
    delay: u64,
    false_alarm: u8,
    obs_cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub strategy: String,
    pub gamma: f64,
    /// `J*(pi_0)` of the solve behind the policy.
    pub dp_initial_cost: f64,
    pub base_seed: u64,
    pub metrics: Metrics,
}

#[derive(Serialize)]
struct TraceCsvRow {
    k: u64,
    pi: f64,
    m: usize,
}

fn write_trace(path: &Path, problem: &Problem, policy: &Policy, sim: &SimConfig) -> Result<()> {
    let ep = sim::run_replication(problem, policy, sim, 0, true)?;
    let mut w = csv_writer(path)?;
    for r in ep.trace.unwrap_or_default() {
        w.serialize(TraceCsvRow {
            k: r.k,
            pi: r.pi,
            m: r.m,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_simulate(
    config: &RunConfig,
    out: &Path,
    policy_path: Option<&Path>,
    trace: bool,
) -> Result<SimulateSummary> {
    let problem = config.problem();
    let (policy, strategy, dp_cost) = match policy_path {
        Some(path) => {
            let file = PolicyFile::load(path)?;
            file.check_against(&problem)?;
            (file.policy, file.strategy, file.initial_cost)
        }
        None => {
            let (solution, policy) = solve_and_extract(config)?;
            (policy, solution.strategy, solution.initial_cost())
        }
    };
    ensure_dir(out)?;
    let sim_config = config.sim.to_sim();
    let episodes = sim::simulate(&problem, &policy, &sim_config)?;
    let mut w = csv_writer(&out.join("episodes.csv"))?;
    for e in &episodes {
        w.serialize(EpisodeRow {
            seed: e.seed,
            change_time: e.change_time,
            tau: e.stop_time,
            delay: e.delay,
            false_alarm: u8::from(e.false_alarm),
            obs_cost: e.obs_cost,
        })?;
    }
    w.flush()?;
    let metrics = Metrics::from_episodes(&episodes, problem.costs.lambda_f)?;
    let summary = SimulateSummary {
        strategy: strategy.to_string(),
        gamma: policy.gamma,
        dp_initial_cost: dp_cost,
        base_seed: sim_config.base_seed,
        metrics,
    };
    write_json(&out.join("metrics.json"), &summary)?;
    if trace {
        write_trace(&out.join("trace.csv"), &problem, &policy, &sim_config)?;
    }
    Ok(summary)
}

#[derive(Serialize)]
struct SweepCsvRow {
    q: f64,
    #[serde(rename = "J0")]
    cost: f64,
    #[serde(rename = "E_DD")]
    mean_delay: f64,
    #[serde(rename = "P_FA")]
    prob_false_alarm: f64,
    gamma: f64,
    argmin: u8,
}

fn write_sweep(path: &Path, sweep: &sim::Sweep) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (i, r) in sweep.rows.iter().enumerate() {
        let SweepRow {
            q,
            cost,
            mean_delay,
            prob_false_alarm,
            gamma,
        } = *r;
        w.serialize(SweepCsvRow {
            q,
            cost,
            mean_delay,
            prob_false_alarm,
            gamma,
            argmin: u8::from(i == sweep.argmin),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep_q(config: &RunConfig, out: &Path) -> Result<SweepRow> {
    let sweep = sim::sweep_open_loop_q(
        &config.problem(),
        &config.sweep.q_values(),
        &config.solver.to_solver(),
    )?;
    ensure_dir(out)?;
    write_sweep(&out.join("sweep.csv"), &sweep)?;
    Ok(*sweep.best())
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub strategy: String,
    pub lambda_f: f64,
    pub prob_false_alarm: f64,
    pub target_alpha: f64,
    pub tolerance: f64,
    pub replications: usize,
    pub base_seed: u64,
    pub trace: Vec<CalibrationStep>,
}

pub fn cmd_calibrate(config: &RunConfig, out: &Path, target_alpha: f64) -> Result<CalibrationReport> {
    let Calibration {
        lambda_f,
        prob_false_alarm,
        target_alpha,
        tolerance,
        trace,
    } = sim::calibrate_lambda_f(
        &config.problem(),
        config.strategy,
        target_alpha,
        config.calibration.tolerance,
        &config.calibration_config(),
    )?;
    let report = CalibrationReport {
        strategy: config.strategy.to_string(),
        lambda_f,
        prob_false_alarm,
        target_alpha,
        tolerance,
        replications: config.sim.replications,
        base_seed: config.sim.base_seed,
        trace,
    };
    ensure_dir(out)?;
    write_json(&out.join("calibration.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct FiguresSummary {
    pub solves: Vec<SolveSummary>,
    pub open_loop_best: Vec<(f64, SweepRow)>,
    pub trace_files: Vec<PathBuf>,
}

/// Every data file behind the standard plots, in one run: value functions and
/// policies for each strategy, fixed awake counts 1..=3, differential costs,
/// open-loop cost curves for `lambda_s` in {config value, 0}, and sample
/// paths of the closed-loop and fixed-count policies on a common seed.
pub fn cmd_figures(config: &RunConfig, out: &Path) -> Result<FiguresSummary> {
    ensure_dir(out)?;
    let problem = config.problem();
    let solver = config.solver.to_solver();
    let mut solves = Vec::new();

    let control_m = dp::solve(&problem, Strategy::ControlM, &solver)?;
    let control_m_policy = extract_policy(&control_m)?;
    solves.push(write_solution(&out.join("control-m"), &control_m, &control_m_policy)?);
    write_differential_costs(&out.join("differential-cost.csv"), &control_m)?;

    let control_q = dp::solve(&problem, Strategy::ControlQ, &solver)?;
    let control_q_policy = extract_policy(&control_q)?;
    solves.push(write_solution(&out.join("control-q"), &control_q, &control_q_policy)?);

    for m in 1..=3.min(problem.n) {
        let sol = dp::solve(&problem, Strategy::FixedM { m }, &solver)?;
        let policy = extract_policy(&sol)?;
        solves.push(write_solution(&out.join(format!("fixed-m-{m}")), &sol, &policy)?);
    }

    let q_values = config.sweep.q_values();
    let mut open_loop_best = Vec::new();
    let mut lambdas = vec![problem.costs.lambda_s];
    if problem.costs.lambda_s != 0.0 {
        lambdas.push(0.0);
    }
    for lambda_s in lambdas {
        let sweep = sim::sweep_open_loop_q(&problem.with_lambda_s(lambda_s), &q_values, &solver)?;
        write_sweep(&out.join(format!("sweep-lambda_s-{lambda_s}.csv")), &sweep)?;
        open_loop_best.push((lambda_s, *sweep.best()));
    }

    // Sample paths share the change time through the common seed.
    let sim_config = config.sim.to_sim();
    let mut trace_files = Vec::new();
    let mut traced = vec![("control-m".to_string(), control_m_policy.clone())];
    for m in [3, problem.n] {
        if m <= problem.n {
            traced.push((
                format!("fixed-m-{m}"),
                Policy::fixed_awake(problem.n, m, control_m_policy.gamma)?,
            ));
        }
    }
    traced.dedup_by(|a, b| a.0 == b.0);
    for (name, policy) in traced {
        let path = out.join(format!("trace-{name}.csv"));
        write_trace(&path, &problem, &policy, &sim_config)?;
        trace_files.push(path);
    }

    let summary = FiguresSummary {
        solves,
        open_loop_best,
        trace_files,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_differential_costs(path: &Path, solution: &Solution) -> Result<()> {
    let n = solution.problem.n;
    let mut w = csv_writer(path)?;
    let mut header = vec!["pi".to_string()];
    header.extend((1..=n).map(|m| format!("d{m}")));
    w.write_record(&header)?;
    for &pi in solution.value.grid().points() {
        let mut record = vec![pi.to_string()];
        for m in 1..=n {
            record.push(differential_cost(&solution.mdp, &solution.value, pi, m)?.to_string());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
