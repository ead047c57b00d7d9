//! Monte Carlo episodes against a stationary policy, open-loop `q` sweeps and
//! false-alarm calibration of `lambda_f`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{posterior_from_llr, predict};
use crate::dp::{self, BeliefGrid, SolverConfig, Strategy};
use crate::error::{invalid, Error, Result};
use crate::model::{ChangePrior, ObservationDensity, Problem, Regime};
use crate::numeric::pairwise_sum;
use crate::policy::{
    evaluate_policy_with_kernel, extract_policy, extract_threshold, Action, Policy,
};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Simulation settings shared by every replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub replications: usize,
    pub base_seed: u64,
    /// Slot limit per episode; `None` means `ceil(100 / p)`.
    pub horizon_cap: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            replications: 10_000,
            base_seed: 0,
            horizon_cap: None,
        }
    }
}

impl SimConfig {
    pub fn horizon_for(&self, prior: &ChangePrior) -> u64 {
        self.horizon_cap
            .unwrap_or_else(|| (100.0 / prior.p).ceil().max(1.0) as u64)
    }

    /// Seed of replication `i`.
    pub fn seed(&self, i: usize) -> u64 {
        self.base_seed ^ i as u64
    }
}

/// One slot of a sample path: belief `pi_k` and the sensors awake in slot `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: u64,
    pub pi: f64,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub change_time: u64,
    pub stop_time: u64,
    /// `(tau - T)^+`.
    pub delay: u64,
    pub false_alarm: bool,
    /// `lambda_s * sum_k M_k`.
    pub obs_cost: f64,
    pub sensor_slots: u64,
    /// The horizon cap was hit before the threshold.
    pub truncated: bool,
    pub trace: Option<Vec<TraceRow>>,
}

impl EpisodeResult {
    pub fn total_cost(&self, lambda_f: f64) -> f64 {
        let fa = if self.false_alarm { lambda_f } else { 0.0 };
        fa + self.delay as f64 + self.obs_cost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `E[(tau - T)^+]`.
    pub mean_delay: f64,
    pub prob_false_alarm: f64,
    pub mean_obs_cost: f64,
    /// `lambda_f P_FA + E_DD + E[obs cost]`.
    pub mean_total_cost: f64,
    pub delay_half_width: f64,
    pub false_alarm_half_width: f64,
    pub obs_cost_half_width: f64,
    pub total_cost_half_width: f64,
    /// Standard error of `mean_total_cost`.
    pub total_cost_std_error: f64,
    /// Completed (non-truncated) episodes.
    pub replications: usize,
    pub truncated: usize,
}

impl Metrics {
    /// Aggregate episodes in the given order. Truncated runs are counted but
    /// excluded from the averages.
    pub fn from_episodes(episodes: &[EpisodeResult], lambda_f: f64) -> Result<Self> {
        let done: Vec<&EpisodeResult> = episodes.iter().filter(|e| !e.truncated).collect();
        if done.is_empty() {
            return Err(invalid("episodes", "no completed episodes to aggregate"));
        }
        let delay: Vec<f64> = done.iter().map(|e| e.delay as f64).collect();
        let fa: Vec<f64> = done
            .iter()
            .map(|e| f64::from(u8::from(e.false_alarm)))
            .collect();
        let obs: Vec<f64> = done.iter().map(|e| e.obs_cost).collect();
        let total: Vec<f64> = done.iter().map(|e| e.total_cost(lambda_f)).collect();
        let (md, sd) = mean_and_se(&delay);
        let (mf, sf) = mean_and_se(&fa);
        let (mo, so) = mean_and_se(&obs);
        let (mt, st) = mean_and_se(&total);
        Ok(Self {
            mean_delay: md,
            prob_false_alarm: mf,
            mean_obs_cost: mo,
            mean_total_cost: mt,
            delay_half_width: Z95 * sd,
            false_alarm_half_width: Z95 * sf,
            obs_cost_half_width: Z95 * so,
            total_cost_half_width: Z95 * st,
            total_cost_std_error: st,
            replications: done.len(),
            truncated: episodes.len() - done.len(),
        })
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `T = 0` with probability `rho`, else geometric on `{1, 2, ...}`.
pub fn sample_change_time<R: Rng + ?Sized>(rng: &mut R, prior: &ChangePrior) -> u64 {
    if rng.gen::<f64>() < prior.rho {
        return 0;
    }
    if prior.p >= 1.0 {
        return 1;
    }
    // Number of failures before the first success, so `T - 1`.
    1 + Geometric::new(prior.p).expect("validated p").sample(rng)
}

/// Run `policy` from `pi_0 = rho` until it stops or `horizon_cap` slots pass.
pub fn run_episode<R: Rng + ?Sized>(
    problem: &Problem,
    policy: &Policy,
    rng: &mut R,
    horizon_cap: u64,
    trace: bool,
) -> Result<EpisodeResult> {
    if policy.n != problem.n {
        return Err(invalid(
            "policy",
            format!("built for n = {}, problem has n = {}", policy.n, problem.n),
        ));
    }
    if horizon_cap == 0 {
        return Err(invalid("horizon_cap", "must be at least 1"));
    }
    let change_time = sample_change_time(rng, &problem.prior);
    let model = &problem.model;
    let mut pi = problem.initial_belief();
    let mut k: u64 = 0;
    let mut slots: u64 = 0;
    let mut rows = trace.then(|| vec![TraceRow { k: 0, pi, m: 0 }]);
    let truncated = loop {
        let m = match policy.action(pi) {
            Action::Stop => break false,
            _ if k >= horizon_cap => break true,
            Action::Wake(m) => m,
            Action::WakeProb(q) => Binomial::new(problem.n as u64, q)
                .expect("q in [0, 1]")
                .sample(rng) as usize,
        };
        let regime = if k + 1 >= change_time {
            Regime::Post
        } else {
            Regime::Pre
        };
        let mut llr = 0.0;
        for _ in 0..m {
            llr += model.log_likelihood_ratio(model.sample(regime, rng));
        }
        pi = posterior_from_llr(predict(pi, problem.prior.p), llr);
        k += 1;
        slots += m as u64;
        if let Some(rows) = rows.as_mut() {
            rows.push(TraceRow { k, pi, m });
        }
    };
    Ok(EpisodeResult {
        seed: 0,
        change_time,
        stop_time: k,
        delay: k.saturating_sub(change_time),
        false_alarm: !truncated && k < change_time,
        obs_cost: problem.costs.lambda_s * slots as f64,
        sensor_slots: slots,
        truncated,
        trace: rows,
    })
}

/// Replication `i` of a seeded batch; identical inputs give identical output.
pub fn run_replication(
    problem: &Problem,
    policy: &Policy,
    config: &SimConfig,
    i: usize,
    trace: bool,
) -> Result<EpisodeResult> {
    let seed = config.seed(i);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep = run_episode(
        problem,
        policy,
        &mut rng,
        config.horizon_for(&problem.prior),
        trace,
    )?;
    ep.seed = seed;
    Ok(ep)
}

/// All replications of a batch, in replication order.
pub fn simulate(
    problem: &Problem,
    policy: &Policy,
    config: &SimConfig,
) -> Result<Vec<EpisodeResult>> {
    if config.replications == 0 {
        return Err(invalid("replications", "must be at least 1"));
    }
    problem.validate()?;
    policy.validate()?;
    (0..config.replications)
        .into_par_iter()
        .map(|i| run_replication(problem, policy, config, i, false))
        .collect()
}

pub fn estimate_metrics(problem: &Problem, policy: &Policy, config: &SimConfig) -> Result<Metrics> {
    let episodes = simulate(problem, policy, config)?;
    Metrics::from_episodes(&episodes, problem.costs.lambda_f)
}

/// One point of the open-loop cost curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub q: f64,
    /// `J*(rho)` of the open-loop problem with this `q`.
    pub cost: f64,
    /// `E[(tau - T)^+]` of the corresponding threshold policy.
    pub mean_delay: f64,
    pub prob_false_alarm: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// Index of the minimizing row (first one on ties).
    pub argmin: usize,
}

impl Sweep {
    pub fn best(&self) -> &SweepRow {
        &self.rows[self.argmin]
    }
}

/// Solve the open-loop problem for every `q` and report cost and delay at
/// `pi_0 = rho`. Delay and false-alarm probability come from exact policy
/// evaluation on the solver grid.
pub fn sweep_open_loop_q(
    problem: &Problem,
    q_values: &[f64],
    solver: &SolverConfig,
) -> Result<Sweep> {
    if q_values.is_empty() {
        return Err(Error::EmptyQGrid);
    }
    let mdp = dp::BeliefMdp::from_problem(problem, &solver.quadrature)?;
    let grid = BeliefGrid::uniform(solver.grid_size)?;
    let tolerance = solver.tolerance_for(&problem.costs);
    let pi0 = problem.initial_belief();
    let kernel = mdp.kernel(&grid);
    let mut rows = Vec::with_capacity(q_values.len());
    for &q in q_values {
        let strategy = Strategy::OpenLoop { q };
        let (value, _) = dp::value_iteration_with_kernel(&mdp, &kernel, strategy, &grid, solver)?;
        let gamma = extract_threshold(&mdp, &value, strategy, &solver.q_search)?;
        let policy = Policy::open_loop(problem.n, q, gamma)?;
        let eval = evaluate_policy_with_kernel(
            &mdp,
            &kernel,
            &policy,
            &grid,
            tolerance,
            solver.max_iters,
        )?;
        rows.push(SweepRow {
            q,
            cost: value.eval(pi0),
            mean_delay: eval.delay.eval(pi0),
            prob_false_alarm: eval.false_alarm.eval(pi0),
            gamma,
        });
    }
    let argmin = (0..rows.len()).fold(0, |best, i| {
        if rows[i].cost < rows[best].cost {
            i
        } else {
            best
        }
    });
    Ok(Sweep { rows, argmin })
}

/// Bracket and budget for [`calibrate_lambda_f`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub max_steps: usize,
    pub solver: SolverConfig,
    /// Every trial reuses these seeds (common random numbers).
    pub sim: SimConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            lambda_min: 0.0,
            lambda_max: 1000.0,
            max_steps: 40,
            solver: SolverConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub lambda_f: f64,
    pub prob_false_alarm: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub lambda_f: f64,
    pub prob_false_alarm: f64,
    pub target_alpha: f64,
    pub tolerance: f64,
    /// Every trial in evaluation order, bracket ends first.
    pub trace: Vec<CalibrationStep>,
}

fn false_alarm_at(
    problem: &Problem,
    strategy: Strategy,
    lambda_f: f64,
    config: &CalibrationConfig,
) -> Result<CalibrationStep> {
    let trial = problem.with_lambda_f(lambda_f);
    let sol = dp::solve(&trial, strategy, &config.solver)?;
    let policy = extract_policy(&sol)?;
    let metrics = estimate_metrics(&trial, &policy, &config.sim)?;
    Ok(CalibrationStep {
        lambda_f,
        prob_false_alarm: metrics.prob_false_alarm,
        gamma: policy.gamma,
    })
}

/// Bisection on `lambda_f` until the simulated false-alarm probability of the
/// optimal policy is within `tolerance` of `target_alpha`.
pub fn calibrate_lambda_f(
    problem: &Problem,
    strategy: Strategy,
    target_alpha: f64,
    tolerance: f64,
    config: &CalibrationConfig,
) -> Result<Calibration> {
    if !(target_alpha > 0.0 && target_alpha < 1.0) {
        return Err(invalid(
            "target_alpha",
            format!("must lie in (0, 1), got {target_alpha}"),
        ));
    }
    if !(tolerance > 0.0) {
        return Err(invalid("tolerance", "must be positive"));
    }
    if !(config.lambda_min >= 0.0 && config.lambda_max > config.lambda_min) {
        return Err(invalid(
            "lambda bracket",
            "need 0 <= lambda_min < lambda_max",
        ));
    }
    let mut trace = Vec::new();
    let done = |s: &CalibrationStep| (s.prob_false_alarm - target_alpha).abs() <= tolerance;
    let finish = |s: CalibrationStep, trace: Vec<CalibrationStep>| Calibration {
        lambda_f: s.lambda_f,
        prob_false_alarm: s.prob_false_alarm,
        target_alpha,
        tolerance,
        trace,
    };

    let lo_step = false_alarm_at(problem, strategy, config.lambda_min, config)?;
    trace.push(lo_step);
    if done(&lo_step) {
        return Ok(finish(lo_step, trace));
    }
    let hi_step = false_alarm_at(problem, strategy, config.lambda_max, config)?;
    trace.push(hi_step);
    if done(&hi_step) {
        return Ok(finish(hi_step, trace));
    }
    // P_FA decreases in lambda_f, so the target must sit between the ends.
    if !(lo_step.prob_false_alarm > target_alpha && hi_step.prob_false_alarm < target_alpha) {
        return Err(Error::BracketNotFound {
            lo: config.lambda_min,
            hi: config.lambda_max,
            target: target_alpha,
        });
    }
    let (mut lo, mut hi) = (config.lambda_min, config.lambda_max);
    let mut last = hi_step;
    for _ in 0..config.max_steps {
        let mid = 0.5 * (lo + hi);
        let step = false_alarm_at(problem, strategy, mid, config)?;
        trace.push(step);
        if done(&step) {
            return Ok(finish(step, trace));
        }
        if step.prob_false_alarm > target_alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        last = step;
    }
    Err(Error::CalibrationNotConverged {
        steps: config.max_steps,
        p_fa: last.prob_false_alarm,
        target: target_alpha,
    })
}
