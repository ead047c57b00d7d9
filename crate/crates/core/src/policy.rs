//! Optimal stopping threshold and sleep-wake maps extracted from a converged
//! value function, plus exact (grid) evaluation of a fixed policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{
    binomial_weights, BeliefGrid, BeliefMdp, ExpectationKernel, QSearch, Solution, Strategy,
    ValueFunction, STOP_TIE_EPS,
};
use crate::error::{invalid, Error, Result};

const BISECTION_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    ControlM,
    ControlQ,
    OpenLoop,
    FixedM,
}

/// What the fusion centre does after computing `pi_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Stop,
    /// Wake exactly `m` sensors in the next slot.
    Wake(usize),
    /// Wake each sensor independently with probability `q`.
    WakeProb(f64),
}

/// Counters comparing the enumeration argmin for `M*` with the
/// differential-cost threshold rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdRuleCheck {
    /// Continuation grid points inspected.
    pub points: usize,
    /// Points where `d(m; pi)` is not nonincreasing in `m`.
    pub nonmonotone_points: usize,
    /// Disagreements at points where `d` is monotone (expected to be zero).
    pub disagreements_monotone: usize,
    /// Disagreements where `d` is not monotone; the argmin is kept.
    pub disagreements_nonmonotone: usize,
}

/// Stationary policy: stop on `{pi >= gamma}`, otherwise follow the wake rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub n: usize,
    pub gamma: f64,
    pub grid: BeliefGrid,
    /// Optimal awake count per grid point (control-m).
    pub awake_map: Option<Vec<usize>>,
    /// Optimal wake probability per grid point (control-q).
    pub wake_prob_map: Option<Vec<f64>>,
    /// Wake probability for open-loop policies.
    pub fixed_q: Option<f64>,
    /// Awake count for fixed-m policies.
    pub fixed_m: Option<usize>,
    pub check: Option<ThresholdRuleCheck>,
}

impl Policy {
    /// Always `m` sensors awake, stop on `pi >= gamma`.
    pub fn fixed_awake(n: usize, m: usize, gamma: f64) -> Result<Self> {
        if m > n {
            return Err(Error::AwakeCountOutOfRange { m, n });
        }
        Ok(Self {
            kind: PolicyKind::FixedM,
            n,
            gamma,
            grid: BeliefGrid::uniform(2)?,
            awake_map: None,
            wake_prob_map: None,
            fixed_q: None,
            fixed_m: Some(m),
            check: None,
        })
    }

    pub fn open_loop(n: usize, q: f64, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(invalid("q", format!("must lie in [0, 1], got {q}")));
        }
        Ok(Self {
            kind: PolicyKind::OpenLoop,
            n,
            gamma,
            grid: BeliefGrid::uniform(2)?,
            awake_map: None,
            wake_prob_map: None,
            fixed_q: Some(q),
            fixed_m: None,
            check: None,
        })
    }

    /// Raise the alarm at once (`gamma = 0`).
    pub fn stop_immediately(n: usize) -> Self {
        Self::fixed_awake(n, 0, 0.0).expect("m = 0 is always valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(
                "gamma",
                format!("must lie in [0, 1], got {}", self.gamma),
            ));
        }
        let len = self.grid.len();
        match self.kind {
            PolicyKind::ControlM => match &self.awake_map {
                Some(map) if map.len() == len && map.iter().all(|&m| m <= self.n) => Ok(()),
                _ => Err(invalid(
                    "awake_map",
                    "missing, wrong length, or entry above n",
                )),
            },
            PolicyKind::ControlQ => match &self.wake_prob_map {
                Some(map) if map.len() == len && map.iter().all(|q| (0.0..=1.0).contains(q)) => {
                    Ok(())
                }
                _ => Err(invalid(
                    "wake_prob_map",
                    "missing, wrong length, or entry outside [0, 1]",
                )),
            },
            PolicyKind::OpenLoop => match self.fixed_q {
                Some(q) if (0.0..=1.0).contains(&q) => Ok(()),
                _ => Err(invalid("fixed_q", "missing or outside [0, 1]")),
            },
            PolicyKind::FixedM => match self.fixed_m {
                Some(m) if m <= self.n => Ok(()),
                _ => Err(invalid("fixed_m", "missing or above n")),
            },
        }
    }

    pub fn is_stop(&self, pi: f64) -> bool {
        pi >= self.gamma
    }

    /// Action at an arbitrary belief; maps are read at the nearest grid point.
    pub fn action(&self, pi: f64) -> Action {
        if self.is_stop(pi) {
            return Action::Stop;
        }
        match self.kind {
            PolicyKind::ControlM => {
                Action::Wake(self.awake_map.as_ref().unwrap()[self.grid.nearest(pi)])
            }
            PolicyKind::ControlQ => {
                Action::WakeProb(self.wake_prob_map.as_ref().unwrap()[self.grid.nearest(pi)])
            }
            PolicyKind::OpenLoop => Action::WakeProb(self.fixed_q.unwrap()),
            PolicyKind::FixedM => Action::Wake(self.fixed_m.unwrap()),
        }
    }

    /// Distribution of the awake count in the next slot when continuing.
    fn awake_distribution(&self, pi: f64) -> Vec<f64> {
        let mut w = vec![0.0; self.n + 1];
        let action = match self.kind {
            PolicyKind::OpenLoop => Action::WakeProb(self.fixed_q.unwrap_or(0.0)),
            PolicyKind::FixedM => Action::Wake(self.fixed_m.unwrap_or(0)),
            _ => self.action(pi),
        };
        match action {
            Action::Stop => {}
            Action::Wake(m) => w[m] = 1.0,
            Action::WakeProb(q) => w = binomial_weights(self.n, q),
        }
        w
    }
}

/// Sign profile of `H_J - C` over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StopProfile {
    pub points: Vec<f64>,
    /// `H_J(pi) - lambda_f (1 - pi)`; stopping is optimal where this is >= 0.
    pub margin: Vec<f64>,
}

impl StopProfile {
    pub fn stop(&self, i: usize) -> bool {
        self.margin[i] >= -STOP_TIE_EPS
    }

    /// Number of stop/continue switches along the grid.
    pub fn sign_changes(&self) -> usize {
        (1..self.points.len())
            .filter(|&i| self.stop(i) != self.stop(i - 1))
            .count()
    }
}

pub fn stop_profile(
    mdp: &BeliefMdp,
    j: &ValueFunction,
    strategy: Strategy,
    search: &QSearch,
) -> StopProfile {
    let points = j.grid().points().to_vec();
    let margin = points
        .par_iter()
        .map(|&pi| mdp.continuation(j, pi, strategy, search).0 - mdp.stop_cost(pi))
        .collect();
    StopProfile { points, margin }
}

/// Stopping threshold `Gamma`: the grid bracket of the first stop point,
/// refined by bisection on `H_J - C`. Returns 0 when stopping is optimal
/// everywhere.
pub fn extract_threshold(
    mdp: &BeliefMdp,
    j: &ValueFunction,
    strategy: Strategy,
    search: &QSearch,
) -> Result<f64> {
    let profile = stop_profile(mdp, j, strategy, search);
    let first_stop = (0..profile.points.len())
        .find(|&i| profile.stop(i))
        .ok_or_else(|| Error::DegenerateInstance("stopping is never optimal".into()))?;
    if (first_stop..profile.points.len()).any(|i| !profile.stop(i)) {
        return Err(Error::DegenerateInstance(format!(
            "stop set is not an interval ending at 1 ({} sign changes)",
            profile.sign_changes()
        )));
    }
    if first_stop == 0 {
        return Ok(0.0);
    }
    let margin = |pi: f64| mdp.continuation(j, pi, strategy, search).0 - mdp.stop_cost(pi);
    let (mut lo, mut hi) = (profile.points[first_stop - 1], profile.points[first_stop]);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if margin(mid) >= -STOP_TIE_EPS {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `d(m; pi) = B^(m-1)(pi) - B^(m)(pi)`, the marginal value of the m-th
/// awake sensor.
pub fn differential_cost(mdp: &BeliefMdp, j: &ValueFunction, pi: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(invalid("m", "differential cost is defined for m >= 1"));
    }
    Ok(mdp.expected_future_cost(j, pi, m - 1)? - mdp.expected_future_cost(j, pi, m)?)
}

/// Threshold form `max{m : d(m; pi) >= lambda_s}` (0 if no such m).
pub fn optimal_awake_count(
    mdp: &BeliefMdp,
    j: &ValueFunction,
    pi: f64,
    gamma: f64,
) -> Result<usize> {
    if pi >= gamma {
        return Err(Error::InStoppingRegion { pi, gamma });
    }
    let b: Vec<f64> = (0..=mdp.n)
        .map(|m| mdp.expected_future_cost(j, pi, m))
        .collect::<Result<_>>()?;
    Ok(threshold_rule(&b, mdp.costs.lambda_s))
}

fn threshold_rule(b: &[f64], lambda_s: f64) -> usize {
    (1..b.len())
        .filter(|&m| b[m - 1] - b[m] >= lambda_s)
        .max()
        .unwrap_or(0)
}

/// Minimizing wake probability in the continuation region.
pub fn optimal_wake_prob(
    mdp: &BeliefMdp,
    j: &ValueFunction,
    pi: f64,
    gamma: f64,
    search: &QSearch,
) -> Result<f64> {
    if pi >= gamma {
        return Err(Error::InStoppingRegion { pi, gamma });
    }
    if search.grid.is_empty() {
        return Err(Error::EmptyQGrid);
    }
    Ok(mdp.continuation(j, pi, Strategy::ControlQ, search).1)
}

/// Build the stationary policy of a converged solve.
pub fn extract_policy(solution: &Solution) -> Result<Policy> {
    let Solution {
        mdp,
        value: j,
        strategy,
        q_search,
        problem,
        ..
    } = solution;
    let gamma = extract_threshold(mdp, j, *strategy, q_search)?;
    let grid = j.grid().clone();
    let n = problem.n;
    let mut policy = Policy {
        kind: PolicyKind::FixedM,
        n,
        gamma,
        grid: grid.clone(),
        awake_map: None,
        wake_prob_map: None,
        fixed_q: None,
        fixed_m: None,
        check: None,
    };
    match *strategy {
        Strategy::ControlM => {
            let rows: Vec<(usize, Option<(bool, bool)>)> = grid
                .points()
                .par_iter()
                .map(|&pi| {
                    if pi >= gamma {
                        return (0, None);
                    }
                    let b: Vec<f64> = (0..=n)
                        .map(|m| mdp.expected_future_cost(j, pi, m).expect("m <= n"))
                        .collect();
                    let argmin = mdp.bellman_control_m(j, pi);
                    let chosen = if argmin.stop {
                        // Bisection placed gamma above this point, so continuing
                        // is within the tie margin; report the continuing argmin.
                        let (m, _) = (0..=n)
                            .map(|m| (m, mdp.costs.lambda_s * m as f64 + b[m]))
                            .fold(
                                (0, f64::INFINITY),
                                |acc, x| if x.1 < acc.1 { x } else { acc },
                            );
                        m
                    } else {
                        argmin.best
                    };
                    let monotone =
                        (2..=n).all(|m| (b[m - 2] - b[m - 1]) >= (b[m - 1] - b[m]) - 1e-12);
                    let agree = threshold_rule(&b, mdp.costs.lambda_s) == chosen;
                    (chosen, Some((monotone, agree)))
                })
                .collect();
            let mut check = ThresholdRuleCheck::default();
            for (_, flags) in &rows {
                if let Some((monotone, agree)) = *flags {
                    check.points += 1;
                    if !monotone {
                        check.nonmonotone_points += 1;
                    }
                    if !agree {
                        if monotone {
                            check.disagreements_monotone += 1;
                        } else {
                            check.disagreements_nonmonotone += 1;
                        }
                    }
                }
            }
            policy.kind = PolicyKind::ControlM;
            policy.awake_map = Some(rows.into_iter().map(|r| r.0).collect());
            policy.check = Some(check);
        }
        Strategy::ControlQ => {
            let map = grid
                .points()
                .par_iter()
                .map(|&pi| {
                    if pi >= gamma {
                        0.0
                    } else {
                        mdp.continuation(j, pi, Strategy::ControlQ, q_search).1
                    }
                })
                .collect();
            policy.kind = PolicyKind::ControlQ;
            policy.wake_prob_map = Some(map);
        }
        Strategy::OpenLoop { q } => {
            policy.kind = PolicyKind::OpenLoop;
            policy.fixed_q = Some(q);
        }
        Strategy::FixedM { m } => {
            policy.kind = PolicyKind::FixedM;
            policy.fixed_m = Some(m);
        }
    }
    Ok(policy)
}

/// Expected cost components of a fixed policy as functions of the starting
/// belief, computed on the grid without simulation.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    /// `E[(tau - T)^+]`.
    pub delay: ValueFunction,
    /// `P(tau < T)`.
    pub false_alarm: ValueFunction,
    /// `E[sum_k M_k]` (awake sensor-slots, not yet multiplied by `lambda_s`).
    pub sensor_slots: ValueFunction,
    pub lambda_s: f64,
    pub lambda_f: f64,
    pub iterations: usize,
}

impl PolicyEvaluation {
    pub fn total_cost(&self, pi: f64) -> f64 {
        self.lambda_f * self.false_alarm.eval(pi)
            + self.delay.eval(pi)
            + self.lambda_s * self.sensor_slots.eval(pi)
    }
}

/// Iterate the policy's linear cost recursions to a fixed point.
pub fn evaluate_policy(
    mdp: &BeliefMdp,
    policy: &Policy,
    grid: &BeliefGrid,
    tolerance: f64,
    max_iters: usize,
) -> Result<PolicyEvaluation> {
    let slots: Vec<usize> = match (policy.kind, &policy.awake_map) {
        (PolicyKind::FixedM, _) => vec![policy.fixed_m.unwrap_or(0)],
        (PolicyKind::ControlM, Some(map)) => {
            let mut s = map.clone();
            s.sort_unstable();
            s.dedup();
            s
        }
        _ => (0..=mdp.n).collect(),
    };
    let kernel = mdp.kernel_for(grid, &slots);
    evaluate_policy_with_kernel(mdp, &kernel, policy, grid, tolerance, max_iters)
}

/// [`evaluate_policy`] reusing a kernel built for `grid`.
pub fn evaluate_policy_with_kernel(
    mdp: &BeliefMdp,
    kernel: &ExpectationKernel,
    policy: &Policy,
    grid: &BeliefGrid,
    tolerance: f64,
    max_iters: usize,
) -> Result<PolicyEvaluation> {
    policy.validate()?;
    if policy.n != mdp.n {
        return Err(invalid("policy", "sensor count differs from the problem"));
    }
    if kernel.grid_len() != grid.len() {
        return Err(invalid("kernel", "built for a different grid"));
    }
    // A constant awake-count law collapses to one mixed kernel.
    let constant = match policy.kind {
        PolicyKind::OpenLoop | PolicyKind::FixedM => {
            let w = policy.awake_distribution(-1.0);
            let mean: f64 = w.iter().enumerate().map(|(m, x)| m as f64 * x).sum();
            Some((kernel.mixed(&w), mean))
        }
        _ => None,
    };
    let g = grid.len();
    let pts = grid.points();
    let weights: Vec<Vec<f64>> = if constant.is_some() {
        Vec::new()
    } else {
        pts.iter()
            .map(|&pi| policy.awake_distribution(pi))
            .collect()
    };
    let stop: Vec<bool> = pts.iter().map(|&pi| policy.is_stop(pi)).collect();
    let mut delay = vec![0.0; g];
    let mut fa = vec![0.0; g];
    let mut slots = vec![0.0; g];
    for iter in 1..=max_iters {
        let next: Vec<(f64, f64, f64)> = (0..g)
            .into_par_iter()
            .map(|i| {
                if stop[i] {
                    return (0.0, 1.0 - pts[i], 0.0);
                }
                if let Some((mix, mean)) = &constant {
                    return (
                        pts[i] + mix.row_dot(0, i, &delay),
                        mix.row_dot(0, i, &fa),
                        mean + mix.row_dot(0, i, &slots),
                    );
                }
                let (mut d, mut f, mut s) = (pts[i], 0.0, 0.0);
                for (m, &w) in weights[i].iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    d += w * kernel.row_dot(m, i, &delay);
                    f += w * kernel.row_dot(m, i, &fa);
                    s += w * (m as f64 + kernel.row_dot(m, i, &slots));
                }
                (d, f, s)
            })
            .collect();
        let mut change: f64 = 0.0;
        for (i, (d, f, s)) in next.into_iter().enumerate() {
            let total_new = mdp.costs.lambda_f * f + d + mdp.costs.lambda_s * s;
            let total_old = mdp.costs.lambda_f * fa[i] + delay[i] + mdp.costs.lambda_s * slots[i];
            change = change
                .max((total_new - total_old).abs())
                .max((d - delay[i]).abs())
                .max((f - fa[i]).abs());
            delay[i] = d;
            fa[i] = f;
            slots[i] = s;
        }
        if change < tolerance {
            return Ok(PolicyEvaluation {
                delay: ValueFunction::new(grid.clone(), delay)?,
                false_alarm: ValueFunction::new(grid.clone(), fa)?,
                sensor_slots: ValueFunction::new(grid.clone(), slots)?,
                lambda_s: mdp.costs.lambda_s,
                lambda_f: mdp.costs.lambda_f,
                iterations: iter,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        last_delta: f64::NAN,
    })
}
