//! Exhaustive finite-horizon reference for tiny binary-observation instances.
//!
//! The oracle never forms a posterior. It walks the full tree of
//! (awake count, observation vector) histories and carries the joint
//! probabilities `P(T = t, history)` for `t <= k` and `P(T > k, history)`,
//! minimizing the expected cost over stop / continue-with-`m` at every node.

use serde::{Deserialize, Serialize};

use crate::dp::{BeliefMdp, LikelihoodAtoms};
use crate::error::{invalid, Error, Result};
use crate::model::{ChangePrior, Costs};

/// Upper bound on history-tree nodes the oracle will enumerate.
pub const MAX_NODES: f64 = 2.0e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    /// Forced stop at slot `horizon`.
    pub horizon: usize,
    pub n: usize,
    /// Pre-change pmf over `{0, 1}`.
    pub g0: [f64; 2],
    /// Post-change pmf over `{0, 1}`.
    pub g1: [f64; 2],
    pub prior: ChangePrior,
    pub costs: Costs,
}

impl DiscreteInstance {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("g0", self.g0), ("g1", self.g1)] {
            if g.iter().any(|&x| !(0.0..=1.0).contains(&x)) || ((g[0] + g[1]) - 1.0).abs() > 1e-12 {
                return Err(invalid(name, "must be a pmf on {0, 1}"));
            }
        }
        if self.n == 0 {
            return Err(invalid("n", "need at least one sensor"));
        }
        self.prior.validate()?;
        self.costs.validate()?;
        let nodes = self.tree_size();
        if nodes > MAX_NODES {
            return Err(Error::EnumerationTooLarge(format!(
                "horizon {} with n = {} needs about {nodes:.0} nodes",
                self.horizon, self.n
            )));
        }
        Ok(())
    }

    /// Histories per slot multiply by `sum_m 2^m = 2^(n+1) - 1`.
    pub fn tree_size(&self) -> f64 {
        let branch = 2f64.powi(self.n as i32 + 1) - 1.0;
        (0..=self.horizon).map(|k| branch.powi(k as i32)).sum()
    }

    /// Belief MDP over the same model, with atoms indexed by the number of
    /// ones among the `m` awake sensors.
    pub fn belief_mdp(&self) -> Result<BeliefMdp> {
        self.validate()?;
        let atoms = (0..=self.n)
            .map(|m| {
                if m == 0 {
                    return LikelihoodAtoms::empty_slot();
                }
                let mut atoms = LikelihoodAtoms {
                    llr: Vec::new(),
                    w_pre: Vec::new(),
                    w_post: Vec::new(),
                };
                for ones in 0..=m {
                    let c = binomial(m, ones);
                    let zeros = (m - ones) as i32;
                    let pre = c * self.g0[1].powi(ones as i32) * self.g0[0].powi(zeros);
                    let post = c * self.g1[1].powi(ones as i32) * self.g1[0].powi(zeros);
                    if pre == 0.0 && post == 0.0 {
                        continue;
                    }
                    atoms.llr.push(match (pre > 0.0, post > 0.0) {
                        (true, true) => (post / pre).ln(),
                        (false, _) => f64::INFINITY,
                        (_, false) => f64::NEG_INFINITY,
                    });
                    atoms.w_pre.push(pre);
                    atoms.w_post.push(post);
                }
                atoms
            })
            .collect();
        BeliefMdp::from_atoms(self.prior.p, self.costs, atoms)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Optimal expected cost from initial belief `pi0` when the alarm must be
/// raised by slot `horizon`.
pub fn brute_force_value(instance: &DiscreteInstance, pi0: f64) -> Result<f64> {
    instance.validate()?;
    if !(0.0..=1.0).contains(&pi0) {
        return Err(invalid("pi0", format!("must lie in [0, 1], got {pi0}")));
    }
    // weights[t] = P(T = t, h) for t <= k; the last entry is P(T > k, h).
    let weights = vec![pi0, 1.0 - pi0];
    Ok(node_value(instance, 0, &weights))
}

fn node_value(inst: &DiscreteInstance, k: usize, weights: &[f64]) -> f64 {
    let (changed, waiting) = weights.split_at(weights.len() - 1);
    let waiting = waiting[0];
    let changed: f64 = changed.iter().sum();
    let stop = inst.costs.lambda_f * waiting;
    if k == inst.horizon {
        return stop;
    }
    let total = changed + waiting;
    let mut best = stop;
    let mut next = vec![0.0; weights.len() + 1];
    for m in 0..=inst.n {
        let mut cost = changed + inst.costs.lambda_s * m as f64 * total;
        for obs in 0u32..(1 << m) {
            let ones = obs.count_ones() as i32;
            let zeros = m as i32 - ones;
            let l_pre = inst.g0[1].powi(ones) * inst.g0[0].powi(zeros);
            let l_post = inst.g1[1].powi(ones) * inst.g1[0].powi(zeros);
            // Slot k+1 is post-change iff T <= k+1.
            for (dst, &w) in next.iter_mut().zip(changed_slice(weights)) {
                *dst = w * l_post;
            }
            let len = next.len();
            next[len - 2] = waiting * inst.prior.p * l_post;
            next[len - 1] = waiting * (1.0 - inst.prior.p) * l_pre;
            cost += node_value(inst, k + 1, &next);
        }
        if cost < best - crate::dp::STOP_TIE_EPS {
            best = cost;
        }
    }
    best
}

fn changed_slice(weights: &[f64]) -> &[f64] {
    &weights[..weights.len() - 1]
}
