//! Value iteration for the three Bellman equations on a discretized belief
//! space.
//!
//! `B^(m)_J(pi) = E[J(Phi(pi, m, Y))]` over the predictive mixture
//! `phi2(y; pi~)` is computed in one of two ways.
//!
//! For equal-variance Gaussians the joint log-likelihood ratio of `m`
//! observations is itself Gaussian under each regime, and the posterior is
//! monotone in it. Since `J` is piecewise linear on the grid, its expectation
//! splits into one term per grid cell, and each term only needs normal
//! probabilities of the cell's LLR interval together with the identity
//! `E[pi' 1{cell}] = pi~ P_post(cell)`. The result is exact for the
//! interpolant ([`QuadratureMethod::Exact`], the default).
//!
//! Otherwise the expectation is a finite sum over *likelihood atoms*:
//! triples `(llr, w_pre, w_post)` such that, for any `g`,
//!
//! ```text
//! E[g(LLR(Y))] ~= sum_a (pi~ * w_post[a] + (1 - pi~) * w_pre[a]) * g(llr[a])
//! ```
//!
//! built from Gauss-Legendre nodes on the scalar statistic `s = sum_i y_i`
//! ([`QuadratureMethod::GaussLegendre`]), seeded Monte Carlo draws for
//! unequal variances, or exact pmfs for discrete observations (see
//! [`crate::oracle`]).
//!
//! For a fixed grid the weights do not depend on `J`, so each `B^(m)` becomes
//! a sparse linear map ([`ExpectationKernel`]) built once per solve.

use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;
use std::time::Instant;

use gauss_quad::legendre::GaussLegendre;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{posterior_from_llr, predict};
use crate::error::{invalid, Error, Result};
use crate::model::{Costs, ObservationDensity, Problem, Regime, SensorModel};
use crate::numeric::logit;

/// Stop is preferred when stop and continue costs agree within this margin.
pub const STOP_TIE_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Grid and value function
// ---------------------------------------------------------------------------

/// Ordered belief points spanning `[0, 1]`, with piecewise-linear
/// interpolation between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefGrid {
    points: Vec<f64>,
    uniform: bool,
}

impl BeliefGrid {
    pub fn uniform(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(invalid(
                "grid_size",
                format!("need at least 2 points, got {size}"),
            ));
        }
        let last = (size - 1) as f64;
        let points = (0..size).map(|i| i as f64 / last).collect();
        Ok(Self {
            points,
            uniform: true,
        })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 || points[0] != 0.0 || *points.last().unwrap() != 1.0 {
            return Err(invalid("grid", "must start at 0 and end at 1"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("grid", "points must be strictly increasing"));
        }
        Ok(Self {
            points,
            uniform: false,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Left cell index and fractional position of `pi` inside that cell.
    #[inline]
    pub fn locate(&self, pi: f64) -> (usize, f64) {
        let last = self.points.len() - 1;
        let pi = pi.clamp(0.0, 1.0);
        if self.uniform {
            let x = pi * last as f64;
            let i = (x.floor() as usize).min(last - 1);
            (i, x - i as f64)
        } else {
            let i = self.points.partition_point(|&v| v <= pi).clamp(1, last) - 1;
            let (a, b) = (self.points[i], self.points[i + 1]);
            (i, (pi - a) / (b - a))
        }
    }

    /// Index of the grid point nearest to `pi`.
    pub fn nearest(&self, pi: f64) -> usize {
        let (i, frac) = self.locate(pi);
        if frac > 0.5 {
            i + 1
        } else {
            i
        }
    }

    #[inline]
    pub fn interpolate(&self, values: &[f64], pi: f64) -> f64 {
        let (i, frac) = self.locate(pi);
        if frac == 0.0 {
            values[i]
        } else {
            values[i] + frac * (values[i + 1] - values[i])
        }
    }
}

/// Cost-to-go sampled on a [`BeliefGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    grid: BeliefGrid,
    values: Vec<f64>,
}

impl ValueFunction {
    pub fn new(grid: BeliefGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid("values", "length differs from grid"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: &BeliefGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.points().iter().map(|&pi| f(pi)).collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    /// `lambda_f (1 - pi)`, the horizon-0 cost and value-iteration start.
    pub fn stopping_cost(grid: &BeliefGrid, costs: &Costs) -> Self {
        Self::from_fn(grid, |pi| costs.lambda_f * (1.0 - pi))
    }

    pub fn grid(&self) -> &BeliefGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, pi: f64) -> f64 {
        self.grid.interpolate(&self.values, pi)
    }
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

/// Sleep-wake scheduling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Closed-loop choice of the awake count each slot.
    ControlM,
    /// Closed-loop choice of the per-sensor wake probability each slot.
    ControlQ,
    /// Each sensor wakes independently with a fixed probability.
    OpenLoop { q: f64 },
    /// Always `m` sensors awake; only the stopping rule is optimized.
    FixedM { m: usize },
}

impl Strategy {
    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::ControlM => "control-m",
            Strategy::ControlQ => "control-q",
            Strategy::OpenLoop { .. } => "open-loop",
            Strategy::FixedM { .. } => "fixed-m",
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            Strategy::OpenLoop { q } if !(0.0..=1.0).contains(&q) => {
                Err(invalid("q", format!("must lie in [0, 1], got {q}")))
            }
            Strategy::FixedM { m } if m > n => Err(Error::AwakeCountOutOfRange { m, n }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::OpenLoop { q } => write!(f, "open-loop={q}"),
            Strategy::FixedM { m } => write!(f, "fixed-m={m}"),
            other => f.write_str(other.tag()),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `control-m`, `control-q`, `open-loop=<q>` and `fixed-m=<m>`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once('=') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let bad = || invalid("strategy", format!("unrecognized strategy `{s}`"));
        match (head, arg) {
            ("control-m", None) => Ok(Strategy::ControlM),
            ("control-q", None) => Ok(Strategy::ControlQ),
            ("open-loop", Some(q)) => q
                .parse()
                .map(|q| Strategy::OpenLoop { q })
                .map_err(|_| bad()),
            ("fixed-m", Some(m)) => m.parse().map(|m| Strategy::FixedM { m }).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// Likelihood atoms
// ---------------------------------------------------------------------------

/// Finite representation of the joint LLR distribution of one slot's
/// observations under each regime.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LikelihoodAtoms {
    pub llr: Vec<f64>,
    pub w_pre: Vec<f64>,
    pub w_post: Vec<f64>,
}

impl LikelihoodAtoms {
    /// Zero awake sensors: the update is pure prediction.
    pub fn empty_slot() -> Self {
        Self {
            llr: vec![0.0],
            w_pre: vec![1.0],
            w_post: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.llr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.llr.is_empty()
    }

    fn push(&mut self, llr: f64, w_pre: f64, w_post: f64) {
        self.llr.push(llr);
        self.w_pre.push(w_pre);
        self.w_post.push(w_post);
    }

    /// Expectation of `g(posterior)` under `phi2(.; pi~)`.
    pub fn expect(&self, pi_tilde: f64, mut g: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for a in 0..self.llr.len() {
            let w = pi_tilde * self.w_post[a] + (1.0 - pi_tilde) * self.w_pre[a];
            if w != 0.0 {
                acc += w * g(posterior_from_llr(pi_tilde, self.llr[a]));
            }
        }
        acc
    }
}

/// Integration scheme for equal-variance Gaussian observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureMethod {
    /// Cell-wise normal probabilities; exact for the grid interpolant.
    #[default]
    Exact,
    /// Gauss-Legendre nodes on the sum statistic.
    GaussLegendre,
}

/// How `B^(m)` integrates over observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    pub method: QuadratureMethod,
    /// Gauss-Legendre nodes per mixture component.
    pub nodes: usize,
    /// Integration half-width in standard deviations of each component.
    pub half_width_sd: f64,
    /// Draws per regime for the Monte Carlo fallback.
    pub mc_draws: usize,
    pub mc_seed: u64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            method: QuadratureMethod::Exact,
            nodes: 129,
            half_width_sd: 8.0,
            mc_draws: 100_000,
            mc_seed: 0x0005_eed0_fa70,
        }
    }
}

fn gaussian_sum_atoms(model: &SensorModel, m: usize, cfg: &QuadratureConfig) -> LikelihoodAtoms {
    let rule = GaussLegendre::new(NonZeroUsize::new(cfg.nodes.max(1)).unwrap());
    let sd = model.sigma0 * (m as f64).sqrt();
    let mut atoms = LikelihoodAtoms::default();
    for regime in [Regime::Pre, Regime::Post] {
        let (mu, _) = model.params(regime);
        let centre = m as f64 * mu;
        let half = cfg.half_width_sd * sd;
        for &(node, weight) in rule.as_node_weight_pairs() {
            let s = centre + half * node;
            let z = (s - centre) / sd;
            let density = (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            let w = weight * half * density;
            let llr = model
                .sum_log_likelihood_ratio(m, s)
                .expect("equal variance");
            match regime {
                Regime::Pre => atoms.push(llr, w, 0.0),
                Regime::Post => atoms.push(llr, 0.0, w),
            }
        }
    }
    atoms
}

fn monte_carlo_atoms<D: ObservationDensity>(
    model: &D,
    m: usize,
    cfg: &QuadratureConfig,
) -> LikelihoodAtoms {
    let draws = cfg.mc_draws.max(1);
    let w = 1.0 / draws as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mc_seed ^ (m as u64).wrapping_mul(0x9e37_79b9));
    let mut atoms = LikelihoodAtoms::default();
    for regime in [Regime::Pre, Regime::Post] {
        for _ in 0..draws {
            let llr: f64 = (0..m)
                .map(|_| model.log_likelihood_ratio(model.sample(regime, &mut rng)))
                .sum();
            match regime {
                Regime::Pre => atoms.push(llr, w, 0.0),
                Regime::Post => atoms.push(llr, 0.0, w),
            }
        }
    }
    atoms
}

/// Cell weights below this are dropped; the lost mass is at most
/// `grid_len * PRUNE_WEIGHT`.
const PRUNE_WEIGHT: f64 = 1e-16;

/// Law of the joint LLR of `m` equal-variance Gaussian observations: normal
/// with the same spread under both regimes.
#[derive(Debug, Clone, Copy, PartialEq)]
struct GaussianLlr {
    mean_pre: f64,
    mean_post: f64,
    sd: f64,
}

impl GaussianLlr {
    fn new(model: &SensorModel, m: usize) -> Self {
        let var = model.sigma0 * model.sigma0;
        let a = (model.mu1 - model.mu0) / var;
        let b = -(m as f64) * (model.mu1 * model.mu1 - model.mu0 * model.mu0) / (2.0 * var);
        Self {
            mean_pre: a * m as f64 * model.mu0 + b,
            mean_post: a * m as f64 * model.mu1 + b,
            sd: a.abs() * model.sigma0 * (m as f64).sqrt(),
        }
    }

    /// Weights `w` with `E[J(pi')] = sum_k w_k J(points[k])` for the
    /// piecewise-linear `J`.
    fn cell_weights(&self, grid: &BeliefGrid, pi_tilde: f64, out: &mut Vec<(u32, f64)>) {
        out.clear();
        let pts = grid.points();
        let last = pts.len() - 1;
        if pi_tilde <= 0.0 {
            out.push((0, 1.0));
            return;
        }
        if pi_tilde >= 1.0 {
            out.push((last as u32, 1.0));
            return;
        }
        let lp = logit(pi_tilde);
        let z = |k: usize, mean: f64| (logit(pts[k]) - lp - mean) / self.sd;
        let (mut lo_pre, mut lo_post) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut carry = 0.0;
        for k in 0..last {
            let (hi_pre, hi_post) = if k + 1 == last {
                (f64::INFINITY, f64::INFINITY)
            } else {
                (z(k + 1, self.mean_pre), z(k + 1, self.mean_post))
            };
            let post_mass = pi_tilde * normal_mass(lo_post, hi_post);
            let mass = post_mass + (1.0 - pi_tilde) * normal_mass(lo_pre, hi_pre);
            let h = pts[k + 1] - pts[k];
            // E[J | cell] mass split between the two ends of the cell.
            let w_hi = ((post_mass - pts[k] * mass) / h).max(0.0);
            let w_lo = (mass - w_hi).max(0.0);
            if w_lo + carry > PRUNE_WEIGHT {
                out.push((k as u32, w_lo + carry));
            }
            carry = w_hi;
            lo_pre = hi_pre;
            lo_post = hi_post;
        }
        if carry > PRUNE_WEIGHT {
            out.push((last as u32, carry));
        }
    }
}

/// `P(lo < Z < hi)` for standard normal `Z`, accurate in both tails.
fn normal_mass(lo: f64, hi: f64) -> f64 {
    use std::f64::consts::FRAC_1_SQRT_2;
    if hi <= lo {
        return 0.0;
    }
    let m = if lo >= 0.0 {
        0.5 * (libm::erfc(lo * FRAC_1_SQRT_2) - libm::erfc(hi * FRAC_1_SQRT_2))
    } else if hi <= 0.0 {
        0.5 * (libm::erfc(-hi * FRAC_1_SQRT_2) - libm::erfc(-lo * FRAC_1_SQRT_2))
    } else {
        1.0 - 0.5 * (libm::erfc(hi * FRAC_1_SQRT_2) + libm::erfc(-lo * FRAC_1_SQRT_2))
    };
    m.max(0.0)
}

/// Belief-state MDP: everything the Bellman operators need.
#[derive(Debug, Clone)]
pub struct BeliefMdp {
    pub p: f64,
    pub costs: Costs,
    pub n: usize,
    atoms: Vec<LikelihoodAtoms>,
    /// Per-m LLR laws when the exact cell-wise scheme applies.
    exact: Option<Vec<GaussianLlr>>,
}

impl BeliefMdp {
    pub fn from_problem(problem: &Problem, quad: &QuadratureConfig) -> Result<Self> {
        problem.validate()?;
        let exact = (problem.model.equal_variance() && quad.method == QuadratureMethod::Exact)
            .then(|| {
                (0..=problem.n)
                    .map(|m| GaussianLlr::new(&problem.model, m))
                    .collect()
            });
        let atoms = (0..=problem.n)
            .map(|m| {
                if m == 0 || exact.is_some() {
                    LikelihoodAtoms::empty_slot()
                } else if problem.model.equal_variance() {
                    gaussian_sum_atoms(&problem.model, m, quad)
                } else {
                    monte_carlo_atoms(&problem.model, m, quad)
                }
            })
            .collect();
        Ok(Self {
            p: problem.prior.p,
            costs: problem.costs,
            n: problem.n,
            atoms,
            exact,
        })
    }

    /// Build from explicit atoms; `atoms[m]` describes a slot with `m` awake
    /// sensors and must have length `n + 1`.
    pub fn from_atoms(p: f64, costs: Costs, atoms: Vec<LikelihoodAtoms>) -> Result<Self> {
        if atoms.len() < 2 {
            return Err(invalid(
                "atoms",
                "need entries for m = 0 and at least one sensor",
            ));
        }
        costs.validate()?;
        Ok(Self {
            p,
            costs,
            n: atoms.len() - 1,
            atoms,
            exact: None,
        })
    }

    /// Likelihood atoms of slots with `m` awake sensors. Under the exact
    /// Gaussian scheme only `m = 0` carries atoms; the rest are placeholders.
    pub fn atoms(&self, m: usize) -> &LikelihoodAtoms {
        &self.atoms[m]
    }

    /// Whether `B^(m)` uses the exact cell-wise Gaussian scheme.
    pub fn is_exact(&self) -> bool {
        self.exact.is_some()
    }

    #[inline]
    pub fn stop_cost(&self, pi: f64) -> f64 {
        self.costs.lambda_f * (1.0 - pi)
    }

    fn check_m(&self, m: usize) -> Result<()> {
        if m > self.n {
            Err(Error::AwakeCountOutOfRange { m, n: self.n })
        } else {
            Ok(())
        }
    }

    /// `B^(m)_J(pi)`.
    pub fn expected_future_cost(&self, j: &ValueFunction, pi: f64, m: usize) -> Result<f64> {
        self.check_m(m)?;
        Ok(self.b_unchecked(j, pi, m))
    }

    fn b_unchecked(&self, j: &ValueFunction, pi: f64, m: usize) -> f64 {
        let pt = predict(pi, self.p);
        if m == 0 {
            return j.eval(pt);
        }
        if let Some(laws) = &self.exact {
            let mut w = Vec::new();
            laws[m].cell_weights(j.grid(), pt, &mut w);
            let v = j.values();
            return w.iter().map(|&(k, x)| x * v[k as usize]).sum();
        }
        self.atoms[m].expect(pt, |post| j.eval(post))
    }

    fn b_all(&self, j: &ValueFunction, pi: f64) -> Vec<f64> {
        (0..=self.n).map(|m| self.b_unchecked(j, pi, m)).collect()
    }

    /// Control of the awake count at a single belief.
    pub fn bellman_control_m(&self, j: &ValueFunction, pi: f64) -> Decision<usize> {
        let b = self.b_all(j, pi);
        let (best, a) = best_awake_count(&b, self.costs.lambda_s);
        Decision::new(self.stop_cost(pi), pi + a, best, 0)
    }

    /// Control of the wake probability at a single belief.
    pub fn bellman_control_q(
        &self,
        j: &ValueFunction,
        pi: f64,
        search: &QSearch,
    ) -> Result<Decision<f64>> {
        if search.grid.is_empty() {
            return Err(Error::EmptyQGrid);
        }
        let b = self.b_all(j, pi);
        let (best, a) = search.minimize(self.n, self.costs.lambda_s, &b);
        Ok(Decision::new(self.stop_cost(pi), pi + a, best, 0.0))
    }

    /// Open-loop Bellman step with a fixed wake probability.
    pub fn bellman_open_loop(&self, j: &ValueFunction, pi: f64, q: f64) -> Decision<f64> {
        let b = self.b_all(j, pi);
        let a = wake_objective(self.n, self.costs.lambda_s, q, &b);
        Decision::new(self.stop_cost(pi), pi + a, q, 0.0)
    }

    pub fn bellman_fixed_m(&self, j: &ValueFunction, pi: f64, m: usize) -> Result<Decision<usize>> {
        self.check_m(m)?;
        let a = self.costs.lambda_s * m as f64 + self.b_unchecked(j, pi, m);
        Ok(Decision::new(self.stop_cost(pi), pi + a, m, 0))
    }

    /// Continuation cost `H_J(pi)` (the stop branch excluded) and the best
    /// continuing action, for any strategy.
    pub fn continuation(
        &self,
        j: &ValueFunction,
        pi: f64,
        strategy: Strategy,
        search: &QSearch,
    ) -> (f64, f64) {
        let b = self.b_all(j, pi);
        let (choice, a) = continuation_from_b(strategy, self.n, self.costs.lambda_s, search, &b);
        (pi + a, choice)
    }

    pub fn kernel(&self, grid: &BeliefGrid) -> ExpectationKernel {
        ExpectationKernel::build(self, grid, None)
    }

    /// Kernel holding only the listed awake counts; reading any other slot
    /// panics.
    pub fn kernel_for(&self, grid: &BeliefGrid, slots: &[usize]) -> ExpectationKernel {
        ExpectationKernel::build(self, grid, Some(slots))
    }
}

/// Outcome of one Bellman minimization at a belief.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision<A> {
    /// `min(stop_cost, continue_cost)`.
    pub value: f64,
    pub stop: bool,
    pub stop_cost: f64,
    pub continue_cost: f64,
    /// Best continuing action; the zero action when stopping.
    pub best: A,
}

impl<A> Decision<A> {
    fn new(stop_cost: f64, continue_cost: f64, best: A, zero: A) -> Self {
        let stop = stop_cost <= continue_cost + STOP_TIE_EPS;
        Self {
            value: stop_cost.min(continue_cost),
            stop,
            stop_cost,
            continue_cost,
            best: if stop { zero } else { best },
        }
    }
}

/// `gamma_m(q)` for `m = 0..=n`.
pub fn binomial_weights(n: usize, q: f64) -> Vec<f64> {
    crate::numeric::binomial_pmf(n, q)
}

/// `lambda_s n q + sum_m gamma_m(q) b[m]` without allocating.
#[inline]
pub fn wake_objective(n: usize, lambda_s: f64, q: f64, b: &[f64]) -> f64 {
    let base = lambda_s * n as f64 * q;
    if q <= 0.0 {
        return base + b[0];
    }
    if q >= 1.0 {
        return base + b[n];
    }
    let (lq, lr) = (q.ln(), (-q).ln_1p());
    let mut log_choose = 0.0;
    let mut acc = 0.0;
    for (m, &bm) in b.iter().enumerate().take(n + 1) {
        if m > 0 {
            log_choose += ((n - m + 1) as f64).ln() - (m as f64).ln();
        }
        acc += (log_choose + m as f64 * lq + (n - m) as f64 * lr).exp() * bm;
    }
    base + acc
}

#[inline]
fn best_awake_count(b: &[f64], lambda_s: f64) -> (usize, f64) {
    let mut best = (0, b[0]);
    for (m, &bm) in b.iter().enumerate().skip(1) {
        let v = lambda_s * m as f64 + bm;
        if v < best.1 {
            best = (m, v);
        }
    }
    best
}

/// Returns (action as f64, minimized `A_J` term excluding `pi`).
fn continuation_from_b(
    strategy: Strategy,
    n: usize,
    lambda_s: f64,
    search: &QSearch,
    b: &[f64],
) -> (f64, f64) {
    match strategy {
        Strategy::ControlM => {
            let (m, a) = best_awake_count(b, lambda_s);
            (m as f64, a)
        }
        Strategy::ControlQ => search.minimize(n, lambda_s, b),
        Strategy::OpenLoop { q } => (q, wake_objective(n, lambda_s, q, b)),
        Strategy::FixedM { m } => (m as f64, lambda_s * m as f64 + b[m]),
    }
}

/// Grid search over wake probabilities with one local refinement pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSearch {
    /// Sorted candidate probabilities.
    pub grid: Vec<f64>,
    /// Uniform points examined inside the interval bracketing the coarse
    /// minimizer; 0 disables refinement.
    pub refine_points: usize,
}

impl Default for QSearch {
    fn default() -> Self {
        Self::uniform(101, 21)
    }
}

impl QSearch {
    pub fn uniform(size: usize, refine_points: usize) -> Self {
        let grid = if size <= 1 {
            vec![0.0]
        } else {
            (0..size).map(|i| i as f64 / (size - 1) as f64).collect()
        };
        Self {
            grid,
            refine_points,
        }
    }

    pub fn explicit(mut grid: Vec<f64>, refine_points: usize) -> Self {
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        Self {
            grid,
            refine_points,
        }
    }

    /// Minimizing `(q, lambda_s n q + sum gamma_m(q) b_m)`, ties to smaller q.
    pub fn minimize(&self, n: usize, lambda_s: f64, b: &[f64]) -> (f64, f64) {
        let mut best_j = 0;
        let mut best = (self.grid[0], wake_objective(n, lambda_s, self.grid[0], b));
        for (j, &q) in self.grid.iter().enumerate().skip(1) {
            let v = wake_objective(n, lambda_s, q, b);
            if v < best.1 {
                best = (q, v);
                best_j = j;
            }
        }
        if self.refine_points >= 2 && self.grid.len() > 1 {
            let lo = self.grid[best_j.saturating_sub(1)];
            let hi = self.grid[(best_j + 1).min(self.grid.len() - 1)];
            let steps = self.refine_points - 1;
            for k in 0..=steps {
                let q = lo + (hi - lo) * k as f64 / steps as f64;
                let v = wake_objective(n, lambda_s, q, b);
                if v < best.1 || (v == best.1 && q < best.0) {
                    best = (q, v);
                }
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Sparse expectation operator
// ---------------------------------------------------------------------------

/// Sparse rows mapping grid values of `J` to `B^(m)_J` at every grid point.
#[derive(Debug, Clone)]
pub struct ExpectationKernel {
    /// Per m: CSR row offsets, column indices, weights.
    rows: Vec<Csr>,
    len: usize,
}

#[derive(Debug, Clone, Default)]
struct Csr {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl ExpectationKernel {
    fn build(mdp: &BeliefMdp, grid: &BeliefGrid, slots: Option<&[usize]>) -> Self {
        let rows = (0..=mdp.n)
            .into_par_iter()
            .map(|m| {
                if slots.is_some_and(|s| !s.contains(&m)) {
                    return Csr::default();
                }
                let atoms = &mdp.atoms[m];
                let law = mdp.exact.as_ref().filter(|_| m > 0).map(|laws| laws[m]);
                let per_row: Vec<Vec<(u32, f64)>> = grid
                    .points()
                    .iter()
                    .map(|&pi| {
                        let pt = predict(pi, mdp.p);
                        let mut entries = Vec::with_capacity(2 * atoms.len());
                        if let Some(law) = law {
                            law.cell_weights(grid, pt, &mut entries);
                            return entries;
                        }
                        for a in 0..atoms.len() {
                            let w = pt * atoms.w_post[a] + (1.0 - pt) * atoms.w_pre[a];
                            if w == 0.0 {
                                continue;
                            }
                            let post = posterior_from_llr(pt, atoms.llr[a]);
                            let (i, frac) = grid.locate(post);
                            entries.push((i as u32, w * (1.0 - frac)));
                            if frac > 0.0 {
                                entries.push((i as u32 + 1, w * frac));
                            }
                        }
                        entries.sort_unstable_by_key(|e| e.0);
                        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
                        for (c, w) in entries {
                            match merged.last_mut() {
                                Some(last) if last.0 == c => last.1 += w,
                                _ => merged.push((c, w)),
                            }
                        }
                        merged
                    })
                    .collect();
                let mut csr = Csr::default();
                csr.offsets.push(0);
                for row in per_row {
                    for (c, w) in row {
                        csr.cols.push(c);
                        csr.weights.push(w);
                    }
                    csr.offsets.push(csr.cols.len());
                }
                csr
            })
            .collect();
        Self {
            rows,
            len: grid.len(),
        }
    }

    pub fn grid_len(&self) -> usize {
        self.len
    }

    /// Single-slot kernel `sum_m weights[m] K_m`, read back with `m = 0`.
    pub fn mixed(&self, weights: &[f64]) -> ExpectationKernel {
        let mut csr = Csr::default();
        csr.offsets.push(0);
        let mut dense = vec![0.0; self.len];
        let mut touched: Vec<u32> = Vec::new();
        for i in 0..self.len {
            for (m, &w) in weights.iter().enumerate().take(self.rows.len()) {
                if w == 0.0 || self.rows[m].offsets.is_empty() {
                    continue;
                }
                let row = &self.rows[m];
                for e in row.offsets[i]..row.offsets[i + 1] {
                    let c = row.cols[e];
                    if dense[c as usize] == 0.0 {
                        touched.push(c);
                    }
                    dense[c as usize] += w * row.weights[e];
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                csr.cols.push(c);
                csr.weights.push(dense[c as usize]);
                dense[c as usize] = 0.0;
            }
            touched.clear();
            csr.offsets.push(csr.cols.len());
        }
        ExpectationKernel {
            rows: vec![csr],
            len: self.len,
        }
    }

    /// `B^(m)` at grid index `i`.
    #[inline]
    pub fn row_dot(&self, m: usize, i: usize, values: &[f64]) -> f64 {
        let csr = &self.rows[m];
        assert!(!csr.offsets.is_empty(), "kernel slot {m} was not built");
        let (a, b) = (csr.offsets[i], csr.offsets[i + 1]);
        csr.cols[a..b]
            .iter()
            .zip(&csr.weights[a..b])
            .map(|(&c, &w)| w * values[c as usize])
            .sum()
    }

    /// `B^(m)` over the whole grid.
    pub fn apply(&self, m: usize, values: &[f64]) -> Vec<f64> {
        (0..self.len).map(|i| self.row_dot(m, i, values)).collect()
    }
}

// ---------------------------------------------------------------------------
// Value iteration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub grid_size: usize,
    /// Sup-norm stopping tolerance; `None` means `1e-6 * max(lambda_f, 1)`.
    pub tolerance: Option<f64>,
    pub max_iters: usize,
    pub q_search: QSearch,
    pub quadrature: QuadratureConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grid_size: 1001,
            tolerance: None,
            max_iters: 10_000,
            q_search: QSearch::default(),
            quadrature: QuadratureConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn tolerance_for(&self, costs: &Costs) -> f64 {
        self.tolerance.unwrap_or(1e-6 * costs.lambda_f.max(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_sup_norm_delta: f64,
    pub strategy: String,
    pub wall_seconds: f64,
    pub tolerance: f64,
    /// Sup-norm change of every sweep, in order.
    pub delta_history: Vec<f64>,
}

/// One Bellman sweep over the grid. Returns new values and per-point
/// (stop flag, best continuing action).
pub fn bellman_sweep(
    mdp: &BeliefMdp,
    kernel: &ExpectationKernel,
    grid: &BeliefGrid,
    strategy: Strategy,
    search: &QSearch,
    values: &[f64],
) -> (Vec<f64>, Vec<(bool, f64)>) {
    sweep(mdp, kernel, None, grid, strategy, search, values)
}

/// Awake counts whose kernels a strategy reads.
pub fn kernel_slots(strategy: Strategy, n: usize) -> Vec<usize> {
    match strategy {
        Strategy::FixedM { m } => vec![m],
        Strategy::OpenLoop { q } if q <= 0.0 => vec![0],
        Strategy::OpenLoop { q } if q >= 1.0 => vec![n],
        _ => (0..=n).collect(),
    }
}

/// Open-loop strategies with `0 < q < 1` only ever need the binomial mixture
/// of the per-m kernels.
fn open_loop_mixture(
    mdp: &BeliefMdp,
    kernel: &ExpectationKernel,
    strategy: Strategy,
) -> Option<ExpectationKernel> {
    match strategy {
        Strategy::OpenLoop { q } if q > 0.0 && q < 1.0 => {
            Some(kernel.mixed(&binomial_weights(mdp.n, q)))
        }
        _ => None,
    }
}

fn sweep(
    mdp: &BeliefMdp,
    kernel: &ExpectationKernel,
    mixture: Option<&ExpectationKernel>,
    grid: &BeliefGrid,
    strategy: Strategy,
    search: &QSearch,
    values: &[f64],
) -> (Vec<f64>, Vec<(bool, f64)>) {
    let needed = if mixture.is_some() {
        Vec::new()
    } else {
        kernel_slots(strategy, mdp.n)
    };
    let wake_cost = match strategy {
        Strategy::OpenLoop { q } => mdp.costs.lambda_s * mdp.n as f64 * q,
        _ => 0.0,
    };
    grid.points()
        .par_iter()
        .enumerate()
        .map_init(
            || vec![0.0; mdp.n + 1],
            |b, (i, &pi)| {
                let (choice, a) = match (mixture, strategy) {
                    (Some(mix), Strategy::OpenLoop { q }) => {
                        (q, wake_cost + mix.row_dot(0, i, values))
                    }
                    _ => {
                        for &m in &needed {
                            b[m] = kernel.row_dot(m, i, values);
                        }
                        continuation_from_b(strategy, mdp.n, mdp.costs.lambda_s, search, b)
                    }
                };
                let d = Decision::new(mdp.stop_cost(pi), pi + a, choice, 0.0);
                (d.value, (d.stop, d.best))
            },
        )
        .unzip()
}

/// Iterate `J <- T J` from `J_0 = lambda_f (1 - pi)` until the sup-norm change
/// falls below the tolerance.
pub fn value_iteration(
    mdp: &BeliefMdp,
    strategy: Strategy,
    grid: &BeliefGrid,
    config: &SolverConfig,
) -> Result<(ValueFunction, SolveReport)> {
    let start = Instant::now();
    strategy.validate(mdp.n)?;
    let kernel = mdp.kernel_for(grid, &kernel_slots(strategy, mdp.n));
    let (value, mut report) = value_iteration_with_kernel(mdp, &kernel, strategy, grid, config)?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((value, report))
}

/// [`value_iteration`] reusing a kernel built for `grid`.
pub fn value_iteration_with_kernel(
    mdp: &BeliefMdp,
    kernel: &ExpectationKernel,
    strategy: Strategy,
    grid: &BeliefGrid,
    config: &SolverConfig,
) -> Result<(ValueFunction, SolveReport)> {
    strategy.validate(mdp.n)?;
    let start = Instant::now();
    let tolerance = config.tolerance_for(&mdp.costs);
    if !(tolerance > 0.0) {
        return Err(invalid("tolerance", "must be positive"));
    }
    if kernel.grid_len() != grid.len() {
        return Err(invalid("kernel", "built for a different grid"));
    }
    let mixture = open_loop_mixture(mdp, kernel, strategy);
    let mut values = ValueFunction::stopping_cost(grid, &mdp.costs).values;
    let mut history = Vec::new();
    for iter in 1..=config.max_iters {
        let (next, _) = sweep(
            mdp,
            kernel,
            mixture.as_ref(),
            grid,
            strategy,
            &config.q_search,
            &values,
        );
        let delta = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        history.push(delta);
        if delta < tolerance {
            let report = SolveReport {
                iterations: iter,
                final_sup_norm_delta: delta,
                strategy: strategy.to_string(),
                wall_seconds: start.elapsed().as_secs_f64(),
                tolerance,
                delta_history: history,
            };
            return Ok((ValueFunction::new(grid.clone(), values)?, report));
        }
    }
    Err(Error::NotConverged {
        iterations: config.max_iters,
        last_delta: history.last().copied().unwrap_or(f64::NAN),
    })
}

/// `J_0^K`: the optimal cost of the problem forced to stop by slot `horizon`.
pub fn finite_horizon(
    mdp: &BeliefMdp,
    strategy: Strategy,
    grid: &BeliefGrid,
    search: &QSearch,
    horizon: usize,
) -> Result<ValueFunction> {
    strategy.validate(mdp.n)?;
    let kernel = mdp.kernel_for(grid, &kernel_slots(strategy, mdp.n));
    let mixture = open_loop_mixture(mdp, &kernel, strategy);
    let mut values = ValueFunction::stopping_cost(grid, &mdp.costs).values;
    for _ in 0..horizon {
        values = sweep(
            mdp,
            &kernel,
            mixture.as_ref(),
            grid,
            strategy,
            search,
            &values,
        )
        .0;
    }
    ValueFunction::new(grid.clone(), values)
}

/// A converged solve together with what is needed to extract its policy.
#[derive(Debug, Clone)]
pub struct Solution {
    pub problem: Problem,
    pub strategy: Strategy,
    pub mdp: BeliefMdp,
    pub value: ValueFunction,
    pub report: SolveReport,
    pub q_search: QSearch,
}

impl Solution {
    /// `J*(pi_0)` at the problem's initial belief.
    pub fn initial_cost(&self) -> f64 {
        self.value.eval(self.problem.initial_belief())
    }
}

pub fn solve(problem: &Problem, strategy: Strategy, config: &SolverConfig) -> Result<Solution> {
    let mdp = BeliefMdp::from_problem(problem, &config.quadrature)?;
    let grid = BeliefGrid::uniform(config.grid_size)?;
    let (value, report) = value_iteration(&mdp, strategy, &grid, config)?;
    Ok(Solution {
        problem: *problem,
        strategy,
        mdp,
        value,
        report,
        q_search: config.q_search.clone(),
    })
}
