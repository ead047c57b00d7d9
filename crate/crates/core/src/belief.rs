//! Recursion for the a posteriori probability of change.
//!
//! All updates go through the logistic form
//! `logit(pi') = logit(pi~) + sum_i LLR(x_i)`, which keeps beliefs near 0 and
//! 1 accurate and never multiplies raw densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ObservationDensity, SensorModel};
use crate::numeric::{logistic, logit};

/// Belief state: a probability of change, or the terminal state entered after
/// an alarm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Belief {
    Active(f64),
    Terminal,
}

impl Belief {
    pub fn new(pi: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&pi) {
            Ok(Belief::Active(pi))
        } else {
            Err(crate::error::invalid(
                "pi",
                format!("must lie in [0, 1], got {pi}"),
            ))
        }
    }

    pub fn prob(self) -> Option<f64> {
        match self {
            Belief::Active(pi) => Some(pi),
            Belief::Terminal => None,
        }
    }

    fn active(self) -> Result<f64> {
        self.prob().ok_or(Error::TerminalBelief)
    }
}

/// `pi~ = pi + (1 - pi) p`.
#[inline]
pub fn predict(pi: f64, p: f64) -> f64 {
    pi + (1.0 - pi) * p
}

/// Posterior from the predicted belief and the joint log-likelihood ratio of
/// the slot's observations.
#[inline]
pub fn posterior_from_llr(pi_tilde: f64, llr: f64) -> f64 {
    if pi_tilde <= 0.0 {
        0.0
    } else if pi_tilde >= 1.0 {
        1.0
    } else {
        logistic(logit(pi_tilde) + llr)
    }
}

pub fn one_step_predict(pi: Belief, p: f64) -> Result<Belief> {
    Ok(Belief::Active(predict(pi.active()?, p)))
}

/// Bayes update after one slot with the given awake-sensor observations. An
/// empty slice (no sensor awake) is pure prediction.
pub fn posterior_update<D: ObservationDensity>(
    pi: Belief,
    p: f64,
    observations: &[f64],
    model: &D,
) -> Result<Belief> {
    let pi = pi.active()?;
    if let Some(&x) = observations.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFiniteObservation(x));
    }
    let llr: f64 = observations
        .iter()
        .map(|&x| model.log_likelihood_ratio(x))
        .sum();
    Ok(Belief::Active(posterior_from_llr(predict(pi, p), llr)))
}

/// Same as [`posterior_update`] for equal-variance Gaussians, given only the
/// count `m` and sum `s` of the observations.
pub fn sufficient_statistic_update(
    pi: Belief,
    p: f64,
    m: usize,
    s: f64,
    model: &SensorModel,
) -> Result<Belief> {
    let pi = pi.active()?;
    if !s.is_finite() {
        return Err(Error::NonFiniteObservation(s));
    }
    let llr = model
        .sum_log_likelihood_ratio(m, s)
        .ok_or(Error::NoScalarStatistic {
            sigma0: model.sigma0,
            sigma1: model.sigma1,
        })?;
    Ok(Belief::Active(posterior_from_llr(predict(pi, p), llr)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> SensorModel {
        SensorModel::unit_shift()
    }

    fn val(b: Belief) -> f64 {
        b.prob().unwrap()
    }

    #[test]
    fn predict_examples() {
        assert_eq!(
            val(one_step_predict(Belief::Active(0.0), 0.01).unwrap()),
            0.01
        );
        assert_eq!(
            val(one_step_predict(Belief::Active(1.0), 0.01).unwrap()),
            1.0
        );
        assert!((val(one_step_predict(Belief::Active(0.5), 0.2).unwrap()) - 0.6).abs() < 1e-15);
        assert_eq!(
            one_step_predict(Belief::Terminal, 0.1),
            Err(Error::TerminalBelief)
        );
    }

    #[test]
    fn update_examples() {
        let m = unit();
        assert_eq!(
            val(posterior_update(Belief::Active(1.0), 0.01, &[-50.0, 3.0], &m).unwrap()),
            1.0
        );
        let v = val(posterior_update(Belief::Active(0.5), 0.0, &[0.5], &m).unwrap());
        assert!((v - 0.5).abs() < 1e-15);
        let v = val(posterior_update(Belief::Active(0.3), 0.01, &[], &m).unwrap());
        assert!((v - 0.307).abs() < 1e-15);
        assert!(matches!(
            posterior_update(Belief::Active(0.3), 0.01, &[f64::NAN], &m),
            Err(Error::NonFiniteObservation(_))
        ));
        assert_eq!(
            posterior_update(Belief::Terminal, 0.01, &[0.0], &m),
            Err(Error::TerminalBelief)
        );
    }

    #[test]
    fn update_matches_direct_bayes_formula() {
        let m = unit();
        let (pi, p, xs) = (0.2, 0.05, [0.3, -0.4, 1.9]);
        let pt = pi + (1.0 - pi) * p;
        let phi1: f64 = xs.iter().map(|&x| m.pdf(crate::Regime::Post, x)).product();
        let phi0: f64 = xs.iter().map(|&x| m.pdf(crate::Regime::Pre, x)).product();
        let direct = pt * phi1 / (pt * phi1 + (1.0 - pt) * phi0);
        let v = val(posterior_update(Belief::Active(pi), p, &xs, &m).unwrap());
        assert!((v - direct).abs() < 1e-14);
    }

    #[test]
    fn sufficient_statistic_examples() {
        let m = unit();
        let v = val(sufficient_statistic_update(Belief::Active(0.5), 0.0, 2, 1.0, &m).unwrap());
        assert!((v - 0.5).abs() < 1e-15);
        let v = val(sufficient_statistic_update(Belief::Active(0.5), 0.0, 1, 1.5, &m).unwrap());
        assert!((v - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.7311).abs() < 1e-4);
        let a = val(posterior_update(Belief::Active(0.4), 0.1, &[0.2, 0.8], &m).unwrap());
        let b = val(sufficient_statistic_update(Belief::Active(0.4), 0.1, 2, 1.0, &m).unwrap());
        assert!((a - b).abs() < 1e-15);
        let hetero = SensorModel::new(0.0, 1.0, 1.0, 2.0).unwrap();
        assert!(matches!(
            sufficient_statistic_update(Belief::Active(0.4), 0.1, 2, 1.0, &hetero),
            Err(Error::NoScalarStatistic { .. })
        ));
    }

    #[test]
    fn extreme_evidence_does_not_produce_nan() {
        let m = unit();
        let v = val(posterior_update(Belief::Active(1e-300), 0.0, &[1e6], &m).unwrap());
        assert_eq!(v, 1.0);
        let v = val(posterior_update(Belief::Active(1.0 - 1e-16), 0.0, &[-1e6], &m).unwrap());
        assert_eq!(v, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn posterior_in_unit_interval(
            pi in 0.0f64..=1.0,
            p in 0.0f64..=1.0,
            xs in proptest::collection::vec(-30.0f64..30.0, 0..12),
        ) {
            let v = val(posterior_update(Belief::Active(pi), p, &xs, &unit()).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn posterior_permutation_invariant(
            pi in 0.0f64..=1.0,
            p in 0.0f64..0.5,
            mut xs in proptest::collection::vec(-5.0f64..5.0, 1..10),
        ) {
            let a = val(posterior_update(Belief::Active(pi), p, &xs, &unit()).unwrap());
            xs.reverse();
            let half = xs.len() / 2;
            xs.rotate_left(half);
            let b = val(posterior_update(Belief::Active(pi), p, &xs, &unit()).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn posterior_nondecreasing_in_sum(
            pi in 0.0f64..=1.0,
            p in 0.0f64..0.5,
            m in 1usize..10,
            s in -20.0f64..20.0,
            ds in 0.0f64..5.0,
        ) {
            let model = unit();
            let lo = val(sufficient_statistic_update(Belief::Active(pi), p, m, s, &model).unwrap());
            let hi = val(sufficient_statistic_update(Belief::Active(pi), p, m, s + ds, &model).unwrap());
            prop_assert!(hi >= lo);
        }

        #[test]
        fn absorbing_at_one(xs in proptest::collection::vec(-30.0f64..30.0, 0..12), p in 0.0f64..=1.0) {
            let v = val(posterior_update(Belief::Active(1.0), p, &xs, &unit()).unwrap());
            prop_assert_eq!(v, 1.0);
        }
    }
}
