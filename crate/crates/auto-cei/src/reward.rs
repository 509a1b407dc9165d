//! Length-shaped reward for expert iteration.
//!
//! Correct answers earn 1, wrong answers -1, and refusals earn a logistic
//! curve of the reasoning length centred at the compensation threshold `c1`:
//!
//! ```text
//! R(len) = (1 - e^(-c2 (len - c1))) / (1 + e^(-c2 (len - c1)))
//! ```
//!
//! which is `tanh(c2 (len - c1) / 2)`: zero at `c1`, antisymmetric around
//! it, saturating towards +-1. `c2` is calibrated so a refusal two standard
//! deviations above the mean reasoning length earns 0.9 — long attempts that
//! end in a refusal are nearly as good as a correct answer, short ones are
//! nearly as bad as a wrong one. The curriculum later shifts `c1` upward to
//! demand longer attempts before a refusal pays off.

use serde::{Deserialize, Serialize};

use crate::corpus::Outcome;
use crate::error::{Error, Result};
use crate::metrics::LengthStats;
use crate::scalar::Scalar;

/// Reward earned at exactly `mean + 2 sigma` reasoning steps.
const CALIBRATION_TARGET: f64 = 0.9;
/// Residual tolerance of the calibration solve.
const CALIBRATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams<F> {
    /// Refusal-compensation threshold: reasoning length with zero refusal reward.
    pub c1: F,
    /// Steepness of the refusal reward curve.
    pub c2: F,
}

/// Reward of one classified response with reasoning length `len`.
pub fn compute_reward<F: Scalar>(outcome: &Outcome, len: u32, params: &RewardParams<F>) -> F {
    match outcome {
        Outcome::Correct => F::one(),
        Outcome::Wrong => -F::one(),
        Outcome::Refusal { .. } => {
            let len = F::from_u32(len).expect("reasoning length representable");
            let two = F::from_config(2.0);
            let r = (params.c2 * (len - params.c1) / two).tanh();
            // tanh saturates to exactly +-1.0 in floating point; keep the
            // refusal reward strictly inside (-1, 1) so the expert-set filter
            // on reward == -1 removes wrong answers and only wrong answers.
            let cap = F::one() - F::from_config(1e-15);
            r.min(cap).max(-cap)
        }
    }
}

/// Calibrates the reward curve from the initial policy's reasoning-length
/// statistics: `c1 = mean`, and `c2` solves
/// `(1 - e^(-2 sigma c2)) / (1 + e^(-2 sigma c2)) = 0.9` by bisection
/// (closed form: `atanh(0.9) / sigma`).
pub fn calibrate<F: Scalar>(stats: &LengthStats<F>) -> Result<RewardParams<F>> {
    if stats.sigma.is_nan() || stats.sigma <= F::zero() {
        return Err(Error::DegenerateSigma);
    }
    let c2 = solve_c2(stats.sigma)?;
    Ok(RewardParams { c1: stats.mu, c2 })
}

/// Bisection for the calibration equation `tanh(sigma * c2) = target`.
/// Runs until the residual is within tolerance or the bracket collapses to
/// adjacent floats (which is what terminates at f32 precision).
fn solve_c2<F: Scalar>(sigma: F) -> Result<F> {
    let target = F::from_config(CALIBRATION_TARGET);
    let tol = F::from_config(CALIBRATION_TOL);
    let residual = |c2: F| (sigma * c2).tanh() - target;

    let mut lo = F::zero();
    let mut hi = F::one();
    let mut guard = 0;
    while residual(hi) < F::zero() {
        hi = hi + hi;
        guard += 1;
        if guard > 256 {
            return Err(Error::DegenerateSigma);
        }
    }
    let two = F::from_config(2.0);
    let mut mid = (lo + hi) / two;
    loop {
        let r = residual(mid);
        if r.abs() <= tol {
            return Ok(mid);
        }
        if r < F::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
        let next = (lo + hi) / two;
        if next == lo || next == hi {
            return Ok(next);
        }
        mid = next;
    }
}
