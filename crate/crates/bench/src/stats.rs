//! Paired one-tailed t-test and summary statistics.

use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub dof: usize,
    /// `P(T > t)` under the null, for the alternative `mean(a − b) > 0`.
    pub p_value: f64,
    /// The differences have zero spread, so `t` is undefined and `p_value`
    /// follows a convention: 0.5 when every difference is zero, otherwise the
    /// limit as the spread shrinks to zero (0 for a positive mean, 1 for a
    /// negative one).
    pub degenerate: bool,
}

/// Upper tail `P(T_ν > t)` of Student's t distribution.
pub fn student_t_sf(t: f64, dof: f64) -> f64 {
    let tail = 0.5 * beta_reg(0.5 * dof, 0.5, dof / (dof + t * t));
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

pub fn paired_t_test_one_tailed(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let k = a.len();
    if k < 2 {
        return Err(StatsError::TooFewPairs(k));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&d);
    let dof = k - 1;
    if sd == 0.0 {
        let (t, p_value) = if mean == 0.0 {
            (0.0, 0.5)
        } else if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (f64::NEG_INFINITY, 1.0)
        };
        return Ok(TTest {
            t,
            dof,
            p_value,
            degenerate: true,
        });
    }
    let t = mean / (sd / (k as f64).sqrt());
    Ok(TTest {
        t,
        dof,
        p_value: student_t_sf(t, dof as f64),
        degenerate: false,
    })
}

/// Mean and standard deviation with divisor `k − 1` (0 for a single value).
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let mean = x.iter().sum::<f64>() / k;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

/// Mean and standard error of the mean.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let (mean, sd) = mean_sd(x);
    (mean, sd / (x.len() as f64).sqrt())
}
