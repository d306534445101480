//! Assignment policies and their inverse-propensity-weighted value.

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// A map from covariates to an arm.
pub trait Policy: Send + Sync {
    fn assign(&self, x: &[f64]) -> Result<usize>;

    /// Assignments for row-major covariates with `d` columns.
    fn assign_rows(&self, x: &[f64], d: usize) -> Result<Vec<usize>> {
        if d == 0 || !x.len().is_multiple_of(d) {
            return Err(Error::invalid("covariate buffer is not a whole number of rows"));
        }
        x.par_chunks(d).map(|row| self.assign(row)).collect()
    }
}

/// Assigns every unit to the same arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantPolicy(pub usize);

impl Policy for ConstantPolicy {
    fn assign(&self, _x: &[f64]) -> Result<usize> {
        Ok(self.0)
    }
}

impl<F> Policy for F
where
    F: Fn(&[f64]) -> usize + Send + Sync,
{
    fn assign(&self, x: &[f64]) -> Result<usize> {
        Ok(self(x))
    }
}

/// `(1/n) sum_i 1{T_i = a_i} Y_i / p_i` for precomputed assignments `a_i`.
pub fn ipw_value_of_assignments(data: &Dataset, assignments: &[usize]) -> Result<f64> {
    if assignments.len() != data.n() {
        return Err(Error::invalid("one assignment per row required"));
    }
    let mut total = 0.0;
    for (i, &a) in assignments.iter().enumerate() {
        if a == data.arms()[i] {
            let p = data.propensity(i);
            if p.is_nan() || p <= 0.0 {
                return Err(Error::ZeroPropensity { arm: a });
            }
            total += data.outcomes()[i] / p;
        }
    }
    Ok(total / data.n() as f64)
}

/// Matched-rows inverse-propensity estimate of the policy's value on
/// `data`.
pub fn policy_value_ipw(data: &Dataset, policy: &(impl Policy + ?Sized)) -> Result<f64> {
    let assignments = policy.assign_rows(data.covariates(), data.d())?;
    ipw_value_of_assignments(data, &assignments)
}
