//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} entries, max rel err {:.3e} (tol {:.0e}){}: {}",
            self.checked,
            self.max_rel_err,
            self.tol,
            match &self.worst {
                Some((n, i)) => format!(" at {n}[{i}]"),
                None => String::new(),
            },
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the gradient returned by `objective` against
/// `(f(x+h) − f(x−h)) / 2h` for every trainable scalar.
pub fn grad_check<F>(store: &ParamStore, mut objective: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, ParamGrads)>,
{
    let (f0, analytic) = objective(store)?;
    if !f0.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut work = store.clone();
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        for i in 0..p.tensor.len() {
            let x = p.tensor.data()[i];
            work.get_mut(id).tensor.data_mut()[i] = x + h;
            let (fp, _) = objective(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = x - h;
            let (fm, _) = objective(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = x;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            checked += 1;
            if err > max_rel_err {
                max_rel_err = err;
                worst = Some((p.name.clone(), i));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        tol,
        passed: max_rel_err <= tol,
    })
}
