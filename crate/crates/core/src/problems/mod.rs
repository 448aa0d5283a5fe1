//! Bilevel problem abstraction.
//!
//! Both levels minimize. Inequality constraints are expressed as slacks
//! `g ≤ 0`; a level's constraint violation is the plain sum of the positive
//! parts. The upper-level violation of a pair adds the lower-level violation
//! at the same point, since a valid optimum must be feasible at both levels.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub mod smd;
mod synthetic;

pub use smd::{make_smd, make_smd_with_groups, SmdGroups};
pub use synthetic::make_synthetic_quadratic;

/// Objective and constraint callbacks of a bilevel problem.
///
/// Constraint methods return slack values; `g ≤ 0` is satisfied.
pub trait BilevelFunctions: Send + Sync {
    fn upper_objective(&self, x_u: &[f64], x_l: &[f64]) -> f64;
    fn upper_constraints(&self, _x_u: &[f64], _x_l: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn lower_objective(&self, x_u: &[f64], x_l: &[f64]) -> f64;
    fn lower_constraints(&self, _x_u: &[f64], _x_l: &[f64]) -> Vec<f64> {
        Vec::new()
    }
}

/// Sum of positive parts of the slacks.
pub fn violation(slacks: &[f64]) -> f64 {
    slacks.iter().map(|g| g.max(0.0)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperEval {
    pub value: f64,
    /// Upper plus lower violation at the same point.
    pub cv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerEval {
    pub value: f64,
    pub cv: f64,
}

/// Function-evaluation counters for one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounter {
    pub fes_u: usize,
    pub fes_l: usize,
}

impl EvalCounter {
    pub fn total(&self) -> usize {
        self.fes_u + self.fes_l
    }
}

/// A bilevel minimization problem with box bounds and known optimal values.
#[derive(Clone)]
pub struct BilevelProblem {
    pub name: String,
    pub dim_u: usize,
    pub dim_l: usize,
    pub bounds_u: Vec<(f64, f64)>,
    pub bounds_l: Vec<(f64, f64)>,
    /// Optimal upper value F*.
    pub f_star: Option<f64>,
    /// Optimal lower value f* at the bilevel optimum.
    pub little_f_star: Option<f64>,
    /// A point attaining `(f_star, little_f_star)`, when the factory knows one.
    pub reference_optimum: Option<(Vec<f64>, Vec<f64>)>,
    functions: Arc<dyn BilevelFunctions>,
}

impl fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("name", &self.name)
            .field("dim_u", &self.dim_u)
            .field("dim_l", &self.dim_l)
            .field("f_star", &self.f_star)
            .field("little_f_star", &self.little_f_star)
            .finish_non_exhaustive()
    }
}

impl BilevelProblem {
    /// Validates bounds and wraps `functions`.
    pub fn new(
        name: impl Into<String>,
        bounds_u: Vec<(f64, f64)>,
        bounds_l: Vec<(f64, f64)>,
        functions: Arc<dyn BilevelFunctions>,
    ) -> Result<Self> {
        let name = name.into();
        if bounds_u.is_empty() || bounds_l.is_empty() {
            return Err(Error::InvalidProblem(format!("{name}: both levels need at least one variable")));
        }
        for (lo, hi) in bounds_u.iter().chain(&bounds_l) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidProblem(format!("{name}: invalid bound [{lo}, {hi}]")));
            }
        }
        Ok(Self {
            name,
            dim_u: bounds_u.len(),
            dim_l: bounds_l.len(),
            bounds_u,
            bounds_l,
            f_star: None,
            little_f_star: None,
            reference_optimum: None,
            functions,
        })
    }

    pub fn with_optimum(mut self, f_star: f64, little_f_star: f64) -> Self {
        self.f_star = Some(f_star);
        self.little_f_star = Some(little_f_star);
        self
    }

    pub fn with_reference_optimum(mut self, x_u: Vec<f64>, x_l: Vec<f64>) -> Self {
        self.reference_optimum = Some((x_u, x_l));
        self
    }

    /// Bounds of the joint `(x_u, x_l)` vector.
    pub fn joint_bounds(&self) -> Vec<(f64, f64)> {
        self.bounds_u.iter().chain(&self.bounds_l).copied().collect()
    }

    /// Upper objective with the combined violation; one upper FE.
    pub fn evaluate_upper(&self, x_u: &[f64], x_l: &[f64], counter: &mut EvalCounter) -> UpperEval {
        counter.fes_u += 1;
        let value = self.functions.upper_objective(x_u, x_l);
        let cv = violation(&self.functions.upper_constraints(x_u, x_l))
            + violation(&self.functions.lower_constraints(x_u, x_l));
        UpperEval { value, cv }
    }

    /// Lower objective with the lower violation; one lower FE.
    pub fn evaluate_lower(&self, x_u: &[f64], x_l: &[f64], counter: &mut EvalCounter) -> LowerEval {
        counter.fes_l += 1;
        LowerEval {
            value: self.functions.lower_objective(x_u, x_l),
            cv: violation(&self.functions.lower_constraints(x_u, x_l)),
        }
    }
}

/// Outcome of a constrained comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preference {
    First,
    Second,
    Tie,
}

impl Preference {
    pub fn to_ordering(self) -> Ordering {
        match self {
            Preference::First => Ordering::Less,
            Preference::Second => Ordering::Greater,
            Preference::Tie => Ordering::Equal,
        }
    }
}

/// Constrained comparison of two `(value, cv)` pairs.
///
/// Feasible beats infeasible; among feasible the smaller value wins; among
/// infeasible the smaller violation wins.
pub fn deb_compare(a: (f64, f64), b: (f64, f64)) -> Result<Preference> {
    if a.0.is_nan() || a.1.is_nan() || b.0.is_nan() || b.1.is_nan() {
        return Err(Error::NaN("constrained comparison"));
    }
    let ord = match (a.1 <= 0.0, b.1 <= 0.0) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (true, true) => a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal),
        (false, false) => a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal),
    };
    Ok(match ord {
        Ordering::Less => Preference::First,
        Ordering::Greater => Preference::Second,
        Ordering::Equal => Preference::Tie,
    })
}

/// Total order used for ranking sampled candidates: NaN objectives or
/// violations rank last.
pub fn deb_order(a: (f64, f64), b: (f64, f64)) -> Ordering {
    let broken = |(v, cv): (f64, f64)| v.is_nan() || cv.is_nan();
    match (broken(a), broken(b)) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => deb_compare(a, b).map_or(Ordering::Equal, Preference::to_ordering),
    }
}

/// Registry lookup: `smd1`..`smd12` with the requested dims, or `synthq-<d>`
/// (the synthetic quadratic with `a = (1, …, 1)`).
pub fn from_id(id: &str, m: usize, n: usize) -> Result<BilevelProblem> {
    let lower = id.to_ascii_lowercase();
    if let Some(rest) = lower.strip_prefix("smd") {
        let k: usize = rest.parse().map_err(|_| Error::UnknownProblem(id.to_string()))?;
        return make_smd(k, m, n);
    }
    if let Some(rest) = lower.strip_prefix("synthq-") {
        let d: usize = rest.parse().map_err(|_| Error::UnknownProblem(id.to_string()))?;
        if m != d || n != d {
            return Err(Error::InvalidProblem(format!("{id} requires dims {d},{d}")));
        }
        return make_synthetic_quadratic(d, &vec![1.0; d]);
    }
    Err(Error::UnknownProblem(id.to_string()))
}
