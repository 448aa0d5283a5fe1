use std::sync::Arc;

use super::{BilevelFunctions, BilevelProblem};
use crate::error::{Error, Result};

const LO: f64 = -5.0;
const HI: f64 = 10.0;

/// `F = ‖x_u − a‖² + ‖x_l − x_u‖²`, `f = ‖x_l − x_u‖²`.
struct Quadratic {
    target: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl BilevelFunctions for Quadratic {
    fn upper_objective(&self, x_u: &[f64], x_l: &[f64]) -> f64 {
        dist2(x_u, &self.target) + dist2(x_l, x_u)
    }

    fn lower_objective(&self, x_u: &[f64], x_l: &[f64]) -> f64 {
        dist2(x_l, x_u)
    }
}

/// Unconstrained analytic problem on `[−5, 10]^d` at both levels.
///
/// The lower optimum is `x_l = x_u`; the bilevel optimum is `x_u = x_l = a`
/// with `F* = f* = 0`.
pub fn make_synthetic_quadratic(d: usize, a: &[f64]) -> Result<BilevelProblem> {
    if d == 0 {
        return Err(Error::InvalidProblem("synthetic quadratic needs d ≥ 1".into()));
    }
    if a.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: a.len(),
        });
    }
    if let Some(v) = a.iter().find(|v| !(LO..=HI).contains(*v)) {
        return Err(Error::InvalidProblem(format!("target coordinate {v} outside [{LO}, {HI}]")));
    }
    let bounds = vec![(LO, HI); d];
    Ok(BilevelProblem::new(
        format!("synthq-{d}"),
        bounds.clone(),
        bounds,
        Arc::new(Quadratic { target: a.to_vec() }),
    )?
    .with_optimum(0.0, 0.0)
    .with_reference_optimum(a.to_vec(), a.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::EvalCounter;

    #[test]
    fn closed_form_values() {
        let p = make_synthetic_quadratic(2, &[1.0, 1.0]).unwrap();
        let mut c = EvalCounter::default();
        let up = p.evaluate_upper(&[0.0, 0.0], &[0.0, 0.0], &mut c);
        let lo = p.evaluate_lower(&[0.0, 0.0], &[0.0, 0.0], &mut c);
        assert_eq!(up.value, 2.0);
        assert_eq!(lo.value, 0.0);
        assert_eq!(p.evaluate_upper(&[1.0, 1.0], &[1.0, 1.0], &mut c).value, 0.0);
        let l = p.evaluate_lower(&[3.0, -2.0], &[3.0, -2.0], &mut c);
        assert_eq!((l.value, l.cv), (0.0, 0.0));
    }

    #[test]
    fn target_out_of_bounds() {
        assert!(make_synthetic_quadratic(2, &[11.0, 0.0]).is_err());
        assert!(make_synthetic_quadratic(2, &[0.0]).is_err());
    }
}
