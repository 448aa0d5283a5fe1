//! The SMD family of scalable bilevel test problems.
//!
//! Every SMD problem splits the variables into groups:
//!
//! ```text
//! x_u = (x_u1 [p], x_u2 [r])      x_l = (x_l1 [q (+ s for SMD6)], x_l2 [r])
//! F = F1(x_u1) + F2(x_l1) + F3(x_u2, x_l2)
//! f = f1(x_u1, x_u2) + f2(x_l1) + f3(x_u2, x_l2)
//! ```
//!
//! `x_u1` only matters to the upper level, `x_l1` controls lower-level
//! difficulty, and `(x_u2, x_l2)` carries the interaction between levels.
//! Open interval ends where a term is singular (`tan` at ±π/2, `log` at 0)
//! are pulled in by [`OPEN_MARGIN`].

use std::f64::consts::{E, FRAC_PI_2, PI};
use std::sync::Arc;

use super::{BilevelFunctions, BilevelProblem};
use crate::error::{Error, Result};

/// Distance kept from singular interval ends.
pub const OPEN_MARGIN: f64 = 1e-10;

/// Variable-group sizes of an SMD instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmdGroups {
    /// Upper-only variables.
    pub p: usize,
    /// Lower-only variables.
    pub q: usize,
    /// Interacting variables (present at both levels).
    pub r: usize,
    /// Extra lower variables of SMD6 (zero elsewhere).
    pub s: usize,
}

impl SmdGroups {
    /// The canonical split for `(m, n) ∈ {(2,3), (10,10), (30,30)}`.
    pub fn canonical(id: usize, m: usize, n: usize) -> Result<Self> {
        if !matches!((m, n), (2, 3) | (10, 10) | (30, 30)) {
            return Err(Error::InvalidProblem(format!(
                "smd{id}: no canonical split for (m, n) = ({m}, {n}); pass explicit groups"
            )));
        }
        let r = m / 2;
        let p = m - r;
        let rest = n - r;
        Ok(if id == 6 {
            // q = ⌊rest/2 − ε⌋, s = ⌈rest/2 + ε⌉
            let q = if rest % 2 == 0 { rest / 2 - 1 } else { rest / 2 };
            Self { p, q, r, s: rest - q }
        } else {
            Self { p, q: rest, r, s: 0 }
        })
    }

    pub fn dim_u(&self) -> usize {
        self.p + self.r
    }

    pub fn dim_l(&self) -> usize {
        self.q + self.s + self.r
    }
}

#[derive(Debug, Clone, Copy)]
struct Smd {
    id: usize,
    g: SmdGroups,
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Σ_{i<q} [(x_{i+1} − x_i²)² + (x_i − 1)²]
fn rosenbrock(v: &[f64]) -> f64 {
    v.windows(2)
        .map(|w| (w[1] - w[0] * w[0]).powi(2) + (w[0] - 1.0).powi(2))
        .sum()
}

/// `q + Σ (x² − cos 2πx)`
fn rastrigin(v: &[f64]) -> f64 {
    v.len() as f64 + v.iter().map(|x| x * x - (2.0 * PI * x).cos()).sum::<f64>()
}

fn paired(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).sum()
}

/// Slacks of `x_j ≥ Σ_{i≠j} x_i³`.
fn cubic_slacks(v: &[f64]) -> Vec<f64> {
    let cubes: f64 = v.iter().map(|x| x.powi(3)).sum();
    v.iter().map(|x| (cubes - x.powi(3)) - x).collect()
}

/// Slack of `S − ⌊S + 0.5⌋ ≥ 0`.
fn ring_slack(s: f64) -> f64 {
    (s + 0.5).floor() - s
}

impl Smd {
    fn split_u<'a>(&self, x_u: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x_u.split_at(self.g.p)
    }

    fn split_l<'a>(&self, x_l: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x_l.split_at(self.g.q + self.g.s)
    }

    fn bounds(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let g = self.g;
        let std = (-5.0, 10.0);
        let tan_range = (-FRAC_PI_2 + OPEN_MARGIN, FRAC_PI_2 - OPEN_MARGIN);
        let (u2, l2) = match self.id {
            1 | 3 | 10 => (std, tan_range),
            2 | 7 => ((-5.0, 1.0), (OPEN_MARGIN, E)),
            4 => ((-1.0, 1.0), (0.0, E)),
            5 | 6 | 8 => (std, std),
            9 => ((-5.0, 1.0), (-1.0 + OPEN_MARGIN, -1.0 + E)),
            11 => ((-1.0, 1.0), (1.0 / E, E)),
            12 => ((-14.1, 14.1), (-1.5, 1.5)),
            _ => unreachable!(),
        };
        let mut bu = vec![std; g.p];
        bu.extend(std::iter::repeat_n(u2, g.r));
        let mut bl = vec![std; g.q + g.s];
        bl.extend(std::iter::repeat_n(l2, g.r));
        (bu, bl)
    }

    /// Reference optimum and `(F*, f*)`.
    fn optimum(&self) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let SmdGroups { p, q, r, s } = self.g;
        let zeros_u = vec![0.0; p + r];
        let with_l2 = |l1: f64, l2: f64| {
            let mut v = vec![l1; q + s];
            v.extend(std::iter::repeat_n(l2, r));
            v
        };
        match self.id {
            1 | 3 | 4 | 6 | 9 => (zeros_u, with_l2(0.0, 0.0), 0.0, 0.0),
            2 | 7 => (zeros_u, with_l2(0.0, 1.0), 0.0, 0.0),
            5 | 8 => (zeros_u, with_l2(1.0, 0.0), 0.0, 0.0),
            11 => {
                let l2 = (-1.0 / (r as f64).sqrt()).exp();
                (zeros_u, with_l2(0.0, l2), -1.0, 1.0)
            }
            10 | 12 => {
                let a = 1.0 / ((p + r) as f64 - 1.0).sqrt();
                let b = 1.0 / (q as f64 - 1.0).sqrt();
                let x_u = vec![a; p + r];
                let (pf, qf, rf) = (p as f64, q as f64, r as f64);
                if self.id == 10 {
                    let x_l = with_l2(b, a.atan());
                    let big = pf * (a - 2.0).powi(2) + qf * b * b + rf * (a - 2.0).powi(2);
                    let small = pf * a * a + qf * (b - 2.0).powi(2);
                    (x_u, x_l, big, small)
                } else {
                    let shift = a - 1.0 / rf.sqrt();
                    let x_l = with_l2(b, shift.atan());
                    let big = pf * (a - 2.0).powi(2) + qf * b * b + rf * (a - 2.0).powi(2) + rf * shift.abs() - 1.0;
                    let small = pf * a * a + qf * (b - 2.0).powi(2) + 1.0;
                    (x_u, x_l, big, small)
                }
            }
            _ => unreachable!(),
        }
    }
}

impl BilevelFunctions for Smd {
    fn upper_objective(&self, x_u: &[f64], x_l: &[f64]) -> f64 {
        let (u1, u2) = self.split_u(x_u);
        let (l1, l2) = self.split_l(x_l);
        let q = self.g.q;
        match self.id {
            1 => sq(u1) + sq(l1) + sq(u2) + paired(u2, l2, |a, b| (a - b.tan()).powi(2)),
            2 => sq(u1) - sq(l1) + sq(u2) - paired(u2, l2, |a, b| (a - b.ln()).powi(2)),
            3 => sq(u1) + sq(l1) + sq(u2) + paired(u2, l2, |a, b| (a * a - b.tan()).powi(2)),
            4 => sq(u1) - sq(l1) + sq(u2) - paired(u2, l2, |a, b| (a.abs() - (1.0 + b).ln()).powi(2)),
            5 => sq(u1) - rosenbrock(l1) + sq(u2) - paired(u2, l2, |a, b| (a.abs() - b * b).powi(2)),
            6 => sq(u1) - sq(&l1[..q]) + sq(&l1[q..]) + sq(u2) - paired(u2, l2, |a, b| (a - b).powi(2)),
            7 => {
                let prod: f64 = u1
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (x / ((i + 1) as f64).sqrt()).cos())
                    .product();
                1.0 + sq(u1) / 400.0 - prod - sq(l1) + sq(u2) - paired(u2, l2, |a, b| (a - b.ln()).powi(2))
            }
            8 => {
                let pf = u1.len() as f64;
                let ackley = 20.0 + E
                    - 20.0 * (-0.2 * (sq(u1) / pf).sqrt()).exp()
                    - (u1.iter().map(|x| (2.0 * PI * x).cos()).sum::<f64>() / pf).exp();
                ackley - rosenbrock(l1) + sq(u2) - paired(u2, l2, |a, b| (a - b.powi(3)).powi(2))
            }
            9 => sq(u1) - sq(l1) + sq(u2) - paired(u2, l2, |a, b| (a - (1.0 + b).ln()).powi(2)),
            10 => {
                paired(u1, u1, |a, _| (a - 2.0).powi(2)) + sq(l1) + paired(u2, u2, |a, _| (a - 2.0).powi(2))
                    - paired(u2, l2, |a, b| (a - b.tan()).powi(2))
            }
            11 => sq(u1) - sq(l1) + sq(u2) - paired(u2, l2, |a, b| (a - b.ln()).powi(2)),
            12 => {
                paired(u1, u1, |a, _| (a - 2.0).powi(2))
                    + sq(l1)
                    + paired(u2, u2, |a, _| (a - 2.0).powi(2))
                    + l2.iter().map(|b| b.abs().tan()).sum::<f64>()
                    - paired(u2, l2, |a, b| (a - b.tan()).powi(2))
            }
            _ => unreachable!(),
        }
    }

    fn upper_constraints(&self, x_u: &[f64], x_l: &[f64]) -> Vec<f64> {
        let (_, u2) = self.split_u(x_u);
        let (_, l2) = self.split_l(x_l);
        match self.id {
            9 => vec![ring_slack(sq(x_u))],
            10 => cubic_slacks(x_u),
            11 => {
                let shift = 1.0 / (self.g.r as f64).sqrt();
                u2.iter().zip(l2).map(|(a, b)| shift + b.ln() - a).collect()
            }
            12 => {
                let mut g: Vec<f64> = u2.iter().zip(l2).map(|(a, b)| b.tan() - a).collect();
                g.extend(cubic_slacks(x_u));
                g
            }
            _ => Vec::new(),
        }
    }

    fn lower_objective(&self, x_u: &[f64], x_l: &[f64]) -> f64 {
        let (u1, u2) = self.split_u(x_u);
        let (l1, l2) = self.split_l(x_l);
        let q = self.g.q;
        match self.id {
            1 => sq(u1) + sq(l1) + paired(u2, l2, |a, b| (a - b.tan()).powi(2)),
            2 => sq(u1) + sq(l1) + paired(u2, l2, |a, b| (a - b.ln()).powi(2)),
            3 => sq(u1) + rastrigin(l1) + paired(u2, l2, |a, b| (a * a - b.tan()).powi(2)),
            4 => sq(u1) + rastrigin(l1) + paired(u2, l2, |a, b| (a.abs() - (1.0 + b).ln()).powi(2)),
            5 => sq(u1) + rosenbrock(l1) + paired(u2, l2, |a, b| (a.abs() - b * b).powi(2)),
            6 => {
                let extra = &l1[q..];
                let pairs: f64 = extra.chunks_exact(2).map(|c| (c[1] - c[0]).powi(2)).sum();
                sq(u1) + sq(&l1[..q]) + pairs + paired(u2, l2, |a, b| (a - b).powi(2))
            }
            7 => u1.iter().map(|x| x.powi(3)).sum::<f64>() + sq(l1) + paired(u2, l2, |a, b| (a - b.ln()).powi(2)),
            8 => u1.iter().map(|x| x.abs()).sum::<f64>() + rosenbrock(l1) + paired(u2, l2, |a, b| (a - b.powi(3)).powi(2)),
            9 => sq(u1) + sq(l1) + paired(u2, l2, |a, b| (a - (1.0 + b).ln()).powi(2)),
            10 | 12 => sq(u1) + paired(l1, l1, |a, _| (a - 2.0).powi(2)) + paired(u2, l2, |a, b| (a - b.tan()).powi(2)),
            11 => sq(u1) + sq(l1) + paired(u2, l2, |a, b| (a - b.ln()).powi(2)),
            _ => unreachable!(),
        }
    }

    fn lower_constraints(&self, x_u: &[f64], x_l: &[f64]) -> Vec<f64> {
        let (_, u2) = self.split_u(x_u);
        let (l1, l2) = self.split_l(x_l);
        match self.id {
            9 => vec![ring_slack(sq(x_l))],
            10 => cubic_slacks(l1),
            11 => vec![1.0 - paired(u2, l2, |a, b| (a - b.ln()).powi(2))],
            12 => {
                let mut g = cubic_slacks(l1);
                g.push(1.0 - paired(u2, l2, |a, b| (a - b.tan()).powi(2)));
                g
            }
            _ => Vec::new(),
        }
    }
}

/// SMD problem `id` with the canonical group split for `(m, n)`.
pub fn make_smd(id: usize, m: usize, n: usize) -> Result<BilevelProblem> {
    if !(1..=12).contains(&id) {
        return Err(Error::UnknownProblem(format!("smd{id}")));
    }
    make_smd_with_groups(id, SmdGroups::canonical(id, m, n)?)
}

/// SMD problem `id` with explicit group sizes.
pub fn make_smd_with_groups(id: usize, groups: SmdGroups) -> Result<BilevelProblem> {
    if !(1..=12).contains(&id) {
        return Err(Error::UnknownProblem(format!("smd{id}")));
    }
    let SmdGroups { p, q, r, s } = groups;
    let invalid = |why: &str| Err(Error::InvalidProblem(format!("smd{id} groups {groups:?}: {why}")));
    if p == 0 || r == 0 {
        return invalid("p and r must be positive");
    }
    if id != 6 && s != 0 {
        return invalid("s is only used by smd6");
    }
    if q + s == 0 {
        return invalid("at least one lower-only variable is required");
    }
    if matches!(id, 10 | 12) && (q < 2 || p + r < 2) {
        return invalid("smd10/smd12 need q ≥ 2 and p + r ≥ 2");
    }
    let smd = Smd { id, g: groups };
    let (bu, bl) = smd.bounds();
    let (x_u, x_l, big, small) = smd.optimum();
    Ok(BilevelProblem::new(format!("smd{id}"), bu, bl, Arc::new(smd))?
        .with_optimum(big, small)
        .with_reference_optimum(x_u, x_l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::EvalCounter;

    #[test]
    fn canonical_splits() {
        let g = SmdGroups::canonical(1, 2, 3).unwrap();
        assert_eq!(g, SmdGroups { p: 1, q: 2, r: 1, s: 0 });
        let g = SmdGroups::canonical(6, 2, 3).unwrap();
        assert_eq!(g, SmdGroups { p: 1, q: 0, r: 1, s: 2 });
        let g = SmdGroups::canonical(6, 10, 10).unwrap();
        assert_eq!((g.dim_u(), g.dim_l()), (10, 10));
        let g = SmdGroups::canonical(3, 30, 30).unwrap();
        assert_eq!(g, SmdGroups { p: 15, q: 15, r: 15, s: 0 });
        assert!(SmdGroups::canonical(1, 4, 4).is_err());
    }

    #[test]
    fn dims_and_range() {
        let p = make_smd(1, 2, 3).unwrap();
        assert_eq!((p.dim_u, p.dim_l), (2, 3));
        assert!(matches!(make_smd(13, 2, 3), Err(Error::UnknownProblem(_))));
        assert!(matches!(make_smd(0, 2, 3), Err(Error::UnknownProblem(_))));
        assert!(make_smd(1, 3, 3).is_err());
    }

    #[test]
    fn explicit_groups() {
        let p = make_smd_with_groups(1, SmdGroups { p: 2, q: 1, r: 3, s: 0 }).unwrap();
        assert_eq!((p.dim_u, p.dim_l), (5, 4));
        assert!(make_smd_with_groups(10, SmdGroups { p: 1, q: 1, r: 1, s: 0 }).is_err());
        assert!(make_smd_with_groups(2, SmdGroups { p: 1, q: 1, r: 1, s: 2 }).is_err());
    }

    #[test]
    fn reference_optimum_in_bounds_and_feasible() {
        for &(m, n) in &[(2, 3), (10, 10), (30, 30)] {
            for id in 1..=12 {
                let prob = make_smd(id, m, n).unwrap();
                let (x_u, x_l) = prob.reference_optimum.clone().unwrap();
                for (v, (lo, hi)) in x_u.iter().chain(&x_l).zip(prob.joint_bounds()) {
                    assert!(*v >= lo && *v <= hi, "smd{id} ({m},{n}): {v} not in [{lo},{hi}]");
                }
                let mut c = EvalCounter::default();
                let up = prob.evaluate_upper(&x_u, &x_l, &mut c);
                let lo = prob.evaluate_lower(&x_u, &x_l, &mut c);
                assert!(up.cv <= 1e-12, "smd{id} ({m},{n}) upper cv {}", up.cv);
                assert!(lo.cv <= 1e-12);
                assert!((up.value - prob.f_star.unwrap()).abs() < 1e-9, "smd{id} ({m},{n}) F {}", up.value);
                assert!((lo.value - prob.little_f_star.unwrap()).abs() < 1e-9);
            }
        }
    }
}
