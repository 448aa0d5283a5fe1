//! Cooperation between competing lower-level tasks.
//!
//! Before a task executes, tasks whose sampling distributions have settled
//! more (smaller drift of the mean over recent executions) and whose upper
//! vectors are close may lend their mean and covariance to it. The strongest
//! lender also contributes its best lower solution as a navigational sample.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::es::{EsState, MEAN_HISTORY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CicConfig {
    /// Trade-off between the fluctuation and distance terms, in `[0, 1]`.
    pub alpha: f64,
    /// Executions a task needs before it can give or receive help.
    pub min_execs: usize,
    /// Rescale all mixing weights to sum to one.
    pub normalize_weights: bool,
}

impl Default for CicConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            min_execs: 3,
            normalize_weights: true,
        }
    }
}

impl CicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.min_execs == 0 {
            return Err(Error::InvalidConfig("min_execs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Read-only view of a task used for planning.
#[derive(Debug, Clone, Copy)]
pub struct TaskSnapshot<'a> {
    pub task_id: usize,
    pub x_u: &'a [f64],
    pub exec_count: usize,
    /// Up to the last three lower-level means, oldest first.
    pub mean_history: &'a [Vec<f64>],
    /// Lower vector of the task's incumbent pair.
    pub best_lower: &'a [f64],
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CooperationPlan {
    pub target_id: usize,
    /// `(task_id, intensity)`, in ascending distance order.
    pub sources: Vec<(usize, f64)>,
    pub target_weight: f64,
    pub navi: Vec<f64>,
}

/// `(Σ |a_i − b_i|^{1/m})^m` for vectors of length `m`.
pub fn fractional_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let m = a.len() as f64;
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(1.0 / m)).sum();
    Ok(s.powf(m))
}

/// Mean over dimensions of the sample standard deviation across the last
/// three means; `None` until three are available.
pub fn mean_fluctuation(history: &[Vec<f64>]) -> Option<f64> {
    if history.len() < MEAN_HISTORY {
        return None;
    }
    let window = &history[history.len() - MEAN_HISTORY..];
    let dim = window[0].len();
    if dim == 0 {
        return Some(0.0);
    }
    let k = window.len() as f64;
    let total: f64 = (0..dim)
        .map(|j| {
            let mean = window.iter().map(|v| v[j]).sum::<f64>() / k;
            let var = window.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (k - 1.0);
            var.sqrt()
        })
        .sum();
    Some(total / dim as f64)
}

/// Selects sources for `target` among `candidates` and computes the mixing
/// weights. Returns `None` when the target is not yet eligible or nobody
/// qualifies.
pub fn plan_cooperation(
    target: &TaskSnapshot<'_>,
    candidates: &[TaskSnapshot<'_>],
    cfg: &CicConfig,
) -> Result<Option<CooperationPlan>> {
    if target.exec_count < cfg.min_execs {
        return Ok(None);
    }
    let Some(std_t) = mean_fluctuation(target.mean_history) else {
        return Ok(None);
    };

    let mut pool: Vec<(f64, usize, f64)> = Vec::new();
    for c in candidates {
        if c.task_id == target.task_id || c.terminated || c.exec_count < cfg.min_execs {
            continue;
        }
        let Some(std_s) = mean_fluctuation(c.mean_history) else {
            continue;
        };
        let d = fractional_distance(c.x_u, target.x_u)?;
        pool.push((d, c.task_id, std_s));
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let half = pool.len().div_ceil(2);
    let chosen: Vec<(f64, usize, f64)> = pool
        .into_iter()
        .take(half)
        .filter(|(_, _, std_s)| *std_s < std_t)
        .collect();
    if chosen.is_empty() {
        return Ok(None);
    }

    let a = cfg.alpha;
    let std_denom = std_t + chosen.iter().map(|c| c.2).sum::<f64>();
    let dist_sum: f64 = chosen.iter().map(|c| c.0).sum();
    let share = 1.0 / chosen.len() as f64;
    let mut sources: Vec<(usize, f64)> = chosen
        .iter()
        .map(|(d, id, s)| {
            let dist_term = if dist_sum > 0.0 { d / dist_sum } else { share };
            (*id, 1.0 - a * s / std_denom - (1.0 - a) * dist_term)
        })
        .collect();
    let mut target_weight = 1.0 - a * std_t / std_denom;

    if cfg.normalize_weights {
        for (_, w) in sources.iter_mut() {
            *w = w.max(0.0);
        }
        target_weight = target_weight.max(0.0);
        let total = target_weight + sources.iter().map(|s| s.1).sum::<f64>();
        if total > 0.0 {
            target_weight /= total;
            for (_, w) in sources.iter_mut() {
                *w /= total;
            }
        } else {
            target_weight = 1.0;
        }
    }

    let strongest = sources
        .iter()
        .fold(None::<(usize, f64)>, |best, &(id, w)| match best {
            Some((_, bw)) if bw >= w => best,
            _ => Some((id, w)),
        })
        .map(|(id, _)| id)
        .expect("non-empty sources");
    let navi = candidates
        .iter()
        .find(|c| c.task_id == strongest)
        .map(|c| c.best_lower.to_vec())
        .expect("source drawn from candidates");

    Ok(Some(CooperationPlan {
        target_id: target.task_id,
        sources,
        target_weight,
        navi,
    }))
}

/// Mixes the sources' means and covariances into `target` with the plan's
/// weights; the step size is left as is. `sources` follow the order of
/// `plan.sources`.
pub fn apply_cooperation(target: &mut EsState, sources: &[&EsState], plan: &CooperationPlan) -> Result<()> {
    if sources.len() != plan.sources.len() {
        return Err(Error::DimensionMismatch {
            expected: plan.sources.len(),
            actual: sources.len(),
        });
    }
    let dim = target.dim();
    if let Some(bad) = sources.iter().find(|s| s.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    let w_t = plan.target_weight;
    let mut mean: Vec<f64> = target.mean().iter().map(|v| w_t * v).collect();
    let mut cov: DMatrix<f64> = target.cov() * w_t;
    for (state, (_, w)) in sources.iter().zip(&plan.sources) {
        for (acc, v) in mean.iter_mut().zip(state.mean()) {
            *acc += w * v;
        }
        cov += state.cov() * *w;
    }
    target.set_distribution(&mean, &cov)
}
