//! Task selection probabilities.
//!
//! Each competing lower-level task carries a history of the upper-level
//! fitness of its current best pair, one value per execution. Fitness is on a
//! maximization scale (see [`internal_fitness`]). Three distributions are
//! blended:
//!
//! - a uniform floor so that no task starves,
//! - a performance share proportional to the discounted fitness advantage
//!   over the worst task,
//! - a potential share from an exponential transform of the discounted
//!   relative fitness change.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpuConfig {
    /// Discount for older executions, in `[0, 1]`.
    pub gamma: f64,
    /// Base of the potential transform, `> 1`.
    pub epsilon: f64,
    pub w_bs: f64,
    pub w_pf: f64,
    pub w_pt: f64,
    pub denom_guard: f64,
}

impl Default for SpuConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            epsilon: 1.1,
            w_bs: 0.1,
            w_pf: 0.7,
            w_pt: 0.2,
            denom_guard: 1e-12,
        }
    }
}

impl SpuConfig {
    pub fn validate(&self) -> Result<()> {
        let sum = self.w_bs + self.w_pf + self.w_pt;
        if [self.w_bs, self.w_pf, self.w_pt].iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "selection weights must be non-negative and sum to 1 (got {sum})"
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.epsilon > 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon {} must exceed 1", self.epsilon)));
        }
        if !(self.denom_guard > 0.0) {
            return Err(Error::InvalidConfig("denom_guard must be positive".into()));
        }
        Ok(())
    }
}

/// Per-task execution history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskHistory {
    pub task_id: usize,
    /// Internal fitness of the task's best pair after each execution.
    pub fit_series: Vec<f64>,
    /// Evolving potential of every execution after the first.
    pub pt_series: Vec<f64>,
}

impl TaskHistory {
    pub fn new(task_id: usize) -> Self {
        Self {
            task_id,
            ..Self::default()
        }
    }

    pub fn exec_count(&self) -> usize {
        self.fit_series.len()
    }

    pub fn latest(&self) -> Option<f64> {
        self.fit_series.last().copied()
    }

    /// Records one execution. `pt` must be present for every execution but
    /// the first.
    pub fn record(&mut self, fit: f64, pt: Option<f64>) {
        debug_assert_eq!(pt.is_some(), !self.fit_series.is_empty());
        if let Some(pt) = pt {
            self.pt_series.push(pt);
        }
        self.fit_series.push(fit);
    }
}

/// Best and worst latest fitness across the competing tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalEnvelope {
    pub fit_gb: f64,
    pub fit_gw: f64,
}

impl GlobalEnvelope {
    /// Envelope over the given latest fitnesses; `None` when empty.
    pub fn from_latest(latest: impl IntoIterator<Item = f64>) -> Option<Self> {
        latest.into_iter().fold(None, |env, f| {
            Some(match env {
                None => Self { fit_gb: f, fit_gw: f },
                Some(e) => Self {
                    fit_gb: e.fit_gb.max(f),
                    fit_gw: e.fit_gw.min(f),
                },
            })
        })
    }
}

/// Maps an upper evaluation onto the maximization scale.
///
/// Feasible pairs score `−F`. Infeasible pairs score `−(ceiling + cv)` where
/// `ceiling` is the worst feasible `F` seen so far, so that they rank below
/// every feasible pair and among themselves by violation.
pub fn internal_fitness(value: f64, cv: f64, ceiling: f64) -> f64 {
    if cv <= 0.0 {
        -value
    } else {
        -(ceiling + cv)
    }
}

fn discounted_mean(series: &[f64], gamma: f64) -> f64 {
    let last = series.len() - 1;
    let (num, den) = series.iter().enumerate().fold((0.0, 0.0), |(num, den), (t, v)| {
        let w = gamma.powi((last - t) as i32);
        (num + w * v, den + w)
    });
    num / den
}

/// Discounted competing fitness of a task.
pub fn competing_fitness(history: &TaskHistory, gamma: f64) -> Result<f64> {
    if history.fit_series.is_empty() {
        return Err(Error::Empty("task history"));
    }
    Ok(discounted_mean(&history.fit_series, gamma))
}

/// Evolving potential of one execution, from the task's fitness before and
/// after it and the envelope captured before it.
pub fn evolving_potential(fit_new: f64, fit_prev: f64, env: GlobalEnvelope, guard: f64) -> f64 {
    let rel = |num: f64, base: f64| num / base.abs().max(guard);
    rel(fit_new - fit_prev, fit_prev)
        + rel(fit_new - env.fit_gb, env.fit_gb).max(0.0)
        + rel(fit_new - env.fit_gw, env.fit_gw).min(0.0)
}

/// Discounted competing potential; zero before the second execution.
pub fn competing_potential(pt_series: &[f64], gamma: f64) -> f64 {
    if pt_series.is_empty() {
        0.0
    } else {
        discounted_mean(pt_series, gamma)
    }
}

/// Selection distribution over task ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    pub entries: BTreeMap<usize, f64>,
}

impl ProbabilityVector {
    pub fn get(&self, task_id: usize) -> Option<f64> {
        self.entries.get(&task_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Blended selection probabilities over the active tasks.
pub fn selection_probabilities(active: &[&TaskHistory], cfg: &SpuConfig) -> Result<ProbabilityVector> {
    if active.is_empty() {
        return Err(Error::Empty("active tasks"));
    }
    let k = active.len() as f64;
    let cf: Vec<f64> = active
        .iter()
        .map(|h| competing_fitness(h, cfg.gamma))
        .collect::<Result<_>>()?;
    let cp: Vec<f64> = active
        .iter()
        .map(|h| competing_potential(&h.pt_series, cfg.gamma))
        .collect();

    let worst = cf.iter().copied().fold(f64::INFINITY, f64::min);
    let adv: Vec<f64> = cf.iter().map(|c| c - worst).collect();
    let adv_sum: f64 = adv.iter().sum();
    let p_pf: Vec<f64> = if adv_sum > 0.0 && adv_sum.is_finite() {
        adv.iter().map(|a| a / adv_sum).collect()
    } else {
        vec![1.0 / k; active.len()]
    };

    let ln_eps = cfg.epsilon.ln();
    let limit = 700.0 / ln_eps;
    // subtracting the max exponent leaves the ratio unchanged
    let expo: Vec<f64> = cp.iter().map(|c| c.clamp(-limit, limit) * ln_eps).collect();
    let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = expo.iter().map(|e| (e - top).exp()).collect();
    let raw_sum: f64 = raw.iter().sum();
    let p_pt: Vec<f64> = raw.iter().map(|r| r / raw_sum).collect();

    let blended: Vec<f64> = p_pf
        .iter()
        .zip(&p_pt)
        .map(|(pf, pt)| cfg.w_bs / k + cfg.w_pf * pf + cfg.w_pt * pt)
        .collect();
    let total: f64 = blended.iter().sum();
    Ok(ProbabilityVector {
        entries: active
            .iter()
            .zip(blended)
            .map(|(h, p)| (h.task_id, p / total))
            .collect(),
    })
}
