//! Nested baseline: the same outer loop, but each lower task runs alone to
//! its own termination before the next one starts, with no competition and
//! no cooperation. The converged lower response is evaluated at the upper
//! level once per task.

use crate::error::Result;
use crate::es::EsState;
use crate::problems::{BilevelProblem, EvalCounter};
use crate::rng::{child, Stream};
use crate::scheduler::{solve_with, Elite, LowerSchedule, LowerTask, RunConfig, RunResult, TraceEvent};

/// Sequential lower schedule. Every execution is traced with round 0 and
/// slot `task_id + 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Nested;

impl LowerSchedule for Nested {
    fn run(
        &mut self,
        pop_u: &[Vec<f64>],
        upper_es: &EsState,
        problem: &BilevelProblem,
        counter: &mut EvalCounter,
        cfg: &RunConfig,
        generation: usize,
    ) -> Result<(Vec<Elite>, Vec<TraceEvent>)> {
        let mut elites = Vec::with_capacity(pop_u.len());
        let mut trace = Vec::new();
        for (i, x) in pop_u.iter().enumerate() {
            let rng = child(cfg.seed, generation, Stream::Task(i));
            let mut task = LowerTask::new(i, x, upper_es, problem.dim_u, cfg.pop_l, rng)?;
            while !task.terminated {
                let outcome = task.step(None, problem, counter, cfg)?;
                trace.push(TraceEvent {
                    upper_gen: generation,
                    round: 0,
                    slot: i + 1,
                    task_id: i,
                    execs: task.exec_count,
                    fes_l: task.fes_l_used,
                    improved: outcome.improved,
                    cooperated: false,
                    terminated: task.terminated,
                });
            }
            let pair = task.evaluate_incumbent(problem, counter)?.clone();
            elites.push(Elite {
                task_id: i,
                pair,
                converged: true,
            });
        }
        elites.sort_by(|a, b| {
            crate::problems::deb_order((a.pair.upper.value, a.pair.upper.cv), (b.pair.upper.value, b.pair.upper.cv))
                .then(a.task_id.cmp(&b.task_id))
        });
        Ok((elites, trace))
    }
}

/// Runs the nested baseline with the same configuration semantics as
/// [`crate::scheduler::solve`].
pub fn nested_baseline_solve(problem: &BilevelProblem, cfg: &RunConfig) -> Result<RunResult> {
    solve_with(problem, cfg, &mut Nested)
}
