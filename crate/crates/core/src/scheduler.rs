//! Outer bilevel loop and the competitive lower-level scheduler.
//!
//! Each upper generation samples `p` joint individuals, turns each into a
//! lower-level task seeded from the marginal of the upper distribution, and
//! lets the tasks compete for executions until half of them have converged.
//! The converged pairs drive the upper update.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cic::{apply_cooperation, plan_cooperation, CicConfig, CooperationPlan, TaskSnapshot};
use crate::error::{Error, Result};
use crate::es::{Candidate, EsState};
use crate::harness::metrics::accuracy;
use crate::problems::{deb_compare, deb_order, BilevelProblem, EvalCounter, LowerEval, Preference, UpperEval};
use crate::rng::{child, RunRng, Stream};
use crate::spu::{
    evolving_potential, internal_fitness, selection_probabilities, GlobalEnvelope, ProbabilityVector, SpuConfig,
    TaskHistory,
};

/// Step size of the initial upper distribution, relative to the box width.
pub const UPPER_SIGMA0: f64 = 0.3;

/// Termination budgets in function evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budgets {
    pub fes_u_max: usize,
    pub fes_u_var: usize,
    pub fes_l_max: usize,
    pub fes_l_var: usize,
}

impl Budgets {
    /// Budgets for the standard dimension settings; other sizes use the row
    /// of the nearest setting by total dimension.
    pub fn for_dims(m: usize, n: usize) -> Self {
        let row = |a, b, c, d| Budgets {
            fes_u_max: a,
            fes_u_var: b,
            fes_l_max: c,
            fes_l_var: d,
        };
        match (m, n) {
            (2, 3) => row(2500, 350, 250, 25),
            (10, 10) => row(5000, 750, 500, 50),
            (30, 30) => row(12500, 750, 1000, 50),
            _ if m + n <= 5 => row(2500, 350, 250, 25),
            _ if m + n <= 20 => row(5000, 750, 500, 50),
            _ => row(12500, 750, 1000, 50),
        }
    }
}

pub fn default_pop_u(m: usize, n: usize) -> usize {
    4 + ((m + n) as f64).ln().floor() as usize
}

pub fn default_pop_l(n: usize) -> usize {
    4 + (n as f64).ln().floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pop_u: usize,
    pub pop_l: usize,
    pub fes_u_max: usize,
    pub fes_u_var: usize,
    pub fes_l_max: usize,
    pub fes_l_var: usize,
    pub tol_u: f64,
    pub tol_l: f64,
    pub acc_stop: f64,
    pub spu: SpuConfig,
    pub cic: CicConfig,
    /// Check the elite quota only at the end of a full round.
    pub strict_rounds: bool,
    pub seed: u64,
}

impl RunConfig {
    pub fn for_dims(m: usize, n: usize, seed: u64) -> Self {
        let b = Budgets::for_dims(m, n);
        Self {
            pop_u: default_pop_u(m, n),
            pop_l: default_pop_l(n),
            fes_u_max: b.fes_u_max,
            fes_u_var: b.fes_u_var,
            fes_l_max: b.fes_l_max,
            fes_l_var: b.fes_l_var,
            tol_u: 1e-6,
            tol_l: 1e-5,
            acc_stop: 1e-6,
            spu: SpuConfig::default(),
            cic: CicConfig::default(),
            strict_rounds: false,
            seed,
        }
    }

    pub fn for_problem(problem: &BilevelProblem, seed: u64) -> Self {
        Self::for_dims(problem.dim_u, problem.dim_l, seed)
    }

    /// Number of converged tasks returned per upper generation.
    pub fn quota(&self) -> usize {
        self.pop_u / 2
    }

    /// Lower stagnation window in generations.
    pub fn lower_window(&self) -> usize {
        self.fes_l_var.div_ceil(self.pop_l).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pop_u < 2 || self.pop_l < 2 {
            return Err(Error::InvalidConfig("population sizes must be at least 2".into()));
        }
        if [self.fes_u_max, self.fes_u_var, self.fes_l_max, self.fes_l_var].contains(&0) {
            return Err(Error::InvalidConfig("budgets must be positive".into()));
        }
        if [self.tol_u, self.tol_l, self.acc_stop].iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidConfig("tolerances must be non-negative".into()));
        }
        self.spu.validate()?;
        self.cic.validate()
    }
}

/// An upper vector with its lower response and both evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub x_u: Vec<f64>,
    pub x_l: Vec<f64>,
    pub upper: UpperEval,
    pub lower: LowerEval,
}

impl Pair {
    fn upper_key(&self) -> (f64, f64) {
        (self.upper.value, self.upper.cv)
    }

    pub fn joint(&self) -> Vec<f64> {
        self.x_u.iter().chain(&self.x_l).copied().collect()
    }
}

fn better_upper(a: &Pair, b: &Pair) -> bool {
    deb_order(a.upper_key(), b.upper_key()).is_lt()
}

/// What one lower generation of a task did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    /// First execution of the task: an incumbent was established.
    pub fresh: bool,
    /// The incumbent was replaced by a strictly better solution.
    pub improved: bool,
    pub cooperated: bool,
}

/// The lower-level optimization induced by one upper individual.
#[derive(Debug, Clone)]
pub struct LowerTask {
    pub task_id: usize,
    pub x_u: Vec<f64>,
    pub es: EsState,
    pub exec_count: usize,
    pub fes_l_used: usize,
    /// Incumbent lower solution; navigational samples never become it.
    pub best_lower: Option<(Vec<f64>, LowerEval)>,
    /// Incumbent with its upper evaluation, when one has been made.
    pub best_pair: Option<Pair>,
    /// Incumbent lower evaluation after each recent execution.
    pub elite_window: VecDeque<LowerEval>,
    pub terminated: bool,
    pub history: TaskHistory,
    means: Vec<Vec<f64>>,
    rng: RunRng,
}

impl LowerTask {
    /// Task for the joint individual `joint`: the lower sampler starts at its
    /// lower block with the lower marginal covariance and step size of
    /// `upper_es`.
    pub fn new(task_id: usize, joint: &[f64], upper_es: &EsState, dim_u: usize, pop_l: usize, rng: RunRng) -> Result<Self> {
        let dim = upper_es.dim();
        if joint.len() != dim || dim_u >= dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: joint.len(),
            });
        }
        let coords: Vec<usize> = (dim_u..dim).collect();
        let marginal = upper_es.marginal(&coords)?;
        let es = EsState::new(dim - dim_u, &joint[dim_u..], marginal.sigma, marginal.cov, pop_l)?;
        let means = es.mean_history().map(<[f64]>::to_vec).collect();
        Ok(Self {
            task_id,
            x_u: joint[..dim_u].to_vec(),
            es,
            exec_count: 0,
            fes_l_used: 0,
            best_lower: None,
            best_pair: None,
            elite_window: VecDeque::new(),
            terminated: false,
            history: TaskHistory::new(task_id),
            means,
            rng,
        })
    }

    /// The last (up to three) lower means, oldest first.
    pub fn recent_means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn snapshot(&self) -> TaskSnapshot<'_> {
        TaskSnapshot {
            task_id: self.task_id,
            x_u: &self.x_u,
            exec_count: self.exec_count,
            mean_history: &self.means,
            best_lower: self.best_lower.as_ref().map_or(&[][..], |b| &b.0),
            terminated: self.terminated,
        }
    }

    /// One lower generation: optional mixing, `q` lower FEs, ES update,
    /// incumbent and termination bookkeeping. No upper FE is spent here.
    pub fn step(
        &mut self,
        coop: Option<(&CooperationPlan, &[&EsState])>,
        problem: &BilevelProblem,
        counter: &mut EvalCounter,
        cfg: &RunConfig,
    ) -> Result<StepOutcome> {
        if self.terminated {
            return Err(Error::TaskTerminated(self.task_id));
        }
        let q = self.es.strategy().lambda;
        let navi = match coop {
            Some((plan, sources)) => {
                apply_cooperation(&mut self.es, sources, plan)?;
                Some(plan.navi.clone())
            }
            None => None,
        };
        let sampled = self
            .es
            .sample_within(q - usize::from(navi.is_some()), &problem.bounds_l, &mut self.rng);

        let mut pool: Vec<Candidate> = Vec::with_capacity(q);
        for x in sampled {
            let e = problem.evaluate_lower(&self.x_u, &x, counter);
            pool.push(Candidate {
                vector: x,
                objective: e.value,
                cv: e.cv,
            });
        }
        let best_sampled = pool
            .iter()
            .min_by(|a, b| deb_order((a.objective, a.cv), (b.objective, b.cv)))
            .cloned()
            .ok_or(Error::Empty("lower sample"))?;
        if let Some(x) = navi {
            let e = problem.evaluate_lower(&self.x_u, &x, counter);
            pool.push(Candidate {
                vector: x,
                objective: e.value,
                cv: e.cv,
            });
        }
        pool.sort_by(|a, b| deb_order((a.objective, a.cv), (b.objective, b.cv)));
        self.es.update(&pool)?;
        self.means = self.es.mean_history().map(<[f64]>::to_vec).collect();

        let new_eval = LowerEval {
            value: best_sampled.objective,
            cv: best_sampled.cv,
        };
        let fresh = self.best_lower.is_none();
        let improved = match &self.best_lower {
            None => false,
            Some((_, old)) => {
                !new_eval.value.is_nan()
                    && !new_eval.cv.is_nan()
                    && deb_compare((new_eval.value, new_eval.cv), (old.value, old.cv))? == Preference::First
            }
        };
        if fresh || improved {
            self.best_lower = Some((best_sampled.vector, new_eval));
        }

        self.exec_count += 1;
        self.fes_l_used += q;
        let incumbent = self.best_lower.as_ref().map(|b| b.1).expect("incumbent set above");
        self.elite_window.push_back(incumbent);
        let span = cfg.lower_window() + 1;
        while self.elite_window.len() > span {
            self.elite_window.pop_front();
        }
        self.terminated = self.fes_l_used >= cfg.fes_l_max || self.stagnated(span, cfg.tol_l);
        Ok(StepOutcome {
            fresh,
            improved,
            cooperated: coop.is_some(),
        })
    }

    fn stagnated(&self, span: usize, tol: f64) -> bool {
        if self.elite_window.len() < span || self.elite_window.iter().any(|e| e.cv > 0.0) {
            return false;
        }
        let (lo, hi) = self
            .elite_window
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.value), hi.max(e.value)));
        hi - lo < tol
    }

    /// Upper-evaluates the incumbent and stores it as the best pair.
    pub fn evaluate_incumbent(&mut self, problem: &BilevelProblem, counter: &mut EvalCounter) -> Result<&Pair> {
        let (x_l, lower) = self.best_lower.clone().ok_or(Error::Empty("lower incumbent"))?;
        let upper = problem.evaluate_upper(&self.x_u, &x_l, counter);
        self.best_pair = Some(Pair {
            x_u: self.x_u.clone(),
            x_l,
            upper,
            lower,
        });
        Ok(self.best_pair.as_ref().expect("just set"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub exec_index: usize,
    pub pair: Pair,
    pub fitness: f64,
}

/// Per-task record of the incumbent pair after every execution.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    entries: Vec<Vec<ArchiveEntry>>,
    /// Worst feasible upper value seen; anchors the fitness of infeasible pairs.
    ceiling: Option<f64>,
}

impl Archive {
    pub fn new(tasks: usize) -> Self {
        Self {
            entries: vec![Vec::new(); tasks],
            ceiling: None,
        }
    }

    pub fn entries(&self, task_id: usize) -> &[ArchiveEntry] {
        &self.entries[task_id]
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Envelope over every task's latest fitness.
    pub fn envelope(&self) -> Option<GlobalEnvelope> {
        GlobalEnvelope::from_latest(self.entries.iter().filter_map(|e| e.last().map(|a| a.fitness)))
    }

    fn fitness_of(&mut self, upper: UpperEval) -> f64 {
        if upper.cv <= 0.0 {
            self.ceiling = Some(self.ceiling.map_or(upper.value, |c| c.max(upper.value)));
        }
        internal_fitness(upper.value, upper.cv, self.ceiling.unwrap_or(0.0))
    }

    fn push(&mut self, task_id: usize, exec_index: usize, pair: Pair) -> f64 {
        let fitness = self.fitness_of(pair.upper);
        self.entries[task_id].push(ArchiveEntry {
            exec_index,
            pair,
            fitness,
        });
        fitness
    }
}

/// One row of the resource-allocation trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub upper_gen: usize,
    /// 0 for activation (and for every execution of the nested schedule).
    pub round: usize,
    pub slot: usize,
    pub task_id: usize,
    pub execs: usize,
    pub fes_l: usize,
    pub improved: bool,
    pub cooperated: bool,
    pub terminated: bool,
}

impl TraceEvent {
    fn new(at: (usize, usize, usize), task: &LowerTask, outcome: StepOutcome) -> Self {
        Self {
            upper_gen: at.0,
            round: at.1,
            slot: at.2,
            task_id: task.task_id,
            execs: task.exec_count,
            fes_l: task.fes_l_used,
            improved: outcome.improved,
            cooperated: outcome.cooperated,
            terminated: task.terminated,
        }
    }
}

pub fn write_trace<W: Write>(trace: &[TraceEvent], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for ev in trace {
        w.serialize(ev)?;
    }
    if trace.is_empty() {
        w.write_record([
            "upper_gen",
            "round",
            "slot",
            "task_id",
            "execs",
            "fes_l",
            "improved",
            "cooperated",
            "terminated",
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one competitive execution of `tasks[idx]`: mixing when planned, one
/// lower generation, an upper FE when the incumbent changed, archiving and
/// potential bookkeeping. `at` is `(upper_gen, round, slot)`.
pub fn execute_task(
    tasks: &mut [LowerTask],
    idx: usize,
    plan: Option<&CooperationPlan>,
    problem: &BilevelProblem,
    counter: &mut EvalCounter,
    archive: &mut Archive,
    cfg: &RunConfig,
    at: (usize, usize, usize),
) -> Result<TraceEvent> {
    let sources: Vec<EsState> = match plan {
        Some(plan) => plan
            .sources
            .iter()
            .map(|(id, _)| {
                tasks
                    .iter()
                    .find(|t| t.task_id == *id)
                    .map(|t| t.es.clone())
                    .ok_or(Error::IndexOutOfRange {
                        index: *id,
                        dim: tasks.len(),
                    })
            })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let source_refs: Vec<&EsState> = sources.iter().collect();
    let envelope = archive.envelope();

    let task = &mut tasks[idx];
    let outcome = task.step(plan.map(|p| (p, &source_refs[..])), problem, counter, cfg)?;
    if outcome.fresh || outcome.improved {
        task.evaluate_incumbent(problem, counter)?;
    }
    let pair = task.best_pair.clone().ok_or(Error::Empty("best pair"))?;
    let fit = archive.push(task.task_id, task.exec_count, pair);
    let pt = match (task.history.latest(), envelope) {
        (Some(prev), Some(env)) => Some(evolving_potential(fit, prev, env, cfg.spu.denom_guard)),
        (Some(prev), None) => Some(evolving_potential(fit, prev, GlobalEnvelope { fit_gb: prev, fit_gw: prev }, cfg.spu.denom_guard)),
        (None, _) => None,
    };
    task.history.record(fit, pt);
    Ok(TraceEvent::new(at, task, outcome))
}

/// Draws a task id with probability proportional to its entry.
pub fn roulette_select<R: Rng + ?Sized>(probs: &ProbabilityVector, rng: &mut R) -> Result<usize> {
    let last = *probs.entries.keys().next_back().ok_or(Error::Empty("selection probabilities"))?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (&id, &p) in &probs.entries {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(last)
}

/// A pair carried back to the upper level.
#[derive(Debug, Clone, PartialEq)]
pub struct Elite {
    pub task_id: usize,
    pub pair: Pair,
    /// False when the pair was taken from a task cut short by the upper budget.
    pub converged: bool,
}

/// Everything one call to [`drc`] produced.
#[derive(Debug, Clone)]
pub struct DrcOutcome {
    /// Deb-best first.
    pub elites: Vec<Elite>,
    pub trace: Vec<TraceEvent>,
    pub archive: Archive,
    pub tasks: Vec<LowerTask>,
}

fn probabilities(tasks: &[LowerTask], cfg: &SpuConfig) -> Result<ProbabilityVector> {
    let active: Vec<&TaskHistory> = tasks.iter().filter(|t| !t.terminated).map(|t| &t.history).collect();
    selection_probabilities(&active, cfg)
}

fn elite_of(task: &LowerTask, converged: bool) -> Result<Elite> {
    Ok(Elite {
        task_id: task.task_id,
        pair: task.best_pair.clone().ok_or(Error::Empty("best pair"))?,
        converged,
    })
}

fn sort_elites(elites: &mut [Elite]) {
    elites.sort_by(|a, b| deb_order(a.pair.upper_key(), b.pair.upper_key()).then(a.task_id.cmp(&b.task_id)));
}

fn collect_elites(tasks: &[LowerTask], terminated: &[usize], quota: usize, fill_from_active: bool) -> Result<Vec<Elite>> {
    let mut elites: Vec<Elite> = terminated
        .iter()
        .map(|&i| elite_of(&tasks[i], true))
        .collect::<Result<_>>()?;
    sort_elites(&mut elites);
    elites.truncate(quota);
    if fill_from_active && elites.len() < quota {
        let mut rest: Vec<Elite> = tasks
            .iter()
            .filter(|t| !t.terminated)
            .map(|t| elite_of(t, false))
            .collect::<Result<_>>()?;
        sort_elites(&mut rest);
        elites.extend(rest.into_iter().take(quota - elites.len()));
        sort_elites(&mut elites);
    }
    Ok(elites)
}

/// One upper generation's worth of lower-level work: activation followed by
/// competitive rounds until `⌊p/2⌋` tasks have terminated.
pub fn drc(
    pop_u: &[Vec<f64>],
    upper_es: &EsState,
    problem: &BilevelProblem,
    counter: &mut EvalCounter,
    cfg: &RunConfig,
    generation: usize,
) -> Result<DrcOutcome> {
    let p = pop_u.len();
    if p < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 upper individuals, got {p}")));
    }
    let quota = p / 2;
    let mut tasks: Vec<LowerTask> = pop_u
        .iter()
        .enumerate()
        .map(|(i, x)| {
            LowerTask::new(
                i,
                x,
                upper_es,
                problem.dim_u,
                cfg.pop_l,
                child(cfg.seed, generation, Stream::Task(i)),
            )
        })
        .collect::<Result<_>>()?;
    let mut archive = Archive::new(p);
    let mut trace = Vec::new();
    let mut terminated: Vec<usize> = Vec::new();

    for i in 0..p {
        let ev = execute_task(&mut tasks, i, None, problem, counter, &mut archive, cfg, (generation, 0, i + 1))?;
        if ev.terminated {
            terminated.push(i);
        }
        trace.push(ev);
    }

    let finish = |tasks: Vec<LowerTask>, terminated: &[usize], archive, trace, fill| -> Result<DrcOutcome> {
        Ok(DrcOutcome {
            elites: collect_elites(&tasks, terminated, quota, fill)?,
            trace,
            archive,
            tasks,
        })
    };
    if terminated.len() >= quota {
        return finish(tasks, &terminated, archive, trace, false);
    }

    let mut wheel = child(cfg.seed, generation, Stream::Roulette);
    let mut probs = probabilities(&tasks, &cfg.spu)?;
    let mut round = 0;
    loop {
        round += 1;
        for slot in 1..=p {
            if counter.fes_u >= cfg.fes_u_max {
                return finish(tasks, &terminated, archive, trace, true);
            }
            let id = roulette_select(&probs, &mut wheel)?;
            let plan = if tasks[id].exec_count >= cfg.cic.min_execs {
                let snaps: Vec<TaskSnapshot> = tasks.iter().map(LowerTask::snapshot).collect();
                plan_cooperation(&snaps[id], &snaps, &cfg.cic)?
            } else {
                None
            };
            let ev = execute_task(
                &mut tasks,
                id,
                plan.as_ref(),
                problem,
                counter,
                &mut archive,
                cfg,
                (generation, round, slot),
            )?;
            trace.push(ev);
            if ev.terminated {
                terminated.push(id);
                if !cfg.strict_rounds && terminated.len() >= quota {
                    return finish(tasks, &terminated, archive, trace, false);
                }
                if terminated.len() == p {
                    break;
                }
                probs = probabilities(&tasks, &cfg.spu)?;
            }
        }
        if terminated.len() >= quota {
            return finish(tasks, &terminated, archive, trace, false);
        }
        probs = probabilities(&tasks, &cfg.spu)?;
    }
}

/// Outcome of one optimization run.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Deb-best converged pair of the latest generation that produced one;
    /// falls back to the best pair handed to the upper level when nothing
    /// converged.
    pub best: Option<Pair>,
    /// Deb-best pair ever handed to the upper level.
    pub best_ever: Option<Pair>,
    /// Upper evaluation of the Deb-best elite of every generation.
    pub generation_best: Vec<UpperEval>,
    pub acc_u: Option<f64>,
    pub acc_l: Option<f64>,
    pub fes_u: usize,
    pub fes_l: usize,
    pub trace: Vec<TraceEvent>,
    pub generations: usize,
}

impl RunResult {
    pub fn executions(&self) -> usize {
        self.trace.len()
    }
}

/// Lower-level work for one upper generation: given the sampled joint
/// individuals and the upper sampler, returns the ranked pairs for the upper
/// update and the executions performed.
pub trait LowerSchedule {
    fn run(
        &mut self,
        pop_u: &[Vec<f64>],
        upper_es: &EsState,
        problem: &BilevelProblem,
        counter: &mut EvalCounter,
        cfg: &RunConfig,
        generation: usize,
    ) -> Result<(Vec<Elite>, Vec<TraceEvent>)>;
}

/// The competitive schedule.
#[derive(Debug, Clone, Copy, Default)]
pub struct Competitive;

impl LowerSchedule for Competitive {
    fn run(
        &mut self,
        pop_u: &[Vec<f64>],
        upper_es: &EsState,
        problem: &BilevelProblem,
        counter: &mut EvalCounter,
        cfg: &RunConfig,
        generation: usize,
    ) -> Result<(Vec<Elite>, Vec<TraceEvent>)> {
        let out = drc(pop_u, upper_es, problem, counter, cfg, generation)?;
        Ok((out.elites, out.trace))
    }
}

/// Initial upper sampler: uniform random mean inside the joint box, diagonal
/// covariance scaled to the box widths.
pub fn initial_upper_es(problem: &BilevelProblem, cfg: &RunConfig) -> Result<EsState> {
    let bounds = problem.joint_bounds();
    let mut rng = child(cfg.seed, 0, Stream::Init);
    let mean: Vec<f64> = bounds.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect();
    let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        bounds.len(),
        bounds.iter().map(|(lo, hi)| (hi - lo).powi(2)),
    ));
    EsState::new(bounds.len(), &mean, UPPER_SIGMA0, cov, cfg.pop_u)
}

/// The outer loop shared by every lower schedule.
pub fn solve_with<S: LowerSchedule>(problem: &BilevelProblem, cfg: &RunConfig, schedule: &mut S) -> Result<RunResult> {
    cfg.validate()?;
    let mut upper = initial_upper_es(problem, cfg)?;
    let bounds = problem.joint_bounds();
    let mut counter = EvalCounter::default();
    let mut trace = Vec::new();
    let mut best: Option<Pair> = None;
    let mut fallback: Option<Pair> = None;
    let mut best_ever: Option<Pair> = None;
    let mut generation_best = Vec::new();
    // (fes_u at the end of a generation, value of its best converged elite when feasible)
    let mut elitist: Vec<(usize, Option<f64>)> = Vec::new();
    let mut generation = 0;

    while counter.fes_u < cfg.fes_u_max {
        let mut rng = child(cfg.seed, generation, Stream::Upper);
        let pop = upper.sample_within(cfg.pop_u, &bounds, &mut rng);
        let (elites, events) = schedule.run(&pop, &upper, problem, &mut counter, cfg, generation)?;
        trace.extend(events);
        generation += 1;

        // a lower response that stopped early can score below the true
        // optimum at the upper level, so the elitist is renewed every
        // generation instead of kept as a running minimum
        if elites.iter().any(|e| e.converged) {
            best = None;
        }
        if let Some(top) = elites.first() {
            generation_best.push(top.pair.upper);
            if best_ever.as_ref().is_none_or(|b| better_upper(&top.pair, b)) {
                best_ever = Some(top.pair.clone());
            }
        }
        for e in &elites {
            let slot = if e.converged { &mut best } else { &mut fallback };
            if slot.as_ref().is_none_or(|b| better_upper(&e.pair, b)) {
                *slot = Some(e.pair.clone());
            }
        }
        let ranked: Vec<Candidate> = elites
            .iter()
            .map(|e| Candidate {
                vector: e.pair.joint(),
                objective: e.pair.upper.value,
                cv: e.pair.upper.cv,
            })
            .collect();
        upper.update(&ranked)?;

        let generation_best = elites
            .iter()
            .find(|e| e.converged)
            .filter(|e| e.pair.upper.cv <= 0.0)
            .map(|e| e.pair.upper.value);
        elitist.push((counter.fes_u, generation_best));
        let current = best.as_ref().filter(|b| b.upper.cv <= 0.0).map(|b| b.upper.value);
        if let (Some(v), Some(f_star)) = (current, problem.f_star) {
            if (v - f_star).abs() < cfg.acc_stop {
                break;
            }
        }
        if upper_stagnated(&elitist, cfg) {
            break;
        }
    }

    let best = best.or(fallback);
    let acc_u = match (&best, problem.f_star) {
        (Some(b), Some(f)) => Some(accuracy(b.upper.value, f)?),
        _ => None,
    };
    let acc_l = match (&best, problem.little_f_star) {
        (Some(b), Some(f)) => Some(accuracy(b.lower.value, f)?),
        _ => None,
    };
    Ok(RunResult {
        best,
        best_ever,
        generation_best,
        acc_u,
        acc_l,
        fes_u: counter.fes_u,
        fes_l: counter.fes_l,
        trace,
        generations: generation,
    })
}

/// The per-generation elite value moved less than `tol_u` over the last
/// `fes_u_var` upper FEs, with every generation in that span feasible.
fn upper_stagnated(elitist: &[(usize, Option<f64>)], cfg: &RunConfig) -> bool {
    let Some(&(now, _)) = elitist.last() else {
        return false;
    };
    let Some(horizon) = now.checked_sub(cfg.fes_u_var) else {
        return false;
    };
    let Some(start) = elitist.iter().rposition(|(fes, _)| *fes <= horizon) else {
        return false;
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, v) in &elitist[start..] {
        let Some(v) = v else {
            return false;
        };
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    hi - lo < cfg.tol_u
}

/// Runs the competitive bilevel optimizer.
pub fn solve(problem: &BilevelProblem, cfg: &RunConfig) -> Result<RunResult> {
    solve_with(problem, cfg, &mut Competitive)
}

/// Recomputes `(fes_u, fes_l)` of a competitive run from its trace.
pub fn replay_fes(trace: &[TraceEvent], pop_u: usize, pop_l: usize, generations: usize) -> (usize, usize) {
    let improved = trace.iter().filter(|e| e.improved).count();
    (pop_u * generations + improved, pop_l * trace.len())
}
