//! Adaptive time integrators for the cell ODE system and the time-loop
//! driver with event truncation.
//!
//! All methods are accept-only: the step size is computed from current-state
//! information before the update, so no step is ever rejected. The accuracy
//! candidate comes from the leading local error term
//! `e = dt^2/2 A F`, bounded by `eps` in the max norm; the stability
//! candidate for the explicit methods is `2/|lambda_min|` with the smallest
//! eigenvalue estimated by Gershgorin disks. Proposed steps are truncated so
//! the trajectory lands exactly on event times and the end time.

use crate::error::Error;
use crate::jacobian::{assemble, fd_jacobian_force_product, norm_inf, BlockJacobian};
use crate::linsolve::{newton_solve, IterationStats, NewtonConfig};
use crate::model::{
    accumulate_force, total_force, CellPopulation, ForceLaw, NeighborCache, NeighborList,
};
use crate::scenarios::{apply_division, DivisionOutcome, Scenario, ScheduledDivision, SeededRng};

/// Which bound fixed the accepted step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    Accuracy,
    Stability,
    EventTruncation,
    FixedStep,
    Displacement,
}

impl Constraint {
    pub fn as_str(&self) -> &'static str {
        match self {
            Constraint::Accuracy => "accuracy",
            Constraint::Stability => "stability",
            Constraint::EventTruncation => "event_truncation",
            Constraint::FixedStep => "fixed_step",
            Constraint::Displacement => "displacement",
        }
    }
}

/// Accepted step size together with the candidates it was chosen from.
#[derive(Debug, Clone, Copy)]
pub struct StepDecision {
    pub dt: f64,
    pub constraint: Constraint,
    /// Accuracy-bound candidate (after the zero-field cap).
    pub dt_accuracy: f64,
    /// Stability-bound candidate, when the method computes one.
    pub dt_stability: Option<f64>,
}

/// Two-level split used by one multirate macro step.
#[derive(Debug, Clone)]
pub struct MultirateLevels {
    pub m: usize,
    pub tau0: f64,
    pub tau1: f64,
    /// Free-equation indices advanced with the small step. Whole cells are
    /// promoted: every coordinate of a cell owning a fast equation is fast.
    pub k_fast: Vec<u32>,
    /// Classification threshold `2 eps / tau1^2` on the `|A F|` entries.
    pub chi1: f64,
}

/// Solver parameters. Defaults follow the standard parameter set: accuracy
/// 0.005, finite-difference parameter 1e-4, level ratio 14, five Newton and
/// ten GMRES iterations with thresholds `0.001 eps`.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Absolute accuracy `eps` for the local error bound.
    pub epsilon_acc: f64,
    /// Step parameter for the finite-difference Jacobian-force product.
    pub fd_eps: f64,
    /// Ratio between multirate levels.
    pub m: usize,
    pub n_newton: usize,
    /// Newton threshold; `None` means `0.001 * epsilon_acc`.
    pub eps_newton: Option<f64>,
    pub n_gmres: usize,
    /// GMRES relative threshold; `None` means `0.001 * epsilon_acc`.
    pub eps_gmres: Option<f64>,
    /// GMRES absolute threshold; `None` means `0.001 * epsilon_acc`.
    pub eps_gmres_abs: Option<f64>,
    /// Step ceiling applied when a bound is infinite (vanished force field).
    pub dt_max_cap: Option<f64>,
    /// Start Newton from the forward Euler predictor instead of the current
    /// state.
    pub newton_fe_predictor: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon_acc: 0.005,
            fd_eps: 1e-4,
            m: 14,
            n_newton: 5,
            eps_newton: None,
            n_gmres: 10,
            eps_gmres: None,
            eps_gmres_abs: None,
            dt_max_cap: Some(10.0),
            newton_fe_predictor: false,
        }
    }
}

impl SolverConfig {
    pub fn with_epsilon(epsilon_acc: f64) -> Self {
        SolverConfig { epsilon_acc, ..Default::default() }
    }

    pub fn eps_newton(&self) -> f64 {
        self.eps_newton.unwrap_or(1e-3 * self.epsilon_acc)
    }

    pub fn eps_gmres(&self) -> f64 {
        self.eps_gmres.unwrap_or(1e-3 * self.epsilon_acc)
    }

    pub fn eps_gmres_abs(&self) -> f64 {
        self.eps_gmres_abs.unwrap_or(1e-3 * self.epsilon_acc)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.epsilon_acc > 0.0 && self.fd_eps > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.m < 1 {
            return Err(Error::InvalidConfig("level ratio m must be >= 1".into()));
        }
        if self.n_newton < 1 || self.n_gmres < 1 {
            return Err(Error::InvalidConfig("iteration caps must be >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn newton_config(&self) -> NewtonConfig {
        NewtonConfig {
            n_newton: self.n_newton,
            eps_newton: self.eps_newton(),
            n_gmres: self.n_gmres,
            eps_gmres_rel: self.eps_gmres(),
            eps_gmres_abs: self.eps_gmres_abs(),
        }
    }
}

/// Evaluation counters. Partial force updates count fractionally as the
/// number of affected equations over the total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalCounters {
    pub f_evals: f64,
    pub a_evals: u64,
}

/// Mutable simulation state: population, force law, cached neighbor list,
/// and evaluation counters.
#[derive(Debug, Clone)]
pub struct SimState {
    pub pop: CellPopulation,
    pub law: ForceLaw,
    nl: NeighborCache,
    pub counters: EvalCounters,
}

impl SimState {
    pub fn new(pop: CellPopulation, law: ForceLaw) -> Self {
        let nl = NeighborCache::new(&pop, &law);
        SimState { pop, law, nl, counters: EvalCounters::default() }
    }

    /// Current neighbor list, rebuilt if any cell drifted too far.
    pub fn neighbor_list(&mut self) -> &NeighborList {
        self.nl.ensure_fresh(&self.pop)
    }

    /// Full force evaluation (counts one).
    pub fn force(&mut self) -> Result<Vec<f64>, Error> {
        let list = self.nl.ensure_fresh(&self.pop);
        let f = total_force(&self.pop, &self.law, list)?;
        self.counters.f_evals += 1.0;
        Ok(f)
    }

    /// Jacobian assembly at the current positions (counts one).
    pub fn jacobian(&mut self) -> Result<BlockJacobian, Error> {
        let list = self.nl.ensure_fresh(&self.pop);
        let jac = assemble(&self.pop, &self.law, list)?;
        self.counters.a_evals += 1;
        Ok(jac)
    }

    /// Sets the coordinates and evaluates force and Jacobian there, counting
    /// one of each. Used by the Newton refresh.
    fn force_and_jacobian_at(&mut self, x: &[f64]) -> Result<(Vec<f64>, BlockJacobian), Error> {
        self.pop.set_free_coords(x);
        let list = self.nl.ensure_fresh(&self.pop);
        let f = total_force(&self.pop, &self.law, list)?;
        let jac = assemble(&self.pop, &self.law, list)?;
        self.counters.f_evals += 1.0;
        self.counters.a_evals += 1;
        Ok((f, jac))
    }

    /// Recomputes force rows of the cells flagged in `mask`, leaving other
    /// rows untouched; counts `|mask| / n_free`.
    fn refresh_force_rows(&mut self, f: &mut [f64], mask: &[bool]) -> Result<(), Error> {
        let d = self.pop.dim();
        let mut active_cells = 0usize;
        for (i, flag) in mask.iter().enumerate() {
            if *flag {
                active_cells += 1;
                for k in 0..d {
                    f[d * i + k] = 0.0;
                }
            }
        }
        if active_cells == 0 {
            return Ok(());
        }
        let list = self.nl.ensure_fresh(&self.pop);
        accumulate_force(&self.pop, &self.law, list, |i| mask[i], f)?;
        self.counters.f_evals += active_cells as f64 / self.pop.n_free() as f64;
        Ok(())
    }

    /// Invalidates and rebuilds the neighbor list (after division events).
    pub fn invalidate_neighbors(&mut self) {
        self.nl.rebuild(&self.pop);
    }
}

struct ChosenDt {
    dt: f64,
    constraint: Constraint,
    dt_accuracy: f64,
    dt_stability: Option<f64>,
    /// The step hits the event/end-time budget exactly.
    landed: bool,
}

/// Applies the zero-field cap to an infinite accuracy candidate, takes the
/// minimum with the stability candidate, and truncates at the budget.
fn choose_dt(acc: f64, stab: Option<f64>, cap: Option<f64>, budget: f64) -> ChosenDt {
    let acc_eff = if acc.is_finite() { acc } else { cap.unwrap_or(f64::INFINITY) };
    let mut dt = acc_eff;
    let mut constraint = Constraint::Accuracy;
    if let Some(s) = stab {
        if s < dt {
            dt = s;
            constraint = Constraint::Stability;
        }
    }
    let landed = budget <= dt;
    if landed {
        if budget < dt {
            constraint = Constraint::EventTruncation;
        }
        dt = budget;
    }
    ChosenDt { dt, constraint, dt_accuracy: acc_eff, dt_stability: stab, landed }
}

fn accuracy_candidate(eps: f64, m: usize, af_max: f64) -> f64 {
    if af_max > 0.0 {
        (2.0 * eps * m as f64 / af_max).sqrt()
    } else {
        f64::INFINITY
    }
}

fn stability_candidate(lambda_min_est: f64) -> Option<f64> {
    if lambda_min_est < 0.0 {
        Some(2.0 / lambda_min_est.abs())
    } else {
        None
    }
}

#[inline]
fn euler_update(x: &mut [f64], f: &[f64], dt: f64) {
    for (xk, fk) in x.iter_mut().zip(f.iter()) {
        *xk += dt * fk;
    }
}

/// One adaptive forward Euler step with the accuracy bound only; the
/// Jacobian-force product is approximated by one extra force evaluation.
pub fn srfe_step(st: &mut SimState, cfg: &SolverConfig, budget: f64) -> Result<StepDecision, Error> {
    let f_hat = st.force()?;
    let x0 = st.pop.free_coords().to_vec();
    let af = fd_jacobian_force_product(
        |y| {
            st.pop.set_free_coords(y);
            st.force()
        },
        &x0,
        &f_hat,
        cfg.fd_eps,
    )?;
    st.pop.set_free_coords(&x0);
    let acc = accuracy_candidate(cfg.epsilon_acc, 1, norm_inf(&af));
    let chosen = choose_dt(acc, None, cfg.dt_max_cap, budget);
    euler_update(st.pop.free_coords_mut(), &f_hat, chosen.dt);
    Ok(StepDecision {
        dt: chosen.dt,
        constraint: chosen.constraint,
        dt_accuracy: chosen.dt_accuracy,
        dt_stability: None,
    })
}

/// One adaptive forward Euler step bounded by both the accuracy estimate
/// (exact Jacobian-force product) and the Gershgorin stability bound.
pub fn srfes_step(
    st: &mut SimState,
    cfg: &SolverConfig,
    budget: f64,
) -> Result<StepDecision, Error> {
    let f_hat = st.force()?;
    let jac = st.jacobian()?;
    let af = jac.mul_vec(&f_hat)?;
    let acc = accuracy_candidate(cfg.epsilon_acc, 1, norm_inf(&af));
    let stab = stability_candidate(jac.gershgorin_min());
    let chosen = choose_dt(acc, stab, cfg.dt_max_cap, budget);
    euler_update(st.pop.free_coords_mut(), &f_hat, chosen.dt);
    Ok(StepDecision {
        dt: chosen.dt,
        constraint: chosen.constraint,
        dt_accuracy: chosen.dt_accuracy,
        dt_stability: chosen.dt_stability,
    })
}

/// One multirate macro step: equations with `|A F| > chi1` (promoted to
/// whole cells) advance with `m` substeps of `tau1/m` while the rest take a
/// single step `tau1`. Slow positions are held frozen during substeps; after
/// them, force entries of slow cells within the interaction distance of a
/// fast cell's old or new position are recomputed before the slow update.
///
/// With an empty fast set the step degenerates to a single rate step of
/// `tau1` (for `m = 1` this reproduces the stability-checked single rate
/// method exactly); with an empty slow set all cells advance by one `tau0`.
pub fn mrfe_macro_step(
    st: &mut SimState,
    cfg: &SolverConfig,
    budget: f64,
) -> Result<(StepDecision, MultirateLevels), Error> {
    let m = cfg.m.max(1);
    let mut f_hat = st.force()?;
    let jac = st.jacobian()?;
    let eta = jac.mul_vec(&f_hat)?;
    let acc = accuracy_candidate(cfg.epsilon_acc, m, norm_inf(&eta));
    let stab = stability_candidate(jac.gershgorin_min());
    let chosen = choose_dt(acc, stab, cfg.dt_max_cap, budget);
    let tau1 = chosen.dt;
    let tau0 = tau1 / m as f64;
    let chi1 = 2.0 * cfg.epsilon_acc / (tau1 * tau1);

    let d = st.pop.dim();
    let n = st.pop.n_free();
    let mut fast_cell = vec![false; n];
    for (k, eta_k) in eta.iter().enumerate() {
        if eta_k.abs() > chi1 {
            fast_cell[k / d] = true;
        }
    }
    let k_fast: Vec<u32> =
        (0..d * n).filter(|k| fast_cell[k / d]).map(|k| k as u32).collect();
    let n_fast_cells = fast_cell.iter().filter(|&&b| b).count();

    let levels = MultirateLevels { m, tau0, tau1, k_fast, chi1 };
    let decision = |dt: f64| StepDecision {
        dt,
        constraint: chosen.constraint,
        dt_accuracy: chosen.dt_accuracy,
        dt_stability: chosen.dt_stability,
    };

    if n_fast_cells == 0 {
        // Single level: one step with tau1.
        euler_update(st.pop.free_coords_mut(), &f_hat, tau1);
        return Ok((decision(tau1), levels));
    }
    if n_fast_cells == n {
        // Everything is fast: single rate step with tau0.
        euler_update(st.pop.free_coords_mut(), &f_hat, tau0);
        return Ok((decision(tau0), levels));
    }

    // In-range slow partners of fast cells at the old positions.
    let mut affected = vec![false; n];
    let r_a = st.law.r_a;
    let pairs_before = st.neighbor_list().pairs.clone();
    collect_partners(&st.pop, &pairs_before, &fast_cell, r_a, &mut affected);

    // Fast substeps with frozen slow coordinates; re-evaluate the fast force
    // rows between substeps.
    for sub in 0..m {
        {
            let coords = st.pop.free_coords_mut();
            for i in 0..n {
                if fast_cell[i] {
                    for k in 0..d {
                        coords[d * i + k] += tau0 * f_hat[d * i + k];
                    }
                }
            }
        }
        if sub + 1 < m {
            st.refresh_force_rows(&mut f_hat, &fast_cell)?;
        }
    }

    // In-range slow partners at the new positions, then the partial update
    // of the slow force entries.
    let pairs_after = st.neighbor_list().pairs.clone();
    collect_partners(&st.pop, &pairs_after, &fast_cell, r_a, &mut affected);
    st.refresh_force_rows(&mut f_hat, &affected)?;
    {
        let coords = st.pop.free_coords_mut();
        for i in 0..n {
            if !fast_cell[i] {
                for k in 0..d {
                    coords[d * i + k] += tau1 * f_hat[d * i + k];
                }
            }
        }
    }
    Ok((decision(tau1), levels))
}

/// Marks free slow cells within `r_a` of any fast cell.
fn collect_partners(
    pop: &CellPopulation,
    pairs: &[(u32, u32)],
    fast_cell: &[bool],
    r_a: f64,
    affected: &mut [bool],
) {
    let n = pop.n_free();
    let d = pop.dim();
    let r2 = r_a * r_a;
    for &(i, j) in pairs {
        let (i, j) = (i as usize, j as usize);
        if i >= n || j >= n {
            continue;
        }
        let (slow, fast) = match (fast_cell[i], fast_cell[j]) {
            (true, false) => (j, i),
            (false, true) => (i, j),
            _ => continue,
        };
        let (a, b) = (pop.position(slow), pop.position(fast));
        let mut dist2 = 0.0;
        for k in 0..d {
            let diff = a[k] - b[k];
            dist2 += diff * diff;
        }
        if dist2 < r2 {
            affected[slow] = true;
        }
    }
}

/// One adaptive backward Euler step: the accuracy-bound step size is applied
/// to the implicit update solved by Newton iterations with GMRES on
/// `I - dt A`.
pub fn srbe_step(
    st: &mut SimState,
    cfg: &SolverConfig,
    budget: f64,
) -> Result<(StepDecision, IterationStats), Error> {
    let f_hat = st.force()?;
    let jac = st.jacobian()?;
    let af = jac.mul_vec(&f_hat)?;
    let acc = accuracy_candidate(cfg.epsilon_acc, 1, norm_inf(&af));
    let chosen = choose_dt(acc, None, cfg.dt_max_cap, budget);
    let x_prev = st.pop.free_coords().to_vec();
    let x_init = if cfg.newton_fe_predictor {
        x_prev.iter().zip(f_hat.iter()).map(|(x, f)| x + chosen.dt * f).collect()
    } else {
        x_prev.clone()
    };
    let (x_next, stats) = newton_solve(
        &x_prev,
        chosen.dt,
        x_init,
        f_hat,
        jac,
        |y| st.force_and_jacobian_at(y),
        &cfg.newton_config(),
    )?;
    st.pop.set_free_coords(&x_next);
    Ok((
        StepDecision {
            dt: chosen.dt,
            constraint: chosen.constraint,
            dt_accuracy: chosen.dt_accuracy,
            dt_stability: None,
        },
        stats,
    ))
}

/// One forward Euler step with a prescribed step size (baseline method).
pub fn fixed_step(st: &mut SimState, dt: f64, budget: f64) -> Result<StepDecision, Error> {
    let f_hat = st.force()?;
    let chosen = choose_dt(dt, None, None, budget);
    let constraint = if chosen.landed && chosen.dt < dt {
        Constraint::EventTruncation
    } else {
        Constraint::FixedStep
    };
    euler_update(st.pop.free_coords_mut(), &f_hat, chosen.dt);
    Ok(StepDecision { dt: chosen.dt, constraint, dt_accuracy: dt, dt_stability: None })
}

/// Displacement-bound step size `eps / |F|_inf` (comparison controller).
pub fn displacement_bound_dt(f: &[f64], eps: f64) -> f64 {
    let n = norm_inf(f);
    if n > 0.0 {
        eps / n
    } else {
        f64::INFINITY
    }
}

/// One forward Euler step limited by the per-step displacement instead of
/// the local error estimate.
pub fn displacement_step(
    st: &mut SimState,
    cfg: &SolverConfig,
    budget: f64,
) -> Result<StepDecision, Error> {
    let f_hat = st.force()?;
    let disp = displacement_bound_dt(&f_hat, cfg.epsilon_acc);
    let chosen = choose_dt(disp, None, cfg.dt_max_cap, budget);
    let constraint = match chosen.constraint {
        Constraint::Accuracy => Constraint::Displacement,
        other => other,
    };
    euler_update(st.pop.free_coords_mut(), &f_hat, chosen.dt);
    Ok(StepDecision {
        dt: chosen.dt,
        constraint,
        dt_accuracy: chosen.dt_accuracy,
        dt_stability: None,
    })
}

/// Integration method selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Srfe,
    Srfes,
    Mrfe,
    Srbe,
    /// Forward Euler with the given fixed step size.
    Fixed(f64),
    Displacement,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Srfe => "srfe",
            Method::Srfes => "srfes",
            Method::Mrfe => "mrfe",
            Method::Srbe => "srbe",
            Method::Fixed(_) => "fixed",
            Method::Displacement => "displacement",
        }
    }
}

/// One accepted step in a trajectory.
#[derive(Debug, Clone)]
pub struct StepRow {
    /// Time reached by this step.
    pub t: f64,
    pub dt: f64,
    pub constraint: Constraint,
    /// Fast equations in a multirate macro step, zero otherwise.
    pub n_fast: usize,
    /// Cumulative counters after the step.
    pub f_evals: f64,
    pub a_evals: u64,
    /// Newton iterations (backward Euler only).
    pub newton_iters: usize,
    pub newton_converged: bool,
}

/// Stored positions at one instant. Pre- and post-division snapshots share a
/// time; `seq` disambiguates.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub seq: usize,
    pub ids: Vec<u64>,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EventRow {
    pub t: f64,
    pub outcome: DivisionOutcome,
}

/// Time series of an integration run: accepted steps, snapshots at a
/// configurable stride, division events, and evaluation counters.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub t0: f64,
    pub t_end: f64,
    pub dim: usize,
    pub steps: Vec<StepRow>,
    pub snapshots: Vec<Snapshot>,
    pub events: Vec<EventRow>,
    pub counters: EvalCounters,
}

impl TrajectoryRecord {
    pub fn final_coords(&self) -> &[f64] {
        &self.snapshots.last().expect("at least the initial snapshot").coords
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Steps inside a half-open time window `(t_from, t_to]`.
    pub fn steps_in(&self, t_from: f64, t_to: f64) -> impl Iterator<Item = &StepRow> {
        self.steps.iter().filter(move |s| s.t > t_from && s.t <= t_to)
    }
}

/// Smallest accepted step before the run aborts with a diagnostic.
const DT_UNDERFLOW: f64 = 1e-12;

/// Runs the chosen method over `[t0, t_end]`, truncating steps to land
/// exactly on event times and on the end time, and applying division events
/// as they are reached.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    st: &mut SimState,
    cfg: &SolverConfig,
    method: Method,
    t0: f64,
    t_end: f64,
    events: &[ScheduledDivision],
    rng: &mut SeededRng,
    snapshot_stride: usize,
) -> Result<TrajectoryRecord, Error> {
    cfg.validate()?;
    let stride = snapshot_stride.max(1);
    let mut rec = TrajectoryRecord {
        t0,
        t_end,
        dim: st.pop.dim(),
        steps: Vec::new(),
        snapshots: Vec::new(),
        events: Vec::new(),
        counters: EvalCounters::default(),
    };
    let mut seq = 0usize;
    push_snapshot(&mut rec, &mut seq, t0, &st.pop);

    let mut t = t0;
    let mut next_event = 0usize;
    let mut steps_since_snapshot = 0usize;

    while t < t_end {
        let target = events
            .get(next_event)
            .map(|ev| ev.time.min(t_end))
            .unwrap_or(t_end);
        let budget = target - t;

        let (decision, n_fast, newton) = match method {
            Method::Srfe => (srfe_step(st, cfg, budget)?, 0, None),
            Method::Srfes => (srfes_step(st, cfg, budget)?, 0, None),
            Method::Mrfe => {
                let (d, levels) = mrfe_macro_step(st, cfg, budget)?;
                (d, levels.k_fast.len(), None)
            }
            Method::Srbe => {
                let (d, stats) = srbe_step(st, cfg, budget)?;
                (d, 0, Some(stats))
            }
            Method::Fixed(dt) => (fixed_step(st, dt, budget)?, 0, None),
            Method::Displacement => (displacement_step(st, cfg, budget)?, 0, None),
        };
        // Truncation slivers from accumulated rounding may be arbitrarily
        // short; only an adaptive step collapsing below the budget aborts.
        if decision.dt < DT_UNDERFLOW && decision.dt < budget {
            return Err(Error::StepUnderflow { t, dt: decision.dt });
        }
        // Land exactly on the event/end time when the budget was consumed.
        t = if decision.dt >= budget { target } else { t + decision.dt };
        if st.pop.free_coords().iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
        rec.steps.push(StepRow {
            t,
            dt: decision.dt,
            constraint: decision.constraint,
            n_fast,
            f_evals: st.counters.f_evals,
            a_evals: st.counters.a_evals,
            newton_iters: newton.as_ref().map_or(0, |s| s.newton_iters),
            newton_converged: newton.as_ref().map_or(true, |s| s.converged),
        });
        steps_since_snapshot += 1;

        let at_event = next_event < events.len() && t == events[next_event].time;
        if steps_since_snapshot >= stride || at_event || t >= t_end {
            push_snapshot(&mut rec, &mut seq, t, &st.pop);
            steps_since_snapshot = 0;
        }
        if at_event {
            let ev = &events[next_event];
            let outcome = apply_division(&mut st.pop, &ev.event, rng)?;
            st.invalidate_neighbors();
            rec.events.push(EventRow { t, outcome });
            push_snapshot(&mut rec, &mut seq, t, &st.pop);
            next_event += 1;
        }
    }
    rec.counters = st.counters;
    Ok(rec)
}

fn push_snapshot(rec: &mut TrajectoryRecord, seq: &mut usize, t: f64, pop: &CellPopulation) {
    rec.snapshots.push(Snapshot {
        t,
        seq: *seq,
        ids: pop.ids().to_vec(),
        coords: pop.free_coords().to_vec(),
    });
    *seq += 1;
}

/// Builds the simulation state for a scenario and integrates it.
pub fn run_scenario(
    scenario: &Scenario,
    method: Method,
    cfg: &SolverConfig,
    snapshot_stride: usize,
    t_end_override: Option<f64>,
) -> Result<TrajectoryRecord, Error> {
    let t_end = t_end_override.unwrap_or(scenario.t_end);
    let mut st = SimState::new(scenario.initial.clone(), scenario.law);
    let mut rng = scenario.rng;
    let events: Vec<ScheduledDivision> =
        scenario.events.iter().copied().filter(|ev| ev.time <= t_end).collect();
    integrate(&mut st, cfg, method, 0.0, t_end, &events, &mut rng, snapshot_stride)
}
