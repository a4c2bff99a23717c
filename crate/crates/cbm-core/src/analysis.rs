//! Experiment drivers: reference solutions, trajectory interpolation, error
//! measurement, convergence regression, step-size sweeps, and
//! evaluation-count benchmarking.

use crate::error::Error;
use crate::jacobian::norm_inf;
use crate::scenarios::{apply_division, Scenario};
use crate::steppers::{
    mrfe_macro_step, run_scenario, Constraint, Method, SimState, SolverConfig, TrajectoryRecord,
};
use rayon::prelude::*;
use std::time::Instant;

/// Sweep parallelism cap from the `CBM_THREADS` environment variable;
/// 0 lets the runtime decide.
pub fn thread_cap() -> usize {
    std::env::var("CBM_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0)
}

fn run_cells<T: Send, R: Send>(
    cells: Vec<T>,
    f: impl Fn(&T) -> Result<R, Error> + Sync,
) -> Result<Vec<R>, Error>
where
    T: Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|c| f(c)).collect())
}

/// Reference trajectory: fixed-step forward Euler with a small step and
/// dense snapshots.
pub fn run_reference(
    scenario: &Scenario,
    dt_ref: f64,
    t_end: Option<f64>,
) -> Result<TrajectoryRecord, Error> {
    if dt_ref <= 0.0 {
        return Err(Error::InvalidConfig(format!("dt_ref must be positive, got {dt_ref}")));
    }
    run_scenario(scenario, Method::Fixed(dt_ref), &SolverConfig::default(), 1, t_end)
}

/// Natural cubic spline through `(t_k, y_k)`: second derivatives vanish at
/// the ends, solved by the standard tridiagonal sweep.
struct Spline {
    times: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl Spline {
    fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        let n = times.len();
        let mut second = vec![0.0; n];
        if n > 2 {
            let mut sub = vec![0.0; n];
            let mut diag = vec![1.0; n];
            let mut sup = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            for i in 1..n - 1 {
                let h0 = times[i] - times[i - 1];
                let h1 = times[i + 1] - times[i];
                sub[i] = h0 / 6.0;
                diag[i] = (h0 + h1) / 3.0;
                sup[i] = h1 / 6.0;
                rhs[i] = (values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0;
            }
            // Thomas algorithm; first and last rows pin M = 0.
            for i in 1..n {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            second[n - 1] = rhs[n - 1] / diag[n - 1];
            for i in (0..n - 1).rev() {
                second[i] = (rhs[i] - sup[i] * second[i + 1]) / diag[i];
            }
        }
        Spline { times, values, second }
    }

    /// Evaluate at `t`; the caller guarantees `t` lies inside the knot range.
    fn eval(&self, t: f64, hint: &mut usize) -> f64 {
        let n = self.times.len();
        if n == 1 {
            return self.values[0];
        }
        let mut k = (*hint).min(n - 2);
        while k > 0 && t < self.times[k] {
            k -= 1;
        }
        while k + 2 < n && t > self.times[k + 1] {
            k += 1;
        }
        *hint = k;
        let h = self.times[k + 1] - self.times[k];
        let a = (self.times[k + 1] - t) / h;
        let b = (t - self.times[k]) / h;
        a * self.values[k]
            + b * self.values[k + 1]
            + ((a * a * a - a) * self.second[k] + (b * b * b - b) * self.second[k + 1]) * h * h
                / 6.0
    }
}

/// Snapshot times and per-coordinate splines of a trajectory with constant
/// population. Duplicate snapshot times (event boundaries) keep the first
/// occurrence.
fn spline_knots(traj: &TrajectoryRecord) -> Result<(Vec<f64>, Vec<Vec<f64>>), Error> {
    let width = traj
        .snapshots
        .first()
        .map(|s| s.coords.len())
        .ok_or(Error::EmptyPopulation)?;
    let mut times = Vec::with_capacity(traj.snapshots.len());
    let mut series = vec![Vec::with_capacity(traj.snapshots.len()); width];
    for snap in &traj.snapshots {
        if snap.coords.len() != width {
            return Err(Error::PopulationMismatch { a: width, b: snap.coords.len() });
        }
        if times.last().is_some_and(|&last| snap.t <= last) {
            continue;
        }
        times.push(snap.t);
        for (k, s) in series.iter_mut().enumerate() {
            s.push(snap.coords[k]);
        }
    }
    Ok((times, series))
}

/// Interpolates the trajectory's coordinates at the query times (natural
/// cubic spline per coordinate). Query times must lie within the recorded
/// range; the result is one coordinate vector per query time.
pub fn interpolate_trajectory(
    traj: &TrajectoryRecord,
    query_times: &[f64],
) -> Result<Vec<Vec<f64>>, Error> {
    let (times, series) = spline_knots(traj)?;
    let (t0, t1) = (times[0], *times.last().unwrap());
    const SLACK: f64 = 1e-12;
    for &t in query_times {
        if t < t0 - SLACK || t > t1 + SLACK {
            return Err(Error::Extrapolation { t, t0, t1 });
        }
    }
    let splines: Vec<Spline> = series
        .into_iter()
        .map(|vals| Spline::new(times.clone(), vals))
        .collect();
    let width = splines.len();
    let mut out = vec![vec![0.0; width]; query_times.len()];
    for (k, sp) in splines.iter().enumerate() {
        let mut hint = 0usize;
        for (q, &t) in query_times.iter().enumerate() {
            out[q][k] = sp.eval(t.clamp(t0, t1), &mut hint);
        }
    }
    Ok(out)
}

/// Error of one run against a reference.
#[derive(Debug, Clone)]
pub struct ErrorEntry {
    /// `|e|_2` over the time series of `e(t) = |x(t) - x_ref(t)|_inf`,
    /// normalized by the same norm of the reference.
    pub rel_error: f64,
    /// Per-time absolute max-norm error on the reference grid.
    pub series: Vec<(f64, f64)>,
}

/// Interpolates `traj` to the reference snapshot grid and measures the
/// relative global error: max norm in space, Euclidean norm over the time
/// series.
pub fn global_error(
    traj: &TrajectoryRecord,
    reference: &TrajectoryRecord,
) -> Result<ErrorEntry, Error> {
    let a = traj.snapshots.first().map(|s| s.coords.len()).unwrap_or(0);
    let b = reference.snapshots.first().map(|s| s.coords.len()).unwrap_or(0);
    if a != b {
        return Err(Error::PopulationMismatch { a, b });
    }
    let (ref_times, _) = spline_knots(reference)?;
    let interp = interpolate_trajectory(traj, &ref_times)?;
    let mut err_sq = 0.0;
    let mut ref_sq = 0.0;
    let mut series = Vec::with_capacity(ref_times.len());
    let mut ref_iter = reference.snapshots.iter();
    for (q, &t) in ref_times.iter().enumerate() {
        let snap = loop {
            let s = ref_iter.next().expect("grid built from these snapshots");
            if s.t == t {
                break s;
            }
        };
        let e = interp[q]
            .iter()
            .zip(snap.coords.iter())
            .fold(0.0f64, |acc, (x, r)| acc.max((x - r).abs()));
        err_sq += e * e;
        ref_sq += norm_inf(&snap.coords).powi(2);
        series.push((t, e));
    }
    let rel_error = if ref_sq > 0.0 { (err_sq / ref_sq).sqrt() } else { err_sq.sqrt() };
    Ok(ErrorEntry { rel_error, series })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub method: &'static str,
    pub eps: f64,
    pub rel_error: f64,
    /// End of the accuracy-bounded interval: time of the first
    /// stability-constrained step.
    pub t_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Per-method least-squares slope of the log-log error curve.
    pub slopes: Vec<(&'static str, f64)>,
}

/// Runs each method over the accuracy sweep and regresses the relative
/// global error against the tolerance.
pub fn convergence_study(
    scenario: &Scenario,
    methods: &[Method],
    eps_list: &[f64],
    dt_ref: f64,
    t_end: Option<f64>,
) -> Result<ConvergenceReport, Error> {
    let reference = run_reference(scenario, dt_ref, t_end)?;
    let cells: Vec<(Method, f64)> = methods
        .iter()
        .flat_map(|&m| eps_list.iter().map(move |&e| (m, e)))
        .collect();
    let rows = run_cells(cells, |&(method, eps)| {
        let cfg = SolverConfig::with_epsilon(eps);
        let rec = run_scenario(scenario, method, &cfg, 1, t_end)?;
        let err = global_error(&rec, &reference)?;
        let t_acc = rec
            .steps
            .iter()
            .find(|s| s.constraint == Constraint::Stability)
            .map(|s| s.t);
        Ok(ConvergenceRow { method: method.name(), eps, rel_error: err.rel_error, t_acc })
    })?;
    let slopes = methods
        .iter()
        .map(|m| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.method == m.name())
                .map(|r| (r.eps, r.rel_error))
                .collect();
            (m.name(), log_log_slope(&pts))
        })
        .collect();
    Ok(ConvergenceReport { rows, slopes })
}

/// Fixed baseline step size for a scenario: the accuracy-bound step right
/// after the scenario's first division (the smallest step the fixed method
/// must sustain everywhere).
pub fn post_division_dt(scenario: &Scenario, cfg: &SolverConfig) -> Result<f64, Error> {
    let mut pop = scenario.initial.clone();
    let mut rng = scenario.rng;
    if let Some(first) = scenario.events.first() {
        apply_division(&mut pop, &first.event, &mut rng)?;
    }
    let mut st = SimState::new(pop, scenario.law);
    let f = st.force()?;
    let jac = st.jacobian()?;
    let af = jac.mul_vec(&f)?;
    let af_max = norm_inf(&af);
    if af_max <= 0.0 {
        return Err(Error::InvalidScenario(
            "scenario has no force transient to derive a baseline step from".into(),
        ));
    }
    Ok((2.0 * cfg.epsilon_acc / af_max).sqrt())
}

#[derive(Debug, Clone)]
pub struct CostRow {
    pub method: String,
    pub f_evals: f64,
    pub a_evals: u64,
    pub steps: usize,
    pub wall_s: f64,
    pub rel_wall: f64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub dt_fixed: f64,
    pub rows: Vec<CostRow>,
}

/// Evaluation counts and wall times for each method against the fixed-step
/// baseline. Counts come from a single run (they are deterministic); wall
/// times are averaged over `reps` runs of the same cell.
pub fn cost_benchmark(
    scenario: &Scenario,
    methods: &[Method],
    reps: usize,
    cfg: &SolverConfig,
) -> Result<CostReport, Error> {
    let reps = reps.max(1);
    let dt_fixed = post_division_dt(scenario, cfg)?;
    let mut all: Vec<Method> = vec![Method::Fixed(dt_fixed)];
    all.extend_from_slice(methods);
    let rows = run_cells(all, |&method| {
        let mut wall = 0.0;
        let mut rec = None;
        for _ in 0..reps {
            let start = Instant::now();
            let r = run_scenario(scenario, method, cfg, usize::MAX, None)?;
            wall += start.elapsed().as_secs_f64();
            rec.get_or_insert(r);
        }
        let rec = rec.expect("at least one repetition");
        Ok(CostRow {
            method: method.name().to_string(),
            f_evals: rec.counters.f_evals,
            a_evals: rec.counters.a_evals,
            steps: rec.n_steps(),
            wall_s: wall / reps as f64,
            rel_wall: 0.0,
        })
    })?;
    let mut rows = rows;
    let base = rows[0].wall_s;
    for row in rows.iter_mut() {
        row.rel_wall = if base > 0.0 { row.wall_s / base } else { f64::NAN };
    }
    Ok(CostReport { dt_fixed, rows })
}

#[derive(Debug, Clone)]
pub struct MSweepRow {
    pub m: usize,
    pub eps: f64,
    pub tau1: f64,
    pub tau0: f64,
    pub n_fast: usize,
    pub constraint: Constraint,
}

/// Initial multirate step sizes as a function of the level ratio `m`. The
/// optimal `m` for a tolerance is the smallest one whose first macro step is
/// bounded by stability.
pub fn sweep_m(
    scenario: &Scenario,
    eps_list: &[f64],
    m_list: &[usize],
) -> Result<Vec<MSweepRow>, Error> {
    let cells: Vec<(f64, usize)> = eps_list
        .iter()
        .flat_map(|&e| m_list.iter().map(move |&m| (e, m)))
        .collect();
    run_cells(cells, |&(eps, m)| {
        let cfg = SolverConfig { m, ..SolverConfig::with_epsilon(eps) };
        let mut st = SimState::new(scenario.initial.clone(), scenario.law);
        let (decision, levels) = mrfe_macro_step(&mut st, &cfg, f64::INFINITY)?;
        Ok(MSweepRow {
            m,
            eps,
            tau1: levels.tau1,
            tau0: levels.tau0,
            n_fast: levels.k_fast.len(),
            constraint: decision.constraint,
        })
    })
}

/// Smallest `m` whose initial macro step hits the stability bound.
pub fn optimal_m(rows: &[MSweepRow], eps: f64) -> Option<usize> {
    let mut ms: Vec<&MSweepRow> = rows.iter().filter(|r| r.eps == eps).collect();
    ms.sort_by_key(|r| r.m);
    ms.iter().find(|r| r.constraint == Constraint::Stability).map(|r| r.m)
}

#[derive(Debug, Clone)]
pub struct NSweepRow {
    pub n_per_dim: usize,
    pub n_cells: usize,
    pub seed: u64,
    pub method: &'static str,
    pub dt_initial: f64,
    pub n_fast: usize,
    /// Step size at the end of a full run (steady state), when requested.
    pub dt_steady: Option<f64>,
}

/// Initial (and optionally steady-state) step sizes over spheroid sizes and
/// division seeds.
pub fn sweep_n(
    n_list: &[usize],
    seeds: &[u64],
    methods: &[Method],
    cfg: &SolverConfig,
    with_steady: bool,
) -> Result<Vec<NSweepRow>, Error> {
    let cells: Vec<(usize, u64, Method)> = n_list
        .iter()
        .flat_map(|&n| {
            seeds.iter().flat_map(move |&s| methods.iter().map(move |&m| (n, s, m)))
        })
        .collect();
    run_cells(cells, |&(n, seed, method)| {
        let scenario = crate::scenarios::division_in_spheroid(n, seed);
        let mut st = SimState::new(scenario.initial.clone(), scenario.law);
        let (dt_initial, n_fast) = match method {
            Method::Mrfe => {
                let (d, levels) = mrfe_macro_step(&mut st, cfg, f64::INFINITY)?;
                (d.dt, levels.k_fast.len())
            }
            Method::Srfe => (crate::steppers::srfe_step(&mut st, cfg, f64::INFINITY)?.dt, 0),
            Method::Srfes => (crate::steppers::srfes_step(&mut st, cfg, f64::INFINITY)?.dt, 0),
            Method::Srbe => (crate::steppers::srbe_step(&mut st, cfg, f64::INFINITY)?.0.dt, 0),
            _ => {
                return Err(Error::InvalidConfig(
                    "size sweep applies to the adaptive methods".into(),
                ))
            }
        };
        let dt_steady = if with_steady {
            let rec = run_scenario(&scenario, method, cfg, usize::MAX, None)?;
            rec.steps
                .iter()
                .rev()
                .find(|s| s.constraint != Constraint::EventTruncation)
                .map(|s| s.dt)
        } else {
            None
        };
        Ok(NSweepRow {
            n_per_dim: n,
            n_cells: scenario.initial.n_free(),
            seed,
            method: method.name(),
            dt_initial,
            n_fast,
            dt_steady,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::two_cell_config;

    fn pair_separation(coords: &[f64]) -> f64 {
        let a = &coords[0..3];
        let b = &coords[3..6];
        (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn reference_run_reaches_rest_length() {
        let sc = two_cell_config([1.0, 0.0, 0.0], 0.3);
        let rec = run_reference(&sc, 5e-4, Some(3.0)).unwrap();
        let sep = pair_separation(rec.final_coords());
        assert!((sep - 1.0).abs() < 1e-4, "separation {sep}");
        // Deterministic across runs.
        let rec2 = run_reference(&sc, 5e-4, Some(3.0)).unwrap();
        assert_eq!(rec.final_coords(), rec2.final_coords());
    }

    #[test]
    fn relaxation_time_calibration() {
        // Separation reaches 99% of the rest length near t = 1.
        let sc = two_cell_config([1.0, 0.0, 0.0], 0.3);
        let rec = run_reference(&sc, 1e-4, Some(2.0)).unwrap();
        let crossing = rec
            .snapshots
            .iter()
            .find(|s| pair_separation(&s.coords) >= 0.99)
            .map(|s| s.t)
            .unwrap();
        assert!((crossing - 1.0).abs() < 0.1, "crossing at {crossing}");
    }

    #[test]
    fn spline_reproduces_snapshots_and_linears() {
        let sc = two_cell_config([1.0, 0.0, 0.0], 0.3);
        let rec = run_scenario(&sc, Method::Srfe, &SolverConfig::default(), 1, Some(2.0)).unwrap();
        let times: Vec<f64> = rec.snapshots.iter().map(|s| s.t).collect();
        let vals = interpolate_trajectory(&rec, &times).unwrap();
        for (snap, v) in rec.snapshots.iter().zip(vals.iter()) {
            for (a, b) in snap.coords.iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Linear trajectory is reproduced exactly between knots.
        let mut linear = rec.clone();
        for snap in linear.snapshots.iter_mut() {
            let t = snap.t;
            snap.coords = vec![2.0 * t + 1.0; 6];
        }
        let q = [0.111, 0.5, 1.234, 1.999];
        let vals = interpolate_trajectory(&linear, &q).unwrap();
        for (ti, v) in q.iter().zip(vals.iter()) {
            assert!((v[0] - (2.0 * ti + 1.0)).abs() < 1e-10);
        }
        // Extrapolation is rejected.
        assert!(interpolate_trajectory(&rec, &[2.5]).is_err());
    }

    #[test]
    fn spline_matches_cubic_away_from_boundary() {
        // Natural end conditions distort a cubic only near the ends; interior
        // midpoints are exact to high accuracy.
        let n = 400;
        let h = 0.01;
        let cubic = |t: f64| 2.0 * t * t * t - t * t + 0.5 * t - 3.0;
        let snapshots: Vec<crate::steppers::Snapshot> = (0..=n)
            .map(|k| crate::steppers::Snapshot {
                t: k as f64 * h,
                seq: k,
                ids: vec![0],
                coords: vec![cubic(k as f64 * h); 3],
            })
            .collect();
        let rec = TrajectoryRecord {
            t0: 0.0,
            t_end: n as f64 * h,
            dim: 3,
            steps: vec![],
            snapshots,
            events: vec![],
            counters: Default::default(),
        };
        let queries: Vec<f64> = (150..250).map(|k| (k as f64 + 0.5) * h).collect();
        let vals = interpolate_trajectory(&rec, &queries).unwrap();
        for (t, v) in queries.iter().zip(vals.iter()) {
            assert!((v[0] - cubic(*t)).abs() < 1e-10, "at {t}: {} vs {}", v[0], cubic(*t));
        }
    }

    #[test]
    fn global_error_identities() {
        let sc = two_cell_config([1.0, 0.0, 0.0], 0.3);
        let reference = run_reference(&sc, 1e-3, Some(1.0)).unwrap();
        let same = global_error(&reference, &reference).unwrap();
        assert!(same.rel_error < 1e-14);

        // Constant shift: relative error follows from norm arithmetic.
        let mut shifted = reference.clone();
        for s in shifted.snapshots.iter_mut() {
            for c in s.coords.iter_mut() {
                *c += 0.25;
            }
        }
        let err = global_error(&shifted, &reference).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        let mut last_t = f64::NEG_INFINITY;
        for s in &reference.snapshots {
            if s.t <= last_t {
                continue;
            }
            last_t = s.t;
            let shifted_inf = s.coords.iter().fold(0.0f64, |a, c| a.max((c + 0.25).abs()));
            let _ = shifted_inf;
            num += 0.25f64.powi(2);
            den += norm_inf(&s.coords).powi(2);
        }
        assert!((err.rel_error - (num / den).sqrt()).abs() < 1e-12);

        // Mismatched populations are rejected.
        let other = crate::scenarios::division_in_spheroid(2, 1);
        let small = run_scenario(&other, Method::Srfe, &SolverConfig::default(), 1, Some(0.05))
            .unwrap();
        assert!(global_error(&small, &reference).is_err());
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> =
            [0.01, 0.005, 0.0025].iter().map(|&e: &f64| (e, 3.0 * e.sqrt())).collect();
        assert!((log_log_slope(&pts) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn post_division_baseline_for_pair() {
        let sc = two_cell_config([1.0, 0.0, 0.0], 0.3);
        let dt = post_division_dt(&sc, &SolverConfig::default()).unwrap();
        assert!((dt - 0.006995239422066454).abs() < 1e-12);
    }
}
