//! Initial configurations, cell division events, and deterministic
//! randomness.

use crate::error::Error;
use crate::model::{CellPopulation, ForceLaw};
use serde::{Deserialize, Serialize};

/// Deterministic 64-bit generator (SplitMix64) so that equal seeds produce
/// identical streams on every platform.
///
/// State update: `z += 0x9E3779B97F4A7C15`; output: `z` mixed by
/// `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
/// z *= 0x94D049BB133111EB; z ^= z >> 31`. Floats take the top 53 bits,
/// `u >> 11` scaled by `2^-53`, uniform on `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform index in `0..n` by rejection of the biased remainder.
    pub fn uniform_index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }
}

/// Uniform random unit vector.
///
/// In 3D, Marsaglia rejection: draw `(u, v)` uniform on `[-1, 1]^2` until
/// `q = u^2 + v^2 < 1`, then return
/// `(2u sqrt(1-q), 2v sqrt(1-q), 1 - 2q)`. In 2D, an angle
/// `theta = 2 pi U` gives `(cos theta, sin theta)`.
pub fn random_unit_vector(rng: &mut SeededRng, dim: usize) -> [f64; 3] {
    match dim {
        2 => {
            let theta = 2.0 * std::f64::consts::PI * rng.next_f64();
            [theta.cos(), theta.sin(), 0.0]
        }
        3 => loop {
            let u = 2.0 * rng.next_f64() - 1.0;
            let v = 2.0 * rng.next_f64() - 1.0;
            let q = u * u + v * v;
            if q < 1.0 && q > 0.0 {
                let factor = 2.0 * (1.0 - q).sqrt();
                return [u * factor, v * factor, 1.0 - 2.0 * q];
            }
        },
        _ => panic!("random directions need dim 2 or 3"),
    }
}

/// Which cell divides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivisionTarget {
    Cell(u64),
    Random,
}

/// Direction along which the daughters separate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DivisionDirection {
    Random,
    Fixed([f64; 3]),
}

/// One proliferation: the mother is replaced by daughters at
/// `x ± (separation/2) n`, keeping the midpoint at the mother's position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisionEvent {
    pub target: DivisionTarget,
    pub direction: DivisionDirection,
    /// Initial distance between the daughters (default 0.3).
    pub separation: f64,
}

impl DivisionEvent {
    pub fn validate(&self, law: &ForceLaw) -> Result<(), Error> {
        if !(self.separation > 0.0 && self.separation < law.s) {
            return Err(Error::InvalidScenario(format!(
                "daughter separation must lie in (0, s), got {}",
                self.separation
            )));
        }
        if let DivisionDirection::Fixed(v) = self.direction {
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidScenario(format!(
                    "fixed division direction must be unit length, norm = {norm}"
                )));
            }
        }
        Ok(())
    }
}

/// A division event with its scheduled time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledDivision {
    pub time: f64,
    pub event: DivisionEvent,
}

/// Outcome of one division: ids of the two daughters and the direction used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivisionOutcome {
    pub mother_id: u64,
    pub daughter_ids: (u64, u64),
    pub direction: [f64; 3],
}

/// Applies a division: the target cell moves to `x + dr` and a new cell is
/// appended at `x - dr` with `|dr| = separation/2`. Consumes one direction
/// draw (and one index draw for random targets) from the stream.
pub fn apply_division(
    pop: &mut CellPopulation,
    event: &DivisionEvent,
    rng: &mut SeededRng,
) -> Result<DivisionOutcome, Error> {
    let idx = match event.target {
        DivisionTarget::Cell(id) => pop.index_of(id).ok_or(Error::NoSuchCell(id))?,
        DivisionTarget::Random => rng.uniform_index(pop.n_free()),
    };
    let dir = match event.direction {
        DivisionDirection::Fixed(v) => v,
        DivisionDirection::Random => random_unit_vector(rng, pop.dim()),
    };
    let d = pop.dim();
    let half = 0.5 * event.separation;
    let mother_id = pop.ids()[idx];
    let mut second = vec![0.0; d];
    for k in 0..d {
        let x = pop.free_coords()[d * idx + k];
        pop.free_coords_mut()[d * idx + k] = x + half * dir[k];
        second[k] = x - half * dir[k];
    }
    let new_id = pop.push_free(&second)?;
    Ok(DivisionOutcome { mother_id, daughter_ids: (mother_id, new_id), direction: dir })
}

/// Hexagonal close packed block of `n_per_dim^3` cells with nearest-neighbor
/// distance `spacing`:
/// `x = (2i + ((j+k) mod 2)) a/2`, `y = sqrt(3) (j + (k mod 2)/3) a/2`,
/// `z = (2 sqrt(6)/3) k a/2`.
pub fn hcp_spheroid(n_per_dim: usize, spacing: f64) -> CellPopulation {
    let a = spacing;
    let mut coords = Vec::with_capacity(3 * n_per_dim * n_per_dim * n_per_dim);
    for k in 0..n_per_dim {
        for j in 0..n_per_dim {
            for i in 0..n_per_dim {
                let x = (2.0 * i as f64 + ((j + k) % 2) as f64) * a / 2.0;
                let y = 3.0f64.sqrt() * (j as f64 + ((k % 2) as f64) / 3.0) * a / 2.0;
                let z = 2.0 * 6.0f64.sqrt() / 3.0 * k as f64 * a / 2.0;
                coords.extend_from_slice(&[x, y, z]);
            }
        }
    }
    CellPopulation::new(3, coords, vec![]).expect("lattice coordinates are finite")
}

/// Index of the cell nearest the centroid, ties broken by lowest index.
pub fn middle_cell(pop: &CellPopulation) -> usize {
    let g = pop.center_of_gravity().expect("non-empty population");
    let d = pop.dim();
    let mut best = (f64::INFINITY, 0);
    for i in 0..pop.n_free() {
        let x = pop.position(i);
        let mut r2 = 0.0;
        for k in 0..d {
            let diff = x[k] - g[k];
            r2 += diff * diff;
        }
        if r2 < best.0 {
            best = (r2, i);
        }
    }
    best.1
}

/// Line of `n_free` free cells at the given spacing along the x axis, with a
/// stationary cell at each end when `fixed_ends` is set. Used by the
/// eigenvalue oracle tests.
pub fn cartesian_chain(n_free: usize, spacing: f64, fixed_ends: bool) -> CellPopulation {
    let mut free = Vec::with_capacity(3 * n_free);
    for i in 0..n_free {
        free.extend_from_slice(&[(i + 1) as f64 * spacing, 0.0, 0.0]);
    }
    let stationary = if fixed_ends {
        vec![0.0, 0.0, 0.0, (n_free + 1) as f64 * spacing, 0.0, 0.0]
    } else {
        vec![]
    };
    CellPopulation::new(3, free, stationary).expect("chain coordinates are finite")
}

/// A runnable configuration: initial population, scheduled divisions, end
/// time, and the generator state to continue drawing from.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub law: ForceLaw,
    pub seed: u64,
    pub t_end: f64,
    pub initial: CellPopulation,
    pub events: Vec<ScheduledDivision>,
    /// Generator state after construction; runtime events continue here so
    /// draws are identical across methods.
    pub rng: SeededRng,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), Error> {
        let mut last = 0.0;
        for ev in &self.events {
            if !(ev.time > last && ev.time <= self.t_end) {
                return Err(Error::InvalidScenario(format!(
                    "event times must be strictly increasing within (0, T], got {}",
                    ev.time
                )));
            }
            last = ev.time;
            ev.event.validate(&self.law)?;
        }
        Ok(())
    }
}

/// Two free cells at separation `r0` about the origin, relaxing toward the
/// rest length; no events.
pub fn two_cell_config(direction: [f64; 3], r0: f64) -> Scenario {
    let law = ForceLaw::default();
    let half = 0.5 * r0;
    let free = vec![
        -half * direction[0],
        -half * direction[1],
        -half * direction[2],
        half * direction[0],
        half * direction[1],
        half * direction[2],
    ];
    Scenario {
        name: "two_cells".into(),
        law,
        seed: 0,
        t_end: 6.0,
        initial: CellPopulation::new(3, free, vec![]).expect("finite coordinates"),
        events: vec![],
        rng: SeededRng::new(0),
    }
}

/// A single division at the middle of a resting spheroid, applied before the
/// start of the simulation: the middle cell is removed and replaced by two
/// daughters along a seeded random direction.
pub fn division_in_spheroid(n_per_dim: usize, seed: u64) -> Scenario {
    let law = ForceLaw::default();
    let mut pop = hcp_spheroid(n_per_dim, law.s);
    let mut rng = SeededRng::new(seed);
    let mid = middle_cell(&pop);
    let mid_id = pop.ids()[mid];
    let event = DivisionEvent {
        target: DivisionTarget::Cell(mid_id),
        direction: DivisionDirection::Random,
        separation: 0.3,
    };
    apply_division(&mut pop, &event, &mut rng).expect("middle cell exists");
    Scenario {
        name: format!("division_in_spheroid_{n_per_dim}"),
        law,
        seed,
        t_end: 6.0,
        initial: pop,
        events: vec![],
        rng,
    }
}

/// Linearly growing tissue: a resting spheroid of `n_init_per_dim^3` cells
/// with `n_divisions` divisions of uniformly random cells at times
/// `i * dt_div`; `T = n_divisions * dt_div`.
pub fn linear_growth(n_init_per_dim: usize, n_divisions: usize, dt_div: f64, seed: u64) -> Scenario {
    let law = ForceLaw::default();
    let pop = hcp_spheroid(n_init_per_dim, law.s);
    let events = (1..=n_divisions)
        .map(|i| ScheduledDivision {
            time: i as f64 * dt_div,
            event: DivisionEvent {
                target: DivisionTarget::Random,
                direction: DivisionDirection::Random,
                separation: 0.3,
            },
        })
        .collect();
    Scenario {
        name: format!("linear_growth_{n_init_per_dim}"),
        law,
        seed,
        t_end: n_divisions as f64 * dt_div,
        initial: pop,
        events,
        rng: SeededRng::new(seed),
    }
}

/// On-disk scenario description.
///
/// ```json
/// {
///   "schema_version": 1,
///   "type": "linear_growth",
///   "n_per_dim": 7,
///   "r0": 0.3,
///   "dt_div": 1.0,
///   "n_divisions": 5,
///   "seed": 1,
///   "T": 5.0,
///   "force": { "mu": 5.7, "s": 1.0, "rA": 1.5 }
/// }
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(rename = "type")]
    pub kind: ScenarioKind,
    #[serde(default)]
    pub n_per_dim: Option<usize>,
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default)]
    pub dt_div: Option<f64>,
    #[serde(default)]
    pub n_divisions: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(rename = "T", default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub force: Option<ForceLaw>,
    /// Division axis for `two_cells`; defaults to the x axis.
    #[serde(default)]
    pub direction: Option<[f64; 3]>,
}

fn default_schema_version() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    TwoCells,
    DivisionInSpheroid,
    LinearGrowth,
}

impl ScenarioSpec {
    pub fn from_str(s: &str) -> Result<Self, Error> {
        let spec: ScenarioSpec = serde_json::from_str(s)?;
        if spec.schema_version != 1 {
            return Err(Error::InvalidScenario(format!(
                "unsupported schema_version {}",
                spec.schema_version
            )));
        }
        Ok(spec)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, Error> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical JSON used for manifest hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario spec serializes")
    }

    pub fn build(&self) -> Result<Scenario, Error> {
        let seed = self.seed.unwrap_or(0);
        let r0 = self.r0.unwrap_or(0.3);
        let mut scenario = match self.kind {
            ScenarioKind::TwoCells => {
                let dir = self.direction.unwrap_or([1.0, 0.0, 0.0]);
                let mut sc = two_cell_config(dir, r0);
                sc.seed = seed;
                sc.rng = SeededRng::new(seed);
                sc
            }
            ScenarioKind::DivisionInSpheroid => {
                let n = self.n_per_dim.unwrap_or(6);
                division_in_spheroid(n, seed)
            }
            ScenarioKind::LinearGrowth => {
                let n = self.n_per_dim.unwrap_or(13);
                let dt_div = self.dt_div.ok_or_else(|| {
                    Error::InvalidScenario("linear_growth requires dt_div".into())
                })?;
                let n_div = self.n_divisions.ok_or_else(|| {
                    Error::InvalidScenario("linear_growth requires n_divisions".into())
                })?;
                linear_growth(n, n_div, dt_div, seed)
            }
        };
        if let Some(law) = self.force {
            law.validate()?;
            scenario.law = law;
        }
        if let Some(t) = self.t_end {
            if t <= 0.0 {
                return Err(Error::InvalidScenario(format!("T must be positive, got {t}")));
            }
            scenario.t_end = t;
        }
        for ev in &mut scenario.events {
            ev.event.separation = r0;
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_neighbor_list, total_force, total_potential};

    #[test]
    fn rng_is_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(43);
        assert_ne!(SeededRng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn unit_vectors_have_unit_norm_and_small_mean() {
        let mut rng = SeededRng::new(7);
        let mut mean = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let v = random_unit_vector(&mut rng, 3);
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            for k in 0..3 {
                mean[k] += v[k];
            }
        }
        for m in mean {
            assert!((m / n as f64).abs() < 0.01);
        }
        // First draw reproducible.
        let first = random_unit_vector(&mut SeededRng::new(7), 3);
        let again = random_unit_vector(&mut SeededRng::new(7), 3);
        assert_eq!(first, again);
    }

    #[test]
    fn division_preserves_midpoint() {
        let mut pop = CellPopulation::new(3, vec![0.0, 0.0, 0.0], vec![]).unwrap();
        let mut rng = SeededRng::new(1);
        let event = DivisionEvent {
            target: DivisionTarget::Cell(0),
            direction: DivisionDirection::Fixed([1.0, 0.0, 0.0]),
            separation: 0.3,
        };
        let out = apply_division(&mut pop, &event, &mut rng).unwrap();
        assert_eq!(pop.n_free(), 2);
        assert_eq!(pop.free_coords(), &[0.15, 0.0, 0.0, -0.15, 0.0, 0.0]);
        assert_eq!(out.daughter_ids.0, 0);
        assert_eq!(out.daughter_ids.1, 1);

        // Random direction: separation still exact, midpoint preserved.
        let mut pop = CellPopulation::new(3, vec![0.3, -0.7, 1.1], vec![]).unwrap();
        let event = DivisionEvent {
            target: DivisionTarget::Cell(0),
            direction: DivisionDirection::Random,
            separation: 0.3,
        };
        apply_division(&mut pop, &event, &mut rng).unwrap();
        let a = &pop.free_coords()[0..3];
        let b = &pop.free_coords()[3..6];
        let sep: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
        assert!((sep - 0.3).abs() < 1e-12);
        for k in 0..3 {
            assert!((0.5 * (a[k] + b[k]) - [0.3, -0.7, 1.1][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn division_raises_potential_of_resting_population() {
        let law = ForceLaw::default();
        let mut pop = hcp_spheroid(3, law.s);
        let before = total_potential(&pop, &law, false).value;
        let mut rng = SeededRng::new(5);
        let event = DivisionEvent {
            target: DivisionTarget::Random,
            direction: DivisionDirection::Random,
            separation: 0.3,
        };
        apply_division(&mut pop, &event, &mut rng).unwrap();
        let after = total_potential(&pop, &law, false).value;
        assert!(after > before + 1.0, "potential jump {} -> {}", before, after);
    }

    #[test]
    fn hcp_lattice_geometry() {
        let pop = hcp_spheroid(6, 1.0);
        assert_eq!(pop.n_free(), 216);
        // Minimum pairwise distance equals the spacing.
        let mut min_r2 = f64::INFINITY;
        for i in 0..pop.n_free() {
            for j in (i + 1)..pop.n_free() {
                let (a, b) = (pop.position(i), pop.position(j));
                let r2: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum();
                min_r2 = min_r2.min(r2);
            }
        }
        assert!((min_r2.sqrt() - 1.0).abs() < 1e-12);
        // An interior cell touches twelve neighbors at distance 1.
        let mid = middle_cell(&pop);
        let x = pop.position(mid).to_vec();
        let mut at_unit = 0;
        let mut max_nn = 0;
        for i in 0..pop.n_free() {
            if i == mid {
                continue;
            }
            let y = pop.position(i);
            let r: f64 = (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>().sqrt();
            if (r - 1.0).abs() < 1e-9 {
                at_unit += 1;
            }
        }
        for i in 0..pop.n_free() {
            let xi = pop.position(i).to_vec();
            let mut count = 0;
            for j in 0..pop.n_free() {
                if i == j {
                    continue;
                }
                let y = pop.position(j);
                let r: f64 = (0..3).map(|k| (xi[k] - y[k]).powi(2)).sum::<f64>().sqrt();
                if (r - 1.0).abs() < 1e-9 {
                    count += 1;
                }
            }
            max_nn = max_nn.max(count);
        }
        assert_eq!(at_unit, 12);
        assert_eq!(max_nn, 12);
    }

    #[test]
    fn resting_lattice_interior_force_cancels() {
        // Nearest neighbors sit exactly at the rest length and exert no
        // force; the lattice also contains sqrt(2)-distance pairs inside the
        // cutoff whose pulls cancel by symmetry for interior cells.
        let law = ForceLaw::default();
        let pop = hcp_spheroid(6, law.s);
        let nl = build_neighbor_list(&pop, law.capture_radius());
        let f = total_force(&pop, &law, &nl).unwrap();
        let mid = middle_cell(&pop);
        for k in 0..3 {
            assert!(f[3 * mid + k].abs() < 1e-12, "interior force {}", f[3 * mid + k]);
        }
    }

    #[test]
    fn two_cell_scenario_shape() {
        let sc = two_cell_config([1.0, 0.0, 0.0], 0.3);
        assert_eq!(sc.initial.n_free(), 2);
        assert_eq!(sc.t_end, 6.0);
        assert!(sc.events.is_empty());
        assert_eq!(sc.initial.free_coords(), &[-0.15, 0.0, 0.0, 0.15, 0.0, 0.0]);
    }

    #[test]
    fn division_in_spheroid_counts() {
        for n in [2usize, 3, 4] {
            let sc = division_in_spheroid(n, 11);
            assert_eq!(sc.initial.n_free(), n * n * n + 1);
        }
        // Same seed, same daughters.
        let a = division_in_spheroid(3, 9);
        let b = division_in_spheroid(3, 9);
        assert_eq!(a.initial.free_coords(), b.initial.free_coords());
    }

    #[test]
    fn linear_growth_schedule() {
        let sc = linear_growth(3, 10, 1.0, 2);
        assert_eq!(sc.events.len(), 10);
        assert_eq!(sc.t_end, 10.0);
        assert!((sc.events[9].time - 10.0).abs() < 1e-15);
        sc.validate().unwrap();
    }

    #[test]
    fn scenario_spec_round_trip() {
        let json = r#"{
            "schema_version": 1,
            "type": "linear_growth",
            "n_per_dim": 3,
            "r0": 0.3,
            "dt_div": 0.5,
            "n_divisions": 4,
            "seed": 7,
            "force": { "mu": 5.7, "s": 1.0, "rA": 1.5 }
        }"#;
        let spec = ScenarioSpec::from_str(json).unwrap();
        let sc = spec.build().unwrap();
        assert_eq!(sc.initial.n_free(), 27);
        assert_eq!(sc.events.len(), 4);
        assert!((sc.t_end - 2.0).abs() < 1e-15);
        // Round trip through canonical JSON.
        let spec2 = ScenarioSpec::from_str(&spec.canonical_json()).unwrap();
        assert_eq!(spec2.canonical_json(), spec.canonical_json());
        // Bad JSON is rejected.
        assert!(ScenarioSpec::from_str("{\"type\": \"nope\"}").is_err());
    }

    #[test]
    fn chain_positions() {
        let pop = cartesian_chain(3, 1.0, true);
        assert_eq!(pop.n_free(), 3);
        assert_eq!(pop.n_stationary(), 2);
        assert_eq!(pop.position(3), &[0.0, 0.0, 0.0]);
        assert_eq!(pop.position(4), &[4.0, 0.0, 0.0]);
    }
}
