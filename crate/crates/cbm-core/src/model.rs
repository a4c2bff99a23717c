//! Cell population state, the pairwise force law, and assembly of the
//! right-hand side of the gradient ODE system.
//!
//! Each free cell center `x_i` obeys `dx_i/dt = sum_j rhat_ij g(r_ij)` where
//! the sum runs over free and stationary neighbors within the interaction
//! distance. The force strength `g` is the cubic law
//! `g(r) = mu (r - r_A)^2 (r - s)` for `0 <= r <= r_A` and zero beyond the
//! cutoff: repulsive below the rest length `s`, attractive between `s` and
//! `r_A`.

use crate::error::Error;
use serde::{Deserialize, Serialize};

/// Pairwise force law parameters (cubic force family).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceLaw {
    /// Spring stiffness `mu`.
    pub mu: f64,
    /// Rest length `s` in cell diameters; the force vanishes at `r = s`.
    pub s: f64,
    /// Maximum interaction distance `r_A`; the force vanishes for `r >= r_A`.
    #[serde(rename = "rA")]
    pub r_a: f64,
}

impl Default for ForceLaw {
    fn default() -> Self {
        ForceLaw { mu: 5.7, s: 1.0, r_a: 1.5 }
    }
}

impl ForceLaw {
    pub fn new(mu: f64, s: f64, r_a: f64) -> Result<Self, Error> {
        let law = ForceLaw { mu, s, r_a };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::InvalidForceLaw(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.s.is_finite() && self.r_a.is_finite() && 0.0 < self.s && self.s < self.r_a) {
            return Err(Error::InvalidForceLaw(format!(
                "need 0 < s < r_A, got s = {}, r_A = {}",
                self.s, self.r_a
            )));
        }
        Ok(())
    }

    fn check_distance(r: f64) -> Result<(), Error> {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::InvalidDistance(r));
        }
        Ok(())
    }

    /// Force strength `g(r)`; negative (repulsive) below `s`, positive
    /// (attractive) on `(s, r_A)`, zero from `r_A` on.
    pub fn strength(&self, r: f64) -> Result<f64, Error> {
        Self::check_distance(r)?;
        Ok(self.strength_raw(r))
    }

    #[inline]
    pub(crate) fn strength_raw(&self, r: f64) -> f64 {
        if r >= self.r_a {
            0.0
        } else {
            let d = r - self.r_a;
            self.mu * d * d * (r - self.s)
        }
    }

    /// Derivative `g'(r)`, taken as 0 for `r >= r_A` (cutoff convention; the
    /// cubic law has `g'(r_A-) = 0` so the derivative is continuous there).
    pub fn strength_derivative(&self, r: f64) -> Result<f64, Error> {
        Self::check_distance(r)?;
        Ok(self.strength_derivative_raw(r))
    }

    #[inline]
    pub(crate) fn strength_derivative_raw(&self, r: f64) -> f64 {
        if r >= self.r_a {
            0.0
        } else {
            self.mu * (r - self.r_a) * (3.0 * r - 2.0 * self.s - self.r_a)
        }
    }

    /// Antiderivative of `g` (closed form for the cubic law), used by
    /// [`ForceLaw::pair_potential`].
    fn strength_primitive(&self, r: f64) -> f64 {
        let u = r - self.r_a;
        self.mu * (u * u * u * u / 4.0 + (self.r_a - self.s) * u * u * u / 3.0)
    }

    /// Pair potential `G(r)` with `G(s) = 0`, `G'(r) = g(r)` on `(0, r_A)`,
    /// and the constant plateau value for `r >= r_A`.
    pub fn pair_potential(&self, r: f64) -> Result<f64, Error> {
        Self::check_distance(r)?;
        Ok(self.pair_potential_raw(r))
    }

    #[inline]
    pub(crate) fn pair_potential_raw(&self, r: f64) -> f64 {
        let r = r.min(self.r_a);
        self.strength_primitive(r) - self.strength_primitive(self.s)
    }

    /// Plateau value `G(r)` for `r >= r_A`.
    pub fn potential_plateau(&self) -> f64 {
        self.pair_potential_raw(self.r_a)
    }

    /// Capture radius used when building neighbor lists: pairs out to
    /// `r_A + (r_A - s)` are kept so the list stays complete for the cutoff
    /// `r_A` until a rebuild triggers (see [`NeighborCache`]).
    pub fn capture_radius(&self) -> f64 {
        2.0 * self.r_a - self.s
    }

    /// Maximum displacement of any cell before the neighbor list is rebuilt.
    pub fn rebuild_threshold(&self) -> f64 {
        0.5 * (self.r_a - self.s)
    }
}

/// Relative geometry of an ordered cell pair `(i, j)`.
#[derive(Debug, Clone, Copy)]
pub struct PairGeometry {
    /// Relative position `r_ij = x_j - x_i` (first `dim` entries used).
    pub r_vec: [f64; 3],
    /// Euclidean distance `|r_ij|`.
    pub r: f64,
}

impl PairGeometry {
    pub fn new(xi: &[f64], xj: &[f64]) -> Self {
        let mut r_vec = [0.0; 3];
        let mut r2 = 0.0;
        for (k, slot) in r_vec.iter_mut().enumerate().take(xi.len()) {
            let d = xj[k] - xi[k];
            *slot = d;
            r2 += d * d;
        }
        PairGeometry { r_vec, r: r2.sqrt() }
    }

    /// Unit direction from `i` to `j`; `None` for coincident centers.
    pub fn unit(&self) -> Option<[f64; 3]> {
        if self.r > 0.0 {
            let inv = 1.0 / self.r;
            Some([self.r_vec[0] * inv, self.r_vec[1] * inv, self.r_vec[2] * inv])
        } else {
            None
        }
    }
}

/// Positions of free and stationary cell centers.
///
/// Coordinates are stored flat: cell `i` occupies `free[dim*i .. dim*(i+1)]`.
/// Stationary cells contribute forces but never move; in pair indices they
/// follow the free cells (`n_free()..n_total()`).
#[derive(Debug, Clone)]
pub struct CellPopulation {
    dim: usize,
    free: Vec<f64>,
    ids: Vec<u64>,
    stationary: Vec<f64>,
    next_cell_id: u64,
}

impl CellPopulation {
    pub fn new(dim: usize, free: Vec<f64>, stationary: Vec<f64>) -> Result<Self, Error> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidPopulation(format!("dim must be 1, 2, or 3, got {dim}")));
        }
        if free.len() % dim != 0 || stationary.len() % dim != 0 {
            return Err(Error::InvalidPopulation(
                "coordinate vector length not divisible by dim".into(),
            ));
        }
        if free.iter().chain(stationary.iter()).any(|c| !c.is_finite()) {
            return Err(Error::InvalidPopulation("non-finite coordinate".into()));
        }
        let n = free.len() / dim;
        Ok(CellPopulation {
            dim,
            free,
            ids: (0..n as u64).collect(),
            stationary,
            next_cell_id: n as u64,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_free(&self) -> usize {
        self.free.len() / self.dim
    }

    pub fn n_stationary(&self) -> usize {
        self.stationary.len() / self.dim
    }

    pub fn n_total(&self) -> usize {
        self.n_free() + self.n_stationary()
    }

    /// Number of free equations (`dim * n_free`).
    pub fn n_equations(&self) -> usize {
        self.free.len()
    }

    pub fn free_coords(&self) -> &[f64] {
        &self.free
    }

    pub fn free_coords_mut(&mut self) -> &mut [f64] {
        &mut self.free
    }

    pub fn set_free_coords(&mut self, coords: &[f64]) {
        self.free.copy_from_slice(coords);
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Position of cell `idx` in the combined free/stationary indexing.
    pub fn position(&self, idx: usize) -> &[f64] {
        let n = self.n_free();
        if idx < n {
            &self.free[self.dim * idx..self.dim * (idx + 1)]
        } else {
            let k = idx - n;
            &self.stationary[self.dim * k..self.dim * (k + 1)]
        }
    }

    /// Index of the free cell with the given id.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub(crate) fn fresh_id(&mut self) -> u64 {
        let id = self.next_cell_id;
        self.next_cell_id += 1;
        id
    }

    /// Appends a free cell and returns its id.
    pub fn push_free(&mut self, point: &[f64]) -> Result<u64, Error> {
        if point.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: point.len() });
        }
        if point.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidPopulation("non-finite coordinate".into()));
        }
        self.free.extend_from_slice(point);
        let id = self.fresh_id();
        self.ids.push(id);
        Ok(id)
    }

    /// Removes free cell `idx`, preserving the order of the remaining cells.
    pub fn remove_free(&mut self, idx: usize) {
        let d = self.dim;
        self.free.drain(d * idx..d * (idx + 1));
        self.ids.remove(idx);
    }

    /// Arithmetic mean of the free cell positions.
    pub fn center_of_gravity(&self) -> Result<Vec<f64>, Error> {
        let n = self.n_free();
        if n == 0 {
            return Err(Error::EmptyPopulation);
        }
        let mut g = vec![0.0; self.dim];
        for i in 0..n {
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += self.free[self.dim * i + k];
            }
        }
        for gk in g.iter_mut() {
            *gk /= n as f64;
        }
        Ok(g)
    }
}

/// Index pairs of potentially interacting cells.
///
/// Pairs are sorted ascending by `(i, j)` with `i < j` over the combined
/// free/stationary indexing. The list is complete for the cutoff it was
/// built with; it may contain extra pairs beyond the interaction distance,
/// which contribute zero force.
#[derive(Debug, Clone)]
pub struct NeighborList {
    pub pairs: Vec<(u32, u32)>,
    /// Build counter, used to detect stale lists.
    pub stamp: u64,
}

/// Number of cells above which the spatially binned builder is used.
const BINNED_THRESHOLD: usize = 64;

/// Builds the complete pair list for all cells closer than `cutoff`.
///
/// Uses uniform spatial binning with bin edge `cutoff` for populations above
/// a size threshold and an all-pairs scan below it; both paths produce
/// identical, sorted pair sets.
pub fn build_neighbor_list(pop: &CellPopulation, cutoff: f64) -> NeighborList {
    let n = pop.n_total();
    let pairs = if n > BINNED_THRESHOLD {
        binned_pairs(pop, cutoff)
    } else {
        all_pairs(pop, cutoff)
    };
    NeighborList { pairs, stamp: 0 }
}

fn all_pairs(pop: &CellPopulation, cutoff: f64) -> Vec<(u32, u32)> {
    let n = pop.n_total();
    let c2 = cutoff * cutoff;
    let mut pairs = Vec::new();
    for i in 0..n {
        let xi = pop.position(i);
        for j in (i + 1)..n {
            let xj = pop.position(j);
            let mut r2 = 0.0;
            for k in 0..pop.dim() {
                let d = xj[k] - xi[k];
                r2 += d * d;
            }
            if r2 < c2 {
                pairs.push((i as u32, j as u32));
            }
        }
    }
    pairs
}

fn binned_pairs(pop: &CellPopulation, cutoff: f64) -> Vec<(u32, u32)> {
    use std::collections::HashMap;
    let n = pop.n_total();
    let d = pop.dim();
    let inv = 1.0 / cutoff;
    let key = |x: &[f64]| -> [i64; 3] {
        let mut k = [0i64; 3];
        for (c, slot) in k.iter_mut().enumerate().take(d) {
            *slot = (x[c] * inv).floor() as i64;
        }
        k
    };
    let mut bins: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    for i in 0..n {
        bins.entry(key(pop.position(i))).or_default().push(i as u32);
    }
    let c2 = cutoff * cutoff;
    let mut pairs = Vec::new();
    let range = |active: bool| if active { -1..=1 } else { 0..=0 };
    for i in 0..n {
        let xi = pop.position(i);
        let ki = key(xi);
        for dx in range(d >= 1) {
            for dy in range(d >= 2) {
                for dz in range(d >= 3) {
                    let kb = [ki[0] + dx, ki[1] + dy, ki[2] + dz];
                    let Some(bucket) = bins.get(&kb) else { continue };
                    for &j in bucket {
                        if (j as usize) <= i {
                            continue;
                        }
                        let xj = pop.position(j as usize);
                        let mut r2 = 0.0;
                        for k in 0..d {
                            let diff = xj[k] - xi[k];
                            r2 += diff * diff;
                        }
                        if r2 < c2 {
                            pairs.push((i as u32, j as u32));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Neighbor list plus the positions it was built from, with the rebuild
/// policy: rebuild once any cell has moved more than `(r_A - s)/2` since the
/// last build, and always after a division. Together with the capture
/// radius `r_A + (r_A - s)` this keeps the list complete for the cutoff
/// `r_A` between rebuilds.
#[derive(Debug, Clone)]
pub struct NeighborCache {
    list: NeighborList,
    built_from: Vec<f64>,
    move_tol: f64,
    cutoff: f64,
    builds: u64,
}

impl NeighborCache {
    pub fn new(pop: &CellPopulation, law: &ForceLaw) -> Self {
        let mut list = build_neighbor_list(pop, law.capture_radius());
        list.stamp = 1;
        NeighborCache {
            list,
            built_from: pop.free_coords().to_vec(),
            move_tol: law.rebuild_threshold(),
            cutoff: law.capture_radius(),
            builds: 1,
        }
    }

    /// Rebuilds if any free cell drifted past the threshold. Returns the
    /// current list.
    pub fn ensure_fresh(&mut self, pop: &CellPopulation) -> &NeighborList {
        if self.is_stale(pop) {
            self.rebuild(pop);
        }
        &self.list
    }

    fn is_stale(&self, pop: &CellPopulation) -> bool {
        let coords = pop.free_coords();
        if coords.len() != self.built_from.len() {
            return true;
        }
        let d = pop.dim();
        let tol2 = self.move_tol * self.move_tol;
        for i in 0..pop.n_free() {
            let mut r2 = 0.0;
            for k in 0..d {
                let diff = coords[d * i + k] - self.built_from[d * i + k];
                r2 += diff * diff;
            }
            if r2 > tol2 {
                return true;
            }
        }
        false
    }

    /// Forces a rebuild (used after division events).
    pub fn rebuild(&mut self, pop: &CellPopulation) {
        self.builds += 1;
        self.list = build_neighbor_list(pop, self.cutoff);
        self.list.stamp = self.builds;
        self.built_from.clear();
        self.built_from.extend_from_slice(pop.free_coords());
    }

    pub fn list(&self) -> &NeighborList {
        &self.list
    }
}

/// Total force on the free cells: `F_i = sum_j rhat_ij g(r_ij)` over free and
/// stationary neighbors. Contributions are accumulated in ascending pair
/// order so results are bitwise deterministic, and the two sides of each
/// pair receive exactly negated values.
pub fn total_force(
    pop: &CellPopulation,
    law: &ForceLaw,
    nl: &NeighborList,
) -> Result<Vec<f64>, Error> {
    let mut f = vec![0.0; pop.n_equations()];
    accumulate_force(pop, law, nl, |_| true, &mut f)?;
    Ok(f)
}

/// Force rows for a subset of free cells (`active(i)`), with all positions
/// read from `pop`. Rows of inactive cells are left untouched.
pub(crate) fn accumulate_force(
    pop: &CellPopulation,
    law: &ForceLaw,
    nl: &NeighborList,
    active: impl Fn(usize) -> bool,
    f: &mut [f64],
) -> Result<(), Error> {
    let d = pop.dim();
    let n_free = pop.n_free();
    for &(i, j) in &nl.pairs {
        let (i, j) = (i as usize, j as usize);
        let i_active = i < n_free && active(i);
        let j_active = j < n_free && active(j);
        if !i_active && !j_active {
            continue;
        }
        let geom = PairGeometry::new(pop.position(i), pop.position(j));
        if geom.r >= law.r_a {
            continue;
        }
        let Some(unit) = geom.unit() else {
            return Err(Error::CoincidentCenters { i, j });
        };
        let g = law.strength_raw(geom.r);
        for k in 0..d {
            let contribution = unit[k] * g;
            if i_active {
                f[d * i + k] += contribution;
            }
            if j_active {
                f[d * j + k] -= contribution;
            }
        }
    }
    Ok(())
}

/// Total potential and a count of coincident (zero-distance) pairs.
#[derive(Debug, Clone, Copy)]
pub struct PotentialSample {
    pub value: f64,
    /// Number of distinct-cell pairs at exactly zero distance. Their `G(0)`
    /// contribution is finite for the cubic law but signals overlapping
    /// centers.
    pub coincident_pairs: usize,
}

/// Total potential of the population.
///
/// Free–free pairs contribute `G(r_ij)` once; free–stationary pairs likewise
/// (the potential is the one whose negative gradient is [`total_force`]).
/// Out-of-range pairs contribute the constant plateau value only when
/// `include_plateau` is set; differences of the potential are unaffected by
/// that choice.
pub fn total_potential(
    pop: &CellPopulation,
    law: &ForceLaw,
    include_plateau: bool,
) -> PotentialSample {
    let n_free = pop.n_free();
    let n = pop.n_total();
    let mut v = 0.0;
    let mut coincident = 0;
    for i in 0..n_free {
        let xi = pop.position(i);
        for j in (i + 1)..n {
            let geom = PairGeometry::new(xi, pop.position(j));
            if geom.r == 0.0 {
                coincident += 1;
            }
            if geom.r >= law.r_a {
                if include_plateau {
                    v += law.potential_plateau();
                }
            } else {
                v += law.pair_potential_raw(geom.r);
            }
        }
    }
    PotentialSample { value: v, coincident_pairs: coincident }
}
