//! Block-sparse Jacobian of the force field, Gershgorin eigenvalue bounds,
//! and Jacobian–force products for the local error estimate.
//!
//! The Jacobian of the force with respect to the free coordinates is built
//! from symmetric `d x d` pair blocks
//! `A_ij = rhat rhat^T g'(r) + (I - rhat rhat^T) g(r)/r`; the diagonal block
//! of row `i` is the negated sum of that row's pair blocks, including
//! contributions from stationary neighbors. Stationary cells have no columns
//! of their own since their perturbations vanish.

use crate::error::Error;
use crate::model::{CellPopulation, ForceLaw, NeighborList, PairGeometry};

/// Symmetric `d x d` block stored as a 3x3 row-major array; entries beyond
/// the active dimension stay zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block(pub [f64; 9]);

impl Block {
    pub const ZERO: Block = Block([0.0; 9]);

    #[inline]
    pub fn entry(&self, l: usize, m: usize) -> f64 {
        self.0[3 * l + m]
    }

    #[inline]
    fn sub_assign(&mut self, other: &Block) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a -= b;
        }
    }

    /// `out += B v` for the leading `d` components.
    #[inline]
    fn mul_add(&self, d: usize, v: &[f64], out: &mut [f64]) {
        for l in 0..d {
            let mut acc = 0.0;
            for m in 0..d {
                acc += self.0[3 * l + m] * v[m];
            }
            out[l] += acc;
        }
    }
}

/// Jacobian pair block for one interacting pair.
pub fn pair_block(geom: &PairGeometry, law: &ForceLaw) -> Result<Block, Error> {
    if geom.r >= law.r_a {
        return Ok(Block::ZERO);
    }
    let Some(unit) = geom.unit() else {
        return Err(Error::CoincidentCenters { i: 0, j: 0 });
    };
    let radial = law.strength_derivative_raw(geom.r);
    let tangential = law.strength_raw(geom.r) / geom.r;
    let mut b = [0.0; 9];
    for l in 0..3 {
        for m in l..3 {
            let nn = unit[l] * unit[m];
            let mut v = nn * (radial - tangential);
            if l == m {
                v += tangential;
            }
            b[3 * l + m] = v;
            b[3 * m + l] = v;
        }
    }
    Ok(Block(b))
}

/// Block-sparse Jacobian of the force field restricted to free coordinates.
#[derive(Debug, Clone)]
pub struct BlockJacobian {
    dim: usize,
    n_free: usize,
    /// In-range free–free pair blocks, ascending by `(i, j)`, `i < j`.
    pairs: Vec<(u32, u32, Block)>,
    /// Diagonal blocks: negated row sums over free and stationary neighbors.
    diag: Vec<Block>,
}

/// Gershgorin interval bounds on the spectrum of the assembled Jacobian.
#[derive(Debug, Clone, Copy)]
pub struct EigenEstimate {
    /// Lower bound on the smallest eigenvalue.
    pub lambda_min_est: f64,
    /// Upper bound on the largest eigenvalue.
    pub lambda_max_est: f64,
}

/// Assembles the block Jacobian at the current positions. The neighbor list
/// must be complete for the interaction cutoff.
pub fn assemble(
    pop: &CellPopulation,
    law: &ForceLaw,
    nl: &NeighborList,
) -> Result<BlockJacobian, Error> {
    let d = pop.dim();
    let n_free = pop.n_free();
    let mut diag = vec![Block::ZERO; n_free];
    let mut pairs = Vec::new();
    for &(i, j) in &nl.pairs {
        let (i, j) = (i as usize, j as usize);
        if i >= n_free {
            continue; // stationary-stationary
        }
        let geom = PairGeometry::new(pop.position(i), pop.position(j));
        if geom.r >= law.r_a {
            continue;
        }
        if geom.r == 0.0 {
            return Err(Error::CoincidentCenters { i, j });
        }
        let b = pair_block(&geom, law)?;
        diag[i].sub_assign(&b);
        if j < n_free {
            diag[j].sub_assign(&b);
            pairs.push((i as u32, j as u32, b));
        }
    }
    Ok(BlockJacobian { dim: d, n_free, pairs, diag })
}

impl BlockJacobian {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    /// Number of rows/columns of the assembled matrix.
    pub fn order(&self) -> usize {
        self.dim * self.n_free
    }

    /// `out = A v`, accumulated in deterministic order.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for (i, b) in self.diag.iter().enumerate() {
            b.mul_add(d, &v[d * i..d * (i + 1)], &mut out[d * i..d * (i + 1)]);
        }
        for &(i, j, ref b) in &self.pairs {
            let (i, j) = (i as usize, j as usize);
            {
                let (vi, vj) = (&v[d * j..d * (j + 1)], &mut out[d * i..d * (i + 1)]);
                b.mul_add(d, vi, vj);
            }
            {
                let (vi, vj) = (&v[d * i..d * (i + 1)], &mut out[d * j..d * (j + 1)]);
                b.mul_add(d, vi, vj);
            }
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, Error> {
        if v.len() != self.order() {
            return Err(Error::DimensionMismatch { expected: self.order(), got: v.len() });
        }
        let mut out = vec![0.0; v.len()];
        self.apply(v, &mut out);
        Ok(out)
    }

    /// Gershgorin bounds computed from the block-sparse rows on the fly.
    /// Row `k = d(i-1) + l` has center `xi_k` (diagonal entry) and radius
    /// `rho_k` (absolute off-diagonal row sum over free columns).
    pub fn gershgorin_bounds(&self) -> EigenEstimate {
        let d = self.dim;
        // Per-row absolute sums contributed by off-diagonal pair blocks.
        let mut rho = vec![0.0; self.order()];
        for &(i, j, ref b) in &self.pairs {
            let (i, j) = (i as usize, j as usize);
            for l in 0..d {
                let mut s = 0.0;
                for m in 0..d {
                    s += b.entry(l, m).abs();
                }
                rho[d * i + l] += s;
                rho[d * j + l] += s;
            }
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, blk) in self.diag.iter().enumerate() {
            for l in 0..d {
                let xi = blk.entry(l, l);
                let mut r = rho[d * i + l];
                for m in 0..d {
                    if m != l {
                        r += blk.entry(l, m).abs();
                    }
                }
                lo = lo.min(xi - r);
                hi = hi.max(xi + r);
            }
        }
        if self.n_free == 0 {
            return EigenEstimate { lambda_min_est: 0.0, lambda_max_est: 0.0 };
        }
        EigenEstimate { lambda_min_est: lo, lambda_max_est: hi }
    }

    /// Lower bound on the smallest eigenvalue (never above the true one).
    pub fn gershgorin_min(&self) -> f64 {
        self.gershgorin_bounds().lambda_min_est
    }

    /// Dense row-major materialization, for small test oracles only.
    pub fn to_dense(&self) -> Result<Vec<f64>, Error> {
        const LIMIT: usize = 64;
        if self.n_free > LIMIT {
            return Err(Error::DenseTooLarge { n: self.n_free, limit: LIMIT });
        }
        let d = self.dim;
        let n = self.order();
        let mut dense = vec![0.0; n * n];
        let mut put = |bi: usize, bj: usize, b: &Block| {
            for l in 0..d {
                for m in 0..d {
                    dense[(d * bi + l) * n + d * bj + m] = b.entry(l, m);
                }
            }
        };
        for (i, b) in self.diag.iter().enumerate() {
            put(i, i, b);
        }
        for &(i, j, ref b) in &self.pairs {
            put(i as usize, j as usize, b);
            put(j as usize, i as usize, b);
        }
        Ok(dense)
    }
}

/// Exact Jacobian–force product `A F`.
pub fn jacobian_force_product(jac: &BlockJacobian, f: &[f64]) -> Result<Vec<f64>, Error> {
    jac.mul_vec(f)
}

/// Finite-difference Jacobian–force product `(F(x + eps F) - F(x)) / eps`,
/// costing one extra force evaluation.
pub fn fd_jacobian_force_product(
    mut force: impl FnMut(&[f64]) -> Result<Vec<f64>, Error>,
    x: &[f64],
    f_at_x: &[f64],
    eps: f64,
) -> Result<Vec<f64>, Error> {
    let shifted: Vec<f64> = x.iter().zip(f_at_x).map(|(xi, fi)| xi + eps * fi).collect();
    let f_shifted = force(&shifted)?;
    Ok(f_shifted
        .iter()
        .zip(f_at_x)
        .map(|(fs, f0)| (fs - f0) / eps)
        .collect())
}

/// Infinity norm.
pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Euclidean norm.
pub fn norm_2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
