//! Correlation kernels, dense correlation matrices for oracle-scale checks,
//! and the nearest-neighbor factorization (kriging weights `b_i`,
//! conditional variances `F_i`).

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Result, SfError};
use crate::geometry::{dist, NeighborGraph, Point};
use crate::linalg::{backward_solve_t, cholesky_in_place, forward_solve};

/// Largest location count for which dense matrices are built.
pub const DENSE_LIMIT: usize = 5_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelFamily {
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationKernel {
    pub family: KernelFamily,
    pub phi: f64,
}

impl CorrelationKernel {
    pub fn exponential(phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(SfError::Config(format!("decay must be positive and finite, got {phi}")));
        }
        Ok(Self {
            family: KernelFamily::Exponential,
            phi,
        })
    }

    #[inline]
    pub fn corr(&self, d: f64) -> f64 {
        match self.family {
            KernelFamily::Exponential => exp_corr(d, self.phi),
        }
    }
}

#[inline]
pub fn exp_corr(d: f64, phi: f64) -> f64 {
    (-phi * d).exp()
}

/// Dense correlation matrix over `coords`; rejects coincident locations.
pub fn dense_corr_matrix(coords: &[Point], kernel: &CorrelationKernel) -> Result<DMatrix<f64>> {
    let n = coords.len();
    if n > DENSE_LIMIT {
        return Err(SfError::Config(format!(
            "dense correlation matrix requested for {n} locations (limit {DENSE_LIMIT})"
        )));
    }
    let mut c = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in 0..i {
            let d = dist(&coords[i], &coords[j]);
            if d == 0.0 {
                return Err(SfError::Factorization {
                    location: i,
                    msg: format!("coincides with location {j}; correlation matrix is singular"),
                });
            }
            let v = kernel.corr(d);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// Distances needed by the factorization, cached once per graph so that
/// refactorizing under a new decay costs only kernel evaluations and solves.
#[derive(Clone, Debug)]
pub struct NeighborDistances {
    /// `d(i, N(i)[a])`, laid out like the graph's neighbor storage.
    to_nbr: Vec<f64>,
    /// Lower triangle (with diagonal) of `d(N(i)[a], N(i)[b])`, row by row.
    among: Vec<f64>,
    among_offsets: Vec<usize>,
}

impl NeighborDistances {
    pub fn new(graph: &NeighborGraph, ordered: &[Point]) -> Self {
        let n = graph.len();
        let mut to_nbr = Vec::with_capacity(graph.total_neighbors());
        let mut among_offsets = Vec::with_capacity(n + 1);
        among_offsets.push(0);
        let mut among = Vec::new();
        for i in 0..n {
            let nb = graph.neighbors(i);
            for &j in nb {
                to_nbr.push(dist(&ordered[i], &ordered[j]));
            }
            for a in 0..nb.len() {
                for b in 0..=a {
                    among.push(dist(&ordered[nb[a]], &ordered[nb[b]]));
                }
            }
            among_offsets.push(among.len());
        }
        Self {
            to_nbr,
            among,
            among_offsets,
        }
    }
}

/// Kriging weights and conditional variances for one factor.
#[derive(Clone, Debug, PartialEq)]
pub struct NngpFactors {
    pub phi: f64,
    /// `b_i` rows, same layout as the graph's neighbor storage.
    pub b: Vec<f64>,
    pub f: Vec<f64>,
}

impl NngpFactors {
    #[inline]
    pub fn weights<'a>(&'a self, graph: &NeighborGraph, i: usize) -> &'a [f64] {
        let o = graph.neighbor_offset(i);
        &self.b[o..o + graph.neighbors(i).len()]
    }

    /// `b_{j,i}`: weight of `N(j)[slot]` in the row of `j`.
    #[inline]
    pub fn weight_at(&self, graph: &NeighborGraph, j: usize, slot: usize) -> f64 {
        self.b[graph.neighbor_offset(j) + slot]
    }
}

/// Local solve for one location given its neighbor distances.
fn krige_local(
    m: usize,
    to_nbr: &[f64],
    among: &[f64],
    kernel: &CorrelationKernel,
    work: &mut Vec<f64>,
    b: &mut [f64],
) -> std::result::Result<f64, String> {
    if m == 0 {
        return Ok(1.0);
    }
    work.clear();
    work.resize(m * m, 0.0);
    let mut t = 0;
    for a in 0..m {
        for c in 0..=a {
            work[a * m + c] = kernel.corr(among[t]);
            t += 1;
        }
    }
    for a in 0..m {
        b[a] = kernel.corr(to_nbr[a]);
    }
    cholesky_in_place(work, m).map_err(|p| format!("neighbor matrix not positive definite (pivot {p})"))?;
    forward_solve(work, m, b);
    let explained: f64 = b.iter().map(|y| y * y).sum();
    backward_solve_t(work, m, b);
    let f = 1.0 - explained;
    if !(f > 0.0) {
        return Err(format!("conditional variance {f:e} is not positive"));
    }
    Ok(f)
}

/// Kriging weights `C_{N(i)}⁻¹ C_{N(i),i}` and variances `1 − C_{i,N(i)} b_i`.
pub fn nngp_factorize(
    graph: &NeighborGraph,
    dists: &NeighborDistances,
    kernel: &CorrelationKernel,
) -> Result<NngpFactors> {
    let n = graph.len();
    let mut b = vec![0.0; graph.total_neighbors()];
    let mut f = vec![1.0; n];
    let mut chunks: Vec<(usize, &mut [f64], &mut f64)> = Vec::with_capacity(n);
    {
        let mut rest = b.as_mut_slice();
        for (i, fi) in f.iter_mut().enumerate() {
            let (head, tail) = rest.split_at_mut(graph.neighbors(i).len());
            chunks.push((i, head, fi));
            rest = tail;
        }
    }
    chunks
        .into_par_iter()
        .with_min_len(256)
        .try_for_each_init(Vec::new, |work, (i, bi, fi)| {
            let m = bi.len();
            let o = graph.neighbor_offset(i);
            let among = &dists.among[dists.among_offsets[i]..dists.among_offsets[i + 1]];
            match krige_local(m, &dists.to_nbr[o..o + m], among, kernel, work, bi) {
                Ok(v) => {
                    *fi = v;
                    Ok(())
                }
                Err(msg) => Err(SfError::Factorization { location: i, msg }),
            }
        })?;
    Ok(NngpFactors {
        phi: kernel.phi,
        b,
        f,
    })
}

/// Convenience wrapper that computes the neighbor distances itself.
pub fn nngp_factorize_coords(
    graph: &NeighborGraph,
    ordered: &[Point],
    kernel: &CorrelationKernel,
) -> Result<NngpFactors> {
    nngp_factorize(graph, &NeighborDistances::new(graph, ordered), kernel)
}

/// Kriging from arbitrary neighbors to a query point. A coincident neighbor
/// gives zero variance; roundoff below zero is clamped.
pub fn krige_point(
    neighbors: &[Point],
    query: &Point,
    kernel: &CorrelationKernel,
) -> Result<(Vec<f64>, f64)> {
    let m = neighbors.len();
    if let Some(k) = neighbors.iter().position(|p| p == query) {
        let mut b = vec![0.0; m];
        b[k] = 1.0;
        return Ok((b, 0.0));
    }
    let mut c = vec![0.0; m * m];
    for a in 0..m {
        for d in 0..=a {
            c[a * m + d] = kernel.corr(dist(&neighbors[a], &neighbors[d]));
        }
    }
    let mut b: Vec<f64> = neighbors.iter().map(|p| kernel.corr(dist(p, query))).collect();
    cholesky_in_place(&mut c, m).map_err(|p| SfError::Factorization {
        location: p,
        msg: "prediction neighbor matrix not positive definite".into(),
    })?;
    forward_solve(&c, m, &mut b);
    let explained: f64 = b.iter().map(|y| y * y).sum();
    backward_solve_t(&c, m, &mut b);
    Ok((b, (1.0 - explained).max(0.0)))
}

/// `Σ_i log N(w_i | b_iᵀ w_{N(i)}, F_i)`.
pub fn nngp_log_density(w: &[f64], factors: &NngpFactors, graph: &NeighborGraph) -> f64 {
    nngp_log_density_strided(w, 0, 1, factors, graph)
}

/// Same as [`nngp_log_density`] for column `col` of a row-major `n×stride` matrix.
pub fn nngp_log_density_strided(
    w: &[f64],
    col: usize,
    stride: usize,
    factors: &NngpFactors,
    graph: &NeighborGraph,
) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_5;
    let mut total = 0.0;
    for i in 0..graph.len() {
        let bi = factors.weights(graph, i);
        let mean: f64 = graph
            .neighbors(i)
            .iter()
            .zip(bi)
            .map(|(&j, &bj)| bj * w[j * stride + col])
            .sum();
        let r = w[i * stride + col] - mean;
        let fi = factors.f[i];
        total -= 0.5 * (LN_2PI + fi.ln() + r * r / fi);
    }
    total
}

/// Symmetric matrix in compressed rows with both triangles stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSym {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseSym {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let cols = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
        match cols.binary_search(&c) {
            Ok(k) => self.vals[self.row_ptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.vals[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[(r, self.col_idx[k])] = self.vals[k];
            }
        }
        d
    }
}

/// `C̃⁻¹ = (I − B)ᵀ F⁻¹ (I − B)`.
pub fn assemble_sparse_precision(factors: &NngpFactors, graph: &NeighborGraph) -> SparseSym {
    let n = graph.len();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        let nb = graph.neighbors(i);
        let bi = factors.weights(graph, i);
        let inv_f = 1.0 / factors.f[i];
        // u = e_i − b_i on N(i); add u uᵀ / F_i
        let mut u: Vec<(usize, f64)> = Vec::with_capacity(nb.len() + 1);
        u.push((i, 1.0));
        u.extend(nb.iter().zip(bi).map(|(&j, &b)| (j, -b)));
        for &(r, ur) in &u {
            for &(c, uc) in &u {
                rows[r].push((c, ur * uc * inv_f));
            }
        }
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut vals = Vec::new();
    for mut row in rows {
        row.sort_by_key(|e| e.0);
        let mut last = usize::MAX;
        for (c, v) in row {
            if c == last {
                *vals.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                vals.push(v);
                last = c;
            }
        }
        row_ptr.push(col_idx.len());
    }
    SparseSym {
        n,
        row_ptr,
        col_idx,
        vals,
    }
}

/// Dense `C̃ = (I − B)⁻¹ F (I − B)⁻ᵀ` for oracle checks.
pub fn implied_covariance_dense(factors: &NngpFactors, graph: &NeighborGraph) -> Result<DMatrix<f64>> {
    let n = graph.len();
    if n > DENSE_LIMIT {
        return Err(SfError::Config(format!("dense covariance requested for {n} locations")));
    }
    // A = (I − B)⁻¹ by forward substitution: row i of A = e_i + Σ b_ij A_j
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = 1.0;
        let bi = factors.weights(graph, i);
        for (&j, &b) in graph.neighbors(i).iter().zip(bi) {
            for c in 0..=j {
                let v = a[(j, c)];
                a[(i, c)] += b * v;
            }
        }
    }
    let mut af = a.clone();
    for c in 0..n {
        let s = factors.f[c];
        af.column_mut(c).scale_mut(s);
    }
    Ok(&af * a.transpose())
}
