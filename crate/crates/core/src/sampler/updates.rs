//! Full-conditional updates. Each function touches one block of the state
//! and reads everything else as fixed.
//!
//! Row-major conventions: latent matrices `n×q`, loadings `h×q`, target and
//! offset matrices `n×h` with NaN marking a missing outcome cell.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use super::truncnorm::normal_positive;
use crate::covariance::{
    nngp_factorize, nngp_log_density_strided, CorrelationKernel, NeighborDistances, NngpFactors,
};
use crate::dataset::SpatialDataset;
use crate::error::{Result, SfError};
use crate::geometry::{nearest_neighbors, NeighborGraph, Point};
use crate::linalg::{cholesky_in_place, sample_canonical};
use crate::model::BetaPrior;
use crate::rng::{stream, stream_rng, SfRng};

pub type UpdateResult<T> = std::result::Result<T, String>;

/// Neighbor graph, cached distances and (lazily) a coloring of the
/// moralized graph. Shared read-only by every chain over one location set.
pub struct SharedGeometry {
    pub graph: NeighborGraph,
    pub dists: NeighborDistances,
    colors: OnceLock<Vec<Vec<usize>>>,
}

impl SharedGeometry {
    pub fn new(ordered: &[Point], m: usize) -> Result<Self> {
        let graph = nearest_neighbors(ordered, m)?;
        let dists = NeighborDistances::new(&graph, ordered);
        Ok(Self {
            graph,
            dists,
            colors: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.graph.len()
    }

    /// Locations grouped so that no two in a group are neighbors, parents,
    /// or co-parents of a common child. Same-color latent rows are
    /// conditionally independent and can be drawn concurrently.
    pub fn colors(&self) -> &[Vec<usize>] {
        self.colors.get_or_init(|| {
            let g = &self.graph;
            let n = g.len();
            let mut color = vec![usize::MAX; n];
            let mut groups: Vec<Vec<usize>> = Vec::new();
            let mut taken: Vec<usize> = Vec::new();
            for i in 0..n {
                taken.clear();
                let mut mark = |j: usize| {
                    if j != i && color[j] != usize::MAX {
                        taken.push(color[j]);
                    }
                };
                for &j in g.neighbors(i) {
                    mark(j);
                }
                for &c in g.parents(i) {
                    mark(c);
                    for &j in g.neighbors(c) {
                        mark(j);
                    }
                }
                taken.sort_unstable();
                taken.dedup();
                let mut col = 0;
                for &t in &taken {
                    if t == col {
                        col += 1;
                    } else if t > col {
                        break;
                    }
                }
                color[i] = col;
                if col == groups.len() {
                    groups.push(Vec::new());
                }
                groups[col].push(i);
            }
            groups
        })
    }
}

/// Per-chain factorizations of each latent factor.
pub struct LatentProcess<'g> {
    pub geo: &'g SharedGeometry,
    pub factors: Vec<NngpFactors>,
}

impl<'g> LatentProcess<'g> {
    pub fn new(geo: &'g SharedGeometry, phi: &[f64]) -> Result<Self> {
        let factors = phi
            .iter()
            .map(|&p| nngp_factorize(&geo.graph, &geo.dists, &CorrelationKernel::exponential(p)?))
            .collect::<Result<_>>()?;
        Ok(Self { geo, factors })
    }

    pub fn q(&self) -> usize {
        self.factors.len()
    }

    pub fn graph(&self) -> &NeighborGraph {
        &self.geo.graph
    }

    pub fn factorize(&self, phi: f64) -> Result<NngpFactors> {
        nngp_factorize(&self.geo.graph, &self.geo.dists, &CorrelationKernel::exponential(phi)?)
    }
}

/// Outcome rows written as `loadings · latent + noise`, noise variance `psi`.
pub struct Observation<'a> {
    pub h: usize,
    pub loadings: &'a [f64],
    pub psi: &'a [f64],
    pub target: &'a [f64],
}

impl Observation<'_> {
    /// `Σ_j λ_j λ_jᵀ / ψ_j` over all outcomes.
    pub fn full_gram(&self, q: usize) -> Vec<f64> {
        let mut g = vec![0.0; q * q];
        for j in 0..self.h {
            let l = &self.loadings[j * q..(j + 1) * q];
            let s = 1.0 / self.psi[j];
            for a in 0..q {
                for b in 0..=a {
                    g[a * q + b] += l[a] * l[b] * s;
                }
            }
        }
        g
    }
}

/// Canonical parameters of the full conditional of latent row `i`.
pub fn latent_site_system(
    i: usize,
    latent: &[f64],
    proc: &LatentProcess<'_>,
    obs: &Observation<'_>,
    gram_full: &[f64],
    prec: &mut [f64],
    lin: &mut [f64],
) {
    let q = proc.q();
    let g = proc.graph();
    prec[..q * q].fill(0.0);
    lin[..q].fill(0.0);
    let nb = g.neighbors(i);
    for (k, fac) in proc.factors.iter().enumerate() {
        let bi = fac.weights(g, i);
        let mean: f64 = nb.iter().zip(bi).map(|(&j, &b)| b * latent[j * q + k]).sum();
        let inv_f = 1.0 / fac.f[i];
        let mut p = inv_f;
        let mut h = mean * inv_f;
        for (j, slot) in g.parent_entries(i) {
            let bj = fac.weights(g, j);
            let nbj = g.neighbors(j);
            let mut chi = latent[j * q + k];
            for (d, (&c, &b)) in nbj.iter().zip(bj).enumerate() {
                if d != slot {
                    chi -= b * latent[c * q + k];
                }
            }
            let inv_fj = 1.0 / fac.f[j];
            p += bj[slot] * bj[slot] * inv_fj;
            h += bj[slot] * chi * inv_fj;
        }
        prec[k * q + k] = p;
        lin[k] = h;
    }
    let row = &obs.target[i * obs.h..(i + 1) * obs.h];
    let complete = row.iter().all(|v| !v.is_nan());
    if complete {
        for a in 0..q {
            for b in 0..=a {
                prec[a * q + b] += gram_full[a * q + b];
            }
        }
    }
    for (j, &t) in row.iter().enumerate() {
        if t.is_nan() {
            continue;
        }
        let l = &obs.loadings[j * q..(j + 1) * q];
        let s = 1.0 / obs.psi[j];
        for a in 0..q {
            lin[a] += l[a] * t * s;
            if !complete {
                for b in 0..=a {
                    prec[a * q + b] += l[a] * l[b] * s;
                }
            }
        }
    }
}

/// Randomness for one latent sweep.
pub enum LatentRng<'a> {
    /// One generator, locations visited in ordered sequence.
    Sequential(&'a mut SfRng),
    /// Color groups updated concurrently with one stream per location.
    Colored { seed: u64, path: [u64; 3] },
}

fn draw_site(
    i: usize,
    latent: &[f64],
    proc: &LatentProcess<'_>,
    obs: &Observation<'_>,
    gram: &[f64],
    rng: &mut SfRng,
    out: &mut [f64],
) -> UpdateResult<()> {
    let q = proc.q();
    let mut prec = [0.0f64; 64];
    let mut heap;
    let prec: &mut [f64] = if q * q <= 64 {
        &mut prec[..q * q]
    } else {
        heap = vec![0.0; q * q];
        &mut heap
    };
    latent_site_system(i, latent, proc, obs, gram, prec, out);
    sample_canonical(prec, out, q, rng)
        .map_err(|_| format!("latent precision not positive definite at location {i}"))
}

/// One full sweep over the latent rows.
pub fn sweep_latent(
    latent: &mut [f64],
    proc: &LatentProcess<'_>,
    obs: &Observation<'_>,
    rng: LatentRng<'_>,
) -> UpdateResult<()> {
    let q = proc.q();
    if q == 0 {
        return Ok(());
    }
    let gram = obs.full_gram(q);
    match rng {
        LatentRng::Sequential(rng) => {
            let mut buf = vec![0.0; q];
            for i in 0..proc.geo.n() {
                draw_site(i, latent, proc, obs, &gram, rng, &mut buf)?;
                latent[i * q..(i + 1) * q].copy_from_slice(&buf);
            }
        }
        LatentRng::Colored { seed, path } => {
            for group in proc.geo.colors() {
                let draws: Vec<Vec<f64>> = {
                    let latent: &[f64] = latent;
                    group
                        .par_iter()
                        .with_min_len(64)
                        .map(|&i| {
                            let mut rng = stream_rng(seed, &[path[0], path[1], path[2], i as u64]);
                            let mut buf = vec![0.0; q];
                            draw_site(i, latent, proc, obs, &gram, &mut rng, &mut buf).map(|_| buf)
                        })
                        .collect::<UpdateResult<_>>()?
                };
                for (&i, d) in group.iter().zip(draws) {
                    latent[i * q..(i + 1) * q].copy_from_slice(&d);
                }
            }
        }
    }
    Ok(())
}

/// Outcome data in ordered layout with per-outcome observed row lists and
/// cached predictor cross-products.
pub struct OrderedData {
    pub n: usize,
    pub h: usize,
    pub z: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub p_design: Vec<usize>,
    pub design_of: Vec<usize>,
    pub obs_rows: Vec<Vec<usize>>,
    pub xtx: Vec<Vec<f64>>,
}

impl OrderedData {
    pub fn new(data: &SpatialDataset, order: &[usize]) -> Result<Self> {
        let n = data.n();
        let h = data.h();
        let mut z = Vec::with_capacity(n * h);
        for &s in order {
            for j in 0..h {
                z.push(data.value(s, j));
            }
        }
        let x: Vec<Vec<f64>> = data
            .designs
            .iter()
            .map(|d| order.iter().flat_map(|&s| d.row(s).iter().copied()).collect())
            .collect();
        let p_design: Vec<usize> = data.designs.iter().map(|d| d.p()).collect();
        let obs_rows: Vec<Vec<usize>> = (0..h)
            .map(|j| (0..n).filter(|&i| !z[i * h + j].is_nan()).collect())
            .collect();
        let mut out = Self {
            n,
            h,
            z,
            x,
            p_design,
            design_of: data.design_of.clone(),
            obs_rows,
            xtx: Vec::new(),
        };
        for j in 0..h {
            let p = out.p(j);
            let mut m = vec![0.0; p * p];
            for &i in &out.obs_rows[j] {
                let xi = out.x_row(j, i);
                for a in 0..p {
                    for b in 0..p {
                        m[a * p + b] += xi[a] * xi[b];
                    }
                }
            }
            let mut chk = m.clone();
            if out.obs_rows[j].len() < p || cholesky_in_place(&mut chk, p).is_err() {
                return Err(SfError::Init(format!(
                    "predictors for outcome '{}' are rank deficient on its observed rows",
                    data.outcome_names[j]
                )));
            }
            out.xtx.push(m);
        }
        Ok(out)
    }

    pub fn p(&self, j: usize) -> usize {
        self.p_design[self.design_of[j]]
    }

    #[inline]
    pub fn x_row(&self, j: usize, i: usize) -> &[f64] {
        let p = self.p(j);
        &self.x[self.design_of[j]][i * p..(i + 1) * p]
    }

    /// `x_ij · β_j` at every cell.
    pub fn xb(&self, beta: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.h];
        for i in 0..self.n {
            for j in 0..self.h {
                out[i * self.h + j] = self.x_row(j, i).iter().zip(&beta[j]).map(|(x, b)| x * b).sum();
            }
        }
        out
    }

    /// `z − Σ offsets`, NaN where missing.
    pub fn residual(&self, offsets: &[&[f64]]) -> Vec<f64> {
        let mut out = self.z.clone();
        for off in offsets {
            for (o, v) in out.iter_mut().zip(off.iter()) {
                *o -= v;
            }
        }
        out
    }

    pub fn n_obs(&self) -> Vec<usize> {
        self.obs_rows.iter().map(Vec::len).collect()
    }
}

/// `latent · loadingsᵀ`, an `n×h` matrix.
pub fn loading_product(latent: &[f64], loadings: &[f64], n: usize, h: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * h];
    if q == 0 {
        return out;
    }
    for i in 0..n {
        let w = &latent[i * q..(i + 1) * q];
        for j in 0..h {
            let l = &loadings[j * q..(j + 1) * q];
            out[i * h + j] = w.iter().zip(l).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Regression coefficients, per outcome, given `target = z − (latent terms)`.
pub fn update_beta<R: Rng + ?Sized>(
    beta: &mut [Vec<f64>],
    data: &OrderedData,
    target: &[f64],
    psi: &[f64],
    prior: BetaPrior,
    rng: &mut R,
) -> UpdateResult<()> {
    let h = data.h;
    for j in 0..h {
        let p = data.p(j);
        let inv_psi = 1.0 / psi[j];
        let mut prec: Vec<f64> = data.xtx[j].iter().map(|v| v * inv_psi).collect();
        let mut lin = vec![0.0; p];
        for &i in &data.obs_rows[j] {
            let r = target[i * h + j];
            for (l, x) in lin.iter_mut().zip(data.x_row(j, i)) {
                *l += x * r * inv_psi;
            }
        }
        if let BetaPrior::Normal { mean, var } = prior {
            for a in 0..p {
                prec[a * p + a] += 1.0 / var;
                lin[a] += mean / var;
            }
        }
        sample_canonical(&mut prec, &mut lin, p, rng)
            .map_err(|_| format!("coefficient precision for outcome {j} is not positive definite"))?;
        beta[j].copy_from_slice(&lin);
    }
    Ok(())
}

/// Structure and prior of a loading matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadingForm {
    /// Zero upper triangle, unit diagonal, free entries `N(0, 1)`.
    UnitLowerTriangular,
    /// All entries free with precision `(DᵀD + I)/ψ`.
    FreeScaled,
}

fn draw_loading_row<R: Rng + ?Sized>(
    cols: usize,
    stride: usize,
    design: &[f64],
    rows: &[usize],
    resid: impl Fn(usize) -> f64,
    psi: f64,
    prior_prec: f64,
    rng: &mut R,
) -> UpdateResult<Vec<f64>> {
    let inv_psi = 1.0 / psi;
    let mut prec = vec![0.0; cols * cols];
    let mut lin = vec![0.0; cols];
    for &i in rows {
        let d = &design[i * stride..i * stride + cols];
        let r = resid(i);
        for a in 0..cols {
            lin[a] += d[a] * r * inv_psi;
            for b in 0..=a {
                prec[a * cols + b] += d[a] * d[b] * inv_psi;
            }
        }
    }
    for a in 0..cols {
        prec[a * cols + a] += prior_prec;
    }
    sample_canonical(&mut prec, &mut lin, cols, rng).map_err(|_| "loading precision not positive definite".to_string())?;
    Ok(lin)
}

/// Free loading entries, row by row, given `target = z − Xβ (− other terms)`.
#[allow(clippy::too_many_arguments)]
pub fn update_loadings<R: Rng + ?Sized>(
    loadings: &mut [f64],
    h: usize,
    q: usize,
    form: LoadingForm,
    latent: &[f64],
    target: &[f64],
    obs_rows: &[Vec<usize>],
    psi: &[f64],
    rng: &mut R,
) -> UpdateResult<()> {
    for j in 0..h {
        let (free, fixed) = match form {
            LoadingForm::UnitLowerTriangular => (j.min(q), j < q),
            LoadingForm::FreeScaled => (q, false),
        };
        if free == 0 {
            continue;
        }
        let prior_prec = match form {
            LoadingForm::UnitLowerTriangular => 1.0,
            LoadingForm::FreeScaled => 1.0 / psi[j],
        };
        let row = draw_loading_row(
            free,
            q,
            latent,
            &obs_rows[j],
            |i| target[i * h + j] - if fixed { latent[i * q + j] } else { 0.0 },
            psi[j],
            prior_prec,
            rng,
        )
        .map_err(|e| format!("{e} (row {j})"))?;
        loadings[j * q..j * q + free].copy_from_slice(&row);
    }
    Ok(())
}

/// Loadings with zero upper triangle and positive diagonal: free
/// off-diagonals by conjugate normal, each diagonal from a normal truncated
/// to the positive half-line.
#[allow(clippy::too_many_arguments)]
pub fn update_gamma<R: Rng + ?Sized>(
    gamma: &mut [f64],
    h: usize,
    q: usize,
    latent: &[f64],
    target: &[f64],
    obs_rows: &[Vec<usize>],
    psi: &[f64],
    rng: &mut R,
) -> UpdateResult<()> {
    if q == 0 {
        return Ok(());
    }
    for j in 0..h {
        let rows = &obs_rows[j];
        if j >= q {
            let row = draw_loading_row(q, q, latent, rows, |i| target[i * h + j], psi[j], 1.0, rng)?;
            gamma[j * q..(j + 1) * q].copy_from_slice(&row);
            continue;
        }
        if j > 0 {
            let diag = gamma[j * q + j];
            let row = draw_loading_row(
                j,
                q,
                latent,
                rows,
                |i| target[i * h + j] - diag * latent[i * q + j],
                psi[j],
                1.0,
                rng,
            )?;
            gamma[j * q..j * q + j].copy_from_slice(&row);
        }
        let mut vv = 0.0;
        let mut vr = 0.0;
        for &i in rows {
            let v = latent[i * q + j];
            let mut r = target[i * h + j];
            for a in 0..j {
                r -= gamma[j * q + a] * latent[i * q + a];
            }
            vv += v * v;
            vr += v * r;
        }
        if vv > 0.0 {
            gamma[j * q + j] = normal_positive(vr / vv, (psi[j] / vv).sqrt(), rng);
        }
    }
    Ok(())
}

/// Draw from the inverse gamma with the given shape and rate.
pub fn inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0).expect("positive shape");
    rate / g.sample(rng)
}

/// Nugget variances and their half-t auxiliary scales.
#[allow(clippy::too_many_arguments)]
pub fn update_psi<R: Rng + ?Sized>(
    psi: &mut [f64],
    a: &mut [f64],
    ssr: &[f64],
    n_obs: &[usize],
    nu: f64,
    a_scale: f64,
    rng: &mut R,
) {
    for j in 0..psi.len() {
        psi[j] = inv_gamma(0.5 * (nu + n_obs[j] as f64), nu / a[j] + 0.5 * ssr[j], rng);
        a[j] = inv_gamma(0.5 * (nu + 1.0), nu / psi[j] + 1.0 / (a_scale * a_scale), rng);
    }
}

/// Nugget update when loading row `j` has prior `N(0, ψ_j I)`: its `q`
/// entries enter the conditional like extra observations.
#[allow(clippy::too_many_arguments)]
pub fn update_psi_scaled_loadings<R: Rng + ?Sized>(
    psi: &mut [f64],
    a: &mut [f64],
    ssr: &[f64],
    n_obs: &[usize],
    loadings: &[f64],
    q: usize,
    nu: f64,
    a_scale: f64,
    rng: &mut R,
) {
    let ssr: Vec<f64> = (0..psi.len())
        .map(|j| ssr[j] + loadings[j * q..(j + 1) * q].iter().map(|l| l * l).sum::<f64>())
        .collect();
    let counts: Vec<usize> = n_obs.iter().map(|c| c + q).collect();
    update_psi(psi, a, &ssr, &counts, nu, a_scale, rng);
}

/// Per-outcome residual sums of squares over observed cells.
pub fn residual_ss(target: &[f64], fitted: &[f64], h: usize) -> Vec<f64> {
    let mut ssr = vec![0.0; h];
    for (k, (&t, &f)) in target.iter().zip(fitted).enumerate() {
        if !t.is_nan() {
            let r = t - f;
            ssr[k % h] += r * r;
        }
    }
    ssr
}

/// Random-walk Metropolis step for the decay of factor `k`. Returns whether
/// the proposal was accepted; on acceptance the factorization is replaced.
#[allow(clippy::too_many_arguments)]
pub fn update_phi<R: Rng + ?Sized>(
    proc: &mut LatentProcess<'_>,
    phi: &mut [f64],
    k: usize,
    latent: &[f64],
    support: (f64, f64),
    step: f64,
    rng: &mut R,
) -> Result<bool> {
    let q = proc.q();
    let eps: f64 = rng.sample(StandardNormal);
    let u: f64 = rng.random();
    let prop = phi[k] + step * eps;
    if !(prop > support.0 && prop < support.1) {
        return Ok(false);
    }
    let g = proc.graph();
    let cur = nngp_log_density_strided(latent, k, q, &proc.factors[k], g);
    let fac = proc.factorize(prop)?;
    let new = nngp_log_density_strided(latent, k, q, &fac, g);
    if u.ln() < new - cur {
        proc.factors[k] = fac;
        phi[k] = prop;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Index of the intercept column of every outcome, if all outcomes have one.
pub fn intercept_columns(data: &SpatialDataset) -> Option<Vec<usize>> {
    (0..data.h())
        .map(|j| data.design(j).names.iter().position(|c| c == crate::dataset::INTERCEPT))
        .collect()
}

/// Gibbs move along the direction `latent[:, k] += c·1`, `β_{j,0} −= λ_{jk}·c`.
///
/// The likelihood is constant along this line, so `c` has the Gaussian
/// conditional implied by the process prior on column `k` (and the
/// coefficient prior, if normal). Intercept and factor mean are otherwise
/// strongly confounded and the one-block-at-a-time updates crawl along it.
#[allow(clippy::too_many_arguments)]
pub fn shift_latent_mean<R: Rng + ?Sized>(
    latent: &mut [f64],
    k: usize,
    proc: &LatentProcess<'_>,
    beta: &mut [Vec<f64>],
    intercepts: &[usize],
    loadings: &[f64],
    prior: BetaPrior,
    rng: &mut R,
) {
    let q = proc.q();
    let g = proc.graph();
    let fac = &proc.factors[k];
    let (mut prec, mut lin) = (0.0, 0.0);
    for i in 0..g.len() {
        let bi = fac.weights(g, i);
        let one = 1.0 - bi.iter().sum::<f64>();
        let r = latent[i * q + k] - g.neighbors(i).iter().zip(bi).map(|(&j, b)| b * latent[j * q + k]).sum::<f64>();
        prec += one * one / fac.f[i];
        lin -= one * r / fac.f[i];
    }
    if let BetaPrior::Normal { mean, var } = prior {
        for (j, &c) in intercepts.iter().enumerate() {
            let l = loadings[j * q + k];
            prec += l * l / var;
            lin += l * (beta[j][c] - mean) / var;
        }
    }
    let c = lin / prec + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
    for i in 0..g.len() {
        latent[i * q + k] += c;
    }
    for (j, &col) in intercepts.iter().enumerate() {
        beta[j][col] -= loadings[j * q + k] * c;
    }
}

/// Draws `N(mean, psi_j)` for every missing cell, row-major.
pub fn impute_cells<R: Rng + ?Sized>(target: &[f64], mean: &[f64], psi: &[f64], h: usize, rows: &[usize], rng: &mut R) -> Vec<f64> {
    let mut out = Vec::new();
    for &i in rows {
        for j in 0..h {
            if target[i * h + j].is_nan() {
                let e: f64 = rng.sample(StandardNormal);
                out.push(mean[i * h + j] + psi[j].sqrt() * e);
            }
        }
    }
    out
}

/// Stream for block `block` of chain `chain` at iteration `iter`.
pub fn block_rng(seed: u64, chain: u64, block: u64, iter: u64) -> SfRng {
    stream_rng(seed, &[chain, block, iter])
}

pub fn latent_path(chain: u64, iter: u64) -> [u64; 3] {
    [chain, stream::LATENT, iter]
}
