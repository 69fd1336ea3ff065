//! Parameter containers, identifiability constraints, priors and
//! initialization shared by both model stages.
//!
//! Latent matrices (`w`, `v`) are row-major `n×q` with rows in the ordered
//! position of their location set. Loading matrices are row-major
//! `outcomes×factors`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::SpatialDataset;
use crate::error::{Result, SfError};
use crate::geometry::{dist, nearest_neighbors, LocationSet, Point};
use crate::linalg::{backward_solve_t, cholesky_in_place, forward_solve};
use crate::rng::{stream, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaPrior {
    Flat,
    /// Independent `N(mean, var)` on every coefficient.
    Normal { mean: f64, var: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    /// Half-t degrees of freedom.
    pub nu: f64,
    /// Half-t scale.
    pub a_scale: f64,
    /// Decay support per factor.
    pub phi_support: Vec<(f64, f64)>,
    pub beta: BetaPrior,
}

pub const DEFAULT_NU: f64 = 3.0;
pub const DEFAULT_A: f64 = 100.0;

impl PriorConfig {
    pub fn new(q: usize, support: (f64, f64)) -> Self {
        Self {
            nu: DEFAULT_NU,
            a_scale: DEFAULT_A,
            phi_support: vec![support; q],
            beta: BetaPrior::Flat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(SfError::Config(format!("nu must be positive, got {}", self.nu)));
        }
        if !(self.a_scale > 0.0) {
            return Err(SfError::Config(format!("A must be positive, got {}", self.a_scale)));
        }
        for (k, &(lo, hi)) in self.phi_support.iter().enumerate() {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(SfError::Config(format!("decay support {k} is ({lo}, {hi})")));
            }
        }
        if let BetaPrior::Normal { var, .. } = self.beta {
            if !(var > 0.0) {
                return Err(SfError::Config("beta prior variance must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Largest pairwise distance, found exactly from the convex hull.
pub fn max_pairwise_distance(coords: &[Point]) -> f64 {
    let mut pts: Vec<Point> = coords.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 2 {
        return 0.0;
    }
    let cross = |o: &Point, a: &Point, b: &Point| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    let mut best = 0.0f64;
    for a in 0..hull.len() {
        for b in (a + 1)..hull.len() {
            best = best.max(dist(&hull[a], &hull[b]));
        }
    }
    best
}

/// Smallest pairwise distance: the closest pair is always realised by some
/// location and its nearest predecessor in the ordering.
pub fn min_pairwise_distance(locs: &LocationSet) -> Result<f64> {
    let ordered = locs.ordered_coords();
    let g = nearest_neighbors(&ordered, 1)?;
    Ok((1..ordered.len())
        .map(|i| dist(&ordered[i], &ordered[g.neighbors(i)[0]]))
        .fold(f64::INFINITY, f64::min))
}

pub fn phi_support_from_distances(zeta_min: f64, zeta_max: f64) -> (f64, f64) {
    (-(0.05f64.ln()) / zeta_max, -(0.01f64.ln()) / zeta_min)
}

/// Decay support: correlation 0.05 at the largest distance, 0.01 at the smallest.
pub fn default_phi_support(locs: &LocationSet) -> Result<(f64, f64)> {
    if locs.len() < 2 {
        return Err(SfError::Config("decay support needs at least two locations".into()));
    }
    Ok(phi_support_from_distances(
        min_pairwise_distance(locs)?,
        max_pairwise_distance(locs.coords()),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1State {
    pub n: usize,
    pub h: usize,
    pub q: usize,
    pub beta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub psi: Vec<f64>,
    pub a: Vec<f64>,
    pub phi: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2State {
    pub n: usize,
    pub h: usize,
    pub q_w: usize,
    pub q_v: usize,
    pub beta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub psi: Vec<f64>,
    pub a: Vec<f64>,
    pub phi: Vec<f64>,
    pub v: Vec<f64>,
}

pub enum StateRef<'a> {
    Stage1(&'a Stage1State),
    Stage2(&'a Stage2State),
}

fn check_positive(name: &str, xs: &[f64], out: &mut Vec<String>) {
    for (j, &x) in xs.iter().enumerate() {
        if !(x > 0.0 && x.is_finite()) {
            out.push(format!("{name} nonpositive at {j}"));
        }
    }
}

fn check_support(name: &str, phi: &[f64], prior: &PriorConfig, out: &mut Vec<String>) {
    if prior.phi_support.len() != phi.len() {
        out.push(format!("{name} has {} entries but {} supports", phi.len(), prior.phi_support.len()));
        return;
    }
    for (k, (&p, &(lo, hi))) in phi.iter().zip(&prior.phi_support).enumerate() {
        if !(p > lo && p < hi) {
            out.push(format!("{name} outside support at {k}"));
        }
    }
}

fn check_finite(name: &str, xs: &[f64], out: &mut Vec<String>) {
    if let Some(k) = xs.iter().position(|x| !x.is_finite()) {
        out.push(format!("{name} non-finite at {k}"));
    }
}

/// Every violated invariant with its location; empty when the state is valid.
pub fn validate_state(state: StateRef<'_>, prior: &PriorConfig) -> Vec<String> {
    let mut out = Vec::new();
    match state {
        StateRef::Stage1(s) => {
            for j in 0..s.h {
                for k in 0..s.q {
                    let v = s.lambda[j * s.q + k];
                    if k > j && v != 0.0 {
                        out.push(format!("Lambda_z upper-triangle nonzero at ({j},{k})"));
                    }
                    if k == j && v != 1.0 {
                        out.push(format!("Lambda_z diagonal not one at ({j},{k})"));
                    }
                }
            }
            check_finite("Lambda_z", &s.lambda, &mut out);
            check_finite("W", &s.w, &mut out);
            for (j, b) in s.beta.iter().enumerate() {
                check_finite(&format!("beta_z[{j}]"), b, &mut out);
            }
            check_positive("Psi_z", &s.psi, &mut out);
            check_positive("a_z", &s.a, &mut out);
            check_support("phi_w", &s.phi, prior, &mut out);
        }
        StateRef::Stage2(s) => {
            for j in 0..s.h {
                for k in 0..s.q_v {
                    let v = s.gamma[j * s.q_v + k];
                    if k > j && v != 0.0 {
                        out.push(format!("Gamma upper-triangle nonzero at ({j},{k})"));
                    }
                    if k == j && !(v > 0.0) {
                        out.push(format!("Gamma diagonal nonpositive at ({j},{k})"));
                    }
                }
            }
            check_finite("Lambda_y", &s.lambda, &mut out);
            check_finite("Gamma", &s.gamma, &mut out);
            check_finite("V", &s.v, &mut out);
            for (j, b) in s.beta.iter().enumerate() {
                check_finite(&format!("beta_y[{j}]"), b, &mut out);
            }
            check_positive("Psi_y", &s.psi, &mut out);
            check_positive("a_y", &s.a, &mut out);
            check_support("phi_v", &s.phi, prior, &mut out);
        }
    }
    out
}

/// Least squares of outcome `j` on its predictors over observed rows.
/// Returns coefficients and the residual sum of squares.
pub fn outcome_least_squares(data: &SpatialDataset, j: usize) -> Result<(Vec<f64>, f64, usize)> {
    let p = data.p(j);
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut count = 0;
    for i in 0..data.n() {
        if !data.is_observed(i, j) {
            continue;
        }
        count += 1;
        let x = data.x_row(j, i);
        let z = data.value(i, j);
        for a in 0..p {
            xty[a] += x[a] * z;
            for b in 0..=a {
                xtx[a * p + b] += x[a] * x[b];
            }
        }
    }
    let name = &data.outcome_names[j];
    if count < p {
        return Err(SfError::Init(format!(
            "outcome '{name}' has {count} observed rows but {p} predictors"
        )));
    }
    cholesky_in_place(&mut xtx, p)
        .map_err(|_| SfError::Init(format!("predictors for outcome '{name}' are rank deficient")))?;
    forward_solve(&xtx, p, &mut xty);
    backward_solve_t(&xtx, p, &mut xty);
    let mut ssr = 0.0;
    for i in 0..data.n() {
        if data.is_observed(i, j) {
            let fit: f64 = data.x_row(j, i).iter().zip(&xty).map(|(x, b)| x * b).sum();
            let r = data.value(i, j) - fit;
            ssr += r * r;
        }
    }
    Ok((xty, ssr, count))
}

fn init_common(data: &SpatialDataset) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut beta = Vec::with_capacity(data.h());
    let mut psi = Vec::with_capacity(data.h());
    for j in 0..data.h() {
        let (b, ssr, count) = outcome_least_squares(data, j)?;
        let dof = (count - data.p(j)).max(1) as f64;
        psi.push((0.5 * ssr / dof).max(1e-8));
        beta.push(b);
    }
    Ok((beta, psi))
}

fn midpoints(prior: &PriorConfig) -> Vec<f64> {
    prior.phi_support.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect()
}

/// Least-squares coefficients, small random free loadings, half the residual
/// variance as nugget, mid-support decays, zero latents.
pub fn init_stage1(data: &SpatialDataset, q: usize, prior: &PriorConfig, seed: u64, chain: u64) -> Result<Stage1State> {
    if q == 0 {
        return Err(SfError::Config("stage 1 needs at least one factor".into()));
    }
    if prior.phi_support.len() != q {
        return Err(SfError::Config(format!("{} decay supports for {q} factors", prior.phi_support.len())));
    }
    let (beta, psi) = init_common(data)?;
    let h = data.h();
    let mut rng = stream_rng(seed, &[chain, stream::INIT, 1]);
    let mut lambda = vec![0.0; h * q];
    for j in 0..h {
        for k in 0..q.min(j + 1) {
            lambda[j * q + k] = if k == j {
                1.0
            } else {
                0.1 * rng.sample::<f64, _>(StandardNormal)
            };
        }
    }
    Ok(Stage1State {
        n: data.n(),
        h,
        q,
        beta,
        lambda,
        a: vec![1.0; h],
        psi,
        phi: midpoints(prior),
        w: vec![0.0; data.n() * q],
    })
}

pub fn init_stage2(
    data: &SpatialDataset,
    q_w: usize,
    q_v: usize,
    prior: &PriorConfig,
    seed: u64,
    chain: u64,
) -> Result<Stage2State> {
    if prior.phi_support.len() != q_v {
        return Err(SfError::Config(format!("{} decay supports for {q_v} factors", prior.phi_support.len())));
    }
    let (beta, psi) = init_common(data)?;
    let h = data.h();
    let mut rng = stream_rng(seed, &[chain, stream::INIT, 2]);
    let lambda = (0..h * q_w)
        .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut gamma = vec![0.0; h * q_v];
    for j in 0..h {
        for k in 0..q_v.min(j + 1) {
            gamma[j * q_v + k] = if k == j {
                1.0
            } else {
                0.1 * rng.sample::<f64, _>(StandardNormal)
            };
        }
    }
    Ok(Stage2State {
        n: data.n(),
        h,
        q_w,
        q_v,
        beta,
        lambda,
        gamma,
        a: vec![1.0; h],
        psi,
        phi: midpoints(prior),
        v: vec![0.0; data.n() * q_v],
    })
}
