//! Synthetic datasets from the two-stage factor model with known truth.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::archive::ChainArchive;
use crate::covariance::{dense_corr_matrix, nngp_factorize_coords, CorrelationKernel, DENSE_LIMIT};
use crate::dataset::{Design, SpatialDataset, INTERCEPT};
use crate::error::{Result, SfError};
use crate::geometry::{nearest_neighbors, LocationSet, Point};
use crate::model::max_pairwise_distance;
use crate::rng::{stream, stream_rng, SfRng};

/// Neighbor count of the process used for truth factors above [`DENSE_LIMIT`].
pub const TRUTH_NNGP_M: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct SimSpec {
    pub n: usize,
    pub h_z: usize,
    pub q: usize,
    /// Coefficients per outcome, intercept included.
    pub p: usize,
    /// Factor decays; drawn when `None`.
    pub phi: Option<Vec<f64>>,
    pub psi_range: (f64, f64),
    pub beta_sd: f64,
    /// Fitting locations with every outcome missing.
    pub n_missing: usize,
    /// Locations withheld from fitting.
    pub n_holdout: usize,
    pub h_y: usize,
    pub q_v: usize,
    /// Fitting locations carrying second-stage outcomes; `None` means every
    /// fitting location that is not fully missing.
    pub n_y: Option<usize>,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n: 500,
            h_z: 6,
            q: 2,
            p: 3,
            phi: None,
            psi_range: (0.1, 0.5),
            beta_sd: 2.0,
            n_missing: 0,
            n_holdout: 0,
            h_y: 0,
            q_v: 0,
            n_y: None,
            seed: 1,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SfError::Config(m));
        if self.q == 0 || self.q > self.h_z {
            return bad(format!("need 1 ≤ q ≤ h_z, got q={} h_z={}", self.q, self.h_z));
        }
        if self.q_v > self.h_y {
            return bad(format!("q_v={} exceeds h_y={}", self.q_v, self.h_y));
        }
        if self.p == 0 {
            return bad("p must include at least the intercept".into());
        }
        if self.n_missing + self.n_holdout + self.p > self.n {
            return bad(format!(
                "{} locations cannot hold {} missing and {} holdout rows",
                self.n, self.n_missing, self.n_holdout
            ));
        }
        let (lo, hi) = self.psi_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("nugget range ({lo}, {hi}) invalid"));
        }
        if let Some(phi) = &self.phi {
            if phi.len() != self.q || phi.iter().any(|&p| !(p > 0.0)) {
                return bad("phi must list one positive decay per factor".into());
            }
        }
        Ok(())
    }
}

/// True parameter values; latent matrices cover every generated location in
/// storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub q: usize,
    pub beta_z: Vec<Vec<f64>>,
    pub lambda_z: Vec<f64>,
    pub phi_w: Vec<f64>,
    pub psi_z: Vec<f64>,
    pub w: Vec<f64>,
    pub q_v: usize,
    pub beta_y: Vec<Vec<f64>>,
    pub lambda_y: Vec<f64>,
    pub gamma: Vec<f64>,
    pub phi_v: Vec<f64>,
    pub psi_y: Vec<f64>,
    pub v: Vec<f64>,
    pub latent_method: String,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    /// Every location with complete noisy outcomes.
    pub full_z: SpatialDataset,
    pub full_y: Option<SpatialDataset>,
    pub fit_rows: Vec<usize>,
    pub holdout_rows: Vec<usize>,
    pub missing_rows: Vec<usize>,
    pub y_rows: Vec<usize>,
    pub truth: Truth,
}

/// One exact draw from the zero-mean, unit-variance process at `coords`.
pub fn dense_gp_sample<R: Rng + ?Sized>(coords: &[Point], kernel: &CorrelationKernel, rng: &mut R) -> Result<Vec<f64>> {
    let n = coords.len();
    let c = dense_corr_matrix(coords, kernel)?;
    let l = c
        .cholesky()
        .ok_or_else(|| SfError::Factorization {
            location: 0,
            msg: "dense correlation matrix not positive definite".into(),
        })?
        .unpack();
    let e = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((l * e).iter().copied().collect())
}

/// Draw from the nearest-neighbor process in ordered position.
fn nngp_sample<R: Rng + ?Sized>(locs: &LocationSet, m: usize, kernel: &CorrelationKernel, rng: &mut R) -> Result<Vec<f64>> {
    let ordered = locs.ordered_coords();
    let g = nearest_neighbors(&ordered, m)?;
    let fac = nngp_factorize_coords(&g, &ordered, kernel)?;
    let mut w = vec![0.0; ordered.len()];
    for i in 0..ordered.len() {
        let mean: f64 = g.neighbors(i).iter().zip(fac.weights(&g, i)).map(|(&j, b)| b * w[j]).sum();
        w[i] = mean + fac.f[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    let mut out = vec![0.0; w.len()];
    for (k, &s) in locs.order().iter().enumerate() {
        out[s] = w[k];
    }
    Ok(out)
}

fn latent_columns(locs: &LocationSet, phi: &[f64], seed: u64, tag: u64) -> Result<(Vec<f64>, &'static str)> {
    let n = locs.len();
    let q = phi.len();
    let dense = n <= DENSE_LIMIT;
    let cols = phi
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let mut rng = stream_rng(seed, &[stream::SIMULATE, tag, k as u64]);
            let kernel = CorrelationKernel::exponential(p)?;
            if dense {
                dense_gp_sample(locs.coords(), &kernel, &mut rng)
            } else {
                nngp_sample(locs, TRUTH_NNGP_M, &kernel, &mut rng)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; n * q];
    for (k, col) in cols.iter().enumerate() {
        for i in 0..n {
            out[i * q + k] = col[i];
        }
    }
    Ok((out, if dense { "dense" } else { "nngp40" }))
}

fn normal(rng: &mut SfRng, sd: f64) -> f64 {
    sd * rng.sample::<f64, _>(StandardNormal)
}

/// Loadings with zero upper triangle; diagonal from `diag`, the rest `N(0,1)`.
fn triangular(h: usize, q: usize, rng: &mut SfRng, diag: impl Fn(&mut SfRng) -> f64) -> Vec<f64> {
    let mut l = vec![0.0; h * q];
    for j in 0..h {
        for k in 0..q.min(j + 1) {
            l[j * q + k] = if k == j { diag(rng) } else { normal(rng, 1.0) };
        }
    }
    l
}

/// Decays with effective range (distance at correlation 0.05) uniform in
/// `[0.1, 0.5]` of the largest inter-location distance.
pub fn default_true_phi(coords: &[Point], q: usize, rng: &mut SfRng) -> Vec<f64> {
    let zmax = max_pairwise_distance(coords);
    let (lo, hi) = (3.0 / (0.5 * zmax), 3.0 / (0.1 * zmax));
    (0..q).map(|_| rng.random_range(lo..hi)).collect()
}

fn outcome_values(
    n: usize,
    h: usize,
    q: usize,
    x: &[f64],
    p: usize,
    beta: &[Vec<f64>],
    load: &[f64],
    latent: &[f64],
    psi: &[f64],
    rng: &mut SfRng,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * h);
    for i in 0..n {
        let xi = &x[i * p..(i + 1) * p];
        for j in 0..h {
            let mut v: f64 = xi.iter().zip(&beta[j]).map(|(a, b)| a * b).sum();
            for k in 0..q {
                v += load[j * q + k] * latent[i * q + k];
            }
            out.push(v + normal(rng, psi[j].sqrt()));
        }
    }
    out
}

pub fn generate_dataset(spec: &SimSpec) -> Result<SimOutput> {
    spec.validate()?;
    let n = spec.n;
    let seed = spec.seed;
    let mut rng = stream_rng(seed, &[stream::SIMULATE, 0]);
    let coords: Vec<Point> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let locs = LocationSet::new(coords, ids)?;
    let p = spec.p;
    let mut names = vec![INTERCEPT.to_string()];
    names.extend((1..p).map(|k| format!("x{k}")));
    let mut x = Vec::with_capacity(n * p);
    for _ in 0..n {
        x.push(1.0);
        for _ in 1..p {
            x.push(normal(&mut rng, 1.0));
        }
    }

    let mut prng = stream_rng(seed, &[stream::SIMULATE, 2]);
    let phi_w = match &spec.phi {
        Some(phi) => phi.clone(),
        None => default_true_phi(locs.coords(), spec.q, &mut prng),
    };
    let beta_z: Vec<Vec<f64>> = (0..spec.h_z)
        .map(|_| (0..p).map(|_| normal(&mut prng, spec.beta_sd)).collect())
        .collect();
    let lambda_z = triangular(spec.h_z, spec.q, &mut prng, |_| 1.0);
    let (plo, psi_hi) = spec.psi_range;
    let psi_z: Vec<f64> = (0..spec.h_z)
        .map(|_| if psi_hi > plo { prng.random_range(plo..psi_hi) } else { plo })
        .collect();
    let (w, method) = latent_columns(&locs, &phi_w, seed, 1)?;
    let mut nrng = stream_rng(seed, &[stream::SIMULATE, 3]);
    let z = outcome_values(n, spec.h_z, spec.q, &x, p, &beta_z, &lambda_z, &w, &psi_z, &mut nrng);
    let design = Design {
        names: names.clone(),
        x: x.clone(),
    };
    let full_z = SpatialDataset::new(
        locs.clone(),
        (1..=spec.h_z).map(|j| format!("z{j}")).collect(),
        z,
        vec![design.clone()],
        vec![0; spec.h_z],
    )?;

    let mut mrng = stream_rng(seed, &[stream::SIMULATE, 4]);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut mrng);
    let mut holdout_rows = perm[..spec.n_holdout].to_vec();
    let mut missing_rows = perm[spec.n_holdout..spec.n_holdout + spec.n_missing].to_vec();
    let mut fit_rows = perm[spec.n_holdout..].to_vec();
    let mut y_pool = perm[spec.n_holdout + spec.n_missing..].to_vec();
    let n_y = spec.n_y.unwrap_or(y_pool.len()).min(y_pool.len());
    y_pool.truncate(n_y);
    let mut y_rows = y_pool;
    for v in [&mut holdout_rows, &mut missing_rows, &mut fit_rows, &mut y_rows] {
        v.sort_unstable();
    }

    let mut yrng = stream_rng(seed, &[stream::SIMULATE, 6]);
    let (mut beta_y, mut lambda_y, mut gamma, mut phi_v, mut psi_y, mut v) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut full_y = None;
    if spec.h_y > 0 {
        beta_y = (0..spec.h_y)
            .map(|_| (0..p).map(|_| normal(&mut yrng, spec.beta_sd)).collect())
            .collect();
        lambda_y = (0..spec.h_y * spec.q).map(|_| normal(&mut yrng, 1.0)).collect();
        gamma = triangular(spec.h_y, spec.q_v, &mut yrng, |r| r.random_range(0.5..1.5));
        phi_v = default_true_phi(locs.coords(), spec.q_v, &mut yrng);
        psi_y = (0..spec.h_y)
            .map(|_| if psi_hi > plo { yrng.random_range(plo..psi_hi) } else { plo })
            .collect();
        v = if spec.q_v > 0 {
            latent_columns(&locs, &phi_v, seed, 5)?.0
        } else {
            Vec::new()
        };
        let mut vals = outcome_values(n, spec.h_y, spec.q, &x, p, &beta_y, &lambda_y, &w, &psi_y, &mut yrng);
        if spec.q_v > 0 {
            for i in 0..n {
                for j in 0..spec.h_y {
                    for k in 0..spec.q_v {
                        vals[i * spec.h_y + j] += gamma[j * spec.q_v + k] * v[i * spec.q_v + k];
                    }
                }
            }
        }
        full_y = Some(SpatialDataset::new(
            locs,
            (1..=spec.h_y).map(|j| format!("y{j}")).collect(),
            vals,
            vec![design],
            vec![0; spec.h_y],
        )?);
    }

    Ok(SimOutput {
        full_z,
        full_y,
        fit_rows,
        holdout_rows,
        missing_rows,
        y_rows,
        truth: Truth {
            q: spec.q,
            beta_z,
            lambda_z,
            phi_w,
            psi_z,
            w,
            q_v: spec.q_v,
            beta_y,
            lambda_y,
            gamma,
            phi_v,
            psi_y,
            v,
            latent_method: method.to_string(),
        },
    })
}

impl SimOutput {
    /// Fitting dataset: every non-holdout location, missing rows set to NA.
    pub fn data_z(&self) -> Result<SpatialDataset> {
        let mut d = self.full_z.subset(&self.fit_rows)?;
        let h = d.h();
        for (k, r) in self.fit_rows.iter().enumerate() {
            if self.missing_rows.binary_search(r).is_ok() {
                d.values[k * h..(k + 1) * h].fill(f64::NAN);
            }
        }
        Ok(d)
    }

    pub fn holdout_z(&self) -> Result<SpatialDataset> {
        self.full_z.subset(&self.holdout_rows)
    }

    pub fn data_y(&self) -> Result<Option<SpatialDataset>> {
        self.full_y.as_ref().map(|y| y.subset(&self.y_rows)).transpose()
    }

    pub fn holdout_y(&self) -> Result<Option<SpatialDataset>> {
        self.full_y.as_ref().map(|y| y.subset(&self.holdout_rows)).transpose()
    }

    /// Truth as a single-draw archive over every generated location.
    pub fn truth_archive(&self) -> Result<ChainArchive> {
        let t = &self.truth;
        let n = self.full_z.n();
        let hz = self.full_z.h();
        let hy = self.full_y.as_ref().map_or(0, |y| y.h());
        let mean_z = noiseless(&self.full_z, &t.beta_z, &t.lambda_z, &t.w, t.q, &[], &[], 0);
        let mean_y = match &self.full_y {
            Some(y) => noiseless(y, &t.beta_y, &t.lambda_y, &t.w, t.q, &t.gamma, &t.v, t.q_v),
            None => Vec::new(),
        };
        let mut ar = ChainArchive::new(&[
            ("beta_z", t.beta_z.iter().map(Vec::len).sum()),
            ("lambda_z", hz * t.q),
            ("phi_w", t.q),
            ("psi_z", hz),
            ("w", n * t.q),
            ("mean_z", n * hz),
            ("beta_y", t.beta_y.iter().map(Vec::len).sum()),
            ("lambda_y", hy * t.q),
            ("gamma", hy * t.q_v),
            ("phi_v", t.q_v),
            ("psi_y", hy),
            ("v", n * t.q_v),
            ("mean_y", n * hy),
        ]);
        ar.push_draw(&[
            &t.beta_z.concat(),
            &t.lambda_z,
            &t.phi_w,
            &t.psi_z,
            &t.w,
            &mean_z,
            &t.beta_y.concat(),
            &t.lambda_y,
            &t.gamma,
            &t.phi_v,
            &t.psi_y,
            &t.v,
            &mean_y,
        ])?;
        ar.set_meta("kind", "truth");
        ar.set_meta("q", t.q);
        ar.set_meta("q_v", t.q_v);
        ar.set_meta("h_z", hz);
        ar.set_meta("h_y", hy);
        ar.set_meta("latent_method", &t.latent_method);
        ar.location_ids = self.full_z.locs.ids().to_vec();
        ar.location_coords = self.full_z.coords().to_vec();
        Ok(ar)
    }
}

#[allow(clippy::too_many_arguments)]
fn noiseless(
    d: &SpatialDataset,
    beta: &[Vec<f64>],
    lambda: &[f64],
    w: &[f64],
    q: usize,
    gamma: &[f64],
    v: &[f64],
    q_v: usize,
) -> Vec<f64> {
    let (n, h) = (d.n(), d.h());
    let mut out = Vec::with_capacity(n * h);
    for i in 0..n {
        for j in 0..h {
            let mut s: f64 = d.x_row(j, i).iter().zip(&beta[j]).map(|(a, b)| a * b).sum();
            for k in 0..q {
                s += lambda[j * q + k] * w[i * q + k];
            }
            for k in 0..q_v {
                s += gamma[j * q_v + k] * v[i * q_v + k];
            }
            out.push(s);
        }
    }
    out
}
