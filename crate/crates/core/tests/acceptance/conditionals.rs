//! Every sampler update on a five-location toy model against the full
//! conditional obtained by quadrature of an independently written joint
//! density.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sfnngp::dataset::{Design, SpatialDataset, INTERCEPT};
use sfnngp::geometry::LocationSet;
use sfnngp::linalg::sample_canonical;
use sfnngp::model::BetaPrior;
use sfnngp::sampler::updates::*;

use crate::common::*;

pub const DRAWS: usize = 50_000;
const NAN: f64 = f64::NAN;

const COORDS: [Pt; 5] = [[0.1, 0.2], [0.5, 0.1], [0.3, 0.6], [0.8, 0.7], [0.6, 0.4]];
const M: usize = 2;
const NU: f64 = 10.0;
const A_SCALE: f64 = 2.0;
const SUPPORT: (f64, f64) = (1.0, 20.0);

/// Stage-1 toy: two outcomes, one factor, intercept only. Row 2 is fully
/// missing and row 3 partially.
#[derive(Clone)]
struct Toy1 {
    z: [[f64; 2]; 5],
    beta: [f64; 2],
    lam: [f64; 2],
    psi: [f64; 2],
    a: [f64; 2],
    phi: f64,
    w: [f64; 5],
}

fn toy1() -> Toy1 {
    Toy1 {
        z: [[0.8, -0.3], [1.1, 0.4], [NAN, NAN], [0.2, NAN], [-0.5, -1.0]],
        beta: [0.3, -0.2],
        lam: [1.0, 0.7],
        psi: [0.4, 0.6],
        a: [1.2, 0.8],
        phi: 4.0,
        w: [0.2, -0.4, 0.1, 0.5, -0.3],
    }
}

fn nugget_prior(psi: f64, a: f64) -> f64 {
    inv_gamma_logpdf(psi, NU / 2.0, NU / a) + inv_gamma_logpdf(a, 0.5, 1.0 / (A_SCALE * A_SCALE))
}

fn in_support(phi: f64) -> f64 {
    if phi > SUPPORT.0 && phi < SUPPORT.1 {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

impl Toy1 {
    fn log_joint(&self) -> f64 {
        if self.psi.iter().chain(&self.a).any(|&v| v <= 0.0) {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        for i in 0..5 {
            for j in 0..2 {
                let z = self.z[i][j];
                if !z.is_nan() {
                    lp += normal_logpdf(z, self.beta[j] + self.lam[j] * self.w[i], self.psi[j]);
                }
            }
        }
        lp += nngp_logpdf(&COORDS, &self.w, M, self.phi);
        lp += normal_logpdf(self.lam[1], 0.0, 1.0);
        for j in 0..2 {
            lp += nugget_prior(self.psi[j], self.a[j]);
        }
        lp + in_support(self.phi)
    }

    fn with(&self, f: impl Fn(&mut Toy1)) -> Toy1 {
        let mut t = self.clone();
        f(&mut t);
        t
    }
}

/// Stage-2 toy on the same locations: the factor `w` is fixed, one
/// outcome-specific factor `v`, row 2 partially missing.
#[derive(Clone)]
struct Toy2 {
    y: [[f64; 2]; 5],
    w: [f64; 5],
    beta: [f64; 2],
    lam: [f64; 2],
    gamma: [f64; 2],
    psi: [f64; 2],
    a: [f64; 2],
    phi: f64,
    v: [f64; 5],
}

fn toy2() -> Toy2 {
    Toy2 {
        y: [[1.5, 0.2], [0.7, -0.6], [0.9, NAN], [-0.4, 0.3], [0.1, 1.2]],
        w: toy1().w,
        beta: [0.5, 0.1],
        lam: [0.8, -0.6],
        gamma: [0.9, 0.4],
        psi: [0.3, 0.5],
        a: [1.0, 1.5],
        phi: 6.0,
        v: [0.1, 0.3, -0.2, 0.4, -0.1],
    }
}

impl Toy2 {
    fn log_joint(&self) -> f64 {
        if self.psi.iter().chain(&self.a).any(|&v| v <= 0.0) || self.gamma[0] <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        for i in 0..5 {
            for j in 0..2 {
                let y = self.y[i][j];
                if !y.is_nan() {
                    let mean = self.beta[j] + self.lam[j] * self.w[i] + self.gamma[j] * self.v[i];
                    lp += normal_logpdf(y, mean, self.psi[j]);
                }
            }
        }
        lp += nngp_logpdf(&COORDS, &self.v, M, self.phi);
        for j in 0..2 {
            lp += normal_logpdf(self.lam[j], 0.0, self.psi[j]);
            lp += nugget_prior(self.psi[j], self.a[j]);
        }
        // diagonal loading: flat on the positive half-line
        lp += normal_logpdf(self.gamma[1], 0.0, 1.0);
        lp + in_support(self.phi)
    }

    fn with(&self, f: impl Fn(&mut Toy2)) -> Toy2 {
        let mut t = self.clone();
        f(&mut t);
        t
    }
}

fn dataset(values: &[[f64; 2]; 5]) -> SpatialDataset {
    let locs = LocationSet::from_coords(COORDS.to_vec()).unwrap();
    let design = Design {
        names: vec![INTERCEPT.to_string()],
        x: vec![1.0; 5],
    };
    SpatialDataset::new(
        locs,
        vec!["o1".into(), "o2".into()],
        values.iter().flatten().copied().collect(),
        vec![design],
        vec![0, 0],
    )
    .unwrap()
}

fn flat<const N: usize>(rows: &[[f64; 2]; N]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// One check: name, z-score of the mean, z-score of the variance.
pub struct Check {
    pub name: String,
    pub z_mean: f64,
    pub z_var: f64,
    pub sample: (f64, f64),
    pub oracle: Moments,
}

fn check(name: impl Into<String>, draws: &[f64], oracle: Moments) -> Check {
    check_with(name, draws, oracle, moment_z)
}

fn check_with(name: impl Into<String>, draws: &[f64], oracle: Moments, z: fn(&[f64], Moments) -> (f64, f64)) -> Check {
    let (z_mean, z_var) = z(draws, oracle);
    let (mean, _, var, _) = iid_se(draws);
    Check {
        name: name.into(),
        z_mean,
        z_var,
        sample: (mean, var),
        oracle,
    }
}

/// Oracle moments of `a_new` after one nugget step: `ψ' ~ p(ψ | a_old)`,
/// then `a' ~ p(a | ψ')`. Outer quadrature over ψ, inner over `a`.
fn two_step_moments(psi_logf: impl Fn(f64) -> f64, a_logf: impl Fn(f64, f64) -> f64) -> Moments {
    let psi_m = grid_moments(&psi_logf, Domain::Positive);
    let sd = psi_m.var.sqrt();
    let lo = (psi_m.mean - 12.0 * sd).max(psi_m.mean * 1e-3);
    let hi = psi_m.mean + 40.0 * sd;
    let k = 2000;
    let hstep = (hi - lo) / k as f64;
    let lv: Vec<f64> = (0..=k).map(|t| psi_logf(lo + t as f64 * hstep)).collect();
    let mx = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (t, v) in lv.iter().enumerate() {
        let wgt = if t == 0 || t == k {
            1.0
        } else if t % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let p = wgt * (v - mx).exp();
        if p < 1e-300 {
            continue;
        }
        let psi = lo + t as f64 * hstep;
        let inner = grid_moments_sized(|a| a_logf(psi, a), Domain::Positive, 20_000, 4_000);
        s0 += p;
        s1 += p * inner.mean;
        s2 += p * (inner.var + inner.mean * inner.mean);
    }
    let mean = s1 / s0;
    Moments {
        mean,
        var: s2 / s0 - mean * mean,
    }
}

fn latent_draws(
    i: usize,
    latent: &[f64],
    proc: &LatentProcess<'_>,
    obs: &Observation<'_>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let gram = obs.full_gram(1);
    (0..DRAWS)
        .map(|_| {
            let (mut p, mut h) = ([0.0], [0.0]);
            latent_site_system(i, latent, proc, obs, &gram, &mut p, &mut h);
            sample_canonical(&mut p, &mut h, 1, rng).unwrap();
            h[0]
        })
        .collect()
}

fn phi_chain(proc: &mut LatentProcess<'_>, start: f64, latent: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut phi = [start];
    let mut out = Vec::with_capacity(DRAWS);
    for t in 0..DRAWS + 2_000 {
        update_phi(proc, &mut phi, 0, latent, SUPPORT, 4.0, rng).unwrap();
        if t >= 2_000 {
            out.push(phi[0]);
        }
    }
    out
}

pub fn stage1_checks(seed: u64) -> Vec<Check> {
    let s = toy1();
    let data = dataset(&s.z);
    let od = OrderedData::new(&data, &[0, 1, 2, 3, 4]).unwrap();
    let geo = SharedGeometry::new(&COORDS, M).unwrap();
    let mut proc = LatentProcess::new(&geo, &[s.phi]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = flat(&s.z);
    let beta: Vec<Vec<f64>> = s.beta.iter().map(|&b| vec![b]).collect();
    let xb = od.xb(&beta);
    let lw = loading_product(&s.w, &s.lam, 5, 2, 1);
    let mut out = Vec::new();

    let target: Vec<f64> = z.iter().zip(&xb).map(|(a, b)| a - b).collect();
    let obs = Observation {
        h: 2,
        loadings: &s.lam,
        psi: &s.psi,
        target: &target,
    };
    for i in 0..5 {
        let d = latent_draws(i, &s.w, &proc, &obs, &mut rng);
        let o = grid_moments(|x| s.with(|t| t.w[i] = x).log_joint(), Domain::Real);
        out.push(check(format!("stage1 latent site {i}"), &d, o));
    }

    let resid: Vec<f64> = z.iter().zip(&lw).map(|(a, b)| a - b).collect();
    let mut b = beta.clone();
    let mut draws = [Vec::new(), Vec::new()];
    for _ in 0..DRAWS {
        update_beta(&mut b, &od, &resid, &s.psi, BetaPrior::Flat, &mut rng).unwrap();
        draws[0].push(b[0][0]);
        draws[1].push(b[1][0]);
    }
    for j in 0..2 {
        let o = grid_moments(|x| s.with(|t| t.beta[j] = x).log_joint(), Domain::Real);
        out.push(check(format!("stage1 coefficient {j}"), &draws[j], o));
    }

    let mut lam = s.lam;
    let d: Vec<f64> = (0..DRAWS)
        .map(|_| {
            update_loadings(&mut lam, 2, 1, LoadingForm::UnitLowerTriangular, &s.w, &target, &od.obs_rows, &s.psi, &mut rng)
                .unwrap();
            lam[1]
        })
        .collect();
    let o = grid_moments(|x| s.with(|t| t.lam[1] = x).log_joint(), Domain::Real);
    out.push(check("stage1 loading (1,0)", &d, o));

    let ssr = residual_ss(&target, &lw, 2);
    let mut pd = [Vec::new(), Vec::new()];
    let mut ad = [Vec::new(), Vec::new()];
    for _ in 0..DRAWS {
        let (mut psi, mut a) = (s.psi, s.a);
        update_psi(&mut psi, &mut a, &ssr, &od.n_obs(), NU, A_SCALE, &mut rng);
        for j in 0..2 {
            pd[j].push(psi[j]);
            ad[j].push(a[j]);
        }
    }
    for j in 0..2 {
        let o = grid_moments(|x| s.with(|t| t.psi[j] = x).log_joint(), Domain::Positive);
        out.push(check(format!("stage1 nugget {j}"), &pd[j], o));
        let o = two_step_moments(
            |x| s.with(|t| t.psi[j] = x).log_joint(),
            |p, x| nugget_prior(p, x),
        );
        out.push(check(format!("stage1 half-t scale {j}"), &ad[j], o));
    }

    let d = phi_chain(&mut proc, s.phi, &s.w, &mut rng);
    let o = grid_moments(|x| s.with(|t| t.phi = x).log_joint(), Domain::Interval(SUPPORT.0, SUPPORT.1));
    out.push(check_with("stage1 decay (Metropolis)", &d, o, chain_moment_z));

    let proc = LatentProcess::new(&geo, &[s.phi]).unwrap();
    let d: Vec<f64> = (0..DRAWS)
        .map(|_| {
            let mut w = s.w;
            let mut b = beta.clone();
            shift_latent_mean(&mut w, 0, &proc, &mut b, &[0, 0], &s.lam, BetaPrior::Flat, &mut rng);
            w[0] - s.w[0]
        })
        .collect();
    let o = grid_moments(
        |c| {
            s.with(|t| {
                for wi in t.w.iter_mut() {
                    *wi += c;
                }
                for j in 0..2 {
                    t.beta[j] -= t.lam[j] * c;
                }
            })
            .log_joint()
        },
        Domain::Real,
    );
    out.push(check("stage1 mean shift", &d, o));
    out
}

pub fn stage2_checks(seed: u64) -> Vec<Check> {
    let s = toy2();
    let data = dataset(&s.y);
    let od = OrderedData::new(&data, &[0, 1, 2, 3, 4]).unwrap();
    let geo = SharedGeometry::new(&COORDS, M).unwrap();
    let mut proc = LatentProcess::new(&geo, &[s.phi]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = flat(&s.y);
    let beta: Vec<Vec<f64>> = s.beta.iter().map(|&b| vec![b]).collect();
    let xb = od.xb(&beta);
    let lw = loading_product(&s.w, &s.lam, 5, 2, 1);
    let gv = loading_product(&s.v, &s.gamma, 5, 2, 1);
    let minus = |offs: &[&[f64]]| -> Vec<f64> {
        let mut r = y.clone();
        for o in offs {
            for (a, b) in r.iter_mut().zip(o.iter()) {
                *a -= b;
            }
        }
        r
    };
    let mut out = Vec::new();

    let target = minus(&[&xb, &lw]);
    let obs = Observation {
        h: 2,
        loadings: &s.gamma,
        psi: &s.psi,
        target: &target,
    };
    for i in 0..5 {
        let d = latent_draws(i, &s.v, &proc, &obs, &mut rng);
        let o = grid_moments(|x| s.with(|t| t.v[i] = x).log_joint(), Domain::Real);
        out.push(check(format!("stage2 latent site {i}"), &d, o));
    }

    let resid = minus(&[&lw, &gv]);
    let mut b = beta.clone();
    let mut draws = [Vec::new(), Vec::new()];
    for _ in 0..DRAWS {
        update_beta(&mut b, &od, &resid, &s.psi, BetaPrior::Flat, &mut rng).unwrap();
        draws[0].push(b[0][0]);
        draws[1].push(b[1][0]);
    }
    for j in 0..2 {
        let o = grid_moments(|x| s.with(|t| t.beta[j] = x).log_joint(), Domain::Real);
        out.push(check(format!("stage2 coefficient {j}"), &draws[j], o));
    }

    let resid = minus(&[&xb, &gv]);
    let mut lam = s.lam;
    let mut draws = [Vec::new(), Vec::new()];
    for _ in 0..DRAWS {
        update_loadings(&mut lam, 2, 1, LoadingForm::FreeScaled, &s.w, &resid, &od.obs_rows, &s.psi, &mut rng).unwrap();
        draws[0].push(lam[0]);
        draws[1].push(lam[1]);
    }
    for j in 0..2 {
        let o = grid_moments(|x| s.with(|t| t.lam[j] = x).log_joint(), Domain::Real);
        out.push(check(format!("stage2 factor loading {j}"), &draws[j], o));
    }

    let mut gamma = s.gamma;
    let mut draws = [Vec::new(), Vec::new()];
    for _ in 0..DRAWS {
        update_gamma(&mut gamma, 2, 1, &s.v, &target, &od.obs_rows, &s.psi, &mut rng).unwrap();
        draws[0].push(gamma[0]);
        draws[1].push(gamma[1]);
    }
    let o = grid_moments(|x| s.with(|t| t.gamma[0] = x).log_joint(), Domain::Positive);
    out.push(check("stage2 specific loading diagonal (truncated)", &draws[0], o));
    let o = grid_moments(|x| s.with(|t| t.gamma[1] = x).log_joint(), Domain::Real);
    out.push(check("stage2 specific loading (1,0)", &draws[1], o));

    let ssr = residual_ss(&target, &gv, 2);
    let mut pd = [Vec::new(), Vec::new()];
    let mut ad = [Vec::new(), Vec::new()];
    for _ in 0..DRAWS {
        let (mut psi, mut a) = (s.psi, s.a);
        update_psi_scaled_loadings(&mut psi, &mut a, &ssr, &od.n_obs(), &s.lam, 1, NU, A_SCALE, &mut rng);
        for j in 0..2 {
            pd[j].push(psi[j]);
            ad[j].push(a[j]);
        }
    }
    for j in 0..2 {
        let o = grid_moments(|x| s.with(|t| t.psi[j] = x).log_joint(), Domain::Positive);
        out.push(check(format!("stage2 nugget {j}"), &pd[j], o));
        let o = two_step_moments(
            |x| s.with(|t| t.psi[j] = x).log_joint(),
            |p, x| nugget_prior(p, x),
        );
        out.push(check(format!("stage2 half-t scale {j}"), &ad[j], o));
    }

    let d = phi_chain(&mut proc, s.phi, &s.v, &mut rng);
    let o = grid_moments(|x| s.with(|t| t.phi = x).log_joint(), Domain::Interval(SUPPORT.0, SUPPORT.1));
    out.push(check_with("stage2 decay (Metropolis)", &d, o, chain_moment_z));

    let proc = LatentProcess::new(&geo, &[s.phi]).unwrap();
    let d: Vec<f64> = (0..DRAWS)
        .map(|_| {
            let mut v = s.v;
            let mut b = beta.clone();
            shift_latent_mean(&mut v, 0, &proc, &mut b, &[0, 0], &s.gamma, BetaPrior::Flat, &mut rng);
            v[0] - s.v[0]
        })
        .collect();
    let o = grid_moments(
        |c| {
            s.with(|t| {
                for vi in t.v.iter_mut() {
                    *vi += c;
                }
                for j in 0..2 {
                    t.beta[j] -= t.gamma[j] * c;
                }
            })
            .log_joint()
        },
        Domain::Real,
    );
    out.push(check("stage2 mean shift", &d, o));
    out
}
