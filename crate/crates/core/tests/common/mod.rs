//! Reference implementations used as test oracles. Nothing here calls the
//! library's covariance or sampler code.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

pub type Pt = [f64; 2];

pub fn d(a: &Pt, b: &Pt) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Nearest `m` predecessors by brute force, ties to the smaller index.
pub fn brute_neighbors(ordered: &[Pt], m: usize) -> Vec<Vec<usize>> {
    (0..ordered.len())
        .map(|i| {
            let mut c: Vec<(f64, usize)> = (0..i).map(|j| (d(&ordered[i], &ordered[j]), j)).collect();
            c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            c.truncate(m);
            c.into_iter().map(|x| x.1).collect()
        })
        .collect()
}

/// Kriging weights and conditional variance of `target` given `nb`.
pub fn krige(pts: &[Pt], nb: &[usize], target: &Pt, phi: f64) -> (Vec<f64>, f64) {
    if nb.is_empty() {
        return (Vec::new(), 1.0);
    }
    let k = nb.len();
    let c = DMatrix::from_fn(k, k, |a, b| (-phi * d(&pts[nb[a]], &pts[nb[b]])).exp());
    let r = DVector::from_fn(k, |a, _| (-phi * d(&pts[nb[a]], target)).exp());
    let b = c.clone().cholesky().expect("neighbor block positive definite").solve(&r);
    let f = 1.0 - r.dot(&b);
    (b.iter().copied().collect(), f)
}

pub fn nngp_logpdf(ordered: &[Pt], w: &[f64], m: usize, phi: f64) -> f64 {
    let nbs = brute_neighbors(ordered, m);
    let mut lp = 0.0;
    for i in 0..ordered.len() {
        let (b, f) = krige(ordered, &nbs[i], &ordered[i], phi);
        let mean: f64 = nbs[i].iter().zip(&b).map(|(&j, bj)| bj * w[j]).sum();
        lp += normal_logpdf(w[i], mean, f);
    }
    lp
}

pub fn dense_corr(pts: &[Pt], phi: f64) -> DMatrix<f64> {
    let n = pts.len();
    DMatrix::from_fn(n, n, |a, b| (-phi * d(&pts[a], &pts[b])).exp())
}

pub fn dense_mvn_logpdf(pts: &[Pt], w: &[f64], phi: f64) -> f64 {
    let n = pts.len();
    let chol = dense_corr(pts, phi).cholesky().expect("positive definite");
    let x = DVector::from_column_slice(w);
    let y = chol.l().solve_lower_triangular(&x).unwrap();
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + y.dot(&y))
}

pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Inverse gamma with shape/rate.
pub fn inv_gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

#[derive(Clone, Copy, Debug)]
pub enum Domain {
    Real,
    Positive,
    Interval(f64, f64),
}

#[derive(Clone, Copy, Debug)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
}

/// Mean and variance of the density `exp(logf)` by two-pass quadrature:
/// a wide scan locates the mass, then Simpson's rule on a fine grid.
pub fn grid_moments(logf: impl Fn(f64) -> f64, domain: Domain) -> Moments {
    grid_moments_sized(logf, domain, 200_000, 40_000)
}

/// [`grid_moments`] with explicit scan and quadrature sizes (`fine` even).
/// Positive parameters are integrated over `ln x`, which keeps heavy right
/// tails resolved.
pub fn grid_moments_sized(logf: impl Fn(f64) -> f64, domain: Domain, scan: usize, fine: usize) -> Moments {
    let positive = matches!(domain, Domain::Positive);
    let g = |u: f64| if positive { logf(u.exp()) + u } else { logf(u) };
    let scan_domain = if positive { Domain::Real } else { domain };
    let (lo, hi) = mass_range(&g, scan_domain, scan);
    let n = fine;
    let h = (hi - lo) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|k| g(lo + k as f64 * h)).collect();
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (k, v) in vals.iter().enumerate() {
        let wgt = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let u = lo + k as f64 * h;
        let x = if positive { u.exp() } else { u };
        let p = wgt * (v - mx).exp();
        s0 += p;
        s1 += p * x;
        s2 += p * x * x;
    }
    let mean = s1 / s0;
    Moments {
        mean,
        var: s2 / s0 - mean * mean,
    }
}

/// Normalized density on a fine grid over the mass range, for histograms.
pub fn grid_density(logf: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..n).map(|k| lo + (k as f64 + 0.5) * h).collect();
    let lv: Vec<f64> = xs.iter().map(|&x| logf(x)).collect();
    let mx = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = lv.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = p.iter().sum();
    (xs, p.into_iter().map(|v| v / s).collect())
}

fn mass_range(logf: &impl Fn(f64) -> f64, domain: Domain, scan: usize) -> (f64, f64) {
    let s = scan as f64;
    let coarse: Vec<f64> = match domain {
        Domain::Real | Domain::Positive => (0..=scan).map(|k| -200.0 + k as f64 * 400.0 / s).collect(),
        Domain::Interval(a, b) => (0..=scan).map(|k| a + (b - a) * k as f64 / s).collect(),
    };
    let lv: Vec<f64> = coarse.iter().map(|&x| logf(x)).collect();
    let mx = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..coarse.len()).filter(|&k| lv[k] > mx - 60.0).collect();
    let (a, b) = (keep[0].saturating_sub(1), (keep[keep.len() - 1] + 1).min(coarse.len() - 1));
    (coarse[a], coarse[b])
}

/// Batch-means standard errors of the sample mean and sample variance.
pub fn batch_se(draws: &[f64], batches: usize) -> (f64, f64, f64, f64) {
    let n = draws.len();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sq: Vec<f64> = draws.iter().map(|x| (x - mean).powi(2)).collect();
    let var = sq.iter().sum::<f64>() / n as f64;
    let size = n / batches;
    let bm = |v: &[f64], center: f64| -> f64 {
        let means: Vec<f64> = (0..batches).map(|b| v[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
        let s2 = means.iter().map(|m| (m - center).powi(2)).sum::<f64>() / (batches - 1) as f64;
        (s2 / batches as f64).sqrt()
    };
    (mean, bm(draws, mean), var, bm(&sq, var))
}

/// Standard errors of the sample mean and variance of independent draws.
pub fn iid_se(draws: &[f64]) -> (f64, f64, f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = draws.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (mean, (var / n).sqrt(), var, ((m4 - var * var) / n).sqrt())
}

/// `(z of mean, z of variance)` of independent draws against oracle moments.
pub fn moment_z(draws: &[f64], oracle: Moments) -> (f64, f64) {
    let (mean, se_m, var, se_v) = iid_se(draws);
    ((mean - oracle.mean) / se_m, (var - oracle.var) / se_v)
}

/// [`moment_z`] for a Markov chain, with batch-means standard errors.
pub fn chain_moment_z(draws: &[f64], oracle: Moments) -> (f64, f64) {
    let (mean, se_m, var, se_v) = batch_se(draws, 50);
    ((mean - oracle.mean) / se_m, (var - oracle.var) / se_v)
}
