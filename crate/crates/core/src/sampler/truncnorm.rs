//! Normal draws restricted to a half-line.

use rand::Rng;
use rand_distr::{Exp, StandardNormal};

/// Standard normal truncated to `(lo, ∞)`.
///
/// Naive rejection when `lo ≤ 0` (acceptance at least one half); otherwise
/// Robert's translated-exponential proposal, which stays efficient however
/// far into the tail the bound sits.
pub fn std_normal_above<R: Rng + ?Sized>(lo: f64, rng: &mut R) -> f64 {
    if lo <= 0.0 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > lo {
                return z;
            }
        }
    }
    let rate = 0.5 * (lo + (lo * lo + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let z = lo + rng.sample(exp);
        let u: f64 = rng.random();
        let d = z - rate;
        if u.ln() <= -0.5 * d * d {
            return z;
        }
    }
}

/// `N(mu, sd²)` truncated to `(0, ∞)`.
pub fn normal_positive<R: Rng + ?Sized>(mu: f64, sd: f64, rng: &mut R) -> f64 {
    let x = mu + sd * std_normal_above(-mu / sd, rng);
    // guards the roundoff case mu + sd·z == 0 for huge |mu|/sd
    if x > 0.0 {
        x
    } else {
        f64::MIN_POSITIVE
    }
}
