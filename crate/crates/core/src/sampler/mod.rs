//! Metropolis-within-Gibbs drivers for both stages.

pub mod truncnorm;
pub mod updates;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::archive::ChainArchive;
use crate::dataset::SpatialDataset;
use crate::error::{Result, SfError};
use crate::model::{init_stage1, init_stage2, validate_state, PriorConfig, StateRef};
use crate::rng::stream;
use updates::*;

#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub n_chains: usize,
    /// Initial random-walk step per decay; `None` uses 1% of the support width.
    pub rw_step: Option<f64>,
    pub adapt: bool,
    pub seed: u64,
    /// Update latent rows by color groups in parallel.
    pub parallel_latent: bool,
    /// Run chains concurrently.
    pub parallel_chains: bool,
    /// Add the joint latent-mean/intercept move after each latent sweep.
    pub mean_shift: bool,
    pub progress: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 1000,
            n_burn: 500,
            thin: 1,
            n_chains: 1,
            rw_step: None,
            adapt: true,
            seed: 1,
            parallel_latent: false,
            parallel_chains: true,
            mean_shift: true,
            progress: false,
        }
    }
}

/// Acceptance band targeted while adapting the decay step during burn-in.
pub const ADAPT_BAND: (f64, f64) = (0.25, 0.45);
const ADAPT_BATCH: usize = 50;

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burn >= self.n_iter {
            return Err(SfError::Config(format!(
                "burn-in {} must be below the iteration count {}",
                self.n_burn, self.n_iter
            )));
        }
        if self.thin == 0 || self.n_chains == 0 {
            return Err(SfError::Config("thin and chain count must be at least 1".into()));
        }
        if let Some(s) = self.rw_step {
            if !(s > 0.0) {
                return Err(SfError::Config(format!("random-walk step must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.n_iter - self.n_burn) / self.thin
    }

    fn is_retained(&self, t: usize) -> bool {
        t >= self.n_burn && (t + 1 - self.n_burn) % self.thin == 0
    }
}

/// Random-walk step sizes and acceptance bookkeeping for the decays.
struct DecayTuner {
    steps: Vec<f64>,
    batch_acc: Vec<usize>,
    kept_acc: Vec<usize>,
    kept_tries: usize,
}

impl DecayTuner {
    fn new(cfg: &ChainConfig, prior: &PriorConfig) -> Self {
        let steps = prior
            .phi_support
            .iter()
            .map(|&(lo, hi)| cfg.rw_step.unwrap_or(0.01 * (hi - lo)))
            .collect::<Vec<_>>();
        let q = steps.len();
        Self {
            steps,
            batch_acc: vec![0; q],
            kept_acc: vec![0; q],
            kept_tries: 0,
        }
    }

    fn record(&mut self, cfg: &ChainConfig, t: usize, accepted: &[bool]) {
        if t < cfg.n_burn {
            for (c, &a) in self.batch_acc.iter_mut().zip(accepted) {
                *c += a as usize;
            }
            if cfg.adapt && (t + 1) % ADAPT_BATCH == 0 {
                for (s, c) in self.steps.iter_mut().zip(self.batch_acc.iter_mut()) {
                    let rate = *c as f64 / ADAPT_BATCH as f64;
                    if rate < ADAPT_BAND.0 || rate > ADAPT_BAND.1 {
                        *s *= (2.0 * (rate - 0.35)).exp();
                    }
                    *c = 0;
                }
            }
        } else {
            self.kept_tries += 1;
            for (c, &a) in self.kept_acc.iter_mut().zip(accepted) {
                *c += a as usize;
            }
        }
    }

    fn rates(&self) -> Vec<f64> {
        self.kept_acc
            .iter()
            .map(|&a| a as f64 / self.kept_tries.max(1) as f64)
            .collect()
    }
}

fn numerical(t: usize, block: &str) -> impl Fn(String) -> SfError + '_ {
    move |msg| SfError::Numerical {
        iteration: t,
        block: block.to_string(),
        msg,
    }
}

fn join(xs: impl IntoIterator<Item = impl ToString>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Latent rows from ordered to storage layout.
fn to_storage(latent: &[f64], order: &[usize], q: usize) -> Vec<f64> {
    let mut out = vec![0.0; latent.len()];
    for (k, &s) in order.iter().enumerate() {
        out[s * q..(s + 1) * q].copy_from_slice(&latent[k * q..(k + 1) * q]);
    }
    out
}

fn run_chains<F>(cfg: &ChainConfig, f: F) -> Result<Vec<(ChainArchive, Vec<f64>, Vec<f64>)>>
where
    F: Fn(u64) -> Result<(ChainArchive, Vec<f64>, Vec<f64>)> + Sync,
{
    if cfg.parallel_chains && cfg.n_chains > 1 {
        (0..cfg.n_chains as u64).into_par_iter().map(&f).collect()
    } else {
        (0..cfg.n_chains as u64).map(&f).collect()
    }
}

fn common_meta(ar: &mut ChainArchive, cfg: &ChainConfig, prior: &PriorConfig, data: &SpatialDataset) {
    ar.set_meta("seed", cfg.seed);
    ar.set_meta("n_chains", cfg.n_chains);
    ar.set_meta("n_iter", cfg.n_iter);
    ar.set_meta("n_burn", cfg.n_burn);
    ar.set_meta("thin", cfg.thin);
    ar.set_meta("draws_per_chain", cfg.retained_per_chain());
    ar.set_meta("nu", prior.nu);
    ar.set_meta("A", prior.a_scale);
    ar.set_meta("phi_support", join(prior.phi_support.iter().map(|(a, b)| format!("{a}:{b}"))));
    ar.set_meta("n", data.n());
    ar.set_meta("h", data.h());
    ar.set_meta("outcomes", join(&data.outcome_names));
    ar.set_meta("p", join(data.p_list()));
    for j in 0..data.h() {
        ar.set_meta(&format!("design.{j}"), join(&data.design(j).names));
    }
    ar.set_meta("missing", data.missing_count());
    ar.set_meta("config_hash", "");
    ar.location_ids = data.locs.ids().to_vec();
    ar.location_coords = data.coords().to_vec();
}

fn check_state(s: StateRef<'_>, prior: &PriorConfig, t: usize) -> Result<()> {
    let bad = validate_state(s, prior);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(SfError::Numerical {
            iteration: t,
            block: "validate".into(),
            msg: bad.join("; "),
        })
    }
}

/// Stage-1 fit: latent factors, regression coefficients, loadings, nuggets
/// and decays for the high-dimensional outcomes.
pub fn run_stage1(
    data: &SpatialDataset,
    q: usize,
    m: usize,
    cfg: &ChainConfig,
    prior: &PriorConfig,
) -> Result<ChainArchive> {
    cfg.validate()?;
    prior.validate()?;
    let order = data.locs.order().to_vec();
    let geo = SharedGeometry::new(&data.locs.ordered_coords(), m)?;
    let od = OrderedData::new(data, &order)?;
    let n_miss = data.missing_count();
    let intercepts = intercept_columns(data);

    let results = run_chains(cfg, |chain| {
        let (n, h) = (data.n(), data.h());
        let mut s = init_stage1(data, q, prior, cfg.seed, chain)?;
        let mut proc = LatentProcess::new(&geo, &s.phi)?;
        let mut tuner = DecayTuner::new(cfg, prior);
        let sum_p: usize = data.p_list().iter().sum();
        let mut ar = ChainArchive::new(&[
            ("beta", sum_p),
            ("lambda", h * q),
            ("psi", h),
            ("a", h),
            ("phi", q),
            ("w", n * q),
            ("z_missing", n_miss),
            ("chain", 1),
            ("iteration", 1),
        ]);
        // imputation draws are stored in storage row-major order
        let rank = data.locs.rank_of();
        let miss_rank: Vec<usize> = (0..n)
            .filter(|&r| (0..h).any(|j| !data.is_observed(r, j)))
            .map(|r| rank[r])
            .collect();
        for t in 0..cfg.n_iter {
            let tt = t as u64;
            let xb = od.xb(&s.beta);
            let target = od.residual(&[&xb]);
            {
                let obs = Observation {
                    h,
                    loadings: &s.lambda,
                    psi: &s.psi,
                    target: &target,
                };
                let mut rng_seq;
                let lrng = if cfg.parallel_latent {
                    LatentRng::Colored {
                        seed: cfg.seed,
                        path: latent_path(chain, tt),
                    }
                } else {
                    rng_seq = block_rng(cfg.seed, chain, stream::LATENT, tt);
                    LatentRng::Sequential(&mut rng_seq)
                };
                sweep_latent(&mut s.w, &proc, &obs, lrng).map_err(numerical(t, "W"))?;
            }
            if let (true, Some(cols)) = (cfg.mean_shift, &intercepts) {
                let mut rng = block_rng(cfg.seed, chain, stream::SHIFT, tt);
                for k in 0..q {
                    shift_latent_mean(&mut s.w, k, &proc, &mut s.beta, cols, &s.lambda, prior.beta, &mut rng);
                }
            }
            let lw = loading_product(&s.w, &s.lambda, n, h, q);
            let mut rng = block_rng(cfg.seed, chain, stream::BETA, tt);
            update_beta(&mut s.beta, &od, &od.residual(&[&lw]), &s.psi, prior.beta, &mut rng)
                .map_err(numerical(t, "beta"))?;
            let xb = od.xb(&s.beta);
            let target = od.residual(&[&xb]);
            let mut rng = block_rng(cfg.seed, chain, stream::LOADINGS, tt);
            update_loadings(
                &mut s.lambda,
                h,
                q,
                LoadingForm::UnitLowerTriangular,
                &s.w,
                &target,
                &od.obs_rows,
                &s.psi,
                &mut rng,
            )
            .map_err(numerical(t, "Lambda"))?;
            let lw = loading_product(&s.w, &s.lambda, n, h, q);
            let ssr = residual_ss(&target, &lw, h);
            let mut rng = block_rng(cfg.seed, chain, stream::NUGGET, tt);
            update_psi(&mut s.psi, &mut s.a, &ssr, &od.n_obs(), prior.nu, prior.a_scale, &mut rng);
            let mut rng = block_rng(cfg.seed, chain, stream::DECAY, tt);
            let mut accepted = vec![false; q];
            for k in 0..q {
                accepted[k] = update_phi(&mut proc, &mut s.phi, k, &s.w, prior.phi_support[k], tuner.steps[k], &mut rng)
                    .map_err(|e| SfError::Numerical {
                        iteration: t,
                        block: "phi".into(),
                        msg: e.to_string(),
                    })?;
            }
            tuner.record(cfg, t, &accepted);
            check_state(StateRef::Stage1(&s), prior, t)?;
            if cfg.is_retained(t) {
                let mut rng = block_rng(cfg.seed, chain, stream::IMPUTE, tt);
                let mean: Vec<f64> = xb.iter().zip(&lw).map(|(a, b)| a + b).collect();
                let imputed = impute_cells(&od.z, &mean, &s.psi, h, &miss_rank, &mut rng);
                let beta: Vec<f64> = s.beta.concat();
                let w = to_storage(&s.w, &order, q);
                ar.push_draw(&[&beta, &s.lambda, &s.psi, &s.a, &s.phi, &w, &imputed, &[chain as f64], &[t as f64]])?;
            }
            if cfg.progress && (t + 1) % 1000 == 0 {
                eprintln!("stage1 chain {chain}: iteration {}/{}", t + 1, cfg.n_iter);
            }
        }
        Ok((ar, tuner.steps.clone(), tuner.rates()))
    })?;

    let mut meta_steps = Vec::new();
    let mut meta_rates = Vec::new();
    let mut parts = Vec::new();
    for (ar, steps, rates) in results {
        meta_steps.push(join(steps));
        meta_rates.push(join(rates));
        parts.push(ar);
    }
    let mut ar = ChainArchive::concat(parts)?;
    ar.set_meta("kind", "stage1");
    ar.set_meta("q", q);
    ar.set_meta("m", m);
    common_meta(&mut ar, cfg, prior, data);
    ar.set_meta("phi_step", meta_steps.join(";"));
    ar.set_meta("phi_accept", meta_rates.join(";"));
    Ok(ar)
}

/// Rows of the stage-1 location set matching each stage-2 location, by id
/// with identical coordinates.
pub fn match_stage1_rows(data_y: &SpatialDataset, stage1: &ChainArchive) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = stage1
        .location_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    data_y
        .locs
        .ids()
        .iter()
        .zip(data_y.coords())
        .map(|(id, c)| match index.get(id.as_str()) {
            Some(&r) if stage1.location_coords[r] == *c => Ok(r),
            Some(_) => Err(SfError::Config(format!(
                "location '{id}' has different coordinates in the stage-1 fit"
            ))),
            None => Err(SfError::Config(format!("stage-1 fit has no latent draws at location '{id}'"))),
        })
        .collect()
}

/// Stage-2 fit: regression of the low-dimensional outcomes on stage-1
/// latent factors (cycled through the stage-1 draws) plus optional
/// outcome-specific factors.
pub fn run_stage2(
    data: &SpatialDataset,
    stage1: &ChainArchive,
    q_v: usize,
    m: usize,
    cfg: &ChainConfig,
    prior: &PriorConfig,
) -> Result<ChainArchive> {
    cfg.validate()?;
    prior.validate()?;
    if prior.phi_support.len() != q_v {
        return Err(SfError::Config(format!("{} decay supports for {q_v} factors", prior.phi_support.len())));
    }
    let q_w = stage1.meta_usize("q")?;
    let wblock = stage1.block("w")?;
    let draws1 = stage1.draws();
    if draws1 == 0 {
        return Err(SfError::Archive("stage-1 archive holds no draws".into()));
    }
    let rows1 = match_stage1_rows(data, stage1)?;
    let order = data.locs.order().to_vec();
    let geo = SharedGeometry::new(&data.locs.ordered_coords(), m)?;
    let od = OrderedData::new(data, &order)?;
    let (n, h) = (data.n(), data.h());
    // stage-1 row for each ordered stage-2 position
    let src: Vec<usize> = order.iter().map(|&s| rows1[s]).collect();
    let rank = data.locs.rank_of();
    let miss_rank: Vec<usize> = (0..n)
        .filter(|&r| (0..h).any(|j| !data.is_observed(r, j)))
        .map(|r| rank[r])
        .collect();
    let n_miss = data.missing_count();
    let intercepts = intercept_columns(data);

    let results = run_chains(cfg, |chain| {
        let mut s = init_stage2(data, q_w, q_v, prior, cfg.seed, chain)?;
        let mut proc = LatentProcess::new(&geo, &s.phi)?;
        let mut tuner = DecayTuner::new(cfg, prior);
        let sum_p: usize = data.p_list().iter().sum();
        let mut ar = ChainArchive::new(&[
            ("beta", sum_p),
            ("lambda", h * q_w),
            ("gamma", h * q_v),
            ("psi", h),
            ("a", h),
            ("phi", q_v),
            ("v", n * q_v),
            ("y_missing", n_miss),
            ("w_index", 1),
            ("chain", 1),
            ("iteration", 1),
        ]);
        let mut w = vec![0.0; n * q_w];
        for t in 0..cfg.n_iter {
            let tt = t as u64;
            let widx = t % draws1;
            let row = wblock.row(widx);
            for (k, &r) in src.iter().enumerate() {
                w[k * q_w..(k + 1) * q_w].copy_from_slice(&row[r * q_w..(r + 1) * q_w]);
            }
            let lw = loading_product(&w, &s.lambda, n, h, q_w);
            if q_v > 0 {
                let xb = od.xb(&s.beta);
                let target = od.residual(&[&xb, &lw]);
                let obs = Observation {
                    h,
                    loadings: &s.gamma,
                    psi: &s.psi,
                    target: &target,
                };
                let mut rng_seq;
                let lrng = if cfg.parallel_latent {
                    LatentRng::Colored {
                        seed: cfg.seed,
                        path: latent_path(chain, tt),
                    }
                } else {
                    rng_seq = block_rng(cfg.seed, chain, stream::LATENT, tt);
                    LatentRng::Sequential(&mut rng_seq)
                };
                sweep_latent(&mut s.v, &proc, &obs, lrng).map_err(numerical(t, "V"))?;
                if let (true, Some(cols)) = (cfg.mean_shift, &intercepts) {
                    let mut rng = block_rng(cfg.seed, chain, stream::SHIFT, tt);
                    for k in 0..q_v {
                        shift_latent_mean(&mut s.v, k, &proc, &mut s.beta, cols, &s.gamma, prior.beta, &mut rng);
                    }
                }
            }
            let gv = loading_product(&s.v, &s.gamma, n, h, q_v);
            let mut rng = block_rng(cfg.seed, chain, stream::BETA, tt);
            update_beta(&mut s.beta, &od, &od.residual(&[&lw, &gv]), &s.psi, prior.beta, &mut rng)
                .map_err(numerical(t, "beta"))?;
            let xb = od.xb(&s.beta);
            let mut rng = block_rng(cfg.seed, chain, stream::LOADINGS, tt);
            update_loadings(
                &mut s.lambda,
                h,
                q_w,
                LoadingForm::FreeScaled,
                &w,
                &od.residual(&[&xb, &gv]),
                &od.obs_rows,
                &s.psi,
                &mut rng,
            )
            .map_err(numerical(t, "Lambda"))?;
            let lw = loading_product(&w, &s.lambda, n, h, q_w);
            let target = od.residual(&[&xb, &lw]);
            let mut rng = block_rng(cfg.seed, chain, stream::GAMMA, tt);
            update_gamma(&mut s.gamma, h, q_v, &s.v, &target, &od.obs_rows, &s.psi, &mut rng)
                .map_err(numerical(t, "Gamma"))?;
            let gv = loading_product(&s.v, &s.gamma, n, h, q_v);
            let ssr = residual_ss(&target, &gv, h);
            let mut rng = block_rng(cfg.seed, chain, stream::NUGGET, tt);
            update_psi_scaled_loadings(
                &mut s.psi,
                &mut s.a,
                &ssr,
                &od.n_obs(),
                &s.lambda,
                q_w,
                prior.nu,
                prior.a_scale,
                &mut rng,
            );
            let mut rng = block_rng(cfg.seed, chain, stream::DECAY, tt);
            let mut accepted = vec![false; q_v];
            for k in 0..q_v {
                accepted[k] = update_phi(&mut proc, &mut s.phi, k, &s.v, prior.phi_support[k], tuner.steps[k], &mut rng)
                    .map_err(|e| SfError::Numerical {
                        iteration: t,
                        block: "phi".into(),
                        msg: e.to_string(),
                    })?;
            }
            tuner.record(cfg, t, &accepted);
            check_state(StateRef::Stage2(&s), prior, t)?;
            if cfg.is_retained(t) {
                let mut rng = block_rng(cfg.seed, chain, stream::IMPUTE, tt);
                let mean: Vec<f64> = xb.iter().zip(&lw).zip(&gv).map(|((a, b), c)| a + b + c).collect();
                let imputed = impute_cells(&od.z, &mean, &s.psi, h, &miss_rank, &mut rng);
                let beta = s.beta.concat();
                let v = to_storage(&s.v, &order, q_v);
                ar.push_draw(&[
                    &beta,
                    &s.lambda,
                    &s.gamma,
                    &s.psi,
                    &s.a,
                    &s.phi,
                    &v,
                    &imputed,
                    &[widx as f64],
                    &[chain as f64],
                    &[t as f64],
                ])?;
            }
            if cfg.progress && (t + 1) % 1000 == 0 {
                eprintln!("stage2 chain {chain}: iteration {}/{}", t + 1, cfg.n_iter);
            }
        }
        Ok((ar, tuner.steps.clone(), tuner.rates()))
    })?;

    let mut meta_steps = Vec::new();
    let mut meta_rates = Vec::new();
    let mut parts = Vec::new();
    for (ar, steps, rates) in results {
        meta_steps.push(join(steps));
        meta_rates.push(join(rates));
        parts.push(ar);
    }
    let mut ar = ChainArchive::concat(parts)?;
    ar.set_meta("kind", "stage2");
    ar.set_meta("q_w", q_w);
    ar.set_meta("q_v", q_v);
    ar.set_meta("m", m);
    common_meta(&mut ar, cfg, prior, data);
    ar.set_meta("phi_step", meta_steps.join(";"));
    ar.set_meta("phi_accept", meta_rates.join(";"));
    Ok(ar)
}
