//! Imputation at fitted locations and posterior predictive draws at new ones.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::archive::ChainArchive;
use crate::covariance::{krige_point, CorrelationKernel};
use crate::dataset::SpatialDataset;
use crate::error::{Result, SfError};
use crate::geometry::{KnnIndex, Point};
use crate::metrics::{sorted, quantile_sorted};
use crate::rng::{stream, stream_rng};

/// Posterior predictive samples for a set of (location, outcome) cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDraws {
    pub ids: Vec<String>,
    pub coords: Vec<Point>,
    pub outcome_names: Vec<String>,
    /// `(location, outcome)` for each cell.
    pub cells: Vec<(usize, usize)>,
    pub n_draws: usize,
    /// Cell-major: `data[c * n_draws + t]`.
    data: Vec<f64>,
    pub notices: Vec<String>,
}

impl PredictiveDraws {
    pub fn samples(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.n_draws..(cell + 1) * self.n_draws]
    }

    pub fn cell_index(&self, loc: usize, outcome: usize) -> Option<usize> {
        self.cells.iter().position(|&c| c == (loc, outcome))
    }

    /// `(median, lower, upper)` of the central `level` interval.
    pub fn summary(&self, cell: usize, level: f64) -> (f64, f64, f64) {
        let s = sorted(self.samples(cell));
        let a = 0.5 * (1.0 - level);
        (quantile_sorted(&s, 0.5), quantile_sorted(&s, a), quantile_sorted(&s, 1.0 - a))
    }

    pub fn to_csv(&self, level: f64) -> String {
        let pct = format_pct(level);
        let mut out = format!("id,x,y,outcome,median,lo{pct},hi{pct},width{pct}\n");
        for (c, &(i, j)) in self.cells.iter().enumerate() {
            let (m, lo, hi) = self.summary(c, level);
            out.push_str(&format!(
                "{},{},{},{},{m},{lo},{hi},{}\n",
                self.ids[i],
                self.coords[i][0],
                self.coords[i][1],
                self.outcome_names[j],
                hi - lo
            ));
        }
        out
    }

    /// Raw draws as an archive with one `draws` block (one row per draw).
    pub fn to_archive(&self) -> ChainArchive {
        let nc = self.cells.len();
        let mut ar = ChainArchive::new(&[("draws", nc)]);
        let mut row = vec![0.0; nc];
        for t in 0..self.n_draws {
            for (c, r) in row.iter_mut().enumerate() {
                *r = self.data[c * self.n_draws + t];
            }
            ar.push_draw(&[&row]).expect("row width matches");
        }
        ar.set_meta("kind", "predictive");
        ar.set_meta("outcomes", self.outcome_names.join(","));
        ar.set_meta(
            "cells",
            self.cells.iter().map(|(i, j)| format!("{i}:{j}")).collect::<Vec<_>>().join(","),
        );
        ar.location_ids = self.ids.clone();
        ar.location_coords = self.coords.clone();
        ar
    }

    pub fn from_archive(ar: &ChainArchive) -> Result<Self> {
        if ar.meta_str("kind")? != "predictive" {
            return Err(SfError::Archive("not a predictive draw archive".into()));
        }
        let outcome_names = ar.meta_list("outcomes")?;
        let cells = ar
            .meta_list("cells")?
            .iter()
            .map(|c| {
                c.split_once(':')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| SfError::Archive(format!("bad cell '{c}'")))
            })
            .collect::<Result<Vec<(usize, usize)>>>()?;
        let block = ar.block("draws")?;
        let n_draws = ar.draws();
        let nc = cells.len();
        if block.cols != nc {
            return Err(SfError::Archive("draw block width differs from cell count".into()));
        }
        let mut data = vec![0.0; nc * n_draws];
        for t in 0..n_draws {
            for (c, v) in block.row(t).iter().enumerate() {
                data[c * n_draws + t] = *v;
            }
        }
        Ok(Self {
            ids: ar.location_ids.clone(),
            coords: ar.location_coords.clone(),
            outcome_names,
            cells,
            n_draws,
            data,
            notices: Vec::new(),
        })
    }
}

fn format_pct(level: f64) -> String {
    let p = level * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

/// Query locations with their predictors (outcome values, if any, ignored).
pub struct PredictionRequest<'a> {
    pub query: &'a SpatialDataset,
    pub m: usize,
}

/// Reference latent draws: one process per factor over a fixed location set.
struct LatentDraws<'a> {
    coords: &'a [Point],
    index: KnnIndex,
    q: usize,
    latent: &'a crate::archive::Block,
    phi: &'a crate::archive::Block,
}

impl<'a> LatentDraws<'a> {
    fn new(ar: &'a ChainArchive, latent: &str, q: usize) -> Result<Self> {
        let latent = ar.block(latent)?;
        let phi = ar.block("phi")?;
        let n = ar.location_coords.len();
        if latent.cols != n * q || phi.cols != q {
            return Err(SfError::Archive(format!(
                "latent block has {} columns, expected {} locations x {q} factors",
                latent.cols, n
            )));
        }
        Ok(Self {
            coords: &ar.location_coords,
            index: KnnIndex::new(&ar.location_coords),
            q,
            latent,
            phi,
        })
    }

    /// Per-query kriging state: neighbor set plus a cache keyed by decay.
    fn site(&self, query: &Point, m: usize) -> Site {
        let nb = self.index.query(query, m);
        let pts = nb.iter().map(|&j| self.coords[j]).collect();
        Site {
            query: *query,
            nb,
            pts,
            cache: HashMap::new(),
        }
    }

    /// One draw of the `q` factors at the query for reference draw `t`.
    fn draw<R: Rng + ?Sized>(&self, site: &mut Site, t: usize, rng: &mut R, out: &mut [f64]) -> Result<()> {
        let row = self.latent.row(t);
        let phis = self.phi.row(t);
        for k in 0..self.q {
            let key = site.ensure(phis[k])?;
            let (b, f) = (&site.cache[&key].0, site.cache[&key].1);
            let mean: f64 = site.nb.iter().zip(b).map(|(&j, bj)| bj * row[j * self.q + k]).sum();
            let e: f64 = rng.sample(StandardNormal);
            out[k] = mean + f.sqrt() * e;
        }
        Ok(())
    }
}

struct Site {
    query: Point,
    nb: Vec<usize>,
    pts: Vec<Point>,
    cache: HashMap<u64, (Vec<f64>, f64)>,
}

impl Site {
    fn ensure(&mut self, phi: f64) -> Result<u64> {
        let key = phi.to_bits();
        if !self.cache.contains_key(&key) {
            let kernel = CorrelationKernel::exponential(phi)?;
            let bf = krige_point(&self.pts, &self.query, &kernel)?;
            self.cache.insert(key, bf);
        }
        Ok(key)
    }
}

/// Factor draws at a single point, one `q`-vector per retained stage-1 draw.
/// Uses the same stream as `predict_z`, so `query_key` must match.
pub fn predict_w(stage1: &ChainArchive, query: &Point, m: usize, seed: u64, query_key: u64) -> Result<Vec<Vec<f64>>> {
    let q = stage1.meta_usize("q")?;
    let lat = LatentDraws::new(stage1, "w", q)?;
    let mut site = lat.site(query, m);
    (0..stage1.draws())
        .map(|t| {
            let mut rng = stream_rng(seed, &[stream::PREDICT, query_key, t as u64, 0]);
            let mut w = vec![0.0; q];
            lat.draw(&mut site, t, &mut rng, &mut w)?;
            Ok(w)
        })
        .collect()
}

/// Check the query designs carry the predictors the fit used.
fn check_designs(ar: &ChainArchive, query: &SpatialDataset) -> Result<Vec<usize>> {
    let outcomes = ar.meta_list("outcomes")?;
    if outcomes != query.outcome_names {
        return Err(SfError::Config(format!(
            "query outcomes [{}] differ from fitted outcomes [{}]",
            query.outcome_names.join(","),
            outcomes.join(",")
        )));
    }
    let mut offsets = Vec::with_capacity(outcomes.len());
    let mut off = 0;
    for j in 0..outcomes.len() {
        let names = ar.meta_list(&format!("design.{j}"))?;
        if names != query.design(j).names {
            return Err(SfError::Config(format!(
                "predictors for '{}' at query locations [{}] differ from the fit [{}]",
                outcomes[j],
                query.design(j).names.join(","),
                names.join(",")
            )));
        }
        offsets.push(off);
        off += names.len();
    }
    if ar.block("beta")?.cols != off {
        return Err(SfError::Archive("beta block width differs from the designs".into()));
    }
    Ok(offsets)
}

fn ensure_predictors(query: &SpatialDataset) -> Result<()> {
    for d in &query.designs {
        if let Some(k) = d.x.iter().position(|v| !v.is_finite()) {
            let i = k / d.p().max(1);
            return Err(SfError::Config(format!(
                "missing predictor at query location '{}'",
                query.locs.ids()[i]
            )));
        }
    }
    Ok(())
}

fn all_cells(n: usize, h: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..h).map(move |j| (i, j))).collect()
}

/// Stage-1 outcome draws at every query location, one per retained draw.
pub fn predict_z(stage1: &ChainArchive, req: &PredictionRequest<'_>, seed: u64) -> Result<PredictiveDraws> {
    let query = req.query;
    let offsets = check_designs(stage1, query)?;
    ensure_predictors(query)?;
    let q = stage1.meta_usize("q")?;
    let h = query.h();
    let lat = LatentDraws::new(stage1, "w", q)?;
    let (beta, lambda, psi) = (stage1.block("beta")?, stage1.block("lambda")?, stage1.block("psi")?);
    let nd = stage1.draws();
    let per_loc: Vec<Vec<f64>> = (0..query.n())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let pt = query.coords()[i];
            let mut site = lat.site(&pt, req.m);
            let mut out = vec![0.0; h * nd];
            let mut w = vec![0.0; q];
            for t in 0..nd {
                let mut rng = stream_rng(seed, &[stream::PREDICT, i as u64, t as u64, 0]);
                lat.draw(&mut site, t, &mut rng, &mut w)?;
                let mut rng = stream_rng(seed, &[stream::PREDICT, i as u64, t as u64, 2]);
                let (b, l, s) = (beta.row(t), lambda.row(t), psi.row(t));
                for j in 0..h {
                    let x = query.x_row(j, i);
                    let xb: f64 = x.iter().zip(&b[offsets[j]..]).map(|(a, c)| a * c).sum();
                    let lw: f64 = (0..q).map(|k| l[j * q + k] * w[k]).sum();
                    let e: f64 = rng.sample(StandardNormal);
                    out[j * nd + t] = xb + lw + s[j].sqrt() * e;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(PredictiveDraws {
        ids: query.locs.ids().to_vec(),
        coords: query.coords().to_vec(),
        outcome_names: query.outcome_names.clone(),
        cells: all_cells(query.n(), h),
        n_draws: nd,
        data: per_loc.concat(),
        notices: Vec::new(),
    })
}

/// Stage-2 outcome draws. Factor draws at the query follow the stage-2
/// `w_index` so each iteration pairs with the stage-1 draw it was fitted on.
pub fn predict_y(
    stage2: &ChainArchive,
    stage1: &ChainArchive,
    req: &PredictionRequest<'_>,
    seed: u64,
) -> Result<PredictiveDraws> {
    let query = req.query;
    let offsets = check_designs(stage2, query)?;
    ensure_predictors(query)?;
    let q_w = stage2.meta_usize("q_w")?;
    let q_v = stage2.meta_usize("q_v")?;
    if stage1.meta_usize("q")? != q_w {
        return Err(SfError::Config("stage-2 archive was fitted on a different stage-1 rank".into()));
    }
    let h = query.h();
    let wlat = LatentDraws::new(stage1, "w", q_w)?;
    let vlat = if q_v > 0 {
        Some(LatentDraws::new(stage2, "v", q_v)?)
    } else {
        None
    };
    let (beta, lambda, gamma, psi, widx) = (
        stage2.block("beta")?,
        stage2.block("lambda")?,
        stage2.block("gamma")?,
        stage2.block("psi")?,
        stage2.block("w_index")?,
    );
    let nd = stage2.draws();
    let nd1 = stage1.draws();
    let per_loc: Vec<Vec<f64>> = (0..query.n())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let pt = query.coords()[i];
            let mut wsite = wlat.site(&pt, req.m);
            let mut vsite = vlat.as_ref().map(|l| l.site(&pt, req.m));
            let mut out = vec![0.0; h * nd];
            let mut w = vec![0.0; q_w];
            let mut v = vec![0.0; q_v];
            for t in 0..nd {
                let u = widx.row(t)[0] as usize;
                if u >= nd1 {
                    return Err(SfError::Archive(format!("stage-2 draw {t} refers to missing stage-1 draw {u}")));
                }
                let mut rng = stream_rng(seed, &[stream::PREDICT, i as u64, u as u64, 0]);
                wlat.draw(&mut wsite, u, &mut rng, &mut w)?;
                if let (Some(l), Some(s)) = (&vlat, vsite.as_mut()) {
                    let mut rng = stream_rng(seed, &[stream::PREDICT, i as u64, t as u64, 1]);
                    l.draw(s, t, &mut rng, &mut v)?;
                }
                let mut rng = stream_rng(seed, &[stream::PREDICT, i as u64, t as u64, 3]);
                let (b, l, g, s) = (beta.row(t), lambda.row(t), gamma.row(t), psi.row(t));
                for j in 0..h {
                    let x = query.x_row(j, i);
                    let xb: f64 = x.iter().zip(&b[offsets[j]..]).map(|(a, c)| a * c).sum();
                    let lw: f64 = (0..q_w).map(|k| l[j * q_w + k] * w[k]).sum();
                    let gv: f64 = (0..q_v).map(|k| g[j * q_v + k] * v[k]).sum();
                    let e: f64 = rng.sample(StandardNormal);
                    out[j * nd + t] = xb + lw + gv + s[j].sqrt() * e;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(PredictiveDraws {
        ids: query.locs.ids().to_vec(),
        coords: query.coords().to_vec(),
        outcome_names: query.outcome_names.clone(),
        cells: all_cells(query.n(), h),
        n_draws: nd,
        data: per_loc.concat(),
        notices: Vec::new(),
    })
}

/// Imputation draws at fitted locations, read from the archive's imputation
/// block. `rows` selects fitted locations by id; `None` takes every location
/// with a missing cell.
pub fn impute_missing(ar: &ChainArchive, data: &SpatialDataset, rows: Option<&[String]>) -> Result<PredictiveDraws> {
    let block_name = match ar.meta_str("kind")? {
        "stage1" => "z_missing",
        "stage2" => "y_missing",
        k => return Err(SfError::Archive(format!("cannot impute from a '{k}' archive"))),
    };
    if ar.location_ids != data.locs.ids() || ar.meta_list("outcomes")? != data.outcome_names {
        return Err(SfError::Config("dataset is not the one this archive was fitted on".into()));
    }
    let block = ar.block(block_name)?;
    let missing = data.missing_cells();
    if block.cols != missing.len() {
        return Err(SfError::Archive(format!(
            "imputation block holds {} cells, dataset has {} missing",
            block.cols,
            missing.len()
        )));
    }
    let index = data.locs.index_of_id();
    let selected: Vec<usize> = match rows {
        Some(ids) => ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| SfError::Config(format!("location '{id}' was not part of the fit")))
            })
            .collect::<Result<_>>()?,
        None => {
            let mut r: Vec<usize> = missing.iter().map(|c| c.0).collect();
            r.dedup();
            r
        }
    };
    let mut notices = Vec::new();
    let mut cells = Vec::new();
    let mut cols = Vec::new();
    for (li, &r) in selected.iter().enumerate() {
        let before = cells.len();
        for (c, &(i, j)) in missing.iter().enumerate() {
            if i == r {
                cells.push((li, j));
                cols.push(c);
            }
        }
        if cells.len() == before {
            notices.push(format!("location '{}' is fully observed; nothing to impute", data.locs.ids()[r]));
        }
    }
    let nd = ar.draws();
    let mut out = vec![0.0; cols.len() * nd];
    for t in 0..nd {
        let row = block.row(t);
        for (c, &col) in cols.iter().enumerate() {
            out[c * nd + t] = row[col];
        }
    }
    Ok(PredictiveDraws {
        ids: selected.iter().map(|&r| data.locs.ids()[r].clone()).collect(),
        coords: selected.iter().map(|&r| data.coords()[r]).collect(),
        outcome_names: data.outcome_names.clone(),
        cells,
        n_draws: nd,
        data: out,
        notices,
    })
}
