//! Scoring rules and recovery diagnostics.

use crate::error::{Result, SfError};

/// Linear-interpolation quantile of sorted data (`p` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Median and central `level` interval.
pub fn summarize(samples: &[f64], level: f64) -> (f64, f64, f64) {
    let s = sorted(samples);
    let a = 0.5 * (1.0 - level);
    (quantile_sorted(&s, 0.5), quantile_sorted(&s, a), quantile_sorted(&s, 1.0 - a))
}

/// Sample CRPS: `mean|X − obs| − ½·mean|X − X′|` over all ordered pairs.
pub fn crps(samples: &[f64], obs: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(SfError::Dimension("CRPS needs at least one sample".into()));
    }
    Ok(crps_sorted(&sorted(samples), obs))
}

/// CRPS from already sorted samples, `O(N)`.
pub fn crps_sorted(s: &[f64], obs: f64) -> f64 {
    let n = s.len() as f64;
    let abs_dev = s.iter().map(|x| (x - obs).abs()).sum::<f64>() / n;
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − n + 1) x_(i)
    let pair: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    (abs_dev - 0.5 * pair / (n * n)).max(0.0)
}

pub fn rmspe(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(SfError::Dimension(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Percent of truths inside their central `level` interval and the mean width.
pub fn coverage_and_width(draws: &[Vec<f64>], truth: &[f64], level: f64) -> Result<(f64, f64)> {
    if draws.len() != truth.len() {
        return Err(SfError::Dimension(format!(
            "{} draw sets for {} truths",
            draws.len(),
            truth.len()
        )));
    }
    if draws.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut hit = 0usize;
    let mut width = 0.0;
    for (d, &t) in draws.iter().zip(truth) {
        let (_, lo, hi) = summarize(d, level);
        hit += (lo <= t && t <= hi) as usize;
        width += hi - lo;
    }
    let n = truth.len() as f64;
    Ok((100.0 * hit as f64 / n, width / n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PointRule {
    #[default]
    Median,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    /// Outcome name, or `all` for the pooled row.
    pub outcome: String,
    pub crps: f64,
    pub rmspe: f64,
    pub coverage: f64,
    pub width: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub level: f64,
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    pub fn pooled(&self) -> &ScoreRow {
        self.rows.last().expect("pooled row")
    }

    /// `metric,outcome,value` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,outcome,value\n");
        for r in &self.rows {
            out.push_str(&format!("crps,{},{}\n", r.outcome, r.crps));
            out.push_str(&format!("rmspe,{},{}\n", r.outcome, r.rmspe));
            out.push_str(&format!("coverage,{},{}\n", r.outcome, r.coverage));
            out.push_str(&format!("width,{},{}\n", r.outcome, r.width));
            out.push_str(&format!("count,{},{}\n", r.outcome, r.count));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let pct = (self.level * 100.0).round();
        let mut out = format!(
            "{:<12} {:>10} {:>10} {:>12} {:>12} {:>8}\n",
            "outcome",
            "CRPS",
            "RMSPE",
            format!("{pct}% cover"),
            format!("{pct}% width"),
            "count"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>10.4} {:>10.4} {:>12.2} {:>12.4} {:>8}\n",
                r.outcome, r.crps, r.rmspe, r.coverage, r.width, r.count
            ));
        }
        out
    }
}

/// Scores for items `(outcome index, draws, truth)`; pooled over all items
/// plus one row per outcome.
pub fn score(
    outcome_names: &[String],
    items: &[(usize, &[f64], f64)],
    level: f64,
    point: PointRule,
) -> Result<ScoreReport> {
    let mut rows = Vec::new();
    let summarize_group = |name: String, sel: Vec<&(usize, &[f64], f64)>| -> Result<ScoreRow> {
        let mut crps_sum = 0.0;
        let mut preds = Vec::with_capacity(sel.len());
        let mut truths = Vec::with_capacity(sel.len());
        let mut hits = 0usize;
        let mut width = 0.0;
        for (_, d, t) in &sel {
            if d.is_empty() {
                return Err(SfError::Dimension("empty predictive draw set".into()));
            }
            let s = sorted(d);
            crps_sum += crps_sorted(&s, *t);
            preds.push(match point {
                PointRule::Median => quantile_sorted(&s, 0.5),
                PointRule::Mean => s.iter().sum::<f64>() / s.len() as f64,
            });
            truths.push(*t);
            let a = 0.5 * (1.0 - level);
            let (lo, hi) = (quantile_sorted(&s, a), quantile_sorted(&s, 1.0 - a));
            hits += (lo <= *t && *t <= hi) as usize;
            width += hi - lo;
        }
        let c = sel.len().max(1) as f64;
        Ok(ScoreRow {
            outcome: name,
            crps: crps_sum / c,
            rmspe: rmspe(&preds, &truths)?,
            coverage: 100.0 * hits as f64 / c,
            width: width / c,
            count: sel.len(),
        })
    };
    for (j, name) in outcome_names.iter().enumerate() {
        let sel: Vec<_> = items.iter().filter(|it| it.0 == j).collect();
        if !sel.is_empty() {
            rows.push(summarize_group(name.clone(), sel)?);
        }
    }
    rows.push(summarize_group("all".into(), items.iter().collect())?);
    Ok(ScoreReport { level, rows })
}

/// Fitted-minus-true composed signal at one (location, outcome) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSummary {
    pub median: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Percent of pairs whose interval contains zero.
    pub coverage: f64,
}

/// `Δ(s) = Λ w(s) − Λ̃ w̃(s)` per draw at every (location, outcome) pair.
///
/// `lambda`/`w` are per-draw rows (`h×q`, `n×q`); `true_lambda`/`true_w` use
/// `q_true` factors and the same location rows.
#[allow(clippy::too_many_arguments)]
pub fn spatial_signal_delta(
    lambda: &[&[f64]],
    w: &[&[f64]],
    n: usize,
    h: usize,
    q: usize,
    true_lambda: &[f64],
    true_w: &[f64],
    q_true: usize,
    level: f64,
) -> Result<DeltaSummary> {
    if lambda.len() != w.len() || lambda.is_empty() {
        return Err(SfError::Dimension("loading and latent draw counts differ or are zero".into()));
    }
    if true_lambda.len() != h * q_true || true_w.len() != n * q_true {
        return Err(SfError::Dimension("truth dimensions do not match".into()));
    }
    let draws = lambda.len();
    for (l, ww) in lambda.iter().zip(w) {
        if l.len() != h * q || ww.len() != n * q {
            return Err(SfError::Dimension("draw dimensions do not match".into()));
        }
    }
    let mut median = Vec::with_capacity(n * h);
    let mut lo = Vec::with_capacity(n * h);
    let mut hi = Vec::with_capacity(n * h);
    let mut covered = 0usize;
    let mut buf = vec![0.0; draws];
    for i in 0..n {
        for j in 0..h {
            let truth: f64 = (0..q_true).map(|k| true_lambda[j * q_true + k] * true_w[i * q_true + k]).sum();
            for t in 0..draws {
                let fit: f64 = (0..q).map(|k| lambda[t][j * q + k] * w[t][i * q + k]).sum();
                buf[t] = fit - truth;
            }
            let (m, a, b) = summarize(&buf, level);
            covered += (a <= 0.0 && 0.0 <= b) as usize;
            median.push(m);
            lo.push(a);
            hi.push(b);
        }
    }
    Ok(DeltaSummary {
        median,
        lo,
        hi,
        coverage: 100.0 * covered as f64 / (n * h) as f64,
    })
}
