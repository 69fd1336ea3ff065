//! Run configuration: a sectioned `key = value` file (TOML syntax).
//!
//! Every key has a default, so an empty file is a valid configuration. The
//! canonical form written by [`RunConfig::to_canonical`] lists every key in a
//! fixed order and parses back to the same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetSchema;
use crate::error::{Result, SfError};
use crate::geometry::LocationSet;
use crate::metrics::PointRule;
use crate::model::{default_phi_support, BetaPrior, PriorConfig, DEFAULT_A, DEFAULT_NU};
use crate::sampler::ChainConfig;
use crate::simulate::SimSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub chain: ChainSection,
    pub prior: PriorSection,
    pub stage2: Stage2Section,
    pub simulate: SimulateSection,
    pub predict: PredictSection,
    pub score: ScoreSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Output root; each subcommand writes to its own subdirectory.
    pub out: String,
}

/// Data files. Unset paths fall back to the `simulate` outputs under `out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub z: Option<String>,
    pub y: Option<String>,
    /// Prediction locations for the stage-1 outcomes (values, if present,
    /// are the truth used by `score`).
    pub z_query: Option<String>,
    pub y_query: Option<String>,
    /// Full rows at locations whose outcomes are missing in `z`, for scoring
    /// imputations.
    pub z_missing_truth: Option<String>,
    pub z_outcomes: Option<Vec<String>>,
    pub y_outcomes: Option<Vec<String>>,
    /// Shared predictor columns; unset means `x1..x{p-1}` with `p` from
    /// the `simulate` section.
    pub predictors: Option<Vec<String>>,
    pub intercept: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Number of stage-1 factors.
    pub q: usize,
    /// Neighbors per location.
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub rw_step: Option<f64>,
    pub adapt: bool,
    pub parallel_latent: bool,
    pub parallel_chains: bool,
    pub mean_shift: bool,
    pub progress: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub nu: f64,
    pub a_scale: f64,
    /// Decay support; unset bounds come from the location geometry.
    pub phi_lo: Option<f64>,
    pub phi_hi: Option<f64>,
    /// `flat` or `normal`.
    pub beta: String,
    pub beta_mean: f64,
    pub beta_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    /// Outcome-specific factors; 0 disables them.
    pub q_v: usize,
    /// Neighbors for the outcome-specific factors; unset uses `model.m`.
    pub m: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub h_z: usize,
    pub q: usize,
    pub p: usize,
    pub phi: Option<Vec<f64>>,
    pub psi_lo: f64,
    pub psi_hi: f64,
    pub beta_sd: f64,
    pub n_missing: usize,
    pub n_holdout: usize,
    pub h_y: usize,
    pub q_v: usize,
    pub n_y: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub level: f64,
    /// Prediction neighbors; unset uses `model.m`.
    pub m: Option<usize>,
    /// `z`, `y` or `both`.
    pub stage: String,
    pub write_draws: bool,
    pub impute: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub level: f64,
    /// `median` or `mean`.
    pub point: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            out: "out".into(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            z: None,
            y: None,
            z_query: None,
            y_query: None,
            z_missing_truth: None,
            z_outcomes: None,
            y_outcomes: None,
            predictors: None,
            intercept: true,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { q: 2, m: 10 }
    }
}

impl Default for ChainSection {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            n_iter: c.n_iter,
            n_burn: c.n_burn,
            thin: c.thin,
            n_chains: c.n_chains,
            rw_step: c.rw_step,
            adapt: c.adapt,
            parallel_latent: c.parallel_latent,
            parallel_chains: c.parallel_chains,
            mean_shift: c.mean_shift,
            progress: true,
        }
    }
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            nu: DEFAULT_NU,
            a_scale: DEFAULT_A,
            phi_lo: None,
            phi_hi: None,
            beta: "flat".into(),
            beta_mean: 0.0,
            beta_var: 1e4,
        }
    }
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self { q_v: 0, m: None }
    }
}

impl Default for SimulateSection {
    fn default() -> Self {
        let s = SimSpec::default();
        Self {
            n: s.n,
            h_z: s.h_z,
            q: s.q,
            p: s.p,
            phi: s.phi,
            psi_lo: s.psi_range.0,
            psi_hi: s.psi_range.1,
            beta_sd: s.beta_sd,
            n_missing: s.n_missing,
            n_holdout: s.n_holdout,
            h_y: s.h_y,
            q_v: s.q_v,
            n_y: s.n_y,
        }
    }
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            level: 0.95,
            m: None,
            stage: "both".into(),
            write_draws: true,
            impute: true,
        }
    }
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            level: 0.95,
            point: "median".into(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            chain: ChainSection::default(),
            prior: PriorSection::default(),
            stage2: Stage2Section::default(),
            simulate: SimulateSection::default(),
            predict: PredictSection::default(),
            score: ScoreSection::default(),
        }
    }
}

/// Files written by `simulate`, relative to its output directory.
pub mod sim_files {
    pub const Z: &str = "z.csv";
    pub const Z_QUERY: &str = "z_holdout.csv";
    pub const Z_MISSING_TRUTH: &str = "z_missing_truth.csv";
    pub const Y: &str = "y.csv";
    pub const Y_QUERY: &str = "y_holdout.csv";
    pub const TRUTH: &str = "truth";
}

impl RunConfig {
    /// Parse and validate. Explicitly listed data files must exist.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SfError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SfError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SfError::Config(m));
        if self.model.q == 0 || self.model.m == 0 {
            return bad("model.q and model.m must be positive".into());
        }
        if self.stage2.m == Some(0) || self.predict.m == Some(0) {
            return bad("neighbor counts must be positive".into());
        }
        if self.run.out.is_empty() {
            return bad("run.out must name a directory".into());
        }
        self.chain_config().validate()?;
        self.beta_prior()?;
        if let (Some(lo), Some(hi)) = (self.prior.phi_lo, self.prior.phi_hi) {
            if !(lo > 0.0 && lo < hi) {
                return bad(format!("decay support ({lo}, {hi}) is invalid"));
            }
        }
        if !(self.prior.nu > 0.0 && self.prior.a_scale > 0.0) {
            return bad("prior.nu and prior.a_scale must be positive".into());
        }
        for (name, level) in [("predict.level", self.predict.level), ("score.level", self.score.level)] {
            if !(level > 0.0 && level < 1.0) {
                return bad(format!("{name} must lie in (0, 1)"));
            }
        }
        if !matches!(self.predict.stage.as_str(), "z" | "y" | "both") {
            return bad(format!("predict.stage must be z, y or both, not '{}'", self.predict.stage));
        }
        self.point_rule()?;
        self.sim_spec().validate()?;
        for path in [&self.data.z, &self.data.y, &self.data.z_query, &self.data.y_query, &self.data.z_missing_truth]
            .into_iter()
            .flatten()
        {
            if !Path::new(path).exists() {
                return bad(format!("data file '{path}' does not exist"));
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out)
    }

    pub fn step_dir(&self, step: &str) -> PathBuf {
        self.out_dir().join(step)
    }

    fn data_path(&self, explicit: &Option<String>, simulated: &str) -> PathBuf {
        match explicit {
            Some(p) => PathBuf::from(p),
            None => self.step_dir("simulate").join(simulated),
        }
    }

    pub fn z_path(&self) -> PathBuf {
        self.data_path(&self.data.z, sim_files::Z)
    }

    pub fn y_path(&self) -> PathBuf {
        self.data_path(&self.data.y, sim_files::Y)
    }

    pub fn z_query_path(&self) -> PathBuf {
        self.data_path(&self.data.z_query, sim_files::Z_QUERY)
    }

    pub fn y_query_path(&self) -> PathBuf {
        self.data_path(&self.data.y_query, sim_files::Y_QUERY)
    }

    pub fn z_missing_truth_path(&self) -> PathBuf {
        self.data_path(&self.data.z_missing_truth, sim_files::Z_MISSING_TRUTH)
    }

    fn predictors(&self) -> Vec<String> {
        match &self.data.predictors {
            Some(p) => p.clone(),
            None => (1..self.simulate.p).map(|k| format!("x{k}")).collect(),
        }
    }

    pub fn z_schema(&self) -> DatasetSchema {
        DatasetSchema {
            outcomes: self.data.z_outcomes.clone(),
            predictors: self.predictors(),
            intercept: self.data.intercept,
            per_outcome: Vec::new(),
        }
    }

    pub fn y_schema(&self) -> DatasetSchema {
        DatasetSchema {
            outcomes: self.data.y_outcomes.clone(),
            ..self.z_schema()
        }
    }

    pub fn chain_config(&self) -> ChainConfig {
        let c = &self.chain;
        ChainConfig {
            n_iter: c.n_iter,
            n_burn: c.n_burn,
            thin: c.thin,
            n_chains: c.n_chains,
            rw_step: c.rw_step,
            adapt: c.adapt,
            seed: self.run.seed,
            parallel_latent: c.parallel_latent,
            parallel_chains: c.parallel_chains,
            mean_shift: c.mean_shift,
            progress: c.progress,
        }
    }

    pub fn beta_prior(&self) -> Result<BetaPrior> {
        match self.prior.beta.as_str() {
            "flat" => Ok(BetaPrior::Flat),
            "normal" if self.prior.beta_var > 0.0 => Ok(BetaPrior::Normal {
                mean: self.prior.beta_mean,
                var: self.prior.beta_var,
            }),
            "normal" => Err(SfError::Config("prior.beta_var must be positive".into())),
            other => Err(SfError::Config(format!("prior.beta must be flat or normal, not '{other}'"))),
        }
    }

    /// Prior for `q` factors over `locs`; unset decay bounds come from the
    /// location geometry.
    pub fn prior_config(&self, q: usize, locs: &LocationSet) -> Result<PriorConfig> {
        let support = match (self.prior.phi_lo, self.prior.phi_hi) {
            (Some(lo), Some(hi)) => (lo, hi),
            (lo, hi) => {
                let (dlo, dhi) = default_phi_support(locs)?;
                (lo.unwrap_or(dlo), hi.unwrap_or(dhi))
            }
        };
        let p = PriorConfig {
            nu: self.prior.nu,
            a_scale: self.prior.a_scale,
            phi_support: vec![support; q],
            beta: self.beta_prior()?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn point_rule(&self) -> Result<PointRule> {
        match self.score.point.as_str() {
            "median" => Ok(PointRule::Median),
            "mean" => Ok(PointRule::Mean),
            other => Err(SfError::Config(format!("score.point must be median or mean, not '{other}'"))),
        }
    }

    pub fn sim_spec(&self) -> SimSpec {
        let s = &self.simulate;
        SimSpec {
            n: s.n,
            h_z: s.h_z,
            q: s.q,
            p: s.p,
            phi: s.phi.clone(),
            psi_range: (s.psi_lo, s.psi_hi),
            beta_sd: s.beta_sd,
            n_missing: s.n_missing,
            n_holdout: s.n_holdout,
            h_y: s.h_y,
            q_v: s.q_v,
            n_y: s.n_y,
            seed: self.run.seed,
        }
    }

    /// Fingerprint of everything a stage-1 fit depends on: the seed, the
    /// data schema and file contents, the model, chain and prior settings.
    /// Settings that cannot change the draws (progress output, whether
    /// chains run concurrently) are left out.
    pub fn stage1_hash(&self, z_contents: &[u8]) -> String {
        let mut key = String::new();
        let c = &self.chain;
        let _ = writeln!(key, "seed={}", self.run.seed);
        let _ = writeln!(key, "z={}", sha256_hex(z_contents));
        let _ = writeln!(key, "schema={:?}", self.z_schema());
        let _ = writeln!(key, "q={} m={}", self.model.q, self.model.m);
        let _ = writeln!(
            key,
            "chain={} {} {} {} {:?} {} {} {}",
            c.n_iter, c.n_burn, c.thin, c.n_chains, c.rw_step, c.adapt, c.parallel_latent, c.mean_shift
        );
        let _ = writeln!(key, "prior={:?}", self.prior);
        sha256_hex(key.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}
