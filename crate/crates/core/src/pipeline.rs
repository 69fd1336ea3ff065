//! Subcommand bodies: each reads its inputs, writes under its own directory
//! below `run.out`, and finishes with a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::archive::ChainArchive;
use crate::config::{sha256_hex, sim_files, RunConfig};
use crate::dataset::{ingest_csv, ingest_csv_with, SpatialDataset};
use crate::error::{Result, SfError};
use crate::geometry::{dist, nearest_neighbors};
use crate::metrics::{score, ScoreReport};
use crate::predict::{impute_missing, predict_y, predict_z, PredictionRequest, PredictiveDraws};
use crate::sampler::{run_stage1, run_stage2};
use crate::simulate::generate_dataset;

pub const SUBCOMMANDS: [&str; 6] = ["simulate", "neighbors", "fit-stage1", "fit-stage2", "predict", "score"];

/// Output directory names under `run.out`.
pub mod dirs {
    pub const SIMULATE: &str = "simulate";
    pub const NEIGHBORS: &str = "neighbors";
    pub const STAGE1: &str = "stage1";
    pub const STAGE2: &str = "stage2";
    pub const PREDICT: &str = "predict";
    pub const SCORE: &str = "score";
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub dir: PathBuf,
    /// Files written, relative to `dir`.
    pub files: Vec<String>,
    pub notices: Vec<String>,
}

pub fn run_subcommand(name: &str, cfg: &RunConfig) -> Result<StepReport> {
    match name {
        "simulate" => simulate(cfg),
        "neighbors" => neighbors(cfg),
        "fit-stage1" => fit_stage1(cfg),
        "fit-stage2" => fit_stage2(cfg),
        "predict" => predict(cfg),
        "score" => score_step(cfg),
        other => Err(SfError::Config(format!("unknown subcommand '{other}'"))),
    }
}

/// Every step in order. Stage 2 runs only when the configuration simulates
/// or names second-stage data.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<StepReport>> {
    let mut out = vec![simulate(cfg)?, fit_stage1(cfg)?];
    if has_stage2_data(cfg) {
        out.push(fit_stage2(cfg)?);
    }
    out.push(predict(cfg)?);
    out.push(score_step(cfg)?);
    Ok(out)
}

fn has_stage2_data(cfg: &RunConfig) -> bool {
    cfg.data.y.is_some() || cfg.simulate.h_y > 0
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| SfError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| SfError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SfError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SfError::io(path, e))
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| SfError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| SfError::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Writes `config.toml` and `manifest.txt` (inputs and outputs with their
/// SHA-256) into `dir`.
fn finish(step: &str, cfg: &RunConfig, dir: &Path, inputs: &[PathBuf], notices: Vec<String>) -> Result<StepReport> {
    write(&dir.join("config.toml"), &cfg.to_canonical())?;
    let mut files = Vec::new();
    list_files(dir, dir, &mut files)?;
    files.retain(|f| f != "manifest.txt");
    let mut manifest = format!("step = {step}\nrerun = sfnngp {step} --config config.toml\n");
    for p in inputs {
        if p.is_dir() {
            let mut inner = Vec::new();
            list_files(p, p, &mut inner)?;
            for f in inner {
                let full = p.join(&f);
                manifest.push_str(&format!("input {} {}\n", sha256_hex(&read_bytes(&full)?), full.display()));
            }
        } else {
            manifest.push_str(&format!("input {} {}\n", sha256_hex(&read_bytes(p)?), p.display()));
        }
    }
    for f in &files {
        manifest.push_str(&format!("output {} {f}\n", sha256_hex(&read_bytes(&dir.join(f))?)));
    }
    write(&dir.join("manifest.txt"), &manifest)?;
    files.push("manifest.txt".into());
    Ok(StepReport {
        dir: dir.to_path_buf(),
        files,
        notices,
    })
}

pub fn simulate(cfg: &RunConfig) -> Result<StepReport> {
    let sim = generate_dataset(&cfg.sim_spec())?;
    let dir = cfg.step_dir(dirs::SIMULATE);
    fresh_dir(&dir)?;
    sim.data_z()?.export_csv(&dir.join(sim_files::Z))?;
    sim.holdout_z()?.export_csv(&dir.join(sim_files::Z_QUERY))?;
    sim.full_z.subset(&sim.missing_rows)?.export_csv(&dir.join(sim_files::Z_MISSING_TRUTH))?;
    if let Some(y) = sim.data_y()? {
        y.export_csv(&dir.join(sim_files::Y))?;
    }
    if let Some(y) = sim.holdout_y()? {
        y.export_csv(&dir.join(sim_files::Y_QUERY))?;
    }
    sim.truth_archive()?.write_dir(&dir.join(sim_files::TRUTH))?;
    finish("simulate", cfg, &dir, &[], Vec::new())
}

fn load_z(cfg: &RunConfig) -> Result<(SpatialDataset, Vec<u8>)> {
    let path = cfg.z_path();
    let bytes = read_bytes(&path)?;
    Ok((ingest_csv(&path, &cfg.z_schema())?, bytes))
}

pub fn neighbors(cfg: &RunConfig) -> Result<StepReport> {
    let (data, _) = load_z(cfg)?;
    let ordered = data.locs.ordered_coords();
    let graph = nearest_neighbors(&ordered, cfg.model.m)?;
    let order = data.locs.order();
    let mut csv = String::from("i,rank,j,distance\n");
    for (rank, &i) in order.iter().enumerate() {
        for &nr in graph.neighbors(rank) {
            let j = order[nr];
            csv.push_str(&format!("{i},{rank},{j},{}\n", dist(&ordered[rank], &ordered[nr])));
        }
    }
    let dir = cfg.step_dir(dirs::NEIGHBORS);
    fresh_dir(&dir)?;
    write(&dir.join("neighbors.csv"), &csv)?;
    finish("neighbors", cfg, &dir, &[cfg.z_path()], Vec::new())
}

pub fn fit_stage1(cfg: &RunConfig) -> Result<StepReport> {
    let (data, bytes) = load_z(cfg)?;
    let prior = cfg.prior_config(cfg.model.q, &data.locs)?;
    let mut ar = run_stage1(&data, cfg.model.q, cfg.model.m, &cfg.chain_config(), &prior)?;
    ar.set_meta("config_hash", cfg.stage1_hash(&bytes));
    let dir = cfg.step_dir(dirs::STAGE1);
    fresh_dir(&dir)?;
    ar.write_dir(&dir)?;
    finish("fit-stage1", cfg, &dir, &[cfg.z_path()], Vec::new())
}

/// Read the stage-1 archive and refuse it unless it was produced by this
/// configuration's stage-1 settings and data.
pub fn load_stage1(cfg: &RunConfig) -> Result<ChainArchive> {
    let ar = ChainArchive::read_dir(&cfg.step_dir(dirs::STAGE1))?;
    let expected = cfg.stage1_hash(&read_bytes(&cfg.z_path())?);
    let found = ar.meta_str("config_hash")?;
    if found != expected {
        return Err(SfError::Config(format!(
            "stage-1 archive config hash {found} does not match this configuration ({expected}); refit stage 1"
        )));
    }
    Ok(ar)
}

pub fn fit_stage2(cfg: &RunConfig) -> Result<StepReport> {
    let stage1 = load_stage1(cfg)?;
    let data = ingest_csv(&cfg.y_path(), &cfg.y_schema())?;
    let q_v = cfg.stage2.q_v;
    let prior = cfg.prior_config(q_v, &data.locs)?;
    let m = cfg.stage2.m.unwrap_or(cfg.model.m);
    let mut ar = run_stage2(&data, &stage1, q_v, m, &cfg.chain_config(), &prior)?;
    ar.set_meta("config_hash", stage1.meta_str("config_hash")?);
    let dir = cfg.step_dir(dirs::STAGE2);
    fresh_dir(&dir)?;
    ar.write_dir(&dir)?;
    finish("fit-stage2", cfg, &dir, &[cfg.y_path(), cfg.step_dir(dirs::STAGE1)], Vec::new())
}

fn load_query(path: &Path, cfg: &RunConfig, fitted: &ChainArchive, stage_y: bool) -> Result<SpatialDataset> {
    let mut schema = if stage_y { cfg.y_schema() } else { cfg.z_schema() };
    schema.outcomes = Some(fitted.meta_list("outcomes")?);
    ingest_csv_with(path, &schema, false)
}

fn write_draws(dir: &Path, name: &str, draws: &PredictiveDraws, cfg: &RunConfig, files: &mut Vec<String>) -> Result<()> {
    write(&dir.join(format!("{name}.csv")), &draws.to_csv(cfg.predict.level))?;
    if cfg.predict.write_draws {
        draws.to_archive().write_dir(&dir.join(format!("{name}_draws")))?;
    }
    files.push(name.to_string());
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<StepReport> {
    let stage = cfg.predict.stage.as_str();
    let m = cfg.predict.m.unwrap_or(cfg.model.m);
    let seed = cfg.run.seed;
    let dir = cfg.step_dir(dirs::PREDICT);
    fresh_dir(&dir)?;
    let mut inputs = Vec::new();
    let mut made = Vec::new();
    let mut notices = Vec::new();
    let stage1 = load_stage1(cfg)?;
    inputs.push(cfg.step_dir(dirs::STAGE1));
    if stage != "y" {
        let path = cfg.z_query_path();
        let query = load_query(&path, cfg, &stage1, false)?;
        let draws = predict_z(&stage1, &PredictionRequest { query: &query, m }, seed)?;
        write_draws(&dir, "predictions_z", &draws, cfg, &mut made)?;
        inputs.push(path);
        if cfg.predict.impute {
            let (data, _) = load_z(cfg)?;
            if data.missing_count() > 0 {
                let d = impute_missing(&stage1, &data, None)?;
                write_draws(&dir, "imputed_z", &d, cfg, &mut made)?;
                inputs.push(cfg.z_path());
            }
        }
    }
    let stage2_dir = cfg.step_dir(dirs::STAGE2);
    let want_y = stage == "y" || (stage == "both" && stage2_dir.join("meta.txt").exists());
    if want_y {
        let stage2 = ChainArchive::read_dir(&stage2_dir)?;
        if stage2.meta_str("config_hash")? != stage1.meta_str("config_hash")? {
            return Err(SfError::Config("stage-2 archive was fitted on a different stage-1 archive".into()));
        }
        inputs.push(stage2_dir);
        let path = cfg.y_query_path();
        let query = load_query(&path, cfg, &stage2, true)?;
        let draws = predict_y(&stage2, &stage1, &PredictionRequest { query: &query, m }, seed)?;
        write_draws(&dir, "predictions_y", &draws, cfg, &mut made)?;
        inputs.push(path);
        if cfg.predict.impute {
            let data = ingest_csv(&cfg.y_path(), &cfg.y_schema())?;
            if data.missing_count() > 0 {
                let d = impute_missing(&stage2, &data, None)?;
                notices.extend(d.notices.iter().cloned());
                write_draws(&dir, "imputed_y", &d, cfg, &mut made)?;
            }
        }
    } else if stage == "both" {
        notices.push("no stage-2 fit found; predicted stage-1 outcomes only".into());
    }
    write(&dir.join("contents.txt"), &(made.join("\n") + "\n"))?;
    finish("predict", cfg, &dir, &inputs, notices)
}

/// Score predictive draws against truth values from a dataset file, matched
/// by location id and outcome name. Cells with a missing truth are skipped.
pub fn score_draws(draws: &PredictiveDraws, truth: &SpatialDataset, level: f64, point: crate::metrics::PointRule) -> Result<ScoreReport> {
    let index = truth.locs.index_of_id();
    let mut items = Vec::with_capacity(draws.cells.len());
    for (c, &(i, j)) in draws.cells.iter().enumerate() {
        let id = &draws.ids[i];
        let row = *index
            .get(id.as_str())
            .ok_or_else(|| SfError::Config(format!("truth file has no location '{id}'")))?;
        let name = &draws.outcome_names[j];
        let col = truth
            .outcome_names
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| SfError::Config(format!("truth file has no outcome '{name}'")))?;
        let t = truth.value(row, col);
        if !t.is_nan() {
            items.push((j, draws.samples(c), t));
        }
    }
    if items.is_empty() {
        return Err(SfError::Config("no predicted cell has a truth value".into()));
    }
    score(&draws.outcome_names, &items, level, point)
}

pub fn score_step(cfg: &RunConfig) -> Result<StepReport> {
    let pdir = cfg.step_dir(dirs::PREDICT);
    let contents = fs::read_to_string(pdir.join("contents.txt")).map_err(|e| SfError::io(&pdir.join("contents.txt"), e))?;
    let point = cfg.point_rule()?;
    let dir = cfg.step_dir(dirs::SCORE);
    fresh_dir(&dir)?;
    let mut inputs = Vec::new();
    for name in contents.lines().filter(|l| !l.is_empty()) {
        let (truth_path, schema) = match name {
            "predictions_z" => (cfg.z_query_path(), cfg.z_schema()),
            "predictions_y" => (cfg.y_query_path(), cfg.y_schema()),
            "imputed_z" => (cfg.z_missing_truth_path(), cfg.z_schema()),
            // stage-2 imputations have no separate truth file
            _ => continue,
        };
        if name == "imputed_z" && !truth_path.exists() {
            continue;
        }
        let ddir = pdir.join(format!("{name}_draws"));
        if !ddir.exists() {
            return Err(SfError::Config(format!(
                "scoring needs raw predictive draws; rerun predict with predict.write_draws = true ({} missing)",
                ddir.display()
            )));
        }
        let draws = PredictiveDraws::from_archive(&ChainArchive::read_dir(&ddir)?)?;
        let truth = ingest_csv(&truth_path, &schema)?;
        let report = score_draws(&draws, &truth, cfg.score.level, point)?;
        let tag = name.replace("predictions_", "");
        write(&dir.join(format!("scores_{tag}.csv")), &report.to_csv())?;
        write(&dir.join(format!("scores_{tag}.txt")), &report.to_table())?;
        inputs.push(ddir);
        inputs.push(truth_path);
    }
    finish("score", cfg, &dir, &inputs, Vec::new())
}
