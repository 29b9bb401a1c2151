//! One function per CLI subcommand. Each reuses whatever artifacts already
//! sit in the output directory and writes what it computes next to them.

use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::eval::{EvalReport, LambdaBin};
use super::experiment::{OutLayout, Pipeline, PruneMode, StageContext, StageError, StudyRow, VanillaTuning};
use super::report::{self, write_csv, write_json};
use super::Decoder;
use crate::datastore::Datastore;
use crate::error::Error;
use crate::head::{HeadParams, Variant};
use crate::train::TrainReport;

pub type CmdResult<T> = std::result::Result<T, StageError>;

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> CmdResult<()> {
    let layout = OutLayout::new(out);
    cfg.validate().stage("config")?;
    super::experiment::bind_config(&layout, cfg).stage("config")?;
    super::experiment::open_data(cfg, Some(&layout)).stage("gen-data")?;
    Ok(())
}

pub fn cmd_train_base(cfg: &ExperimentConfig, out: &Path) -> CmdResult<Vec<f64>> {
    let layout = OutLayout::new(out);
    cfg.validate().stage("config")?;
    super::experiment::bind_config(&layout, cfg).stage("config")?;
    let data = super::experiment::open_data(cfg, Some(&layout)).stage("gen-data")?;
    let (_, losses) = super::experiment::open_base(cfg, &data, Some(&layout)).stage("train-base")?;
    Ok(losses)
}

/// Returns the number of datastore entries.
pub fn cmd_build_datastore(cfg: &ExperimentConfig, out: &Path) -> CmdResult<usize> {
    Ok(Pipeline::open(cfg, Some(out))?.datastore.len())
}

pub fn cmd_tune_vanilla(cfg: &ExperimentConfig, out: &Path) -> CmdResult<VanillaTuning> {
    let mut p = Pipeline::open(cfg, Some(out))?;
    p.ensure_tuning().cloned().stage("tune-vanilla")
}

pub fn cmd_train_head(cfg: &ExperimentConfig, out: &Path, variant: Variant) -> CmdResult<Option<TrainReport>> {
    let mut p = Pipeline::open(cfg, Some(out))?;
    p.ensure_head(variant).stage("train-head")?;
    Ok(p.train_reports.remove(&variant))
}

/// Evaluates a saved head (or the base model) on the in-domain test split.
/// Unlike the studies, this never trains: a missing checkpoint is an error.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    variant: Option<Variant>,
    datastore: Option<&Path>,
) -> CmdResult<EvalReport> {
    let p = Pipeline::open(cfg, Some(out))?;
    let layout = OutLayout::new(out);
    let head = match variant {
        None => None,
        Some(v) => {
            let path = layout.head(v);
            if !path.exists() {
                return Err(Error::MissingFile(path)).stage("evaluate");
            }
            Some(HeadParams::load(&path).stage("evaluate")?)
        }
    };
    let ds = match datastore {
        Some(path) => Datastore::load_expecting(path, Some(p.base.dims().hidden)).stage("evaluate")?,
        None => p.datastore.clone(),
    };
    let decoder = head.as_ref().map_or(Decoder::Base, Decoder::Head);
    let rep = p.evaluate_on(decoder, &ds, &p.data.in_domain.test).stage("evaluate")?;
    let name = rep.variant.clone();
    write_csv(
        &layout.file(&format!("eval_{name}.csv")),
        &report::report_rows(std::slice::from_ref(&rep)),
    )
    .stage("evaluate")?;
    write_json(&layout.file(&format!("eval_{name}.json")), &rep).stage("evaluate")?;
    Ok(rep)
}

/// gen-data, train-base, build-datastore, train-head and evaluate for every
/// configured variant; writes `report.csv` and `report.json`.
pub fn cmd_pipeline(cfg: &ExperimentConfig, out: &Path) -> CmdResult<Vec<EvalReport>> {
    let mut p = Pipeline::open(cfg, Some(out))?;
    for name in &cfg.eval.variants {
        if name != "base" {
            let v: Variant = name.parse().stage("config")?;
            p.ensure_head(v).stage("train-head")?;
        }
    }
    let rows = p.run_variants().stage("evaluate")?;
    write_csv(&out.join("report.csv"), &report::report_rows(&rows)).stage("report")?;
    write_json(&out.join("report.json"), &rows).stage("report")?;
    Ok(rows)
}

pub fn prune_study_path(out: &Path, mode: PruneMode) -> PathBuf {
    out.join(format!("prune_{mode}.csv"))
}

pub fn cmd_prune_study(cfg: &ExperimentConfig, out: &Path, mode: PruneMode) -> CmdResult<Vec<StudyRow>> {
    let mut p = Pipeline::open(cfg, Some(out))?;
    let rows = p.prune_study(mode, &cfg.eval.prune_fractions).stage("prune-study")?;
    write_csv(&prune_study_path(out, mode), &report::study_rows(&rows)).stage("report")?;
    Ok(rows)
}

pub fn cmd_prelim_study(cfg: &ExperimentConfig, out: &Path) -> CmdResult<Vec<StudyRow>> {
    let mut p = Pipeline::open(cfg, Some(out))?;
    let rows = p.prelim_study().stage("prelim-study")?;
    write_csv(&out.join("prelim.csv"), &report::study_rows(&rows)).stage("report")?;
    Ok(rows)
}

pub fn cmd_lambda_analysis(cfg: &ExperimentConfig, out: &Path, variant: Variant) -> CmdResult<Vec<LambdaBin>> {
    let mut p = Pipeline::open(cfg, Some(out))?;
    let bins = p.lambda_analysis(variant).stage("lambda-analysis")?;
    let name = variant.to_string();
    write_csv(
        &out.join(format!("lambda_{name}.csv")),
        &report::lambda_rows(&name, &bins),
    )
    .stage("report")?;
    Ok(bins)
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> CmdResult<Vec<(String, EvalReport)>> {
    let mut p = Pipeline::open(cfg, Some(out))?;
    let rows = p.ablate().stage("ablate")?;
    write_csv(&out.join("ablation.csv"), &report::ablation_rows(&rows)).stage("report")?;
    Ok(rows)
}
