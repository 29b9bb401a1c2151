//! CSV and JSON outputs. Every CSV row starts with a `schema` column naming
//! the row type and its version.

use std::path::Path;

use serde::Serialize;

use super::eval::{EvalReport, LambdaBin};
use super::experiment::{StudyRow, VanillaTuning};
use crate::error::{Error, Result};
use crate::io;
use crate::train::TrainReport;

pub const REPORT_SCHEMA: &str = "eval-report/1";
pub const TUNING_SCHEMA: &str = "vanilla-tuning/1";
pub const STUDY_SCHEMA: &str = "study/1";
pub const LAMBDA_SCHEMA: &str = "lambda-bins/1";
pub const ABLATION_SCHEMA: &str = "ablation/1";
pub const TRAIN_SCHEMA: &str = "train-intervals/1";

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Corrupt {
        path: "<csv buffer>".into(),
        detail: e.to_string(),
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    io::write_atomic(path, &csv_bytes(rows)?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::write_atomic(path, text.as_bytes())
}

#[derive(Debug, Serialize)]
pub struct ReportRow<'a> {
    pub schema: &'static str,
    pub label: &'a str,
    pub variant: &'a str,
    pub token_accuracy: f64,
    pub exact_match: Option<f64>,
    pub precision_1: Option<f64>,
    pub precision_2: Option<f64>,
    pub mean_lambda: f64,
    pub gt_retrieval_rate: f64,
    pub datastore_size: usize,
    pub timesteps: usize,
    pub sentences: usize,
}

impl<'a> ReportRow<'a> {
    pub fn new(label: &'a str, r: &'a EvalReport) -> Self {
        ReportRow {
            schema: REPORT_SCHEMA,
            label,
            variant: &r.variant,
            token_accuracy: r.token_accuracy,
            exact_match: r.exact_match,
            precision_1: r.precision_1,
            precision_2: r.precision_2,
            mean_lambda: r.mean_lambda,
            gt_retrieval_rate: r.gt_retrieval_rate,
            datastore_size: r.datastore_size,
            timesteps: r.timesteps,
            sentences: r.sentences,
        }
    }
}

pub fn report_rows(reports: &[EvalReport]) -> Vec<ReportRow<'_>> {
    reports.iter().map(|r| ReportRow::new(&r.variant, r)).collect()
}

#[derive(Debug, Serialize)]
pub struct TuningRow {
    pub schema: &'static str,
    pub lambda: f64,
    pub temperature: f64,
    pub dev_accuracy: f64,
    pub selected: bool,
}

pub fn tuning_rows(t: &VanillaTuning) -> Vec<TuningRow> {
    t.cells
        .iter()
        .map(|c| TuningRow {
            schema: TUNING_SCHEMA,
            lambda: c.lambda,
            temperature: c.temperature,
            dev_accuracy: c.dev_accuracy,
            selected: c.lambda == t.lambda && c.temperature == t.temperature,
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct StudyCsvRow<'a> {
    pub schema: &'static str,
    pub condition: &'a str,
    pub fraction: f64,
    pub variant: &'a str,
    pub datastore_size: usize,
    pub token_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
    pub gt_retrieval_rate: Option<f64>,
    pub mean_lambda: Option<f64>,
    pub error: &'a str,
}

pub fn study_rows(rows: &[StudyRow]) -> Vec<StudyCsvRow<'_>> {
    rows.iter()
        .map(|r| StudyCsvRow {
            schema: STUDY_SCHEMA,
            condition: &r.condition,
            fraction: r.fraction,
            variant: &r.variant,
            datastore_size: r.datastore_size,
            token_accuracy: r.token_accuracy,
            exact_match: r.exact_match,
            gt_retrieval_rate: r.gt_retrieval_rate,
            mean_lambda: r.mean_lambda,
            error: &r.error,
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct LambdaRow<'a> {
    pub schema: &'static str,
    pub variant: &'a str,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub ground_truth: &'static str,
    pub count: usize,
    pub mean_lambda: Option<f64>,
}

pub fn lambda_rows<'a>(variant: &'a str, bins: &[LambdaBin]) -> Vec<LambdaRow<'a>> {
    bins.iter()
        .map(|b| LambdaRow {
            schema: LAMBDA_SCHEMA,
            variant,
            bin_lo: b.lo,
            bin_hi: b.hi,
            ground_truth: if b.retrieved { "retrieved" } else { "missed" },
            count: b.count,
            mean_lambda: b.mean_lambda,
        })
        .collect()
}

pub fn ablation_rows(rows: &[(String, EvalReport)]) -> Vec<ReportRow<'_>> {
    rows.iter()
        .map(|(label, r)| ReportRow {
            schema: ABLATION_SCHEMA,
            ..ReportRow::new(label, r)
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TrainRow<'a> {
    pub schema: &'static str,
    pub variant: &'a str,
    pub start_step: usize,
    pub end_step: usize,
    pub mean_loss: f64,
    pub mean_alpha: f64,
    pub key_noise_events: usize,
    pub pseudo_pair_events: usize,
}

pub fn train_rows(r: &TrainReport) -> Vec<TrainRow<'_>> {
    r.intervals
        .iter()
        .map(|i| TrainRow {
            schema: TRAIN_SCHEMA,
            variant: &r.variant,
            start_step: i.start_step,
            end_step: i.end_step,
            mean_loss: i.mean_loss,
            mean_alpha: i.mean_alpha,
            key_noise_events: i.key_noise_events,
            pseudo_pair_events: i.pseudo_pair_events,
        })
        .collect()
}
