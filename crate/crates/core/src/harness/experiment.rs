use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, lambda_bins, teacher_forced_outcomes, Decoder, EvalReport, LambdaBin, Retriever};
use super::report::{self, write_csv, write_json};
use crate::base::{train_base, BaseModel};
use crate::datastore::{build_datastore, prune_confidence_interval, prune_confidence_top, prune_random, Datastore};
use crate::error::{Error, Result};
use crate::head::{HeadArch, HeadParams, Variant};
use crate::io;
use crate::rng::SeededRng;
use crate::task::{generate_domain_pair_with, sample_corpus, split_corpus, Corpus, DomainSpec};
use crate::train::{prepare_items, train_head_on_items, TrainConfig, TrainItem, TrainReport};

/// Train/dev/test parts of one domain.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub general_spec: DomainSpec,
    pub in_domain_spec: DomainSpec,
    pub general: Splits,
    pub in_domain: Splits,
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    let t = &cfg.task;
    let seed = cfg.task_seed();
    let (general_spec, in_domain_spec) =
        generate_domain_pair_with(seed, t.source_vocab, t.target_vocab, t.shift_fraction, t.chain)?;
    let ratios = (t.split[0], t.split[1], t.split[2]);
    let split = |spec: &DomainSpec, n: usize| -> Result<Splits> {
        let corpus = sample_corpus(spec, n, t.min_len, t.max_len, seed)?;
        let (train, dev, test) = split_corpus(&corpus, ratios)?;
        Ok(Splits { train, dev, test })
    };
    Ok(TaskData {
        general: split(&general_spec, t.general_sentences)?,
        in_domain: split(&in_domain_spec, t.in_domain_sentences)?,
        general_spec,
        in_domain_spec,
    })
}

/// Base model trained on the general-domain training split.
pub fn train_base_model(cfg: &ExperimentConfig, data: &TaskData) -> Result<(BaseModel, Vec<f64>)> {
    let init = BaseModel::init(cfg.base_dims(), cfg.base_init_seed());
    train_base(&init, &data.general.train, &cfg.base_train_config())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneCell {
    pub lambda: f64,
    pub temperature: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaTuning {
    pub lambda: f64,
    pub temperature: f64,
    pub dev_accuracy: f64,
    pub cells: Vec<TuneCell>,
}

/// Grid search on dev teacher-forced accuracy. Ties go to the smaller λ,
/// then the smaller T.
pub fn tune_vanilla(
    arch: &HeadArch,
    base: &BaseModel,
    ds: &Datastore,
    dev: &Corpus,
    lambdas: &[f64],
    temperatures: &[f64],
) -> Result<VanillaTuning> {
    if lambdas.is_empty() || temperatures.is_empty() {
        return Err(Error::InvalidArgument("vanilla tuning grids must be non-empty".into()));
    }
    let mut retriever = Retriever::new(ds, arch.k, arch.distance)?;
    let mut cells = Vec::with_capacity(lambdas.len() * temperatures.len());
    for &lambda in lambdas {
        for &temperature in temperatures {
            let head = HeadParams::vanilla(*arch, lambda, temperature)?;
            let steps = teacher_forced_outcomes(base, Decoder::Head(&head), &mut retriever, dev)?;
            let correct = steps.iter().filter(|s| s.correct).count();
            cells.push(TuneCell {
                lambda,
                temperature,
                dev_accuracy: correct as f64 / steps.len().max(1) as f64,
            });
        }
    }
    let best = cells
        .iter()
        .min_by(|a, b| {
            b.dev_accuracy
                .total_cmp(&a.dev_accuracy)
                .then(a.lambda.total_cmp(&b.lambda))
                .then(a.temperature.total_cmp(&b.temperature))
        })
        .expect("non-empty grid")
        .clone();
    Ok(VanillaTuning {
        lambda: best.lambda,
        temperature: best.temperature,
        dev_accuracy: best.dev_accuracy,
        cells,
    })
}

/// The datastore-dependent state shared by every head trained on it.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub data: TaskData,
    pub base: BaseModel,
    pub base_losses: Vec<f64>,
    pub datastore: Datastore,
    pub tuning: Option<VanillaTuning>,
    pub heads: BTreeMap<Variant, HeadParams>,
    pub train_reports: BTreeMap<Variant, TrainReport>,
    dev_items: Option<Vec<TrainItem>>,
    layout: Option<OutLayout>,
}

/// A failure tagged with the pipeline stage that produced it.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// File names inside an output directory.
pub struct OutLayout {
    root: PathBuf,
}

impl OutLayout {
    pub fn new(root: &Path) -> Self {
        OutLayout {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn corpus(&self, domain: &str, part: &str) -> PathBuf {
        self.root.join("data").join(format!("{domain}.{part}.txt"))
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("base.knbm")
    }

    pub fn base_losses(&self) -> PathBuf {
        self.root.join("base_losses.json")
    }

    pub fn datastore(&self) -> PathBuf {
        self.root.join("datastore.knds")
    }

    pub fn tuning(&self) -> PathBuf {
        self.root.join("vanilla.json")
    }

    pub fn head(&self, variant: Variant) -> PathBuf {
        self.root.join("heads").join(format!("{variant}.knhd"))
    }

    pub fn train_log(&self, variant: Variant) -> PathBuf {
        self.root.join("heads").join(format!("{variant}.train.csv"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

const PARTS: [&str; 3] = ["train", "dev", "test"];

fn load_splits(layout: &OutLayout, domain: &str) -> Result<Option<Splits>> {
    let paths: Vec<PathBuf> = PARTS.iter().map(|p| layout.corpus(domain, p)).collect();
    if !paths.iter().all(|p| p.exists()) {
        return Ok(None);
    }
    Ok(Some(Splits {
        train: Corpus::load(&paths[0])?,
        dev: Corpus::load(&paths[1])?,
        test: Corpus::load(&paths[2])?,
    }))
}

fn save_splits(layout: &OutLayout, domain: &str, s: &Splits) -> Result<()> {
    for (part, c) in PARTS.iter().zip([&s.train, &s.dev, &s.test]) {
        c.save(&layout.corpus(domain, part))?;
    }
    Ok(())
}

/// Writes the resolved config, or checks it against the one already there.
pub fn bind_config(layout: &OutLayout, config: &ExperimentConfig) -> Result<()> {
    let path = layout.config();
    if path.exists() {
        let existing = ExperimentConfig::load(&path)?;
        if &existing != config {
            return Err(Error::Config(format!(
                "{} holds a different configuration; use a fresh output directory",
                path.display()
            )));
        }
        return Ok(());
    }
    io::write_atomic(&path, config.to_toml().as_bytes())
}

/// Domain specs are cheap and always regenerated; corpora are read back
/// when present.
pub fn open_data(config: &ExperimentConfig, layout: Option<&OutLayout>) -> Result<TaskData> {
    let mut data = generate_data(config)?;
    if let Some(layout) = layout {
        for (domain, splits) in [("general", &mut data.general), ("in_domain", &mut data.in_domain)] {
            match load_splits(layout, domain)? {
                Some(s) => *splits = s,
                None => save_splits(layout, domain, splits)?,
            }
        }
    }
    Ok(data)
}

pub fn open_base(
    config: &ExperimentConfig,
    data: &TaskData,
    layout: Option<&OutLayout>,
) -> Result<(BaseModel, Vec<f64>)> {
    if let Some(layout) = layout {
        if layout.base().exists() {
            let model = BaseModel::load(&layout.base())?;
            let losses = match layout.base_losses().exists() {
                true => serde_json::from_str(&io::read_to_string(&layout.base_losses())?)?,
                false => Vec::new(),
            };
            return Ok((model, losses));
        }
    }
    let (model, losses) = train_base_model(config, data)?;
    if let Some(layout) = layout {
        model.save(&layout.base())?;
        write_json(&layout.base_losses(), &losses)?;
    }
    Ok((model, losses))
}

pub fn open_datastore(base: &BaseModel, data: &TaskData, layout: Option<&OutLayout>) -> Result<Datastore> {
    if let Some(layout) = layout {
        if layout.datastore().exists() {
            return Datastore::load_expecting(&layout.datastore(), Some(base.dims().hidden));
        }
    }
    let ds = build_datastore(base, &data.in_domain.train)?;
    if let Some(layout) = layout {
        ds.save(&layout.datastore())?;
    }
    Ok(ds)
}

impl Pipeline {
    /// Data generation, base training, and the in-domain datastore, in memory.
    pub fn prepare(config: &ExperimentConfig) -> std::result::Result<Self, StageError> {
        Self::open(config, None)
    }

    /// Like [`Pipeline::prepare`], but every stage first looks for its
    /// artifact under `out` and saves what it had to compute.
    pub fn open(config: &ExperimentConfig, out: Option<&Path>) -> std::result::Result<Self, StageError> {
        config.validate().stage("config")?;
        let layout = out.map(OutLayout::new);
        if let Some(l) = &layout {
            bind_config(l, config).stage("config")?;
        }
        let data = open_data(config, layout.as_ref()).stage("gen-data")?;
        let (base, base_losses) = open_base(config, &data, layout.as_ref()).stage("train-base")?;
        let datastore = open_datastore(&base, &data, layout.as_ref()).stage("build-datastore")?;
        Ok(Pipeline {
            config: config.clone(),
            data,
            base,
            base_losses,
            datastore,
            tuning: None,
            heads: BTreeMap::new(),
            train_reports: BTreeMap::new(),
            dev_items: None,
            layout,
        })
    }

    pub fn layout(&self) -> Option<&OutLayout> {
        self.layout.as_ref()
    }

    pub fn arch(&self) -> HeadArch {
        self.config.head_arch()
    }

    pub fn ensure_tuning(&mut self) -> Result<&VanillaTuning> {
        if self.tuning.is_none() {
            if let Some(l) = &self.layout {
                if l.tuning().exists() {
                    self.tuning = Some(serde_json::from_str(&io::read_to_string(&l.tuning())?)?);
                    return Ok(self.tuning.as_ref().expect("just set"));
                }
            }
            let e = &self.config.eval;
            let tuning = tune_vanilla(
                &self.arch(),
                &self.base,
                &self.datastore,
                &self.data.in_domain.dev,
                &e.lambda_grid,
                &e.temperature_grid,
            )?;
            if let Some(l) = &self.layout {
                write_json(&l.tuning(), &tuning)?;
                write_csv(&l.file("vanilla_tuning.csv"), &report::tuning_rows(&tuning))?;
            }
            self.tuning = Some(tuning);
        }
        Ok(self.tuning.as_ref().expect("just set"))
    }

    fn dev_items(&mut self) -> Result<&[TrainItem]> {
        if self.dev_items.is_none() {
            let arch = self.arch();
            self.dev_items = Some(prepare_items(
                &self.base,
                &self.datastore,
                &self.data.in_domain.dev,
                arch.k,
                arch.distance,
            )?);
        }
        Ok(self.dev_items.as_deref().expect("just set"))
    }

    /// Trains a head of the given architecture on the dev split.
    pub fn train(&mut self, variant: Variant, arch: HeadArch, cfg: &TrainConfig) -> Result<(HeadParams, TrainReport)> {
        let mut init = HeadParams::init(variant, arch, self.config.head_init_seed(variant));
        if variant == Variant::Robust && arch.fixed_lambda {
            let lambda = self.ensure_tuning()?.lambda;
            init.set_fixed_lambda(lambda)?;
        }
        train_head_on_items(&init, self.dev_items()?, cfg)
    }

    pub fn ensure_head(&mut self, variant: Variant) -> Result<&HeadParams> {
        if !self.heads.contains_key(&variant) {
            if let Some(l) = &self.layout {
                let path = l.head(variant);
                if path.exists() {
                    let head = HeadParams::load(&path)?;
                    if head.variant() != variant || head.arch() != &self.arch() {
                        return Err(Error::Corrupt {
                            path,
                            detail: "checkpoint does not match the configured head".into(),
                        });
                    }
                    self.heads.insert(variant, head);
                    return Ok(&self.heads[&variant]);
                }
            }
            let (head, report) = match variant {
                Variant::Vanilla => {
                    let t = self.ensure_tuning()?;
                    let (lambda, temperature) = (t.lambda, t.temperature);
                    (
                        HeadParams::vanilla(self.arch(), lambda, temperature)?,
                        TrainReport::default(),
                    )
                }
                _ => {
                    let cfg = self.config.train_config(variant);
                    self.train(variant, self.arch(), &cfg)?
                }
            };
            if let Some(l) = &self.layout {
                head.save(&l.head(variant))?;
                if variant != Variant::Vanilla {
                    write_csv(&l.train_log(variant), &report::train_rows(&report))?;
                }
            }
            self.heads.insert(variant, head);
            self.train_reports.insert(variant, report);
        }
        Ok(&self.heads[&variant])
    }

    pub fn evaluate_on(&self, decoder: Decoder, ds: &Datastore, corpus: &Corpus) -> Result<EvalReport> {
        let arch = self.arch();
        let mut retriever = Retriever::new(ds, arch.k, arch.distance)?;
        evaluate(&self.base, decoder, &mut retriever, corpus, self.config.eval.greedy)
    }

    /// One report row per configured variant, on the in-domain test split.
    pub fn run_variants(&mut self) -> Result<Vec<EvalReport>> {
        let names = self.config.eval.variants.clone();
        let mut rows = Vec::with_capacity(names.len());
        for name in &names {
            let row = if name == "base" {
                self.evaluate_on(Decoder::Base, &self.datastore, &self.data.in_domain.test)?
            } else {
                let variant: Variant = name.parse()?;
                self.ensure_head(variant)?;
                let head = &self.heads[&variant];
                self.evaluate_on(Decoder::Head(head), &self.datastore, &self.data.in_domain.test)?
            };
            rows.push(row);
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    Random,
    ConfTop,
}

impl std::str::FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PruneMode::Random),
            "conf-top" => Ok(PruneMode::ConfTop),
            other => Err(Error::InvalidArgument(format!(
                "unknown prune mode `{other}` (random, conf-top)"
            ))),
        }
    }
}

impl std::fmt::Display for PruneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneMode::Random => "random",
            PruneMode::ConfTop => "conf-top",
        })
    }
}

/// A study row: a pruned datastore evaluated with a fixed, already trained
/// head. A failed condition keeps its row with `error` set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub condition: String,
    pub fraction: f64,
    pub variant: String,
    pub datastore_size: usize,
    pub token_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
    pub gt_retrieval_rate: Option<f64>,
    pub mean_lambda: Option<f64>,
    pub error: String,
}

impl StudyRow {
    fn from_result(condition: String, fraction: f64, variant: String, size: usize, r: Result<EvalReport>) -> Self {
        match r {
            Ok(rep) => StudyRow {
                condition,
                fraction,
                variant,
                datastore_size: rep.datastore_size,
                token_accuracy: Some(rep.token_accuracy),
                exact_match: rep.exact_match,
                gt_retrieval_rate: Some(rep.gt_retrieval_rate),
                mean_lambda: Some(rep.mean_lambda),
                error: String::new(),
            },
            Err(e) => StudyRow {
                condition,
                fraction,
                variant,
                datastore_size: size,
                token_accuracy: None,
                exact_match: None,
                gt_retrieval_rate: None,
                mean_lambda: None,
                error: e.to_string(),
            },
        }
    }
}

impl Pipeline {
    pub fn prune_seed(&self) -> u64 {
        SeededRng::new(self.config.seed).child("prune-random").next_u64()
    }

    fn study(
        &mut self,
        variants: &[Variant],
        conditions: Vec<(String, f64, Result<Datastore>)>,
    ) -> Result<Vec<StudyRow>> {
        for &v in variants {
            self.ensure_head(v)?;
        }
        let mut rows = Vec::new();
        for (condition, fraction, pruned) in conditions {
            for &v in variants {
                let head = &self.heads[&v];
                let row = match &pruned {
                    Ok(ds) => StudyRow::from_result(
                        condition.clone(),
                        fraction,
                        v.to_string(),
                        ds.len(),
                        self.evaluate_on(Decoder::Head(head), ds, &self.data.in_domain.test),
                    ),
                    Err(e) => StudyRow::from_result(
                        condition.clone(),
                        fraction,
                        v.to_string(),
                        0,
                        Err(Error::InvalidArgument(e.to_string())),
                    ),
                };
                rows.push(row);
            }
        }
        Ok(rows)
    }

    /// Adaptive and robust heads against shrinking datastores, no retraining.
    pub fn prune_study(&mut self, mode: PruneMode, fractions: &[f64]) -> Result<Vec<StudyRow>> {
        let seed = self.prune_seed();
        let conditions = fractions
            .iter()
            .map(|&f| {
                let ds = match mode {
                    PruneMode::Random => prune_random(&self.datastore, f, seed),
                    PruneMode::ConfTop => prune_confidence_top(&self.datastore, f),
                };
                (mode.to_string(), f, ds)
            })
            .collect();
        self.study(&[Variant::Adaptive, Variant::Robust], conditions)
    }

    /// Vanilla and adaptive heads with one confidence interval removed at a
    /// time, against the full and a randomly pruned datastore.
    pub fn prelim_study(&mut self) -> Result<Vec<StudyRow>> {
        let e = self.config.eval.clone();
        let mut conditions = vec![("all".to_string(), 0.0, Ok(self.datastore.clone()))];
        let rf = e.prelim_random_fraction;
        conditions.push((
            format!("random-{}", rf * 100.0),
            rf,
            prune_random(&self.datastore, rf, self.prune_seed()),
        ));
        for [lo, hi] in e.prelim_intervals {
            conditions.push((
                format!("interval-{lo}-{hi}"),
                (hi - lo) / 100.0,
                prune_confidence_interval(&self.datastore, lo, hi),
            ));
        }
        self.study(&[Variant::Vanilla, Variant::Adaptive], conditions)
    }

    /// Mean λ per base-confidence bin, split by whether the reference was
    /// among the retrieved values.
    pub fn lambda_analysis(&mut self, variant: Variant) -> Result<Vec<LambdaBin>> {
        self.ensure_head(variant)?;
        let head = &self.heads[&variant];
        let arch = self.arch();
        let mut retriever = Retriever::new(&self.datastore, arch.k, arch.distance)?;
        let steps = teacher_forced_outcomes(
            &self.base,
            Decoder::Head(head),
            &mut retriever,
            &self.data.in_domain.test,
        )?;
        lambda_bins(&steps, &self.config.eval.lambda_bins)
    }

    /// The robust head and its six ablations.
    pub fn ablate(&mut self) -> Result<Vec<(String, EvalReport)>> {
        let base_cfg = self.config.train_config(Variant::Robust);
        let arch = self.arch();
        let runs: [(&str, HeadArch, TrainConfig); 6] = [
            (
                "w/o WP",
                HeadArch {
                    fixed_lambda: true,
                    ..arch
                },
                base_cfg,
            ),
            ("w/o DC", HeadArch { use_dc: false, ..arch }, base_cfg),
            (
                "w/o vector perturbation",
                arch,
                TrainConfig {
                    key_noise: false,
                    ..base_cfg
                },
            ),
            (
                "w/o pseudo pair",
                arch,
                TrainConfig {
                    pseudo_pair: false,
                    ..base_cfg
                },
            ),
            (
                "w/o robust training",
                arch,
                TrainConfig {
                    key_noise: false,
                    pseudo_pair: false,
                    ..base_cfg
                },
            ),
            (
                "w/o decay",
                arch,
                TrainConfig {
                    decay: false,
                    ..base_cfg
                },
            ),
        ];
        self.ensure_head(Variant::Robust)?;
        let full = self.evaluate_on(
            Decoder::Head(&self.heads[&Variant::Robust]),
            &self.datastore,
            &self.data.in_domain.test,
        )?;
        let mut rows = vec![("full".to_string(), full)];
        for (name, a, cfg) in runs {
            let (head, _) = self.train(Variant::Robust, a, &cfg)?;
            let rep = self.evaluate_on(Decoder::Head(&head), &self.datastore, &self.data.in_domain.test)?;
            rows.push((name.to_string(), rep));
        }
        Ok(rows)
    }
}
