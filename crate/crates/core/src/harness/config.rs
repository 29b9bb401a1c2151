use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::base::{BaseDims, BaseTrainConfig};
use crate::datastore::DistanceKind;
use crate::error::{Error, Result};
use crate::head::HeadArch;
use crate::io;
use crate::rng::SeededRng;
use crate::task::ChainShape;
use crate::train::TrainConfig;

/// The default configuration, with comments.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub base: BaseConfig,
    pub head: HeadConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub shift_fraction: f64,
    pub general_sentences: usize,
    pub in_domain_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// (train, dev, test) fractions of both corpora.
    pub split: [f64; 3],
    pub chain: ChainShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub k: usize,
    pub wp_hidden: usize,
    pub dc_hidden: usize,
    pub shared_encoder: bool,
    pub distance: DistanceKind,
}

/// Head-training options; the seed is derived from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha0: f64,
    pub beta: f64,
    pub sigma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub key_noise: bool,
    pub pseudo_pair: bool,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rows of the pipeline report: any of base, vanilla, adaptive, robust.
    pub variants: Vec<String>,
    pub lambda_grid: Vec<f64>,
    pub temperature_grid: Vec<f64>,
    pub prune_fractions: Vec<f64>,
    /// Percent intervals of the confidence ranking removed in the
    /// preliminary study.
    pub prelim_intervals: Vec<[f64; 2]>,
    pub prelim_random_fraction: f64,
    /// Bin edges over base-model confidence for the λ analysis.
    pub lambda_bins: Vec<f64>,
    pub greedy: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            task: TaskConfig::default(),
            base: BaseConfig::default(),
            head: HeadConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            source_vocab: 50,
            target_vocab: 60,
            shift_fraction: 0.3,
            general_sentences: 2000,
            in_domain_sentences: 2500,
            min_len: 5,
            max_len: 15,
            split: [0.8, 0.1, 0.1],
            chain: ChainShape::default(),
        }
    }
}

impl Default for BaseConfig {
    fn default() -> Self {
        let b = BaseTrainConfig::default();
        BaseConfig {
            embed: 16,
            hidden: 32,
            epochs: b.epochs,
            lr: b.lr,
            batch_sentences: b.batch_sentences,
        }
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        let a = HeadArch::default();
        HeadConfig {
            k: a.k,
            wp_hidden: a.wp_hidden,
            dc_hidden: a.dc_hidden,
            shared_encoder: a.shared_encoder,
            distance: a.distance,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            alpha0: t.alpha0,
            beta: t.beta,
            sigma: t.sigma,
            lr: t.lr,
            batch_size: t.batch_size,
            steps: t.steps,
            key_noise: t.key_noise,
            pseudo_pair: t.pseudo_pair,
            decay: t.decay,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            variants: ["base", "vanilla", "adaptive", "robust"].map(String::from).to_vec(),
            lambda_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            temperature_grid: vec![1.0, 10.0, 100.0],
            prune_fractions: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            prelim_intervals: vec![[0.0, 20.0], [20.0, 40.0], [40.0, 60.0], [60.0, 80.0], [80.0, 100.0]],
            prelim_random_fraction: 0.2,
            lambda_bins: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            greedy: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&io::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        let bad = |m: String| Err(Error::Config(m));
        if t.source_vocab < 4 || t.target_vocab < t.source_vocab {
            return bad(format!(
                "need 4 <= V_s <= V_t, got {} / {}",
                t.source_vocab, t.target_vocab
            ));
        }
        if !(0.0..=1.0).contains(&t.shift_fraction) {
            return bad(format!("shift_fraction {} not in [0, 1]", t.shift_fraction));
        }
        if t.min_len < 2 || t.max_len < t.min_len {
            return bad(format!("length range [{}, {}] invalid", t.min_len, t.max_len));
        }
        if t.split.iter().any(|&r| r < 0.0) || (t.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split {:?} must be non-negative and sum to 1", t.split));
        }
        if t.general_sentences == 0 || t.in_domain_sentences == 0 {
            return bad("corpus sizes must be positive".into());
        }
        if self.head.k == 0 || self.head.k > t.target_vocab {
            return bad(format!("K={} must be in 1..=V_t", self.head.k));
        }
        for v in &self.eval.variants {
            if !["base", "vanilla", "adaptive", "robust"].contains(&v.as_str()) {
                return bad(format!("unknown variant `{v}` in eval.variants"));
            }
        }
        if self.eval.lambda_grid.is_empty() || self.eval.temperature_grid.is_empty() {
            return bad("vanilla tuning grids must be non-empty".into());
        }
        if self.eval.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l))
            || self.eval.temperature_grid.iter().any(|&x| !(x > 0.0))
        {
            return bad("λ grid must lie in [0, 1] and T grid be positive".into());
        }
        if self.eval.lambda_bins.len() < 2 || self.eval.lambda_bins.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lambda_bins must be at least two increasing edges".into());
        }
        self.train_config(crate::head::Variant::Robust).validate()
    }

    fn derived_seed(&self, label: &str) -> u64 {
        SeededRng::new(self.seed).child(label).next_u64()
    }

    pub fn task_seed(&self) -> u64 {
        self.derived_seed("task")
    }

    pub fn base_dims(&self) -> BaseDims {
        BaseDims {
            source_vocab: self.task.source_vocab,
            target_vocab: self.task.target_vocab,
            embed: self.base.embed,
            hidden: self.base.hidden,
        }
    }

    pub fn base_init_seed(&self) -> u64 {
        self.derived_seed("base-init")
    }

    pub fn base_train_config(&self) -> BaseTrainConfig {
        BaseTrainConfig {
            epochs: self.base.epochs,
            lr: self.base.lr,
            batch_sentences: self.base.batch_sentences,
            seed: self.derived_seed("base-train"),
        }
    }

    pub fn head_arch(&self) -> HeadArch {
        HeadArch {
            k: self.head.k,
            wp_hidden: self.head.wp_hidden,
            dc_hidden: self.head.dc_hidden,
            shared_encoder: self.head.shared_encoder,
            distance: self.head.distance,
            ..HeadArch::default()
        }
    }

    pub fn head_init_seed(&self, variant: crate::head::Variant) -> u64 {
        self.derived_seed(&format!("head-init/{variant}"))
    }

    pub fn train_config(&self, variant: crate::head::Variant) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            k: self.head.k,
            alpha0: t.alpha0,
            beta: t.beta,
            sigma: t.sigma,
            lr: t.lr,
            batch_size: t.batch_size,
            steps: t.steps,
            seed: self.derived_seed(&format!("head-train/{variant}")),
            key_noise: t.key_noise,
            pseudo_pair: t.pseudo_pair,
            decay: t.decay,
        }
    }
}
