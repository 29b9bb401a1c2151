use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use knnmt_core::harness::commands::{self, prune_study_path};
use knnmt_core::harness::config::DEFAULT_CONFIG_TOML;
use knnmt_core::harness::{EvalReport, ExperimentConfig, PruneMode};
use knnmt_core::head::Variant;

#[derive(Parser)]
#[command(
    name = "knnmt",
    version,
    about = "Confidence-aware kNN-MT experiments on a synthetic translation task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Existing artifacts in it are reused.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the general and in-domain corpora and split them.
    GenData(Common),
    /// Train the base model on the general-domain training split.
    TrainBase(Common),
    /// Build the datastore from the in-domain training split.
    BuildDatastore(Common),
    /// Grid-search the vanilla head's λ and T on the dev split.
    TuneVanilla(Common),
    /// Train one head on the dev split.
    TrainHead {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "robust")]
        variant: Variant,
    },
    /// Evaluate a saved head (or the base model) on the in-domain test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// base, vanilla, adaptive or robust.
        #[arg(long, default_value = "robust")]
        variant: String,
        /// Datastore to evaluate against instead of the one in --out.
        #[arg(long)]
        datastore: Option<PathBuf>,
    },
    /// Evaluate adaptive and robust heads on pruned datastores.
    PruneStudy {
        #[command(flatten)]
        common: Common,
        /// random or conf-top.
        #[arg(long, default_value = "conf-top")]
        mode: PruneMode,
    },
    /// Remove confidence-rank intervals and evaluate vanilla and adaptive heads.
    PrelimStudy(Common),
    /// Mean λ by base-model confidence, split by retrieval of the reference.
    LambdaAnalysis {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "robust")]
        variant: Variant,
    },
    /// Train and evaluate the robust head's ablations.
    Ablate(Common),
    /// All stages end to end; one report row per configured variant.
    Pipeline(Common),
    /// Print the commented default configuration.
    DefaultConfig,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate().context("validating config")?;
    Ok(cfg)
}

fn print_report(r: &EvalReport) {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{:<10} acc {:.4}  exact {}  p1 {}  p2 {}  λ {:.3}  gt-retrieved {:.3}  datastore {}",
        r.variant,
        r.token_accuracy,
        opt(r.exact_match),
        opt(r.precision_1),
        opt(r.precision_2),
        r.mean_lambda,
        r.gt_retrieval_rate,
        r.datastore_size
    );
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::DefaultConfig => print!("{DEFAULT_CONFIG_TOML}"),
        Command::GenData(c) => {
            commands::cmd_gen_data(&load_config(&c)?, &c.out)?;
            wrote(&c.out.join("data"));
        }
        Command::TrainBase(c) => {
            let losses = commands::cmd_train_base(&load_config(&c)?, &c.out)?;
            for (epoch, loss) in losses.iter().enumerate() {
                println!("epoch {:>3}  loss {loss:.6}", epoch + 1);
            }
            wrote(&c.out.join("base.knbm"));
        }
        Command::BuildDatastore(c) => {
            let n = commands::cmd_build_datastore(&load_config(&c)?, &c.out)?;
            println!("{n} entries");
            wrote(&c.out.join("datastore.knds"));
        }
        Command::TuneVanilla(c) => {
            let t = commands::cmd_tune_vanilla(&load_config(&c)?, &c.out)?;
            println!(
                "λ* = {}  T* = {}  dev accuracy {:.4}",
                t.lambda, t.temperature, t.dev_accuracy
            );
            wrote(&c.out.join("vanilla.json"));
        }
        Command::TrainHead { common, variant } => {
            let report = commands::cmd_train_head(&load_config(&common)?, &common.out, variant)?;
            if let Some(last) = report.as_ref().and_then(|r| r.intervals.last()) {
                println!("final interval loss {:.6}", last.mean_loss);
            }
            wrote(&common.out.join("heads").join(format!("{variant}.knhd")));
        }
        Command::Evaluate {
            common,
            variant,
            datastore,
        } => {
            let v = match variant.as_str() {
                "base" => None,
                other => Some(other.parse::<Variant>()?),
            };
            let r = commands::cmd_eval(&load_config(&common)?, &common.out, v, datastore.as_deref())?;
            print_report(&r);
        }
        Command::PruneStudy { common, mode } => {
            let rows = commands::cmd_prune_study(&load_config(&common)?, &common.out, mode)?;
            for r in &rows {
                match r.token_accuracy {
                    Some(acc) => println!(
                        "{} {:.2} {:<9} size {:>6} acc {acc:.4}",
                        r.condition, r.fraction, r.variant, r.datastore_size
                    ),
                    None => println!("{} {:.2} {:<9} error: {}", r.condition, r.fraction, r.variant, r.error),
                }
            }
            wrote(&prune_study_path(&common.out, mode));
        }
        Command::PrelimStudy(c) => {
            let rows = commands::cmd_prelim_study(&load_config(&c)?, &c.out)?;
            for r in &rows {
                match r.token_accuracy {
                    Some(acc) => println!(
                        "{:<18} {:<9} size {:>6} acc {acc:.4}",
                        r.condition, r.variant, r.datastore_size
                    ),
                    None => println!("{:<18} {:<9} error: {}", r.condition, r.variant, r.error),
                }
            }
            wrote(&c.out.join("prelim.csv"));
        }
        Command::LambdaAnalysis { common, variant } => {
            let bins = commands::cmd_lambda_analysis(&load_config(&common)?, &common.out, variant)?;
            for b in &bins {
                let mean = b.mean_lambda.map_or("-".to_string(), |m| format!("{m:.4}"));
                let gt = if b.retrieved { "retrieved" } else { "missed" };
                println!("[{:.1}, {:.1}) {gt:<9} n {:>6}  mean λ {mean}", b.lo, b.hi, b.count);
            }
            wrote(&common.out.join(format!("lambda_{variant}.csv")));
        }
        Command::Ablate(c) => {
            let rows = commands::cmd_ablate(&load_config(&c)?, &c.out)?;
            for (label, r) in &rows {
                println!("{label:<26} acc {:.4}", r.token_accuracy);
            }
            wrote(&c.out.join("ablation.csv"));
        }
        Command::Pipeline(c) => {
            let rows = commands::cmd_pipeline(&load_config(&c)?, &c.out)?;
            rows.iter().for_each(print_report);
            wrote(&c.out.join("report.csv"));
        }
    }
    Ok(())
}
