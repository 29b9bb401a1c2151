use std::path::Path;

use knnmt_core::base::{train_base, BaseModel, BaseTrainConfig};
use knnmt_core::datastore::build_datastore;
use knnmt_core::harness::commands::{
    cmd_ablate, cmd_eval, cmd_lambda_analysis, cmd_pipeline, cmd_prelim_study, cmd_prune_study,
};
use knnmt_core::harness::eval::Retriever;
use knnmt_core::harness::experiment::{generate_data, train_base_model, tune_vanilla};
use knnmt_core::harness::{evaluate, Decoder, ExperimentConfig, Pipeline, PruneMode};
use knnmt_core::head::{HeadParams, Variant};
use knnmt_core::Error;

fn small(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    c.task.general_sentences = 1000;
    c.task.in_domain_sentences = 600;
    c.train.steps = 200;
    c
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_rows_and_rerun_bytes() {
    let cfg = small(4);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let rows = cmd_pipeline(&cfg, a.path()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["base", "vanilla", "adaptive", "robust"]);
    for r in &rows {
        for rate in [r.token_accuracy, r.mean_lambda, r.gt_retrieval_rate] {
            assert!((0.0..=1.0).contains(&rate));
        }
        for rate in [r.exact_match, r.precision_1, r.precision_2].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&rate));
        }
    }
    cmd_pipeline(&cfg, b.path()).unwrap();
    for f in [
        "report.csv",
        "report.json",
        "base.knbm",
        "datastore.knds",
        "heads/robust.knhd",
        "heads/robust.train.csv",
    ] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let header = String::from_utf8(read(&a.path().join("report.csv"))).unwrap();
    assert!(header.starts_with("schema,"));
    assert!(header.lines().skip(1).all(|l| l.starts_with("eval-report/1,")));
}

#[test]
fn base_model_premises() {
    let cfg = ExperimentConfig::default();
    let data = generate_data(&cfg).unwrap();
    let (model, losses) = train_base_model(&cfg, &data).unwrap();
    let general = model.token_accuracy(&data.general.test).unwrap();
    let in_domain = model.token_accuracy(&data.in_domain.test).unwrap();
    assert!(general >= 0.90, "general accuracy {general}");
    assert!(general - in_domain >= 0.15, "gap {general} vs {in_domain}");
    let non_improving = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(non_improving <= 1, "{losses:?}");

    let zero = BaseTrainConfig {
        epochs: 0,
        ..cfg.base_train_config()
    };
    let init = BaseModel::init(cfg.base_dims(), 1);
    let (same, _) = train_base(&init, &data.general.train, &zero).unwrap();
    assert_eq!(same.params(), init.params());

    let mut no_shift = cfg.clone();
    no_shift.task.shift_fraction = 0.0;
    let data = generate_data(&no_shift).unwrap();
    let (model, _) = train_base_model(&no_shift, &data).unwrap();
    let acc = model.token_accuracy(&data.in_domain.test).unwrap();
    assert!(acc >= 0.90, "ρ=0 in-domain accuracy {acc}");
}

#[test]
fn vanilla_tuning_rules() {
    let cfg = small(2);
    let p = Pipeline::prepare(&cfg).unwrap();
    let arch = cfg.head_arch();
    let dev = &p.data.in_domain.dev;
    let single = tune_vanilla(&arch, &p.base, &p.datastore, dev, &[0.0], &[1.0]).unwrap();
    assert_eq!((single.lambda, single.temperature), (0.0, 1.0));
    assert_eq!(single.dev_accuracy, p.base.token_accuracy(dev).unwrap());

    let grid = tune_vanilla(
        &arch,
        &p.base,
        &p.datastore,
        dev,
        &cfg.eval.lambda_grid,
        &cfg.eval.temperature_grid,
    )
    .unwrap();
    assert_eq!(grid.cells.len(), 27);
    assert!(grid.cells.iter().all(|c| c.dev_accuracy <= grid.dev_accuracy));
    let first_best = grid
        .cells
        .iter()
        .filter(|c| c.dev_accuracy == grid.dev_accuracy)
        .min_by(|a, b| {
            a.lambda
                .total_cmp(&b.lambda)
                .then(a.temperature.total_cmp(&b.temperature))
        })
        .unwrap();
    assert_eq!(
        (grid.lambda, grid.temperature),
        (first_best.lambda, first_best.temperature)
    );
    assert!(tune_vanilla(&arch, &p.base, &p.datastore, dev, &[], &[1.0]).is_err());
}

#[test]
fn evaluation_identities() {
    let cfg = small(3);
    let p = Pipeline::prepare(&cfg).unwrap();
    let arch = cfg.head_arch();
    let test = &p.data.in_domain.test;

    let base = p.evaluate_on(Decoder::Base, &p.datastore, test).unwrap();
    let off = HeadParams::vanilla(arch, 0.0, 10.0).unwrap();
    let with_zero = p.evaluate_on(Decoder::Head(&off), &p.datastore, test).unwrap();
    assert_eq!(
        (with_zero.token_accuracy, with_zero.exact_match, with_zero.precision_2),
        (base.token_accuracy, base.exact_match, base.precision_2)
    );

    // A datastore of the test contexts themselves plus λ = 1 puts all mass on
    // the references.
    let oracle_ds = build_datastore(&p.base, test).unwrap();
    let oracle = HeadParams::vanilla(arch, 1.0, 1e-3).unwrap();
    let mut r = Retriever::new(&oracle_ds, arch.k, arch.distance).unwrap();
    let rep = evaluate(&p.base, Decoder::Head(&oracle), &mut r, test, true).unwrap();
    assert_eq!(rep.token_accuracy, 1.0);
    assert_eq!(rep.exact_match, Some(1.0));

    let again = p.evaluate_on(Decoder::Base, &p.datastore, test).unwrap();
    assert_eq!(again, base);
}

#[test]
fn eval_requires_checkpoint() {
    let cfg = small(5);
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_eval(&cfg, dir.path(), Some(Variant::Robust), None).unwrap_err();
    assert_eq!(err.stage, "evaluate");
    match &err.source {
        Error::MissingFile(path) => assert!(path.ends_with("heads/robust.knhd")),
        other => panic!("unexpected {other}"),
    }
    let rep = cmd_eval(&cfg, dir.path(), None, None).unwrap();
    assert_eq!(rep.variant, "base");
    assert!(dir.path().join("eval_base.csv").exists());
}

#[test]
fn config_mismatch_is_a_config_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(6);
    cfg.eval.variants = vec!["base".into()];
    cmd_pipeline(&cfg, dir.path()).unwrap();
    cfg.seed = 7;
    let err = cmd_pipeline(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.stage, "config");
}

#[test]
fn studies_follow_their_protocol() {
    let mut cfg = small(8);
    cfg.eval.prune_fractions = vec![0.0, 0.2, 0.6, 0.9999];
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let report = cmd_pipeline(&cfg, out).unwrap();
    let unpruned = |v: &str| report.iter().find(|r| r.variant == v).unwrap().clone();

    for mode in [PruneMode::Random, PruneMode::ConfTop] {
        let rows = cmd_prune_study(&cfg, out, mode).unwrap();
        assert_eq!(rows.len(), 8);
        for v in ["adaptive", "robust"] {
            let mine: Vec<_> = rows.iter().filter(|r| r.variant == v).collect();
            assert_eq!(mine[0].token_accuracy, Some(unpruned(v).token_accuracy));
            assert!(mine
                .windows(2)
                .take(2)
                .all(|w| w[0].datastore_size > w[1].datastore_size));
            let last = mine.last().unwrap();
            assert!(last.token_accuracy.is_none() && !last.error.is_empty());
        }
    }
    let csv = String::from_utf8(read(&out.join("prune_conf-top.csv"))).unwrap();
    assert!(csv.lines().next().unwrap().ends_with(",error"));

    let prelim = cmd_prelim_study(&cfg, out).unwrap();
    assert_eq!(prelim.len(), 2 * (2 + cfg.eval.prelim_intervals.len()));
    for v in ["vanilla", "adaptive"] {
        let all = prelim.iter().find(|r| r.condition == "all" && r.variant == v).unwrap();
        assert_eq!(all.token_accuracy, Some(unpruned(v).token_accuracy));
    }

    let tuned = Pipeline::open(&cfg, Some(out)).unwrap().ensure_tuning().unwrap().lambda;
    let bins = cmd_lambda_analysis(&cfg, out, Variant::Vanilla).unwrap();
    assert_eq!(
        bins.iter().map(|b| b.count).sum::<usize>(),
        unpruned("vanilla").timesteps
    );
    for b in bins.iter().filter(|b| b.count > 0) {
        assert!((b.mean_lambda.unwrap() - tuned).abs() < 1e-12);
    }
    assert!(bins.iter().filter(|b| b.count == 0).all(|b| b.mean_lambda.is_none()));
    assert!(out.join("lambda_vanilla.csv").exists());
}

#[test]
fn ablation_rows() {
    let cfg = small(9);
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_ablate(&cfg, dir.path()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(
        labels,
        [
            "full",
            "w/o WP",
            "w/o DC",
            "w/o vector perturbation",
            "w/o pseudo pair",
            "w/o robust training",
            "w/o decay"
        ]
    );

    let mut p = Pipeline::prepare(&cfg).unwrap();
    let toggles_off = knnmt_core::train::TrainConfig {
        key_noise: false,
        pseudo_pair: false,
        ..cfg.train_config(Variant::Robust)
    };
    let (head, _) = p.train(Variant::Robust, cfg.head_arch(), &toggles_off).unwrap();
    let rep = p
        .evaluate_on(Decoder::Head(&head), &p.datastore, &p.data.in_domain.test)
        .unwrap();
    assert_eq!(rows[5].1, rep);
}
