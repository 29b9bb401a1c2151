mod common;

use common::*;
use knnmt_core::base::{BaseDims, BaseModel};
use knnmt_core::datastore::{prune_confidence_interval, prune_confidence_top, prune_random, Datastore, Manifest};
use knnmt_core::head::{head_forward, knn_distribution, HeadArch, HeadParams, Variant};
use knnmt_core::rng::SeededRng;
use knnmt_core::task::{generate_domain_pair, sample_corpus, Corpus};
use knnmt_core::Error;
use proptest::prelude::*;

fn sum(xs: &[f64]) -> f64 {
    xs.iter().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distributions_normalized_and_mixed(seed in any::<u64>(), variant in 0usize..3, k in 1usize..10) {
        let mut rng = SeededRng::new(seed);
        let variant = [Variant::Vanilla, Variant::Adaptive, Variant::Robust][variant];
        let arch = HeadArch { k, ..HeadArch::default() };
        let vocab = k + rng.below(40) + 1;
        let head = random_head(&mut rng, variant, arch, 1.0);
        let rec = random_record(&mut rng, vocab, 3, 6.0);
        let nb = random_neighbors(&mut rng, k, vocab);
        let tr = head_forward(&head, &rec, &nb).unwrap();
        prop_assert!((sum(&tr.p_knn) - 1.0).abs() < 1e-9);
        prop_assert!((sum(&tr.p_base) - 1.0).abs() < 1e-9);
        prop_assert!((sum(&tr.p_final) - 1.0).abs() < 1e-9);
        prop_assert!(tr.lambda > 0.0 && tr.lambda < 1.0);
        prop_assert!(tr.temperature > 0.0);
        for w in 0..vocab {
            let mix = tr.lambda * tr.p_knn[w] + (1.0 - tr.lambda) * tr.p_base[w];
            prop_assert!((tr.p_final[w] - mix).abs() <= 1e-12);
        }
    }

    #[test]
    fn knn_mass_only_on_retrieved_values(seed in any::<u64>(), k in 1usize..12, t in 0.01f64..100.0) {
        let mut rng = SeededRng::new(seed);
        let vocab = 30;
        let nb = random_neighbors(&mut rng, k, vocab);
        let c: Vec<f64> = (0..k).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let p = knn_distribution(&nb, t, &c, vocab).unwrap();
        for (w, &pw) in p.iter().enumerate() {
            if !nb.iter().any(|n| n.value == w) {
                prop_assert_eq!(pw, 0.0);
            } else {
                prop_assert!(pw > 0.0 || t < 0.1);
            }
        }
    }

    #[test]
    fn knn_distribution_permutation_invariant(seed in any::<u64>(), k in 2usize..10) {
        let mut rng = SeededRng::new(seed);
        let nb = random_neighbors(&mut rng, k, 25);
        let c: Vec<f64> = (0..k).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let p = knn_distribution(&nb, 1.5, &c, 25).unwrap();
        let mut order: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut order);
        let nb2: Vec<_> = order.iter().map(|&i| nb[i]).collect();
        let c2: Vec<f64> = order.iter().map(|&i| c[i]).collect();
        let p2 = knn_distribution(&nb2, 1.5, &c2, 25).unwrap();
        for (a, b) in p.iter().zip(&p2) {
            prop_assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn raising_an_offset_raises_its_value(seed in any::<u64>(), k in 2usize..10, bump in 0.01f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let nb = random_neighbors(&mut rng, k, 25);
        let mut c: Vec<f64> = (0..k).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let j = rng.below(k);
        let before = knn_distribution(&nb, 2.0, &c, 25).unwrap();
        c[j] += bump;
        let after = knn_distribution(&nb, 2.0, &c, 25).unwrap();
        let v = nb[j].value;
        let all_same = nb.iter().all(|n| n.value == v);
        prop_assert!(after[v] > before[v] || (all_same && (after[v] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pruning_sizes_and_subsets(seed in any::<u64>(), n in 5usize..200, frac in 0.0f64..0.95) {
        let mut rng = SeededRng::new(seed);
        let mut ds = Datastore::new(3);
        for i in 0..n {
            ds.push(&[i as f64, 0.0, 1.0], rng.below(9), rng.uniform_range(0.001, 1.0)).unwrap();
        }
        let expect = n - ((frac * n as f64).round() as usize);
        for pruned in [prune_random(&ds, frac, seed), prune_confidence_top(&ds, frac)] {
            match pruned {
                Ok(p) => {
                    prop_assert_eq!(p.len(), expect);
                    prop_assert_eq!(p.manifest.entry_count, expect as u64);
                    // Keys encode the original index, so membership is checkable.
                    for e in p.entries() {
                        let i = e.key[0] as usize;
                        prop_assert_eq!(e.value, ds.values()[i]);
                        prop_assert_eq!(e.key_conf, ds.key_confs()[i]);
                    }
                }
                Err(_) => prop_assert_eq!(expect, 0),
            }
        }
        if let Ok(p) = prune_confidence_top(&ds, frac) {
            let kept_max = p.key_confs().iter().cloned().fold(0.0, f64::max);
            let removed = n - p.len();
            let mut sorted = ds.key_confs().to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if removed > 0 && removed < n {
                prop_assert!(kept_max <= sorted[removed - 1]);
            }
        }
    }
}

#[test]
fn confidence_interval_removes_rank_band() {
    let mut ds = Datastore::new(1);
    for i in 0..100 {
        // Confidence descends with index.
        ds.push(&[i as f64], 0, 1.0 - i as f64 / 200.0).unwrap();
    }
    let p = prune_confidence_interval(&ds, 20.0, 40.0).unwrap();
    assert_eq!(p.len(), 80);
    let kept: Vec<usize> = p.entries().map(|e| e.key[0] as usize).collect();
    assert!(kept.iter().all(|&i| !(20..40).contains(&i)));
    let top = prune_confidence_interval(&ds, 0.0, 20.0).unwrap();
    assert!(top.entries().all(|e| e.key[0] >= 20.0));
    assert!(prune_confidence_interval(&ds, 0.0, 100.0).is_err());
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(3);

    let base = BaseModel::init(BaseDims::new(6, 8), 2);
    let bp = dir.path().join("m.knbm");
    base.save(&bp).unwrap();
    assert_eq!(BaseModel::load(&bp).unwrap().params(), base.params());

    for (variant, arch) in [
        (
            Variant::Robust,
            HeadArch {
                shared_encoder: false,
                use_dc: false,
                ..HeadArch::default()
            },
        ),
        (Variant::Adaptive, HeadArch::default()),
        (Variant::Vanilla, HeadArch::default()),
    ] {
        let h = random_head(&mut rng, variant, arch, 1.0);
        let hp = dir.path().join(format!("{variant}.knhd"));
        h.save(&hp).unwrap();
        assert_eq!(HeadParams::load(&hp).unwrap(), h);
    }

    let mut ds = Datastore::new(2);
    ds.push(&[0.5, -0.25], 3, 0.75).unwrap();
    ds.push(&[1.0, 2.0], 1, 1.0).unwrap();
    ds.manifest = Manifest {
        corpus_id: "c".into(),
        model_id: "m".into(),
        build_timestamp: 1,
        entry_count: 2,
        derivation: None,
    };
    let dp = dir.path().join("d.knds");
    ds.save(&dp).unwrap();
    let back = Datastore::load(&dp).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back.key(0), ds.key(0));
    assert_eq!(back.manifest, ds.manifest);
    assert!(matches!(
        Datastore::load_expecting(&dp, Some(3)),
        Err(Error::DimMismatch { .. })
    ));

    let bytes = std::fs::read(&bp).unwrap();
    std::fs::write(&bp, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(BaseModel::load(&bp), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&bp, &bad).unwrap();
    assert!(matches!(BaseModel::load(&bp), Err(Error::BadMagic { .. })));
    assert!(matches!(
        BaseModel::load(&dir.path().join("none")),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn corpus_text_round_trip() {
    let (_, spec) = generate_domain_pair(4, 10, 12, 0.5).unwrap();
    let c = sample_corpus(&spec, 20, 2, 6, 9).unwrap();
    let back = Corpus::from_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.id(), c.id());
    assert!(c.to_text().starts_with("# domain="));
    for p in &c.pairs {
        assert_eq!(p.source.len(), p.target.len());
        assert_eq!(p.target, spec.translate(&p.source));
    }
}
