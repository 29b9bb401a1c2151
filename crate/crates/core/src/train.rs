//! Head training with perturbed retrieval.
//!
//! Each training timestep retrieves K neighbors for the dev-set query, then
//! (with probability α each, from independent streams) adds Gaussian noise to
//! the retrieved keys and injects a pseudo pair carrying the reference token
//! when the reference was not retrieved. α decays as `α₀ · exp(-step / β)`.

use serde::{Deserialize, Serialize};

use crate::base::{BaseModel, ForwardRecord};
use crate::datastore::{knn_search_with, Datastore, DistanceKind, Neighbor};
use crate::error::{Error, Result};
use crate::head::{self, Example, HeadParams, Variant};
use crate::math::{self, AdamState};
use crate::rng::SeededRng;
use crate::task::{Corpus, Token};

/// `Neighbor::index` of an injected pseudo pair.
pub const PSEUDO_INDEX: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub alpha0: f64,
    pub beta: f64,
    pub sigma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub key_noise: bool,
    pub pseudo_pair: bool,
    pub decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 8,
            alpha0: 1.0,
            beta: 1000.0,
            sigma: 0.01,
            lr: 3e-4,
            batch_size: 32,
            steps: 5000,
            seed: 0,
            key_noise: true,
            pseudo_pair: true,
            decay: true,
        }
    }
}

impl TrainConfig {
    /// Small-datastore preset: faster decay of the perturbation rate.
    pub fn small_data() -> Self {
        TrainConfig {
            beta: 10.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma {} must be >= 0", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(Error::InvalidArgument(format!("alpha0 {} not in [0, 1]", self.alpha0)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta {} must be positive", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Perturbation rate in effect at `step`.
    pub fn alpha_at(&self, step: usize) -> f64 {
        if self.decay {
            alpha_schedule(step, self.alpha0, self.beta)
        } else {
            self.alpha0
        }
    }
}

pub fn alpha_schedule(step: usize, alpha0: f64, beta: f64) -> f64 {
    alpha0 * (-(step as f64) / beta).exp()
}

/// A retrieved neighbor together with its (possibly perturbed) key.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedPair {
    pub neighbor: Neighbor,
    pub key: Vec<f64>,
}

impl RetrievedPair {
    pub fn is_pseudo(&self) -> bool {
        self.neighbor.index == PSEUDO_INDEX
    }
}

pub fn retrieve_pairs(ds: &Datastore, query: &[f64], k: usize, kind: DistanceKind) -> Result<Vec<RetrievedPair>> {
    Ok(knn_search_with(ds, query, k, kind)?
        .into_iter()
        .map(|n| RetrievedPair {
            key: ds.key(n.index).to_vec(),
            neighbor: n,
        })
        .collect())
}

fn distance(kind: DistanceKind, a: &[f64], b: &[f64]) -> f64 {
    kind.from_squared(math::squared_distance(a, b))
}

fn sort_pairs(pairs: &mut [RetrievedPair]) {
    pairs.sort_by(|a, b| {
        a.neighbor
            .distance
            .total_cmp(&b.neighbor.distance)
            .then(a.neighbor.index.cmp(&b.neighbor.index))
    });
}

/// Key noise: with probability `alpha` every retrieved key moves by an
/// independent `N(0, σ²I)` draw; distances are recomputed against `query` and
/// the pairs re-sorted. Returns whether noise was applied.
pub fn perturb_keys(
    pairs: &mut [RetrievedPair],
    query: &[f64],
    alpha: f64,
    sigma: f64,
    kind: DistanceKind,
    rng: &mut SeededRng,
) -> bool {
    if rng.uniform() >= alpha {
        return false;
    }
    for p in pairs.iter_mut() {
        for x in &mut p.key {
            *x += sigma * rng.normal();
        }
        p.neighbor.distance = distance(kind, query, &p.key);
    }
    sort_pairs(pairs);
    true
}

/// Pseudo pair: if `target` is not among the retrieved values and a uniform
/// draw falls below `alpha`, `(query + ε, target)` is inserted in distance
/// order (ahead of ties) and the farthest pair dropped. Returns whether a
/// pair was injected.
#[allow(clippy::too_many_arguments)]
pub fn inject_pseudo_pair(
    pairs: &mut Vec<RetrievedPair>,
    query: &[f64],
    target: Token,
    target_prob: f64,
    alpha: f64,
    sigma: f64,
    kind: DistanceKind,
    rng: &mut SeededRng,
) -> bool {
    let draw = rng.uniform();
    if pairs.iter().any(|p| p.neighbor.value == target) || draw >= alpha || pairs.is_empty() {
        return false;
    }
    let key: Vec<f64> = query.iter().map(|q| q + sigma * rng.normal()).collect();
    let pseudo = RetrievedPair {
        neighbor: Neighbor {
            index: PSEUDO_INDEX,
            distance: distance(kind, query, &key),
            value: target,
            key_conf: target_prob.clamp(f64::MIN_POSITIVE, 1.0),
        },
        key,
    };
    let pos = pairs
        .iter()
        .position(|p| p.neighbor.distance >= pseudo.neighbor.distance)
        .unwrap_or(pairs.len());
    pairs.insert(pos, pseudo);
    pairs.pop();
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    KeyNoise,
    PseudoPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationEvent {
    pub step: usize,
    /// Index of the dev-set timestep the perturbation was applied to.
    pub timestep: usize,
    pub kind: PerturbationKind,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub start_step: usize,
    pub end_step: usize,
    pub mean_loss: f64,
    pub mean_alpha: f64,
    pub key_noise_events: usize,
    pub pseudo_pair_events: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub steps: usize,
    pub timesteps_per_epoch: usize,
    pub intervals: Vec<IntervalStats>,
    pub step_losses: Vec<f64>,
    #[serde(skip)]
    pub events: Vec<PerturbationEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub const INTERVAL: usize = 100;

    /// Mean per-step loss over `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let xs = &self.step_losses[range];
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }
}

/// One teacher-forced dev timestep with its unperturbed retrieval.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub record: ForwardRecord,
    pub pairs: Vec<RetrievedPair>,
    pub target: Token,
}

/// Runs the base model over `corpus` and retrieves K neighbors per timestep.
pub fn prepare_items(
    base: &BaseModel,
    ds: &Datastore,
    corpus: &Corpus,
    k: usize,
    kind: DistanceKind,
) -> Result<Vec<TrainItem>> {
    if ds.len() < k {
        return Err(Error::NotEnoughEntries { k, available: ds.len() });
    }
    let mut items = Vec::with_capacity(corpus.token_count());
    for pair in &corpus.pairs {
        for (record, &target) in base.teacher_forced(pair)?.into_iter().zip(&pair.target) {
            let pairs = retrieve_pairs(ds, &record.hidden, k, kind)?;
            items.push(TrainItem { record, pairs, target });
        }
    }
    Ok(items)
}

/// Trains the head on dev-set timesteps. Only the head's parameters move.
pub fn train_head(
    init: &HeadParams,
    base: &BaseModel,
    ds: &Datastore,
    dev: &Corpus,
    cfg: &TrainConfig,
) -> Result<(HeadParams, TrainReport)> {
    cfg.validate()?;
    if cfg.k != init.k() {
        return Err(Error::InvalidArgument(format!(
            "config K={} but head K={}",
            cfg.k,
            init.k()
        )));
    }
    let items = prepare_items(base, ds, dev, cfg.k, init.arch().distance)?;
    train_head_on_items(init, &items, cfg)
}

pub fn train_head_on_items(
    init: &HeadParams,
    items: &[TrainItem],
    cfg: &TrainConfig,
) -> Result<(HeadParams, TrainReport)> {
    cfg.validate()?;
    let mut params = init.clone();
    let mut report = TrainReport {
        variant: init.variant().to_string(),
        steps: cfg.steps,
        timesteps_per_epoch: items.len(),
        ..TrainReport::default()
    };
    let mask = params.trainable_mask();
    if init.variant() == Variant::Vanilla || !mask.contains(&true) || cfg.steps == 0 {
        return Ok((params, report));
    }
    if items.is_empty() {
        return Err(Error::Empty("head training timesteps"));
    }
    let kind = init.arch().distance;
    let mut adam = AdamState::for_layout(params.layout());
    let root = SeededRng::new(cfg.seed).child("head-train");
    let shuffle = root.child("shuffle");
    let noise_root = root.child("key-noise");
    let pseudo_root = root.child("pseudo-pair");

    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = items.len();
    let mut epoch = 0u64;
    let mut interval = IntervalStats {
        start_step: 0,
        end_step: 0,
        mean_loss: 0.0,
        mean_alpha: 0.0,
        key_noise_events: 0,
        pseudo_pair_events: 0,
    };
    for step in 0..cfg.steps {
        let alpha = cfg.alpha_at(step);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            if cursor == items.len() {
                shuffle.child_indexed("epoch", epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let item = &items[idx];
            let draw_id = (step * cfg.batch_size + slot) as u64;
            let mut pairs = item.pairs.clone();
            if cfg.key_noise {
                let mut rng = noise_root.child_indexed("draw", draw_id);
                if perturb_keys(&mut pairs, &item.record.hidden, alpha, cfg.sigma, kind, &mut rng) {
                    interval.key_noise_events += 1;
                    report.events.push(PerturbationEvent {
                        step,
                        timestep: idx,
                        kind: PerturbationKind::KeyNoise,
                        alpha,
                    });
                }
            }
            if cfg.pseudo_pair {
                let mut rng = pseudo_root.child_indexed("draw", draw_id);
                let prob = item.record.probs[item.target];
                if inject_pseudo_pair(
                    &mut pairs,
                    &item.record.hidden,
                    item.target,
                    prob,
                    alpha,
                    cfg.sigma,
                    kind,
                    &mut rng,
                ) {
                    interval.pseudo_pair_events += 1;
                    report.events.push(PerturbationEvent {
                        step,
                        timestep: idx,
                        kind: PerturbationKind::PseudoPair,
                        alpha,
                    });
                }
            }
            batch.push(Example {
                record: item.record.clone(),
                neighbors: pairs.into_iter().map(|p| p.neighbor).collect(),
                target: item.target,
            });
        }
        let (loss, mut grad) = head::batch_loss_and_grad(&params, &batch)?;
        for (g, &m) in grad.iter_mut().zip(&mask) {
            if !m {
                *g = 0.0;
            }
        }
        math::adam_step(params.params_mut(), &grad, &mut adam, cfg.lr)?;

        report.step_losses.push(loss);
        interval.mean_loss += loss;
        interval.mean_alpha += alpha;
        if (step + 1) % TrainReport::INTERVAL == 0 || step + 1 == cfg.steps {
            let n = (step + 1 - interval.start_step) as f64;
            interval.end_step = step + 1;
            interval.mean_loss /= n;
            interval.mean_alpha /= n;
            let next = IntervalStats {
                start_step: step + 1,
                end_step: step + 1,
                mean_loss: 0.0,
                mean_alpha: 0.0,
                key_noise_events: 0,
                pseudo_pair_events: 0,
            };
            report.intervals.push(std::mem::replace(&mut interval, next));
        }
    }
    Ok((params, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Number of trainable coordinates compared.
    pub checked: usize,
}

/// Denominator floor of the relative error; below it errors are absolute.
/// Central differences at eps = 1e-5 on an O(10) loss carry roundoff near
/// 1e-10, so gradients below this magnitude are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Compares analytic gradients of the mean batch loss with central
/// differences over every trainable coordinate.
pub fn grad_check(params: &HeadParams, batch: &[Example], eps: f64) -> Result<GradCheck> {
    let mask = params.trainable_mask();
    let (_, analytic) = head::batch_loss_and_grad(params, batch)?;
    let mut probe = params.clone();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let orig = params.params()[i];
        probe.params_mut()[i] = orig + eps;
        let plus = head::batch_loss(&probe, batch)?;
        probe.params_mut()[i] = orig - eps;
        let minus = head::batch_loss(&probe, batch)?;
        probe.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = math::max_relative_error(&[analytic[i]], &[numeric], GRAD_CHECK_FLOOR);
        max_err = max_err.max(err);
        checked += 1;
    }
    Ok(GradCheck {
        max_relative_error: max_err,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(index: usize, key: Vec<f64>, value: Token, query: &[f64]) -> RetrievedPair {
        RetrievedPair {
            neighbor: Neighbor {
                index,
                distance: math::squared_distance(&key, query).sqrt(),
                value,
                key_conf: 0.4,
            },
            key,
        }
    }

    fn sample_pairs(q: &[f64]) -> Vec<RetrievedPair> {
        let mut v = vec![
            pair(0, vec![0.1, 0.0], 3, q),
            pair(1, vec![0.0, 0.5], 4, q),
            pair(2, vec![1.0, 1.0], 3, q),
        ];
        sort_pairs(&mut v);
        v
    }

    #[test]
    fn schedule_values() {
        assert_eq!(alpha_schedule(0, 0.7, 1000.0), 0.7);
        assert!((alpha_schedule(1000, 1.0, 1000.0) - (-1f64).exp()).abs() < 1e-12);
        for s in 0..100 {
            assert!(alpha_schedule(s + 1, 1.0, 10.0) < alpha_schedule(s, 1.0, 10.0));
        }
        let cfg = TrainConfig {
            decay: false,
            alpha0: 0.4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.alpha_at(5000), 0.4);
        assert_eq!(TrainConfig::small_data().beta, 10.0);
    }

    #[test]
    fn key_noise_zero_rate_or_sigma() {
        let q = [0.0, 0.0];
        let orig = sample_pairs(&q);
        let mut rng = SeededRng::new(1);
        let mut p = orig.clone();
        assert!(!perturb_keys(&mut p, &q, 0.0, 0.01, DistanceKind::Euclidean, &mut rng));
        assert_eq!(p, orig);
        let mut p = orig.clone();
        assert!(perturb_keys(&mut p, &q, 1.0, 0.0, DistanceKind::Euclidean, &mut rng));
        assert_eq!(p, orig);
    }

    #[test]
    fn key_noise_keeps_values_and_sorts() {
        let q = [0.0, 0.0];
        let orig = sample_pairs(&q);
        let mut rng = SeededRng::new(2);
        let mut p = orig.clone();
        perturb_keys(&mut p, &q, 1.0, 0.3, DistanceKind::Euclidean, &mut rng);
        assert!(p.windows(2).all(|w| w[0].neighbor.distance <= w[1].neighbor.distance));
        for x in &p {
            let o = orig.iter().find(|o| o.neighbor.index == x.neighbor.index).unwrap();
            assert_eq!(o.neighbor.value, x.neighbor.value);
            assert_eq!(o.neighbor.key_conf, x.neighbor.key_conf);
        }
    }

    #[test]
    fn pseudo_pair_rules() {
        let q = [0.0, 0.0];
        let mut rng = SeededRng::new(3);
        let mut p = sample_pairs(&q);
        assert!(!inject_pseudo_pair(
            &mut p,
            &q,
            3,
            0.2,
            1.0,
            0.01,
            DistanceKind::Euclidean,
            &mut rng
        ));
        assert_eq!(p, sample_pairs(&q));

        assert!(inject_pseudo_pair(
            &mut p,
            &q,
            9,
            0.2,
            1.0,
            0.0,
            DistanceKind::Euclidean,
            &mut rng
        ));
        assert_eq!(p.len(), 3);
        assert!(p[0].is_pseudo());
        assert_eq!(p[0].neighbor.distance, 0.0);
        assert_eq!(p[0].neighbor.value, 9);
        assert_eq!(p[0].neighbor.key_conf, 0.2);
        assert!(p.iter().all(|x| x.neighbor.index != 2), "farthest pair dropped");

        let mut p = sample_pairs(&q);
        assert!(!inject_pseudo_pair(
            &mut p,
            &q,
            9,
            0.2,
            0.0,
            0.0,
            DistanceKind::Euclidean,
            &mut rng
        ));
    }
}
