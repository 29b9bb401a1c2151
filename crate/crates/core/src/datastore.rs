//! Key-value datastore: build from a corpus, exact kNN search, pruning, and
//! the `KNDS` binary format with a TOML manifest sidecar.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::base::BaseModel;
use crate::error::{Error, Result};
use crate::io::{self, BinReader, BinWriter};
use crate::math;
use crate::rng::SeededRng;
use crate::task::{Corpus, Token};

const MAGIC: &[u8; 4] = b"KNDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub corpus_id: String,
    pub model_id: String,
    /// Seconds since the Unix epoch.
    pub build_timestamp: u64,
    pub entry_count: u64,
    /// How this datastore was derived from the built one, if pruned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivation: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f64>,
    values: Vec<Token>,
    key_conf: Vec<f64>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry<'a> {
    pub key: &'a [f64],
    pub value: Token,
    pub key_conf: f64,
}

/// One retrieved pair. `distance` is in the metric the search was asked for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    pub value: Token,
    pub key_conf: f64,
}

/// Distance reported to the head. Ranking is identical under both.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl DistanceKind {
    pub fn from_squared(self, d2: f64) -> f64 {
        match self {
            DistanceKind::Euclidean => d2.sqrt(),
            DistanceKind::SquaredEuclidean => d2,
        }
    }
}

impl Datastore {
    pub fn new(dim: usize) -> Self {
        Datastore {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            key_conf: Vec::new(),
            manifest: Manifest::default(),
        }
    }

    pub fn push(&mut self, key: &[f64], value: Token, key_conf: f64) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::Shape(format!(
                "key of dim {} in datastore of dim {}",
                key.len(),
                self.dim
            )));
        }
        if !(key_conf > 0.0 && key_conf <= 1.0) {
            return Err(Error::InvalidArgument(format!("key_conf {key_conf} not in (0, 1]")));
        }
        self.keys.extend_from_slice(key);
        self.values.push(value);
        self.key_conf.push(key_conf);
        self.manifest.entry_count = self.values.len() as u64;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entry(&self, i: usize) -> Entry<'_> {
        Entry {
            key: self.key(i),
            value: self.values[i],
            key_conf: self.key_conf[i],
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = Entry<'_>> + '_ {
        (0..self.len()).map(|i| self.entry(i))
    }

    pub fn values(&self) -> &[Token] {
        &self.values
    }

    pub fn key_confs(&self) -> &[f64] {
        &self.key_conf
    }

    fn subset(&self, keep: &[bool], derivation: String) -> Datastore {
        let mut out = Datastore::new(self.dim);
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            out.keys.extend_from_slice(self.key(i));
            out.values.push(self.values[i]);
            out.key_conf.push(self.key_conf[i]);
        }
        out.manifest = Manifest {
            entry_count: out.len() as u64,
            derivation: Some(match &self.manifest.derivation {
                Some(prev) => format!("{prev}; {derivation}"),
                None => derivation,
            }),
            ..self.manifest.clone()
        };
        out
    }

    /// Entry indices sorted by descending key confidence, ties by index.
    fn confidence_ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.key_conf[b].total_cmp(&self.key_conf[a]).then(a.cmp(&b)));
        order
    }
}

/// One entry per target token, in corpus order, keyed by the teacher-forced
/// hidden state.
pub fn build_datastore(model: &BaseModel, corpus: &Corpus) -> Result<Datastore> {
    let dims = model.dims();
    let mut ds = Datastore::new(dims.hidden);
    for pair in &corpus.pairs {
        for (rec, &y) in model.teacher_forced(pair)?.iter().zip(&pair.target) {
            if y >= dims.target_vocab {
                return Err(Error::TokenOutOfRange {
                    token: y,
                    vocab: dims.target_vocab,
                });
            }
            ds.push(&rec.hidden, y, rec.probs[y].max(f64::MIN_POSITIVE))?;
        }
    }
    ds.manifest = Manifest {
        corpus_id: corpus.id(),
        model_id: model.checkpoint_id(),
        build_timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        entry_count: ds.len() as u64,
        derivation: None,
    };
    Ok(ds)
}

/// Exact K nearest entries by Euclidean distance, ascending, ties by index.
pub fn knn_search(ds: &Datastore, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    knn_search_with(ds, query, k, DistanceKind::Euclidean)
}

pub fn knn_search_with(ds: &Datastore, query: &[f64], k: usize, kind: DistanceKind) -> Result<Vec<Neighbor>> {
    if query.len() != ds.dim {
        return Err(Error::Shape(format!(
            "query of dim {} against datastore of dim {}",
            query.len(),
            ds.dim
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if k > ds.len() {
        return Err(Error::NotEnoughEntries { k, available: ds.len() });
    }
    let mut scored: Vec<(f64, usize)> = (0..ds.len())
        .map(|i| (math::squared_distance(query, ds.key(i)), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(d2, i)| Neighbor {
            index: i,
            distance: kind.from_squared(d2),
            value: ds.values[i],
            key_conf: ds.key_conf[i],
        })
        .collect())
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "pruning fraction {fraction} not in [0, 1)"
        )));
    }
    Ok(())
}

fn count_of(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Removes `round(fraction·n)` uniformly sampled entries.
pub fn prune_random(ds: &Datastore, fraction: f64, seed: u64) -> Result<Datastore> {
    check_fraction(fraction)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    SeededRng::new(seed).child("prune-random").shuffle(&mut order);
    let mut keep = vec![true; ds.len()];
    for &i in &order[..count_of(fraction, ds.len())] {
        keep[i] = false;
    }
    Ok(ds.subset(&keep, format!("random {fraction} seed {seed}")))
}

/// Removes the `round(fraction·n)` entries with the largest key confidence.
pub fn prune_confidence_top(ds: &Datastore, fraction: f64) -> Result<Datastore> {
    check_fraction(fraction)?;
    let mut keep = vec![true; ds.len()];
    for &i in &ds.confidence_ranking()[..count_of(fraction, ds.len())] {
        keep[i] = false;
    }
    Ok(ds.subset(&keep, format!("confidence-top {fraction}")))
}

/// Removes confidence ranks `[lo·n/100, hi·n/100)` (rank 0 = most confident).
pub fn prune_confidence_interval(ds: &Datastore, lo_pct: f64, hi_pct: f64) -> Result<Datastore> {
    if !(0.0 <= lo_pct && lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!("interval [{lo_pct}, {hi_pct}) invalid")));
    }
    let n = ds.len();
    let start = count_of(lo_pct / 100.0, n);
    let end = count_of(hi_pct / 100.0, n);
    if end - start >= n {
        return Err(Error::InvalidArgument(format!(
            "removing ranks [{lo_pct}%, {hi_pct}%) empties the datastore"
        )));
    }
    let mut keep = vec![true; n];
    for &i in &ds.confidence_ranking()[start..end] {
        keep[i] = false;
    }
    Ok(ds.subset(&keep, format!("confidence-interval [{lo_pct}, {hi_pct})")))
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest.toml");
    PathBuf::from(p)
}

impl Datastore {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        for i in 0..self.len() {
            w.f64s(self.key(i));
            w.u32(self.values[i] as u32);
            w.f64(self.key_conf[i]);
        }
        w.into_inner()
    }

    pub fn from_bytes(path: &Path, data: &[u8], expected_dim: Option<usize>) -> Result<Self> {
        let mut r = BinReader::new(path, data);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dim = r.u32()? as usize;
        if let Some(d) = expected_dim.filter(|&d| d != dim) {
            return Err(r.dim_mismatch(format!("file has dim {dim}, expected {d}")));
        }
        let count = r.u64()? as usize;
        let entry_bytes = dim * 8 + 4 + 8;
        if r.remaining() < count.saturating_mul(entry_bytes) {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
            });
        }
        let mut ds = Datastore::new(dim);
        ds.keys.reserve(count * dim);
        for _ in 0..count {
            ds.keys.extend(r.f64s(dim)?);
            ds.values.push(r.u32()? as Token);
            let conf = r.f64()?;
            if !(conf > 0.0 && conf <= 1.0) {
                return Err(r.corrupt(format!("key_conf {conf} not in (0, 1]")));
            }
            ds.key_conf.push(conf);
        }
        r.finish()?;
        ds.manifest.entry_count = count as u64;
        Ok(ds)
    }

    /// Writes the binary file and its manifest sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())?;
        let manifest = toml::to_string(&self.manifest).map_err(|e| Error::Config(e.to_string()))?;
        io::write_atomic(&manifest_path(path), manifest.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_expecting(path, None)
    }

    pub fn load_expecting(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let mut ds = Datastore::from_bytes(path, &io::read_bytes(path)?, expected_dim)?;
        let mpath = manifest_path(path);
        if mpath.exists() {
            let text = io::read_to_string(&mpath)?;
            let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Corrupt {
                path: mpath.clone(),
                detail: e.to_string(),
            })?;
            if manifest.entry_count != ds.len() as u64 {
                return Err(Error::Corrupt {
                    path: mpath,
                    detail: format!(
                        "manifest counts {} entries, file has {}",
                        manifest.entry_count,
                        ds.len()
                    ),
                });
            }
            ds.manifest = manifest;
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Datastore {
        let mut ds = Datastore::new(2);
        ds.push(&[0.0, 0.0], 1, 0.9).unwrap();
        ds.push(&[3.0, 4.0], 2, 0.5).unwrap();
        ds.push(&[1.0, 0.0], 3, 0.1).unwrap();
        ds
    }

    #[test]
    fn hand_geometry() {
        let n = knn_search(&tiny(), &[0.0, 0.0], 2).unwrap();
        assert_eq!(n.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(n[0].distance, 0.0);
        assert_eq!(n[1].distance, 1.0);
        let sq = knn_search_with(&tiny(), &[0.0, 0.0], 3, DistanceKind::SquaredEuclidean).unwrap();
        assert_eq!(sq[2].distance, 25.0);
    }

    #[test]
    fn exact_key_first_and_ties_by_index() {
        let mut ds = tiny();
        ds.push(&[3.0, 4.0], 5, 0.2).unwrap();
        let n = knn_search(&ds, &[3.0, 4.0], 2).unwrap();
        assert_eq!((n[0].index, n[1].index), (1, 3));
        assert_eq!(n[0].distance, 0.0);
    }

    #[test]
    fn search_errors() {
        let ds = tiny();
        assert!(matches!(
            knn_search(&ds, &[0.0, 0.0], 4),
            Err(Error::NotEnoughEntries { k: 4, available: 3 })
        ));
        assert!(matches!(knn_search(&ds, &[0.0], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn conf_top_removes_most_confident() {
        let p = prune_confidence_top(&tiny(), 1.0 / 3.0).unwrap();
        assert_eq!(p.values(), &[2, 3]);
        assert_eq!(prune_confidence_top(&tiny(), 0.0).unwrap().values(), tiny().values());
        assert!(prune_confidence_top(&tiny(), 1.0).is_err());
    }

    #[test]
    fn interval_examples() {
        let mut ds = Datastore::new(1);
        for i in 0..10 {
            ds.push(&[i as f64], i, 0.05 + 0.09 * i as f64).unwrap();
        }
        let p = prune_confidence_interval(&ds, 0.0, 20.0).unwrap();
        assert_eq!(p.len(), 8);
        assert!(!p.values().contains(&9) && !p.values().contains(&8));
        assert!(prune_confidence_interval(&ds, 0.0, 100.0).is_err());
        assert!(prune_confidence_interval(&ds, 30.0, 30.0).is_err());
    }

    #[test]
    fn random_prune_counts() {
        let mut ds = Datastore::new(1);
        for i in 0..1000 {
            ds.push(&[i as f64], i % 7, 0.5).unwrap();
        }
        let p = prune_random(&ds, 0.2, 3).unwrap();
        assert_eq!(p.len(), 800);
        assert_eq!(p, prune_random(&ds, 0.2, 3).unwrap());
        assert_eq!(prune_random(&ds, 0.0, 3).unwrap().values(), ds.values());
    }

    #[test]
    fn binary_errors() {
        let ds = tiny();
        let p = Path::new("mem");
        let bytes = ds.to_bytes();
        assert_eq!(Datastore::from_bytes(p, &bytes, None).unwrap().values(), ds.values());
        assert!(matches!(
            Datastore::from_bytes(p, &bytes[..bytes.len() - 1], None),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            Datastore::from_bytes(p, &bytes[..10], None),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(matches!(
            Datastore::from_bytes(p, &bad, None),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            Datastore::from_bytes(p, &bytes, Some(3)),
            Err(Error::DimMismatch { .. })
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            Datastore::from_bytes(p, &v, None),
            Err(Error::UnsupportedVersion { .. })
        ));
    }
}
