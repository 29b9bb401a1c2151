//! Synthetic two-domain token transduction task.
//!
//! A domain is a Markov chain over source tokens plus a deterministic
//! source→target translation table. The in-domain spec remaps a fixed number
//! of source tokens to new targets and re-samples the chain, so a model
//! trained on the general domain is systematically wrong on the remapped
//! tokens.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub type Token = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub label: String,
    pub source_vocab: usize,
    pub target_vocab: usize,
    /// `table[s]` is the translation of source token `s`.
    pub table: Vec<Token>,
    /// Row-stochastic `V_s × V_s` transition matrix, row-major.
    pub transition: Vec<Vec<f64>>,
    /// Distribution of the first token of each sentence (the chain's
    /// stationary distribution).
    pub initial: Vec<f64>,
}

impl DomainSpec {
    pub fn translate(&self, source: &[Token]) -> Vec<Token> {
        source.iter().map(|&s| self.table[s]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.table.len() != self.source_vocab || self.transition.len() != self.source_vocab {
            return Err(Error::Shape("domain spec sizes disagree".into()));
        }
        if self.table.iter().any(|&t| t >= self.target_vocab) {
            return Err(Error::InvalidArgument("translation table target out of range".into()));
        }
        for row in &self.transition {
            if row.len() != self.source_vocab || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("transition row is not a distribution".into()));
            }
        }
        Ok(())
    }
}

/// Shape of the generated chains. The defaults are what
/// [`generate_domain_pair`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainShape {
    /// Number of successors with non-zero probability in each row.
    pub successors: usize,
    /// Relative popularity of remapped tokens in the general chain. Values
    /// below one make domain-specific tokens rare outside their domain.
    pub general_shift_popularity: f64,
}

impl Default for ChainShape {
    fn default() -> Self {
        ChainShape {
            successors: 12,
            general_shift_popularity: 1.0,
        }
    }
}

/// Pair of domain specs that share `V_s - round(ρ·V_s)` translations.
pub fn generate_domain_pair(
    seed: u64,
    source_vocab: usize,
    target_vocab: usize,
    shift_fraction: f64,
) -> Result<(DomainSpec, DomainSpec)> {
    generate_domain_pair_with(seed, source_vocab, target_vocab, shift_fraction, ChainShape::default())
}

pub fn generate_domain_pair_with(
    seed: u64,
    source_vocab: usize,
    target_vocab: usize,
    shift_fraction: f64,
    shape: ChainShape,
) -> Result<(DomainSpec, DomainSpec)> {
    if source_vocab < 4 {
        return Err(Error::InvalidArgument(format!("V_s={source_vocab} must be at least 4")));
    }
    if target_vocab < source_vocab {
        return Err(Error::InvalidArgument(format!(
            "V_t={target_vocab} must be at least V_s={source_vocab}"
        )));
    }
    if !(0.0..=1.0).contains(&shift_fraction) {
        return Err(Error::InvalidArgument(format!(
            "shift fraction {shift_fraction} not in [0, 1]"
        )));
    }
    if shape.successors == 0 || shape.general_shift_popularity <= 0.0 {
        return Err(Error::InvalidArgument("chain shape must be positive".into()));
    }
    let root = SeededRng::new(seed).child("domain-pair");

    let mut targets: Vec<Token> = (0..target_vocab).collect();
    root.child("table").shuffle(&mut targets);
    let general_table: Vec<Token> = targets[..source_vocab].to_vec();

    let n_shift = (shift_fraction * source_vocab as f64).round() as usize;
    let mut order: Vec<Token> = (0..source_vocab).collect();
    root.child("shifted").shuffle(&mut order);
    let mut shifted = vec![false; source_vocab];
    for &s in &order[..n_shift] {
        shifted[s] = true;
    }

    let mut remap = root.child("remap");
    let mut in_table = general_table.clone();
    for s in 0..source_vocab {
        if shifted[s] {
            let k = remap.below(target_vocab - 1);
            in_table[s] = if k >= general_table[s] { k + 1 } else { k };
        }
    }

    let general_pop: Vec<f64> = (0..source_vocab)
        .map(|s| {
            if shifted[s] {
                shape.general_shift_popularity
            } else {
                1.0
            }
        })
        .collect();
    let in_pop = vec![1.0; source_vocab];
    let general_chain = random_chain(&mut root.child("general-chain"), &general_pop, shape.successors);
    let in_chain = random_chain(&mut root.child("in-domain-chain"), &in_pop, shape.successors);

    let general = DomainSpec {
        label: "general".into(),
        source_vocab,
        target_vocab,
        table: general_table,
        initial: stationary_distribution(&general_chain),
        transition: general_chain,
    };
    let in_domain = DomainSpec {
        label: "in-domain".into(),
        source_vocab,
        target_vocab,
        table: in_table,
        initial: stationary_distribution(&in_chain),
        transition: in_chain,
    };
    Ok((general, in_domain))
}

fn random_chain(rng: &mut SeededRng, popularity: &[f64], successors: usize) -> Vec<Vec<f64>> {
    let n = popularity.len();
    let successors = successors.min(n);
    (0..n)
        .map(|_| {
            let mut cols: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut cols);
            let mut row = vec![0.0; n];
            for &c in &cols[..successors] {
                // Squared uniforms give a skewed but dense-enough support.
                let u = rng.uniform_range(0.05, 1.0);
                row[c] = popularity[c] * u * u;
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= sum);
            row
        })
        .collect()
}

/// Stationary distribution by power iteration on the lazy chain `(I + P) / 2`,
/// which converges for periodic chains too.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transition.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                next[j] += 0.5 * pi[i] * p;
            }
            next[i] += 0.5 * pi[i];
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    let sum: f64 = pi.iter().sum();
    pi.iter().map(|x| x / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub domain: String,
    pub seed: u64,
    pub pairs: Vec<SentencePair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.pairs.iter().map(|p| p.target.len()).sum()
    }

    /// Line-oriented text: a `#` header, then `src tokens<TAB>tgt tokens`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# domain={} seed={}\n", self.domain, self.seed);
        for p in &self.pairs {
            write_tokens(&mut out, &p.source);
            out.push('\t');
            write_tokens(&mut out, &p.target);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty corpus file".into()))?;
        let (domain, seed) = parse_header(header)?;
        let mut pairs = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidArgument(format!("corpus line {} lacks a tab separator", n + 2)))?;
            let source = parse_tokens(src, n + 2)?;
            let target = parse_tokens(tgt, n + 2)?;
            if source.len() != target.len() {
                return Err(Error::InvalidArgument(format!(
                    "corpus line {}: source and target lengths differ",
                    n + 2
                )));
            }
            pairs.push(SentencePair { source, target });
        }
        Ok(Corpus { domain, seed, pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        Corpus::from_text(&text)
    }

    /// SHA-256 of the serialized text, hex-encoded.
    pub fn id(&self) -> String {
        crate::io::hex_digest(self.to_text().as_bytes())
    }
}

fn write_tokens(out: &mut String, tokens: &[Token]) {
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{t}");
    }
}

fn parse_tokens(s: &str, line: usize) -> Result<Vec<Token>> {
    s.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::InvalidArgument(format!("corpus line {line}: bad token `{t}`")))
        })
        .collect()
}

fn parse_header(line: &str) -> Result<(String, u64)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::InvalidArgument("corpus header must start with `#`".into()))?;
    let mut domain = None;
    let mut seed = None;
    for field in body.split_whitespace() {
        match field.split_once('=') {
            Some(("domain", v)) => domain = Some(v.to_string()),
            Some(("seed", v)) => seed = v.parse().ok(),
            _ => {}
        }
    }
    match (domain, seed) {
        (Some(d), Some(s)) => Ok((d, s)),
        _ => Err(Error::InvalidArgument(format!("malformed corpus header `{line}`"))),
    }
}

pub fn sample_corpus(
    spec: &DomainSpec,
    n_sentences: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Corpus> {
    if min_len < 2 || max_len < min_len {
        return Err(Error::InvalidArgument(format!(
            "length range [{min_len}, {max_len}] invalid (minimum length is 2)"
        )));
    }
    if n_sentences == 0 {
        return Err(Error::InvalidArgument("n_sentences must be at least 1".into()));
    }
    let root = SeededRng::new(seed).child(&format!("corpus/{}", spec.label));
    let pairs = (0..n_sentences)
        .map(|i| {
            let mut rng = root.child_indexed("sentence", i as u64);
            let len = min_len + rng.below(max_len - min_len + 1);
            let mut source = Vec::with_capacity(len);
            let mut state = rng.categorical(&spec.initial);
            source.push(state);
            while source.len() < len {
                state = rng.categorical(&spec.transition[state]);
                source.push(state);
            }
            let target = spec.translate(&source);
            SentencePair { source, target }
        })
        .collect();
    Ok(Corpus {
        domain: spec.label.clone(),
        seed,
        pairs,
    })
}

/// Order-preserving split into (train, dev, test).
pub fn split_corpus(corpus: &Corpus, ratios: (f64, f64, f64)) -> Result<(Corpus, Corpus, Corpus)> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios ({a}, {b}, {c}) must be non-negative and sum to 1"
        )));
    }
    let n = corpus.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_dev = ((b * n as f64).round() as usize).min(n - n_train);
    let part = |range: std::ops::Range<usize>| Corpus {
        domain: corpus.domain.clone(),
        seed: corpus.seed,
        pairs: corpus.pairs[range].to_vec(),
    };
    Ok((
        part(0..n_train),
        part(n_train..n_train + n_dev),
        part(n_train + n_dev..n),
    ))
}
