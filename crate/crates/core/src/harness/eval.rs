use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::base::{BaseModel, ForwardRecord};
use crate::datastore::{knn_search_with, Datastore, DistanceKind, Neighbor};
use crate::error::{Error, Result};
use crate::head::{head_forward, HeadParams};
use crate::math::{self, Vector};
use crate::task::{Corpus, Token};

/// Metrics of one model variant on one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub token_accuracy: f64,
    /// Absent when greedy decoding was skipped.
    pub exact_match: Option<f64>,
    pub precision_1: Option<f64>,
    pub precision_2: Option<f64>,
    pub mean_lambda: f64,
    pub gt_retrieval_rate: f64,
    pub datastore_size: usize,
    pub timesteps: usize,
    pub sentences: usize,
}

/// One teacher-forced timestep as seen by the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub base_confidence: f64,
    pub retrieved: bool,
    pub lambda: f64,
    pub correct: bool,
}

/// Retrieval against a fixed datastore, memoized by query bits. The toy
/// base model has at most `V_s·(V_t+1)` distinct hidden states, so this
/// collapses almost all searches.
pub struct Retriever<'a> {
    ds: &'a Datastore,
    k: usize,
    kind: DistanceKind,
    cache: HashMap<Vec<u64>, Vec<Neighbor>>,
}

impl<'a> Retriever<'a> {
    pub fn new(ds: &'a Datastore, k: usize, kind: DistanceKind) -> Result<Self> {
        if ds.len() < k {
            return Err(Error::NotEnoughEntries { k, available: ds.len() });
        }
        Ok(Retriever {
            ds,
            k,
            kind,
            cache: HashMap::new(),
        })
    }

    pub fn datastore(&self) -> &Datastore {
        self.ds
    }

    pub fn search(&mut self, query: &[f64]) -> Result<&[Neighbor]> {
        let key: Vec<u64> = query.iter().map(|x| x.to_bits()).collect();
        if !self.cache.contains_key(&key) {
            let found = knn_search_with(self.ds, query, self.k, self.kind)?;
            self.cache.insert(key.clone(), found);
        }
        Ok(&self.cache[&key])
    }
}

/// What stands between the base model and the argmax.
#[derive(Clone, Copy)]
pub enum Decoder<'h> {
    Base,
    Head(&'h HeadParams),
}

impl Decoder<'_> {
    pub fn name(&self) -> String {
        match self {
            Decoder::Base => "base".into(),
            Decoder::Head(h) => h.variant().to_string(),
        }
    }

    /// Final distribution and λ at one step.
    fn step(&self, record: &ForwardRecord, retriever: &mut Retriever) -> Result<(Vector, f64, bool, Vec<Neighbor>)> {
        let neighbors = retriever.search(&record.hidden)?.to_vec();
        match self {
            Decoder::Base => Ok((record.probs.clone(), 0.0, false, neighbors)),
            Decoder::Head(h) => {
                let trace = head_forward(h, record, &neighbors)?;
                Ok((trace.p_final, trace.lambda, true, neighbors))
            }
        }
    }
}

/// Teacher-forced pass; one outcome per target token.
pub fn teacher_forced_outcomes(
    base: &BaseModel,
    decoder: Decoder,
    retriever: &mut Retriever,
    corpus: &Corpus,
) -> Result<Vec<StepOutcome>> {
    let mut out = Vec::with_capacity(corpus.token_count());
    for pair in &corpus.pairs {
        for (record, &y) in base.teacher_forced(pair)?.iter().zip(&pair.target) {
            let (dist, lambda, _, neighbors) = decoder.step(record, retriever)?;
            out.push(StepOutcome {
                base_confidence: record.probs[y],
                retrieved: neighbors.iter().any(|n| n.value == y),
                lambda,
                correct: math::argmax(&dist) == y,
            });
        }
    }
    Ok(out)
}

pub fn greedy_outputs(
    base: &BaseModel,
    decoder: Decoder,
    retriever: &mut Retriever,
    corpus: &Corpus,
) -> Result<Vec<Vec<Token>>> {
    corpus
        .pairs
        .iter()
        .map(|pair| base.greedy_decode(&pair.source, |rec| Ok(decoder.step(rec, retriever)?.0)))
        .collect()
}

/// Clipped corpus-level n-gram precision.
pub fn ngram_precision(hypotheses: &[Vec<Token>], references: &[&[Token]], n: usize) -> f64 {
    let mut matched = 0usize;
    let mut total = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        if hyp.len() < n {
            continue;
        }
        let mut ref_counts: HashMap<&[Token], usize> = HashMap::new();
        for g in reference.windows(n) {
            *ref_counts.entry(g).or_default() += 1;
        }
        let mut hyp_counts: HashMap<&[Token], usize> = HashMap::new();
        for g in hyp.windows(n) {
            *hyp_counts.entry(g).or_default() += 1;
        }
        for (g, c) in hyp_counts {
            matched += c.min(ref_counts.get(g).copied().unwrap_or(0));
            total += c;
        }
    }
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Full metric set for one decoder.
pub fn evaluate(
    base: &BaseModel,
    decoder: Decoder,
    retriever: &mut Retriever,
    corpus: &Corpus,
    greedy: bool,
) -> Result<EvalReport> {
    let steps = teacher_forced_outcomes(base, decoder, retriever, corpus)?;
    let (exact_match, precision_1, precision_2) = if greedy {
        let outputs = greedy_outputs(base, decoder, retriever, corpus)?;
        let refs: Vec<&[Token]> = corpus.pairs.iter().map(|p| p.target.as_slice()).collect();
        let exact = mean(
            outputs
                .iter()
                .zip(&refs)
                .map(|(o, r)| f64::from(u8::from(o.as_slice() == *r))),
        );
        (
            Some(exact),
            Some(ngram_precision(&outputs, &refs, 1)),
            Some(ngram_precision(&outputs, &refs, 2)),
        )
    } else {
        (None, None, None)
    };
    Ok(EvalReport {
        variant: decoder.name(),
        token_accuracy: mean(steps.iter().map(|s| f64::from(u8::from(s.correct)))),
        exact_match,
        precision_1,
        precision_2,
        mean_lambda: mean(steps.iter().map(|s| s.lambda)),
        gt_retrieval_rate: mean(steps.iter().map(|s| f64::from(u8::from(s.retrieved)))),
        datastore_size: retriever.datastore().len(),
        timesteps: steps.len(),
        sentences: corpus.len(),
    })
}

/// Count and mean λ of one confidence bin for retrieved or missed steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaBin {
    pub lo: f64,
    pub hi: f64,
    pub retrieved: bool,
    pub count: usize,
    /// Absent for an empty bin.
    pub mean_lambda: Option<f64>,
}

/// Bins are `[lo, hi)` except the last, which is closed.
pub fn lambda_bins(steps: &[StepOutcome], edges: &[f64]) -> Result<Vec<LambdaBin>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "bin edges must be increasing, at least two".into(),
        ));
    }
    let nbins = edges.len() - 1;
    let bin_of = |c: f64| -> Option<usize> {
        if c < edges[0] || c > edges[nbins] {
            return None;
        }
        Some((0..nbins).find(|&b| c < edges[b + 1]).unwrap_or(nbins - 1))
    };
    // [missed, retrieved] x bins
    let mut acc = vec![[(0usize, 0.0f64); 2]; nbins];
    for s in steps {
        if let Some(b) = bin_of(s.base_confidence) {
            let cell = &mut acc[b][usize::from(s.retrieved)];
            cell.0 += 1;
            cell.1 += s.lambda;
        }
    }
    let mut out = Vec::with_capacity(2 * nbins);
    for retrieved in [true, false] {
        for (b, cells) in acc.iter().enumerate() {
            let (count, sum) = cells[usize::from(retrieved)];
            out.push(LambdaBin {
                lo: edges[b],
                hi: edges[b + 1],
                retrieved,
                count,
                mean_lambda: (count > 0).then(|| sum / count as f64),
            });
        }
    }
    Ok(out)
}
