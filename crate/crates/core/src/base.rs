//! Per-position base transducer.
//!
//! At position `t` the model embeds the source token and the previous target
//! token (a begin-of-sequence row at `t = 0`), maps the concatenation through
//! one tanh layer to the hidden state `h_t`, and predicts the target token with
//! a softmax output layer. `h_t` is the datastore key and the retrieval query.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, BinReader, BinWriter};
use crate::math::{self, AdamState, MatrixView, ParamLayout, Vector};
use crate::rng::SeededRng;
use crate::task::{Corpus, SentencePair, Token};

const MAGIC: &[u8; 4] = b"KNBM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseDims {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl BaseDims {
    pub fn new(source_vocab: usize, target_vocab: usize) -> Self {
        BaseDims {
            source_vocab,
            target_vocab,
            embed: 16,
            hidden: 32,
        }
    }

    /// Row of the previous-token table used at `t = 0`.
    pub fn bos(&self) -> Token {
        self.target_vocab
    }

    fn layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        l.push("src_embed", self.source_vocab, self.embed);
        l.push("prev_embed", self.target_vocab + 1, self.embed);
        l.push("w_hidden", self.hidden, 2 * self.embed);
        l.push("b_hidden", self.hidden, 1);
        l.push("w_out", self.target_vocab, self.hidden);
        l.push("b_out", self.target_vocab, 1);
        l
    }
}

const SRC: usize = 0;
const PREV: usize = 1;
const WH: usize = 2;
const BH: usize = 3;
const WO: usize = 4;
const BO: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    dims: BaseDims,
    layout: ParamLayout,
    params: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub t: usize,
    pub hidden: Vector,
    pub logits: Vector,
    pub probs: Vector,
}

/// Probability the record assigns to `token`.
pub fn confidence(record: &ForwardRecord, token: Token) -> Result<f64> {
    record.probs.get(token).copied().ok_or(Error::TokenOutOfRange {
        token,
        vocab: record.probs.len(),
    })
}

impl BaseModel {
    pub fn zeros(dims: BaseDims) -> Self {
        let layout = dims.layout();
        BaseModel {
            params: vec![0.0; layout.total()],
            layout,
            dims,
        }
    }

    /// Uniform initialization; biases start at zero.
    pub fn init(dims: BaseDims, seed: u64) -> Self {
        let mut m = BaseModel::zeros(dims);
        let root = SeededRng::new(seed).child("base-init");
        let scales = [
            (SRC, 0.5),
            (PREV, 0.5),
            (WH, 1.0 / ((2 * dims.embed) as f64).sqrt()),
            (WO, 1.0 / (dims.hidden as f64).sqrt()),
        ];
        for (block, scale) in scales {
            let spec = m.layout.block(block).clone();
            let mut rng = root.child(&spec.name);
            for p in &mut m.params[spec.range()] {
                *p = rng.uniform_range(-scale, scale);
            }
        }
        m
    }

    pub fn dims(&self) -> BaseDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn block(&self, idx: usize) -> &[f64] {
        &self.params[self.layout.block(idx).range()]
    }

    fn view(&self, idx: usize) -> MatrixView<'_> {
        let b = self.layout.block(idx);
        MatrixView::new(b.rows, b.cols, &self.params[b.range()])
    }

    fn input(&self, source: Token, prev: Token) -> Result<Vector> {
        if source >= self.dims.source_vocab {
            return Err(Error::TokenOutOfRange {
                token: source,
                vocab: self.dims.source_vocab,
            });
        }
        if prev > self.dims.target_vocab {
            return Err(Error::TokenOutOfRange {
                token: prev,
                vocab: self.dims.target_vocab + 1,
            });
        }
        let mut x = self.view(SRC).row(source).to_vec();
        x.extend_from_slice(self.view(PREV).row(prev));
        Ok(x)
    }

    /// One decoding position. `prev` is the previous target token, or
    /// [`BaseDims::bos`] at the first position.
    pub fn forward_step(&self, t: usize, source: Token, prev: Token) -> Result<ForwardRecord> {
        let x = self.input(source, prev)?;
        let mut hidden = math::affine(self.view(WH), self.block(BH), &x)?;
        hidden.iter_mut().for_each(|h| *h = h.tanh());
        let logits = math::affine(self.view(WO), self.block(BO), &hidden)?;
        let probs = math::softmax(&logits)?;
        Ok(ForwardRecord {
            t,
            hidden,
            logits,
            probs,
        })
    }

    /// Records for every position of `pair` with the reference prefix fed back.
    pub fn teacher_forced(&self, pair: &SentencePair) -> Result<Vec<ForwardRecord>> {
        let mut prev = self.dims.bos();
        pair.source
            .iter()
            .zip(&pair.target)
            .enumerate()
            .map(|(t, (&s, &y))| {
                let rec = self.forward_step(t, s, prev);
                prev = y;
                rec
            })
            .collect()
    }

    /// Greedy decoding. `hook` turns each step's record into the distribution
    /// the argmax is taken over.
    pub fn greedy_decode<F>(&self, source: &[Token], mut hook: F) -> Result<Vec<Token>>
    where
        F: FnMut(&ForwardRecord) -> Result<Vector>,
    {
        let mut out = Vec::with_capacity(source.len());
        let mut prev = self.dims.bos();
        for (t, &s) in source.iter().enumerate() {
            let rec = self.forward_step(t, s, prev)?;
            let dist = hook(&rec)?;
            let y = math::argmax(&dist);
            out.push(y);
            prev = y;
        }
        Ok(out)
    }

    /// Teacher-forced token accuracy of the plain model.
    pub fn token_accuracy(&self, corpus: &Corpus) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for pair in &corpus.pairs {
            for (rec, &y) in self.teacher_forced(pair)?.iter().zip(&pair.target) {
                correct += usize::from(math::argmax(&rec.probs) == y);
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }

    /// Mean teacher-forced cross-entropy over `pairs`, and its gradient.
    pub fn loss_and_grad(&self, pairs: &[&SentencePair]) -> Result<(f64, Vector)> {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let mut count = 0usize;
        let e = self.dims.embed;
        let wh = self.view(WH);
        let wo = self.view(WO);
        let spec = |i: usize| self.layout.block(i).clone();
        let (src_b, prev_b, wh_b, bh_b, wo_b, bo_b) = (spec(SRC), spec(PREV), spec(WH), spec(BH), spec(WO), spec(BO));
        for pair in pairs {
            let mut prev = self.dims.bos();
            for (t, (&s, &y)) in pair.source.iter().zip(&pair.target).enumerate() {
                if y >= self.dims.target_vocab {
                    return Err(Error::TokenOutOfRange {
                        token: y,
                        vocab: self.dims.target_vocab,
                    });
                }
                let x = self.input(s, prev)?;
                let rec = self.forward_step(t, s, prev)?;
                loss -= rec.probs[y].max(1e-300).ln();
                count += 1;

                let mut dz = rec.probs.clone();
                dz[y] -= 1.0;
                math::add_outer(&mut grad[wo_b.range()], &dz, &rec.hidden, 1.0);
                for (g, d) in grad[bo_b.range()].iter_mut().zip(&dz) {
                    *g += d;
                }
                let dh = wo.matvec_t(&dz);
                let da: Vector = dh.iter().zip(&rec.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
                math::add_outer(&mut grad[wh_b.range()], &da, &x, 1.0);
                for (g, d) in grad[bh_b.range()].iter_mut().zip(&da) {
                    *g += d;
                }
                let dx = wh.matvec_t(&da);
                let src_row = src_b.offset + s * e;
                let prev_row = prev_b.offset + prev * e;
                for i in 0..e {
                    grad[src_row + i] += dx[i];
                    grad[prev_row + i] += dx[e + i];
                }
                prev = y;
            }
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            loss *= inv;
        }
        Ok((loss, grad))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for d in [
            self.dims.source_vocab,
            self.dims.target_vocab,
            self.dims.embed,
            self.dims.hidden,
        ] {
            w.u32(d as u32);
        }
        w.f64s(&self.params);
        w.into_inner()
    }

    pub fn from_bytes(path: &Path, data: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(path, data);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dims = BaseDims {
            source_vocab: r.u32()? as usize,
            target_vocab: r.u32()? as usize,
            embed: r.u32()? as usize,
            hidden: r.u32()? as usize,
        };
        let mut model = BaseModel::zeros(dims);
        if r.remaining() < model.params.len() * 8 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
            });
        }
        model.params = r.f64s(model.params.len())?;
        r.finish()?;
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: "non-finite parameter".into(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        BaseModel::from_bytes(path, &io::read_bytes(path)?)
    }

    /// Content hash of the checkpoint bytes.
    pub fn checkpoint_id(&self) -> String {
        io::hex_digest(&self.to_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_sentences: usize,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            epochs: 10,
            lr: 1e-2,
            batch_sentences: 16,
            seed: 0,
        }
    }
}

/// Teacher-forced cross-entropy training with Adam. Returns the trained model
/// and the mean training loss of each epoch.
pub fn train_base(model: &BaseModel, corpus: &Corpus, cfg: &BaseTrainConfig) -> Result<(BaseModel, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Empty("base-model training corpus"));
    }
    if cfg.batch_sentences == 0 {
        return Err(Error::InvalidArgument("batch_sentences must be positive".into()));
    }
    let mut model = model.clone();
    let mut adam = AdamState::for_layout(&model.layout);
    let shuffle = SeededRng::new(cfg.seed).child("base-train/shuffle");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle.child_indexed("epoch", epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_sentences) {
            let pairs: Vec<&SentencePair> = chunk.iter().map(|&i| &corpus.pairs[i]).collect();
            let (loss, grad) = model.loss_and_grad(&pairs)?;
            math::adam_step(&mut model.params, &grad, &mut adam, cfg.lr)?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok((model, epoch_losses))
}
