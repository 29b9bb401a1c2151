//! Confidence-enhanced kNN head.
//!
//! Given the base model's record at a decoding step and the K retrieved
//! neighbors, the head builds
//!
//! * a temperature `T = softplus(W1 tanh(W2 [d; r])) + T_FLOOR`,
//! * per-neighbor calibration offsets `c_k = W3 tanh(W4 [log p(v_k|ĥ); log p(v_k|h_k)])`,
//! * the kNN distribution `p_kNN(w) ∝ Σ_{k: v_k = w} exp(-d_k / T + c_k)`,
//! * scores `s_kNN = W5 tanh(W2 [d; r])` and
//!   `s_NMT = W6 [log p(v|ĥ); log p(v|h); log p_top]`,
//! * the weight `λ = exp(s_kNN) / (exp(s_kNN) + exp(s_NMT))`,
//!
//! and returns `λ p_kNN + (1 - λ) p_base`. Every affine map carries a bias.
//!
//! The vanilla and adaptive baselines are restrictions of the same head, and
//! two ablations (fixed λ, no calibration) are flags on the robust head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::base::ForwardRecord;
use crate::datastore::{DistanceKind, Neighbor};
use crate::error::{Error, Result};
use crate::io::{self, BinReader, BinWriter};
use crate::math::{self, MatrixView, ParamLayout, Vector};
use crate::rng::SeededRng;
use crate::task::Token;

const MAGIC: &[u8; 4] = b"KNHD";
const VERSION: u32 = 1;

pub const T_FLOOR: f64 = 1e-3;
pub const PROB_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fixed λ and T, no calibration.
    Vanilla,
    /// T and s_kNN from distance features, s_NMT a learned constant.
    Adaptive,
    /// The full confidence-enhanced head.
    Robust,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Adaptive => "adaptive",
            Variant::Robust => "robust",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Variant::Vanilla => 0,
            Variant::Adaptive => 1,
            Variant::Robust => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Vanilla),
            1 => Some(Variant::Adaptive),
            2 => Some(Variant::Robust),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "adaptive" => Ok(Variant::Adaptive),
            "robust" => Ok(Variant::Robust),
            other => Err(Error::InvalidArgument(format!("unknown head variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Structural choices of a head. Serialized into the checkpoint's tag byte.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadArch {
    pub k: usize,
    pub wp_hidden: usize,
    pub dc_hidden: usize,
    /// s_kNN reuses the temperature encoder W2 instead of its own.
    pub shared_encoder: bool,
    /// Robust only: calibration network enabled.
    pub use_dc: bool,
    /// Robust only: λ comes from a fixed constant instead of the WP network.
    pub fixed_lambda: bool,
    pub distance: DistanceKind,
}

impl Default for HeadArch {
    fn default() -> Self {
        HeadArch {
            k: 8,
            wp_hidden: 4,
            dc_hidden: 32,
            shared_encoder: true,
            use_dc: true,
            fixed_lambda: false,
            distance: DistanceKind::Euclidean,
        }
    }
}

impl HeadArch {
    fn flags(&self) -> u8 {
        u8::from(!self.shared_encoder)
            | u8::from(!self.use_dc) << 1
            | u8::from(self.fixed_lambda) << 2
            | u8::from(self.distance == DistanceKind::SquaredEuclidean) << 3
    }

    fn with_flags(mut self, flags: u8) -> Self {
        self.shared_encoder = flags & 1 == 0;
        self.use_dc = flags & 2 == 0;
        self.fixed_lambda = flags & 4 != 0;
        self.distance = if flags & 8 != 0 {
            DistanceKind::SquaredEuclidean
        } else {
            DistanceKind::Euclidean
        };
        self
    }
}

/// Indices of each block in the layout; `None` when the variant lacks it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Blocks {
    w2: Option<usize>,
    b2: Option<usize>,
    w1: Option<usize>,
    b1: Option<usize>,
    w5: Option<usize>,
    b5: Option<usize>,
    w4: Option<usize>,
    b4: Option<usize>,
    w3: Option<usize>,
    b3: Option<usize>,
    w6: Option<usize>,
    b6: Option<usize>,
    w2_wp: Option<usize>,
    b2_wp: Option<usize>,
    lambda: Option<usize>,
    temperature: Option<usize>,
}

fn build_layout(variant: Variant, arch: &HeadArch) -> (ParamLayout, Blocks) {
    let mut l = ParamLayout::new();
    let mut b = Blocks::default();
    let (k, hw, hc) = (arch.k, arch.wp_hidden, arch.dc_hidden);
    match variant {
        Variant::Vanilla => {
            b.lambda = Some(l.push("lambda", 1, 1));
            b.temperature = Some(l.push("temperature", 1, 1));
        }
        Variant::Adaptive | Variant::Robust => {
            let robust = variant == Variant::Robust;
            b.w2 = Some(l.push("W2", hw, 2 * k));
            b.b2 = Some(l.push("b2", hw, 1));
            b.w1 = Some(l.push("W1", 1, hw));
            b.b1 = Some(l.push("b1", 1, 1));
            let wp = !(robust && arch.fixed_lambda);
            if wp {
                if !arch.shared_encoder {
                    b.w2_wp = Some(l.push("W2_wp", hw, 2 * k));
                    b.b2_wp = Some(l.push("b2_wp", hw, 1));
                }
                b.w5 = Some(l.push("W5", 1, hw));
                b.b5 = Some(l.push("b5", 1, 1));
            }
            if robust && arch.use_dc {
                b.w4 = Some(l.push("W4", hc, 2));
                b.b4 = Some(l.push("b4", hc, 1));
                b.w3 = Some(l.push("W3", 1, hc));
                b.b3 = Some(l.push("b3", 1, 1));
            }
            if robust && wp {
                b.w6 = Some(l.push("W6", 1, 3 * k));
            }
            if wp {
                b.b6 = Some(l.push("b6", 1, 1));
            } else {
                b.lambda = Some(l.push("lambda", 1, 1));
            }
        }
    }
    (l, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    variant: Variant,
    arch: HeadArch,
    layout: ParamLayout,
    blocks: Blocks,
    params: Vector,
}

impl HeadParams {
    /// All-zero parameters.
    pub fn zeros(variant: Variant, arch: HeadArch) -> Self {
        let (layout, blocks) = build_layout(variant, &arch);
        HeadParams {
            variant,
            arch,
            params: vec![0.0; layout.total()],
            layout,
            blocks,
        }
    }

    /// Output layers at zero, encoders uniform in (-0.1, 0.1).
    pub fn init(variant: Variant, arch: HeadArch, seed: u64) -> Self {
        let mut h = HeadParams::zeros(variant, arch);
        let root = SeededRng::new(seed).child("head-init");
        for idx in [h.blocks.w2, h.blocks.w2_wp, h.blocks.w4].into_iter().flatten() {
            let spec = h.layout.block(idx).clone();
            let mut rng = root.child(&spec.name);
            for p in &mut h.params[spec.range()] {
                *p = rng.uniform_range(-0.1, 0.1);
            }
        }
        h
    }

    pub fn vanilla(arch: HeadArch, lambda: f64, temperature: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) || !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "vanilla head needs λ in [0, 1] and T > 0 (got {lambda}, {temperature})"
            )));
        }
        let mut h = HeadParams::zeros(Variant::Vanilla, arch);
        h.set_fixed_lambda(lambda)?;
        let t = h.blocks.temperature.expect("vanilla layout");
        h.params[h.layout.block(t).offset] = temperature;
        Ok(h)
    }

    /// Sets the constant λ of a vanilla head or a fixed-λ robust head.
    pub fn set_fixed_lambda(&mut self, lambda: f64) -> Result<()> {
        let idx = self
            .blocks
            .lambda
            .ok_or_else(|| Error::InvalidArgument(format!("{} head has no fixed λ", self.variant)))?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!("λ={lambda} not in [0, 1]")));
        }
        let off = self.layout.block(idx).offset;
        self.params[off] = lambda;
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn arch(&self) -> &HeadArch {
        &self.arch
    }

    pub fn k(&self) -> usize {
        self.arch.k
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mask over the flat buffer: true where the optimizer may update.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        for idx in [self.blocks.lambda, self.blocks.temperature].into_iter().flatten() {
            for i in self.layout.block(idx).range() {
                mask[i] = false;
            }
        }
        mask
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_mask().iter().filter(|&&m| m).count()
    }

    fn scalar(&self, idx: Option<usize>) -> f64 {
        idx.map_or(0.0, |i| self.params[self.layout.block(i).offset])
    }

    fn slice(&self, idx: usize) -> &[f64] {
        &self.params[self.layout.block(idx).range()]
    }

    fn view(&self, idx: usize) -> MatrixView<'_> {
        let b = self.layout.block(idx);
        MatrixView::new(b.rows, b.cols, &self.params[b.range()])
    }

    fn encode(&self, w: usize, b: usize, input: &[f64]) -> Vector {
        let mut a = self.view(w).matvec(input);
        for (x, bias) in a.iter_mut().zip(self.slice(b)) {
            *x = (*x + bias).tanh();
        }
        a
    }
}

/// Inputs the head networks consume, all derived from one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub distances: Vector,
    /// `r_k` = number of distinct values among the first k neighbors.
    pub distinct: Vector,
    pub logp_query: Vector,
    pub logp_key: Vector,
    pub logp_top: Vector,
}

impl FeatureBundle {
    fn distance_input(&self) -> Vector {
        [self.distances.as_slice(), self.distinct.as_slice()].concat()
    }

    fn confidence_input(&self) -> Vector {
        [
            self.logp_query.as_slice(),
            self.logp_key.as_slice(),
            self.logp_top.as_slice(),
        ]
        .concat()
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

pub fn extract_features(record: &ForwardRecord, neighbors: &[Neighbor]) -> Result<FeatureBundle> {
    if neighbors.is_empty() {
        return Err(Error::Empty("neighbors"));
    }
    if neighbors.windows(2).any(|w| w[0].distance > w[1].distance) {
        return Err(Error::UnsortedNeighbors);
    }
    let k = neighbors.len();
    let vocab = record.probs.len();
    if k > vocab {
        return Err(Error::InvalidArgument(format!(
            "K={k} exceeds target vocabulary {vocab}"
        )));
    }
    let mut seen: Vec<Token> = Vec::with_capacity(k);
    let mut distinct = Vec::with_capacity(k);
    let mut logp_query = Vec::with_capacity(k);
    for n in neighbors {
        if n.value >= vocab {
            return Err(Error::TokenOutOfRange { token: n.value, vocab });
        }
        if !seen.contains(&n.value) {
            seen.push(n.value);
        }
        distinct.push(seen.len() as f64);
        logp_query.push(floored_ln(record.probs[n.value]));
    }
    let mut sorted = record.probs.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(FeatureBundle {
        distances: neighbors.iter().map(|n| n.distance).collect(),
        distinct,
        logp_query,
        logp_key: neighbors.iter().map(|n| floored_ln(n.key_conf)).collect(),
        logp_top: sorted[..k].iter().map(|&p| floored_ln(p)).collect(),
    })
}

fn temperature_from_raw(raw: f64) -> f64 {
    math::softplus(raw) + T_FLOOR
}

/// Temperature of the kNN distribution.
pub fn temperature(params: &HeadParams, features: &FeatureBundle) -> f64 {
    let b = &params.blocks;
    match (b.temperature, b.w2, b.b2) {
        (Some(t), _, _) => params.params[params.layout.block(t).offset],
        (None, Some(w2), Some(b2)) => {
            let a = params.encode(w2, b2, &features.distance_input());
            let raw = math::dot(params.slice(b.w1.expect("W1")), &a) + params.scalar(b.b1);
            temperature_from_raw(raw)
        }
        _ => unreachable!("every layout defines a temperature"),
    }
}

/// Calibration offsets `c_k`; zeros when the variant has no DC network.
pub fn calibration(params: &HeadParams, features: &FeatureBundle) -> Vector {
    let b = &params.blocks;
    match (b.w4, b.b4, b.w3) {
        (Some(w4), Some(b4), Some(w3)) => features
            .logp_query
            .iter()
            .zip(&features.logp_key)
            .map(|(&q, &kc)| {
                let g = params.encode(w4, b4, &[q, kc]);
                math::dot(params.slice(w3), &g) + params.scalar(b.b3)
            })
            .collect(),
        _ => vec![0.0; features.distances.len()],
    }
}

/// `p_kNN` over `vocab` tokens. Normalized through a max-shifted softmax over
/// the neighbor logits, so large `d/T` cannot underflow every mass.
pub fn knn_distribution(neighbors: &[Neighbor], temperature: f64, c: &[f64], vocab: usize) -> Result<Vector> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if c.len() != neighbors.len() {
        return Err(Error::Shape(format!(
            "{} offsets for {} neighbors",
            c.len(),
            neighbors.len()
        )));
    }
    if neighbors.is_empty() {
        return Err(Error::Empty("neighbors"));
    }
    let logits: Vector = neighbors
        .iter()
        .zip(c)
        .map(|(n, ck)| -n.distance / temperature + ck)
        .collect();
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate);
    }
    let q = math::softmax_unchecked(&logits);
    let mut p = vec![0.0; vocab];
    for (n, qk) in neighbors.iter().zip(q) {
        if n.value >= vocab {
            return Err(Error::TokenOutOfRange { token: n.value, vocab });
        }
        p[n.value] += qk;
    }
    Ok(p)
}

/// `(λ, s_kNN, s_NMT)`. For heads with a fixed λ both scores are zero.
pub fn lambda_weight(params: &HeadParams, features: &FeatureBundle) -> (f64, f64, f64) {
    let b = &params.blocks;
    if let Some(l) = b.lambda {
        return (params.params[params.layout.block(l).offset], 0.0, 0.0);
    }
    let s_knn = match (b.w5, wp_encoder(b)) {
        (Some(w5), Some((w2, b2))) => {
            let a = params.encode(w2, b2, &features.distance_input());
            math::dot(params.slice(w5), &a) + params.scalar(b.b5)
        }
        _ => 0.0,
    };
    let s_nmt =
        b.w6.map_or(0.0, |w6| math::dot(params.slice(w6), &features.confidence_input())) + params.scalar(b.b6);
    // Past |s| ≈ 37 the sigmoid rounds to exactly 0 or 1; keep the nearest
    // representable value inside the open interval instead.
    let lambda = math::sigmoid(s_knn - s_nmt).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    (lambda, s_knn, s_nmt)
}

fn wp_encoder(b: &Blocks) -> Option<(usize, usize)> {
    match (b.w2_wp, b.b2_wp) {
        (Some(w), Some(bb)) => Some((w, bb)),
        _ => b.w2.zip(b.b2),
    }
}

pub fn interpolate(p_knn: &[f64], p_base: &[f64], lambda: f64) -> Vector {
    p_knn
        .iter()
        .zip(p_base)
        .map(|(k, b)| lambda * k + (1.0 - lambda) * b)
        .collect()
}

/// Everything the head computed at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationTrace {
    pub features: FeatureBundle,
    pub temperature: f64,
    pub calibration: Vector,
    pub s_knn: f64,
    pub s_nmt: f64,
    pub lambda: f64,
    pub p_knn: Vector,
    pub p_base: Vector,
    pub p_final: Vector,
    pub ground_truth_retrieved: Option<bool>,
}

pub fn head_forward(params: &HeadParams, record: &ForwardRecord, neighbors: &[Neighbor]) -> Result<InterpolationTrace> {
    if neighbors.len() != params.k() {
        return Err(Error::InvalidArgument(format!(
            "head expects K={} neighbors, got {}",
            params.k(),
            neighbors.len()
        )));
    }
    let features = extract_features(record, neighbors)?;
    let t = temperature(params, &features);
    let c = calibration(params, &features);
    let p_knn = knn_distribution(neighbors, t, &c, record.probs.len())?;
    let (lambda, s_knn, s_nmt) = lambda_weight(params, &features);
    let p_final = interpolate(&p_knn, &record.probs, lambda);
    Ok(InterpolationTrace {
        features,
        temperature: t,
        calibration: c,
        s_knn,
        s_nmt,
        lambda,
        p_knn,
        p_base: record.probs.clone(),
        p_final,
        ground_truth_retrieved: None,
    })
}

/// Negative log-likelihood of `y` under the interpolated distribution.
pub fn head_loss(trace: &InterpolationTrace, y: Token) -> f64 {
    -trace.p_final[y].max(PROB_FLOOR).ln()
}

/// One supervised step: the record, its neighbors, and the reference token.
#[derive(Debug, Clone)]
pub struct Example {
    pub record: ForwardRecord,
    pub neighbors: Vec<Neighbor>,
    pub target: Token,
}

/// Loss of one example and its gradient with respect to the flat parameters.
/// Gradients of non-trainable blocks are left at zero.
pub fn loss_and_grad(
    params: &HeadParams,
    record: &ForwardRecord,
    neighbors: &[Neighbor],
    y: Token,
) -> Result<(f64, Vector)> {
    let mut grad = vec![0.0; params.params.len()];
    let loss = accumulate_grad(params, record, neighbors, y, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Mean loss over a batch and its gradient.
pub fn batch_loss_and_grad(params: &HeadParams, batch: &[Example]) -> Result<(f64, Vector)> {
    let mut grad = vec![0.0; params.params.len()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        loss += scale * accumulate_grad(params, &ex.record, &ex.neighbors, ex.target, scale, &mut grad)?;
    }
    Ok((loss, grad))
}

pub fn batch_loss(params: &HeadParams, batch: &[Example]) -> Result<f64> {
    let mut loss = 0.0;
    for ex in batch {
        loss += head_loss(&head_forward(params, &ex.record, &ex.neighbors)?, ex.target);
    }
    Ok(loss / batch.len().max(1) as f64)
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

fn accumulate_grad(
    params: &HeadParams,
    record: &ForwardRecord,
    neighbors: &[Neighbor],
    y: Token,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let trace = head_forward(params, record, neighbors)?;
    let loss = head_loss(&trace, y);
    let b = &params.blocks;
    let p_final = trace.p_final[y];
    if p_final <= PROB_FLOOR || b.temperature.is_some() {
        // Floored loss or vanilla head: nothing to differentiate.
        return Ok(loss);
    }
    let range = |idx: usize| params.layout.block(idx).range();
    let g_pf = -scale / p_final;
    let lambda = trace.lambda;
    let p_knn_y = trace.p_knn[y];

    // λ path.
    if b.lambda.is_none() {
        let g_lambda = g_pf * (p_knn_y - trace.p_base[y]);
        let g_sknn = g_lambda * lambda * (1.0 - lambda);
        let g_snmt = -g_sknn;
        if let Some(w6) = b.w6 {
            add_scaled(&mut grad[range(w6)], &trace.features.confidence_input(), g_snmt);
        }
        if let Some(b6) = b.b6 {
            grad[range(b6).start] += g_snmt;
        }
        if let (Some(w5), Some((w2, b2))) = (b.w5, wp_encoder(b)) {
            let z = trace.features.distance_input();
            let a = params.encode(w2, b2, &z);
            add_scaled(&mut grad[range(w5)], &a, g_sknn);
            grad[range(b.b5.expect("b5")).start] += g_sknn;
            backprop_encoder(params, w2, b2, &z, &a, params.slice(w5), g_sknn, grad);
        }
    }

    // p_kNN path: logits l_j = -d_j / T + c_j, q = softmax(l).
    let g_p = g_pf * lambda;
    let logits: Vector = neighbors
        .iter()
        .zip(&trace.calibration)
        .map(|(n, c)| -n.distance / trace.temperature + c)
        .collect();
    let q = math::softmax_unchecked(&logits);
    let g_logit: Vector = neighbors
        .iter()
        .zip(&q)
        .map(|(n, &qj)| g_p * qj * (f64::from(u8::from(n.value == y)) - p_knn_y))
        .collect();

    // Temperature.
    if let (Some(w2), Some(b2), Some(w1)) = (b.w2, b.b2, b.w1) {
        let t = trace.temperature;
        let g_t: f64 = g_logit
            .iter()
            .zip(neighbors)
            .map(|(g, n)| g * n.distance / (t * t))
            .sum();
        let z = trace.features.distance_input();
        let a = params.encode(w2, b2, &z);
        let raw = math::dot(params.slice(w1), &a) + params.scalar(b.b1);
        let g_raw = g_t * math::sigmoid(raw);
        add_scaled(&mut grad[range(w1)], &a, g_raw);
        grad[range(b.b1.expect("b1")).start] += g_raw;
        backprop_encoder(params, w2, b2, &z, &a, params.slice(w1), g_raw, grad);
    }

    // Calibration.
    if let (Some(w4), Some(b4), Some(w3), Some(b3)) = (b.w4, b.b4, b.w3, b.b3) {
        let w3v = params.slice(w3);
        for (j, &g_c) in g_logit.iter().enumerate() {
            let u = [trace.features.logp_query[j], trace.features.logp_key[j]];
            let g = params.encode(w4, b4, &u);
            add_scaled(&mut grad[range(w3)], &g, g_c);
            grad[range(b3).start] += g_c;
            let g_pre: Vector = g.iter().zip(w3v).map(|(gi, wi)| g_c * wi * (1.0 - gi * gi)).collect();
            math::add_outer(&mut grad[range(w4)], &g_pre, &u, 1.0);
            add_scaled(&mut grad[range(b4)], &g_pre, 1.0);
        }
    }
    Ok(loss)
}

/// Backpropagates `g_out` through `out = w_out · tanh(W z + b)` into `W`, `b`.
#[allow(clippy::too_many_arguments)]
fn backprop_encoder(
    params: &HeadParams,
    w: usize,
    b: usize,
    z: &[f64],
    a: &[f64],
    w_out: &[f64],
    g_out: f64,
    grad: &mut [f64],
) {
    let g_pre: Vector = a
        .iter()
        .zip(w_out)
        .map(|(ai, wi)| g_out * wi * (1.0 - ai * ai))
        .collect();
    math::add_outer(&mut grad[params.layout.block(w).range()], &g_pre, z, 1.0);
    add_scaled(&mut grad[params.layout.block(b).range()], &g_pre, 1.0);
}

impl HeadParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(self.variant.tag());
        w.u8(self.arch.flags());
        w.u32(self.arch.k as u32);
        w.u32(self.arch.wp_hidden as u32);
        w.u32(self.arch.dc_hidden as u32);
        w.f64s(&self.params);
        w.into_inner()
    }

    pub fn from_bytes(path: &Path, data: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(path, data);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let tag = r.u8()?;
        let variant = Variant::from_tag(tag).ok_or_else(|| r.corrupt(format!("unknown variant tag {tag}")))?;
        let flags = r.u8()?;
        let arch = HeadArch {
            k: r.u32()? as usize,
            wp_hidden: r.u32()? as usize,
            dc_hidden: r.u32()? as usize,
            ..HeadArch::default()
        }
        .with_flags(flags);
        let mut h = HeadParams::zeros(variant, arch);
        if r.remaining() < h.params.len() * 8 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
            });
        }
        h.params = r.f64s(h.params.len())?;
        r.finish()?;
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        HeadParams::from_bytes(path, &io::read_bytes(path)?)
    }
}
