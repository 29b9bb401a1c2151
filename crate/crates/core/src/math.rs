//! Dense linear algebra on `f64` slices, activations, Adam, and a
//! central-difference gradient oracle.
//!
//! Everything here works on plain `Vec<f64>` / `&[f64]` vectors. Model
//! parameters live in one flat buffer described by a [`ParamLayout`], so the
//! optimizer and the gradient oracle never need to know a model's structure.

use std::ops::Range;

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

/// Row-major owned matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn view(&self) -> MatrixView<'_> {
        MatrixView {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }
}

/// Borrowed row-major matrix, usually a window into a flat parameter buffer.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        MatrixView { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &'a [f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `W x`, unchecked beyond a debug assertion.
    pub fn matvec(&self, x: &[f64]) -> Vector {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Wᵀ y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vector {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Accumulates `scale · y xᵀ` into a row-major `rows × cols` gradient buffer.
pub fn add_outer(grad: &mut [f64], y: &[f64], x: &[f64], scale: f64) {
    let cols = x.len();
    debug_assert_eq!(grad.len(), y.len() * cols);
    for (r, &yr) in y.iter().enumerate() {
        let s = scale * yr;
        if s == 0.0 {
            continue;
        }
        for (g, &xc) in grad[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *g += s * xc;
        }
    }
}

/// `W x + b` with shape checking.
pub fn affine(w: MatrixView<'_>, b: &[f64], x: &[f64]) -> Result<Vector> {
    if w.cols != x.len() || w.rows != b.len() {
        return Err(Error::Shape(format!(
            "affine: W is {}x{}, b has {}, x has {}",
            w.rows,
            w.cols,
            b.len(),
            x.len()
        )));
    }
    let mut out = w.matvec(x);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

pub fn softmax(logits: &[f64]) -> Result<Vector> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("softmax of non-finite logits".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vector = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One named block of a flat parameter buffer. `cols == 1` for bias vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered set of named blocks laid out contiguously.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<BlockSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let idx = self.blocks.len();
        self.blocks.push(BlockSpec {
            name: name.into(),
            rows,
            cols,
            offset: self.total,
        });
        self.total += rows * cols;
        idx
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block(&self, idx: usize) -> &BlockSpec {
        &self.blocks[idx]
    }

    pub fn find(&self, name: &str) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Name of the block containing flat index `i`.
    pub fn block_name_of(&self, i: usize) -> &str {
        self.blocks
            .iter()
            .find(|b| b.range().contains(&i))
            .map_or("?", |b| b.name.as_str())
    }
}

/// Adam moments for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vector,
    pub v: Vector,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    layout: Option<ParamLayout>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            layout: None,
        }
    }

    /// Like [`AdamState::new`], but errors name the offending block.
    pub fn for_layout(layout: &ParamLayout) -> Self {
        AdamState {
            layout: Some(layout.clone()),
            ..AdamState::new(layout.total())
        }
    }

    fn block_name(&self, i: usize) -> String {
        match &self.layout {
            Some(l) => l.block_name_of(i).to_string(),
            None => format!("params[{i}]"),
        }
    }
}

/// Bias-corrected Adam update. On a non-finite gradient nothing is modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            block: state.block_name(i),
        });
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Vector
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Max over coordinates of `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[3f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn affine_examples() {
        let id = Matrix::identity(2);
        assert_eq!(affine(id.view(), &[0.0, 0.0], &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let z = Matrix::zeros(1, 4);
        assert_eq!(affine(z.view(), &[3.0], &[9.0, -1.0, 2.0, 0.5]).unwrap(), vec![3.0]);
        let w = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(affine(w.view(), &[0.0], &[2.0, 3.0]).unwrap(), vec![5.0]);
        assert!(matches!(affine(w.view(), &[0.0], &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1; step = lr / (1 + 1e-8).
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.1).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn adam_zero_lr_advances_state_only() {
        let mut p = vec![0.3];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut s, 0.0).unwrap();
        adam_step(&mut p, &[2.0], &mut s, 0.0).unwrap();
        assert_eq!(p, vec![0.3]);
        assert_eq!(s.t, 2);
        assert!(s.m[0] > 0.0);
    }

    #[test]
    fn adam_names_nonfinite_block() {
        let mut layout = ParamLayout::new();
        layout.push("w", 2, 2);
        layout.push("b", 2, 1);
        let mut s = AdamState::for_layout(&layout);
        let mut p = vec![0.0; 6];
        let mut g = vec![0.0; 6];
        g[5] = f64::NAN;
        match adam_step(&mut p, &g, &mut s, 0.1) {
            Err(Error::NonFiniteGradient { block }) => assert_eq!(block, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.t, 0);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_diff_grad(|x| x.iter().sum(), &[0.3, -7.0, 12.5], 1e-5);
        for gi in g {
            assert!((gi - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softplus_and_sigmoid_tails() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn matvec_t_is_transpose() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(w.view().matvec_t(&[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            xs in prop::collection::vec(-50.0f64..50.0, 1..20),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&xs).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
