//! Fixtures and independent reference implementations shared by the
//! integration tests. Nothing here calls the library's math; the oracles are
//! written out from the formulas.

#![allow(dead_code)]

use knnmt_core::base::{BaseModel, ForwardRecord};
use knnmt_core::datastore::{Datastore, Neighbor};
use knnmt_core::head::{HeadArch, HeadParams, Variant};
use knnmt_core::rng::SeededRng;

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Base record with random logits; `hidden` is random in (-1, 1).
pub fn random_record(rng: &mut SeededRng, vocab: usize, hidden: usize, scale: f64) -> ForwardRecord {
    let logits: Vec<f64> = (0..vocab).map(|_| rng.uniform_range(-scale, scale)).collect();
    ForwardRecord {
        t: 0,
        hidden: (0..hidden).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        probs: naive_softmax(&logits),
        logits,
    }
}

/// K neighbors with ascending distances, repeated values likely.
pub fn random_neighbors(rng: &mut SeededRng, k: usize, vocab: usize) -> Vec<Neighbor> {
    let mut d: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.0, 3.0)).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pool = 1 + rng.below(k.min(vocab));
    let values: Vec<usize> = (0..pool).map(|_| rng.below(vocab)).collect();
    d.into_iter()
        .enumerate()
        .map(|(i, distance)| Neighbor {
            index: i,
            distance,
            value: values[rng.below(pool)],
            key_conf: rng.uniform_range(1e-4, 1.0),
        })
        .collect()
}

/// Head with every parameter drawn uniformly from `(-scale, scale)`.
pub fn random_head(rng: &mut SeededRng, variant: Variant, arch: HeadArch, scale: f64) -> HeadParams {
    let mut h = HeadParams::zeros(variant, arch);
    for p in h.params_mut() {
        *p = rng.uniform_range(-scale, scale);
    }
    if variant == Variant::Vanilla || (variant == Variant::Robust && arch.fixed_lambda) {
        h.set_fixed_lambda(rng.uniform_range(0.05, 0.95)).unwrap();
    }
    if variant == Variant::Vanilla {
        let t = h.layout().find("temperature").unwrap().offset;
        h.params_mut()[t] = rng.uniform_range(0.5, 20.0);
    }
    h
}

fn block<'a>(h: &'a HeadParams, name: &str) -> Option<(usize, usize, &'a [f64])> {
    h.layout()
        .find(name)
        .map(|b| (b.rows, b.cols, &h.params()[b.offset..b.offset + b.rows * b.cols]))
}

fn mat_vec(w: (usize, usize, &[f64]), x: &[f64]) -> Vec<f64> {
    let (rows, cols, data) = w;
    assert_eq!(cols, x.len());
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        for c in 0..cols {
            y[r] += data[r * cols + c] * x[c];
        }
    }
    y
}

fn plus(a: Vec<f64>, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn tanh_all(a: Vec<f64>) -> Vec<f64> {
    a.into_iter().map(f64::tanh).collect()
}

pub struct OracleOut {
    pub temperature: f64,
    pub c: Vec<f64>,
    pub p_knn: Vec<f64>,
    pub lambda: f64,
    pub p_final: Vec<f64>,
}

/// Straight-line head: features, T, c, p_kNN, λ, mixture.
pub fn oracle_head(h: &HeadParams, probs: &[f64], nb: &[Neighbor]) -> OracleOut {
    let k = nb.len();
    let v = probs.len();
    let ln = |p: f64| p.max(1e-10).ln();

    let d: Vec<f64> = nb.iter().map(|n| n.distance).collect();
    let mut r = Vec::new();
    for i in 0..k {
        let mut vals: Vec<usize> = nb[..=i].iter().map(|n| n.value).collect();
        vals.sort();
        vals.dedup();
        r.push(vals.len() as f64);
    }
    let lq: Vec<f64> = nb.iter().map(|n| ln(probs[n.value])).collect();
    let lk: Vec<f64> = nb.iter().map(|n| ln(n.key_conf)).collect();
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let lt: Vec<f64> = sorted[..k].iter().map(|&p| ln(p)).collect();

    let dr: Vec<f64> = d.iter().chain(&r).cloned().collect();
    let scalar = |name: &str| block(h, name).map_or(0.0, |b| b.2[0]);

    let temperature = if let Some(t) = block(h, "temperature") {
        t.2[0]
    } else {
        let a = tanh_all(plus(mat_vec(block(h, "W2").unwrap(), &dr), block(h, "b2").unwrap().2));
        let raw = mat_vec(block(h, "W1").unwrap(), &a)[0] + scalar("b1");
        let softplus = if raw > 30.0 { raw } else { (1.0 + raw.exp()).ln() };
        softplus + 1e-3
    };

    let c: Vec<f64> = match (block(h, "W4"), block(h, "W3")) {
        (Some(w4), Some(w3)) => (0..k)
            .map(|i| {
                let g = tanh_all(plus(mat_vec(w4, &[lq[i], lk[i]]), block(h, "b4").unwrap().2));
                mat_vec(w3, &g)[0] + scalar("b3")
            })
            .collect(),
        _ => vec![0.0; k],
    };

    let weights: Vec<f64> = (0..k).map(|i| (-d[i] / temperature + c[i]).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut p_knn = vec![0.0; v];
    for i in 0..k {
        p_knn[nb[i].value] += weights[i] / z;
    }

    let lambda = if let Some(l) = block(h, "lambda") {
        l.2[0]
    } else {
        let (w2, b2) = match block(h, "W2_wp") {
            Some(w) => (w, block(h, "b2_wp").unwrap().2),
            None => (block(h, "W2").unwrap(), block(h, "b2").unwrap().2),
        };
        let a = tanh_all(plus(mat_vec(w2, &dr), b2));
        let s_knn = mat_vec(block(h, "W5").unwrap(), &a)[0] + scalar("b5");
        let conf: Vec<f64> = lq.iter().chain(&lk).chain(&lt).cloned().collect();
        let s_nmt = block(h, "W6").map_or(0.0, |w6| mat_vec(w6, &conf)[0]) + scalar("b6");
        s_knn.exp() / (s_knn.exp() + s_nmt.exp())
    };

    let p_final = (0..v).map(|w| lambda * p_knn[w] + (1.0 - lambda) * probs[w]).collect();
    OracleOut {
        temperature,
        c,
        p_knn,
        lambda,
        p_final,
    }
}

/// Full sort of every entry by (squared distance, index).
pub fn brute_force_knn(ds: &Datastore, q: &[f64], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..ds.len())
        .map(|i| {
            let d2: f64 = ds.key(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Base forward pass from the named blocks.
pub fn oracle_forward(m: &BaseModel, src: usize, prev: usize) -> (Vec<f64>, Vec<f64>) {
    let dims = m.dims();
    let get = |name: &str| {
        let b = m.layout().find(name).unwrap();
        (b.rows, b.cols, &m.params()[b.offset..b.offset + b.rows * b.cols])
    };
    let (_, e, src_tab) = get("src_embed");
    let (_, _, prev_tab) = get("prev_embed");
    let mut x = src_tab[src * e..(src + 1) * e].to_vec();
    x.extend_from_slice(&prev_tab[prev * e..(prev + 1) * e]);
    let h = tanh_all(plus(mat_vec(get("w_hidden"), &x), get("b_hidden").2));
    let logits = plus(mat_vec(get("w_out"), &h), get("b_out").2);
    assert_eq!(logits.len(), dims.target_vocab);
    (h, naive_softmax(&logits))
}

/// Stationary distribution from `π (P - I) = 0, Σπ = 1` by Gaussian
/// elimination with partial pivoting.
pub fn solve_stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    // Rows of A are the equations; unknowns are π.
    let mut a = vec![vec![0.0; n + 1]; n];
    for (eq, row) in a.iter_mut().enumerate().take(n - 1) {
        for (j, cell) in row.iter_mut().enumerate().take(n) {
            *cell = p[j][eq] - if j == eq { 1.0 } else { 0.0 };
        }
    }
    for cell in a[n - 1].iter_mut() {
        *cell = 1.0;
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        let pivot = a[col].clone();
        for (row, r) in a.iter_mut().enumerate() {
            if row != col {
                let f = r[col] / pivot[col];
                for (x, p) in r[col..].iter_mut().zip(&pivot[col..]) {
                    *x -= f * p;
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}
