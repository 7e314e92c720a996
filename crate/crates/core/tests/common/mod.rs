//! Reference implementations written directly from the model definition,
//! sharing no numeric code with the library.

#![allow(dead_code)]

use grnet_core::pyramid::{FeatureMap, PyramidConfig};
use grnet_core::reasoning::GrNet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Row-major `[rows][cols]` view of a named parameter.
pub fn param(model: &GrNet<f64>, name: &str) -> Vec<Vec<f64>> {
    let id = model.params().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = &model.params().get(id).value;
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Max-pooled window vectors per scale: `out[l][i][c]`.
pub fn pooled(fm: &FeatureMap<f64>, cfg: &PyramidConfig) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (fm.height(), fm.width());
    cfg.scales()
        .iter()
        .map(|s| {
            let mut windows = Vec::new();
            for r in 0..s.rows {
                for q in 0..s.cols {
                    let (y0, y1) = (r * h / s.rows, (r + 1) * h / s.rows);
                    let (x0, x1) = (q * w / s.cols, (q + 1) * w / s.cols);
                    let v: Vec<f64> = (0..fm.channels())
                        .map(|c| {
                            let mut m = f64::NEG_INFINITY;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    m = m.max(fm.at(c, y, x));
                                }
                            }
                            m
                        })
                        .collect();
                    windows.push(v);
                }
            }
            windows
        })
        .collect()
}

/// Similarity vector `P(x - y)²` scaled to unit length (zero stays zero).
pub fn similarity(p: &[Vec<f64>], x: &[f64], y: &[f64]) -> Vec<f64> {
    let sq: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).collect();
    let v = matvec(p, &sq);
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n < 1e-12 {
        return v.iter().map(|a| a / 1e-12).collect();
    }
    v.iter().map(|a| a / n).collect()
}

/// Scale of every node in enumeration order.
pub fn node_scales(cfg: &PyramidConfig) -> Vec<usize> {
    cfg.scales()
        .iter()
        .enumerate()
        .flat_map(|(l, s)| std::iter::repeat_n(l, s.windows() * s.windows()))
        .collect()
}

/// All same-scale pair nodes, scale-major, then query window, then gallery.
pub fn nodes(p: &[Vec<f64>], q: &FeatureMap<f64>, g: &FeatureMap<f64>, cfg: &PyramidConfig) -> Vec<Vec<f64>> {
    let (qp, gp) = (pooled(q, cfg), pooled(g, cfg));
    let mut out = Vec::new();
    for l in 0..cfg.scales().len() {
        for x in &qp[l] {
            for y in &gp[l] {
                out.push(similarity(p, x, y));
            }
        }
    }
    out
}

/// Softmax of `(T_out v_t)·(T_in v_s)` over all sources.
pub fn edge_weights(v: &[Vec<f64>], t_in: &[Vec<f64>], t_out: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inc: Vec<Vec<f64>> = v.iter().map(|x| matvec(t_in, x)).collect();
    v.iter()
        .map(|t| {
            let o = matvec(t_out, t);
            let logits: Vec<f64> = inc.iter().map(|s| o.iter().zip(s).map(|(a, b)| a * b).sum()).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

/// Full-connectivity forward pass; returns the two logits.
pub fn forward(model: &GrNet<f64>, q: &FeatureMap<f64>, g: &FeatureMap<f64>) -> [f64; 2] {
    let cfg = &model.shape().pyramid;
    let mut v = nodes(&param(model, "projection"), q, g, cfg);
    for t in 0..model.shape().reasoning.layers {
        let w = edge_weights(&v, &param(model, &format!("layer{t}.t_in")), &param(model, &format!("layer{t}.t_out")));
        let lin = param(model, &format!("layer{t}.w"));
        v = w
            .iter()
            .map(|row| {
                let mut s_hat = vec![0.0; v[0].len()];
                for (a, src) in row.iter().zip(&v) {
                    for (o, x) in s_hat.iter_mut().zip(src) {
                        *o += a * x;
                    }
                }
                matvec(&lin, &s_hat).into_iter().map(|x| x.max(0.0)).collect()
            })
            .collect();
    }
    let head = param(model, "head.weight");
    let bias = param(model, "head.bias");
    let z = matvec(&head, &v[0]);
    [z[0] + bias[0][0], z[1] + bias[0][1]]
}

/// Hits among the `k` best, counting every strictly better item and every
/// equal item in an earlier column ahead of the true item.
pub fn topk_by_counting(scores: &[Vec<f64>], truth: &[Vec<usize>], k: usize) -> f64 {
    let mut hits = 0;
    for (row, t) in scores.iter().zip(truth) {
        let best_rank = t
            .iter()
            .map(|&j| {
                row.iter()
                    .enumerate()
                    .filter(|&(i, &s)| s > row[j] || (s == row[j] && i < j))
                    .count()
            })
            .min()
            .unwrap();
        if best_rank < k.min(row.len()) {
            hits += 1;
        }
    }
    hits as f64 / scores.len() as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Full cosine table, then a first-argmax per query window, summed.
pub fn greedy_exhaustive(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let table: Vec<Vec<f64>> = xs.iter().map(|x| ys.iter().map(|y| cosine(x, y)).collect()).collect();
    let mut total = 0.0;
    for row in &table {
        let mut arg = 0;
        for (j, &c) in row.iter().enumerate() {
            if c > row[arg] {
                arg = j;
            }
        }
        total += row[arg];
    }
    total
}
