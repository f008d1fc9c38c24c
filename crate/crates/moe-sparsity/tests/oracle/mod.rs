//! Naive brute-force reference for the exhaustive pruning search.
//!
//! Deliberately independent of the library's routing path: plain exp softmax
//! without max subtraction, top-k by repeated max scan, explicit matvec
//! loops, and `t * sigmoid(t)` instead of the library's SiLU form. The argmin
//! uses the same lexicographic tie rule the search promises.

// Indexed loops are the point here; iterator rewrites would converge the
// oracle back toward the implementation.
#![allow(clippy::needless_range_loop)]

use moe_sparsity::moe::{Expert, MoELayer};
use moe_sparsity::numerics::Matrix;

/// All r-subsets of 0..n in lexicographic order.
pub fn subsets(n: usize, r: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, r: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(n, r, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, r, 0, &mut Vec::new(), &mut out);
    out
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn expert_naive(e: &Expert, x: &[f64]) -> Vec<f64> {
    let f = e.w_gate.n_rows();
    let d = e.w_gate.n_cols();
    let mut hidden = vec![0.0; f];
    for i in 0..f {
        let mut g = 0.0;
        let mut u = 0.0;
        for j in 0..d {
            g += e.w_gate.row(i)[j] * x[j];
            u += e.w_up.row(i)[j] * x[j];
        }
        hidden[i] = g * sigmoid(g) * u;
    }
    let mut z = vec![0.0; d];
    for i in 0..d {
        for j in 0..f {
            z[i] += e.w_down.row(i)[j] * hidden[j];
        }
    }
    z
}

/// Reconstruction loss of one subset, recomputed from scratch.
pub fn subset_loss_naive(
    layer: &MoELayer,
    subset: &[usize],
    inputs: &Matrix,
    targets: &Matrix,
    k: usize,
) -> f64 {
    let d = inputs.n_cols();
    let mut acc = 0.0;
    for t in 0..inputs.n_rows() {
        let x = inputs.row(t);
        // Softmax over the subset's logits, no max subtraction.
        let mut weights: Vec<f64> = subset
            .iter()
            .map(|&e| {
                let mut logit = layer.logit_bias[e];
                for j in 0..d {
                    logit += layer.router.row(e)[j] * x[j];
                }
                logit.exp()
            })
            .collect();
        let sum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= sum;
        }
        // Top-k by repeated max scan; earlier position (= lower expert
        // index, subsets are ascending) wins ties.
        let mut chosen: Vec<usize> = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for (pos, &w) in weights.iter().enumerate() {
                if chosen.contains(&pos) {
                    continue;
                }
                best = match best {
                    Some(b) if w <= weights[b] => Some(b),
                    _ => Some(pos),
                };
            }
            chosen.push(best.unwrap());
        }
        let norm: f64 = chosen.iter().map(|&p| weights[p]).sum();
        let mut z = vec![0.0; d];
        for &p in &chosen {
            let out = expert_naive(&layer.experts[subset[p]], x);
            let w = weights[p] / norm;
            for i in 0..d {
                z[i] += w * out[i];
            }
        }
        for i in 0..d {
            let dv = z[i] - targets.row(t)[i];
            acc += dv * dv;
        }
    }
    acc.sqrt()
}

/// Brute-force argmin over all r-subsets; first strict minimum wins, i.e.
/// the lexicographically least subset under ties.
pub fn argmin_subset(
    layer: &MoELayer,
    inputs: &Matrix,
    targets: &Matrix,
    r: usize,
    k: usize,
) -> Vec<usize> {
    let all = subsets(layer.n_experts(), r);
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for (i, s) in all.iter().enumerate() {
        let loss = subset_loss_naive(layer, s, inputs, targets, k);
        if loss < best_loss {
            best_loss = loss;
            best = i;
        }
    }
    all[best].clone()
}
