//! Brute-force reference implementations shared by the integration tests.
//! Everything here works on plain host vectors with explicit loops and never
//! calls into the library's tensor code paths.
#![allow(dead_code)]

use candle_core::Tensor;
use nmrf::nmrf::LabelAttention;
use nmrf::nn::{to_f64_vec, LayerNorm, Linear};
use nmrf::proposal::CrossStripeBlock;

pub fn host(t: &Tensor) -> Vec<f64> {
    to_f64_vec(t).unwrap()
}

/// `y = W x + b` for one vector; `W` is `(out, in)` row-major.
pub fn linear(layer: &Linear, x: &[f64]) -> Vec<f64> {
    let w = host(layer.weight());
    let out = layer.out_dim();
    let inp = x.len();
    assert_eq!(w.len(), out * inp);
    let b = layer.bias().map(host).unwrap_or_else(|| vec![0.0; out]);
    (0..out)
        .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

pub fn layer_norm(ln: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let g = host(ln.gamma());
    let b = host(ln.beta());
    x.iter()
        .enumerate()
        .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g[c] + b[c])
        .collect()
}

/// `[sin(z w_0) .. sin(z w_{n-1}), cos(z w_0) ..]`, `w_i = 10000^(-2i/dim)`.
pub fn encode(z: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let w: Vec<f64> = (0..half).map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64)).collect();
    let mut out: Vec<f64> = w.iter().map(|w| (z * w).sin()).collect();
    out.extend(w.iter().map(|w| (z * w).cos()));
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax-weighted sum over an explicit partner list; empty lists give a
/// zero vector.
fn attend(logits: &[f64], values: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    if logits.is_empty() {
        return out;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    for (w, v) in e.iter().zip(values) {
        for c in 0..width {
            out[c] += w / sum * v[c];
        }
    }
    out
}

/// Dense reference for the stripe attention of the proposal block, before
/// its output projection. `x` is `(h, w, k, D)`; returns the same layout.
pub fn stripe_attention(block: &CrossStripeBlock, x: &[f64], h: usize, w: usize, k: usize, d: usize) -> Vec<f64> {
    let node = |i: usize, j: usize, s: usize| ((i * w + j) * k + s) * d;
    let n = h * w * k;
    let mut q = Vec::with_capacity(n);
    let mut kk = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for m in 0..n {
        let y = linear(&block.qkv, &x[m * d..(m + 1) * d]);
        q.push(y[..d].to_vec());
        kk.push(y[d..2 * d].to_vec());
        v.push(y[2 * d..].to_vec());
    }
    let half = d / 2;
    let hh = block.heads / 2;
    let dh = half / hh;
    let lw = host(&block.lepe_weight);
    let lb = host(&block.lepe_bias);
    let mean_v = |i: isize, j: isize, c: usize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            return 0.0;
        }
        (0..k).map(|s| v[node(i as usize, j as usize, s) / d][c]).sum::<f64>() / k as f64
    };
    let mut out = vec![0.0; n * d];
    for i in 0..h {
        for j in 0..w {
            for s in 0..k {
                let a = node(i, j, s) / d;
                for head in 0..2 * hh {
                    let row = head < hh;
                    let lo = if row { head * dh } else { half + (head - hh) * dh };
                    let mut logits = Vec::new();
                    let mut vals = Vec::new();
                    for ii in 0..h {
                        for jj in 0..w {
                            let on_stripe = if row { ii == i } else { jj == j };
                            if !on_stripe {
                                continue;
                            }
                            for ss in 0..k {
                                if block.mask_same_pixel && (ii, jj) == (i, j) && ss != s {
                                    continue;
                                }
                                let c = node(ii, jj, ss) / d;
                                logits.push(dot(&q[a][lo..lo + dh], &kk[c][lo..lo + dh]) / (dh as f64).sqrt());
                                vals.push(v[c][lo..lo + dh].to_vec());
                            }
                        }
                    }
                    let msg = attend(&logits, &vals, dh);
                    for e in 0..dh {
                        out[a * d + lo + e] = msg[e];
                    }
                }
                for c in 0..d {
                    let (pi, pj, ni, nj) = if c < half {
                        (i as isize, j as isize - 1, i as isize, j as isize + 1)
                    } else {
                        (i as isize - 1, j as isize, i as isize + 1, j as isize)
                    };
                    out[a * d + c] += lw[d + c] * v[a][c] + lw[c] * mean_v(pi, pj, c) + lw[2 * d + c] * mean_v(ni, nj, c) + lb[c];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edges {
    /// Labels of other pixels in the same non-overlapping window.
    Neighbor { window: usize },
    /// Other labels of the same pixel.
    SelfLabel,
}

/// Dense reference for a label-attention message including its output
/// projection. `mu` is `(h, w, k, D)`, `z` is `(h, w, k)`.
pub fn label_attention(
    att: &LabelAttention,
    edges: Edges,
    mu: &[f64],
    z: &[f64],
    h: usize,
    w: usize,
    k: usize,
    d: usize,
) -> Vec<f64> {
    let n = h * w * k;
    let heads = att.heads;
    let dh = d / heads;
    let mut q = Vec::with_capacity(n);
    let mut kk = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for m in 0..n {
        let mut x = layer_norm(&att.norm, &mu[m * d..(m + 1) * d]);
        x.extend(encode(z[m], att.encoding_dim));
        let y = linear(&att.qkv, &x);
        q.push(y[..d].to_vec());
        kk.push(y[d..2 * d].to_vec());
        v.push(y[2 * d..].to_vec());
    }
    let table = |t: &Option<Tensor>| t.as_ref().map(host);
    let (pq, pk, pv, fb) = (table(&att.pos_query), table(&att.pos_key), table(&att.pos_value), table(&att.fixed_bias));
    let mut out = vec![0.0; n * d];
    for a in 0..n {
        let (i, j, s) = (a / (w * k), (a / k) % w, a % k);
        let mut msg = vec![0.0; d];
        for head in 0..heads {
            let lo = head * dh;
            let mut logits = Vec::new();
            let mut vals = Vec::new();
            for c in 0..n {
                let (ii, jj, ss) = (c / (w * k), (c / k) % w, c % k);
                let offset = match edges {
                    Edges::Neighbor { window: m } => {
                        if (ii / m, jj / m) != (i / m, j / m) || (ii, jj) == (i, j) {
                            continue;
                        }
                        let di = ii as isize - i as isize + m as isize - 1;
                        let dj = jj as isize - j as isize + m as isize - 1;
                        Some((di * (2 * m as isize - 1) + dj) as usize)
                    }
                    Edges::SelfLabel => {
                        if (ii, jj) != (i, j) || ss == s {
                            continue;
                        }
                        None
                    }
                };
                let qa = &q[a][lo..lo + dh];
                let kc = &kk[c][lo..lo + dh];
                let mut logit = dot(qa, kc);
                let mut val = v[c][lo..lo + dh].to_vec();
                if let Some(r) = offset {
                    if let Some(t) = &pk {
                        logit += dot(qa, &t[r * d + lo..r * d + lo + dh]);
                    }
                    if let Some(t) = &pq {
                        logit += dot(kc, &t[r * d + lo..r * d + lo + dh]);
                    }
                    logit /= (dh as f64).sqrt();
                    if let Some(t) = &fb {
                        let offsets = t.len() / heads;
                        logit += t[head * offsets + r];
                    }
                    if let Some(t) = &pv {
                        for e in 0..dh {
                            val[e] += t[r * d + lo + e];
                        }
                    }
                } else {
                    logit /= (dh as f64).sqrt();
                }
                logits.push(logit);
                vals.push(val);
            }
            let m = attend(&logits, &vals, dh);
            msg[lo..lo + dh].copy_from_slice(&m);
        }
        let y = linear(&att.out, &msg);
        out[a * d..(a + 1) * d].copy_from_slice(&y);
    }
    out
}

/// Lower median by counting: the smallest value with at least
/// `(n + 1) / 2` samples less than or equal to it.
pub fn counting_median(values: &[f32]) -> f32 {
    let need = values.len().div_ceil(2);
    *values
        .iter()
        .filter(|&&c| values.iter().filter(|&&x| x <= c).count() >= need)
        .min_by(|a, b| a.total_cmp(b))
        .unwrap()
}

/// Reference modal extraction for one window of `(disparity, segment)`
/// samples: returns `(disparity, count)` pairs, most populated first.
pub fn window_modals(samples: &[(f32, u32)]) -> Vec<(f32, usize)> {
    let mut ids: Vec<u32> = samples.iter().map(|s| s.1).collect();
    ids.sort();
    ids.dedup();
    let members = |id: u32| -> Vec<f32> { samples.iter().filter(|s| s.1 == id).map(|s| s.0).collect() };
    // Rank segments: larger first, then lower id.
    let before = |a: u32, b: u32| {
        let (na, nb) = (members(a).len(), members(b).len());
        na > nb || (na == nb && a < b)
    };
    let mut ranked = ids.clone();
    for x in 0..ranked.len() {
        for y in x + 1..ranked.len() {
            if before(ranked[y], ranked[x]) {
                ranked.swap(x, y);
            }
        }
    }
    // A segment is absorbed by the earliest surviving segment ahead of it
    // whose median is within the merge threshold.
    let mut owner: Vec<usize> = (0..ranked.len()).collect();
    for c in 0..ranked.len() {
        let mc = counting_median(&members(ranked[c]));
        for a in 0..c {
            if owner[a] == a && (counting_median(&members(ranked[a])) - mc).abs() < 0.5 {
                owner[c] = a;
                break;
            }
        }
    }
    let mut groups: Vec<(u32, Vec<f32>)> = Vec::new();
    for a in 0..ranked.len() {
        if owner[a] != a {
            continue;
        }
        let mut all = Vec::new();
        for c in 0..ranked.len() {
            if owner[c] == a {
                all.extend(members(ranked[c]));
            }
        }
        groups.push((ranked[a], all));
    }
    let mut out: Vec<(u32, f32, usize)> = groups.iter().map(|(id, v)| (*id, counting_median(v), v.len())).collect();
    for x in 0..out.len() {
        for y in x + 1..out.len() {
            if out[y].2 > out[x].2 || (out[y].2 == out[x].2 && out[y].0 < out[x].0) {
                out.swap(x, y);
            }
        }
    }
    out.into_iter().take(4).map(|(_, m, c)| (m, c)).collect()
}

/// Reference online suppression: visit modals from the one nearest to any
/// proposal outward (ties by position) and keep those at least `threshold`
/// away from everything kept so far.
pub fn suppress(modals: &[f32], proposals: &[f32], threshold: f32) -> Vec<f32> {
    let near = |m: f32| {
        let mut best = f32::INFINITY;
        for p in proposals {
            if (m - p).abs() < best {
                best = (m - p).abs();
            }
        }
        best
    };
    let mut visited = vec![false; modals.len()];
    let mut kept = Vec::new();
    for _ in 0..modals.len() {
        let mut pick = None;
        for a in 0..modals.len() {
            if visited[a] {
                continue;
            }
            match pick {
                None => pick = Some(a),
                Some(p) if near(modals[a]) < near(modals[p]) => pick = Some(a),
                _ => {}
            }
        }
        let a = pick.unwrap();
        visited[a] = true;
        if kept.iter().all(|&x: &f32| (x - modals[a]).abs() >= threshold) {
            kept.push(modals[a]);
        }
    }
    kept
}

/// Minimum total of `|target - proposal|` over injective assignments of
/// targets to proposals, by enumerating every permutation.
pub fn best_assignment_cost(targets: &[f32], proposals: &[f32]) -> f64 {
    fn go(t: usize, targets: &[f32], proposals: &[f32], used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if t == targets.len() {
            *best = best.min(acc);
            return;
        }
        for p in 0..proposals.len() {
            if !used[p] {
                used[p] = true;
                let c = (targets[t] as f64 - proposals[p] as f64).abs();
                go(t + 1, targets, proposals, used, acc + c, best);
                used[p] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, targets, proposals, &mut vec![false; proposals.len()], 0.0, &mut best);
    best
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
