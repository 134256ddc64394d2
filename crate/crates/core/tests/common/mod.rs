//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;
pub mod mechanics;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3ld::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Uniform values kept at least `gap` away from zero (kinks of ReLU).
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.random_range(gap..1.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Row-wise log-softmax of random logits.
pub fn random_log_probs(r: &mut ChaCha8Rng, t: usize, v: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| {
            let z: Vec<f64> = (0..v).map(|_| r.random_range(-2.0..2.0)).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            z.iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// `-ln P(labels)` by summing over every length-T path (blank = 0).
pub fn ctc_enumerate(log_probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let t = log_probs.len();
    let v = log_probs[0].len();
    let mut path = vec![0usize; t];
    let mut total = 0.0;
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != 0 {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == labels {
            total += path.iter().enumerate().map(|(i, &s)| log_probs[i][s]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == t {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Edit distance by unmemoised recursion over the three edit choices.
pub fn edit_distance_brute<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = edit_distance_brute(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    let del = edit_distance_brute(&a[1..], b) + 1;
    let ins = edit_distance_brute(a, &b[1..]) + 1;
    sub.min(del).min(ins)
}

/// Best 2-partition by enumerating every split; labels are normalised so
/// that point 0 is in cluster 0.
pub fn best_two_partition(points: &[Vec<f64>]) -> Vec<usize> {
    let n = points.len();
    let sse = |mask: u32| -> f64 {
        let mut total = 0.0;
        for side in [0u32, 1] {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| (mask >> i) & 1 == side).map(|i| &points[i]).collect();
            let d = points[0].len();
            let c: Vec<f64> = (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            total += members.iter().map(|p| p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>();
        }
        total
    };
    // point 0 stays on side 0; the other side must be non-empty
    let best = (1..(1u32 << n)).filter(|m| m & 1 == 0).min_by(|&a, &b| sse(a).total_cmp(&sse(b))).unwrap();
    (0..n).map(|i| ((best >> i) & 1) as usize).collect()
}

pub fn normalise_labels(labels: &[usize]) -> Vec<usize> {
    let first = labels[0];
    labels.iter().map(|&l| usize::from(l != first)).collect()
}

fn angular(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (nu * nv)).clamp(-1.0, 1.0).acos() / std::f64::consts::PI
}

/// DTW by explicit enumeration of every monotone unit-step path: the
/// cheapest path's cost over its length.
pub fn dtw_enumerate(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, cost: f64, len: usize, best: &mut (f64, usize)) {
        let cost = cost + angular(&a[i], &b[j]);
        let len = len + 1;
        if i + 1 == a.len() && j + 1 == b.len() {
            if cost < best.0 {
                *best = (cost, len);
            }
            return;
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, cost, len, best);
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, cost, len, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, cost, len, best);
        }
    }
    let mut best = (f64::INFINITY, 0);
    walk(a, b, 0, 0, 0.0, 0, &mut best);
    best.0 / best.1 as f64
}

/// ABX over `(a, b, x)` triples with angular DTW; ties score one half.
pub fn abx_reference(triples: &[(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)]) -> f64 {
    let s: f64 = triples
        .iter()
        .map(|(a, b, x)| {
            let (dax, dbx) = (dtw_enumerate(a, x), dtw_enumerate(b, x));
            if dax < dbx {
                1.0
            } else if dax == dbx {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    s / triples.len() as f64
}

/// Direct sliding-window cross-correlation with zero padding.
pub fn conv1d_direct(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], b: &[f64], stride: usize, pad: usize) -> Vec<Vec<f64>> {
    let t = x[0].len() as isize;
    let k = w[0][0].len() as isize;
    let t_out = ((t + 2 * pad as isize - k) / stride as isize + 1) as usize;
    w.iter()
        .zip(b)
        .map(|(wo, bo)| {
            (0..t_out)
                .map(|u| {
                    let mut acc = *bo;
                    for (xc, wc) in x.iter().zip(wo) {
                        for (kk, wv) in wc.iter().enumerate() {
                            let pos = (u * stride) as isize + kk as isize - pad as isize;
                            if pos >= 0 && pos < t {
                                acc += wv * xc[pos as usize];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.dim(0)).map(|r| t.row(r).to_vec()).collect()
}
