//! Library-vs-reference comparisons over random instances.

use rand::Rng;
use s3ld::eval::{abx_score, dtw_distance, levenshtein, AbxInstance, FrameDistance};
use s3ld::objectives::{ctc_loss, kmeans_assign, kmeans_fit};
use s3ld::tensor::{Graph, Tensor};

use super::{
    abx_reference, best_two_partition, conv1d_direct, ctc_enumerate, dtw_enumerate, edit_distance_brute,
    normalise_labels, random_log_probs, rng, to_rows, uniform,
};

/// Largest `|library − enumeration|` of the CTC loss over feasible cases
/// with T ≤ 6.
pub fn ctc_max_abs_err(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut s = 0;
    while done < cases {
        s += 1;
        let mut r = rng(s);
        let t = r.random_range(1..=6);
        let v = r.random_range(2..=4);
        let n = r.random_range(1..=t.min(3));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(1..v)).collect();
        let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
        if t < n + repeats {
            continue;
        }
        let lp = random_log_probs(&mut r, t, v);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_rows(&lp).unwrap());
        let l = ctc_loss(&mut g, x, &labels).unwrap();
        worst = worst.max((g.value(l).data()[0] - ctc_enumerate(&lp, &labels)).abs());
        done += 1;
    }
    worst
}

/// Number of pairs (lengths ≤ 6) where the library disagrees with the
/// unmemoised recursion.
pub fn levenshtein_mismatches(cases: u64) -> usize {
    (0..cases)
        .filter(|&s| {
            let mut r = rng(s);
            let a: Vec<u8> = (0..r.random_range(0..=6)).map(|_| r.random_range(0..3)).collect();
            let b: Vec<u8> = (0..r.random_range(0..=6)).map(|_| r.random_range(0..3)).collect();
            levenshtein(&a, &b) != edit_distance_brute(&a, &b)
        })
        .count()
}

/// Number of point sets (N ≤ 8, k = 2) where the fitted assignment differs
/// from the exhaustive optimum.
pub fn kmeans_mismatches(cases: u64) -> usize {
    (0..cases)
        .filter(|&s| {
            let mut r = rng(s);
            let n = r.random_range(3..=8);
            let d = r.random_range(1..=3);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
            let model = kmeans_fit(&pts, 2, 50, s).unwrap();
            let got = normalise_labels(&kmeans_assign(&pts, &model).unwrap());
            got != best_two_partition(&pts)
        })
        .count()
}

/// `(largest DTW difference, number of ABX score mismatches)` against
/// path enumeration on sequences of up to 4 frames.
pub fn abx_discrepancy(cases: u64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for s in 0..cases {
        let mut r = rng(s);
        let d = r.random_range(2..=4);
        let seq = |r: &mut rand_chacha::ChaCha8Rng| {
            let len = r.random_range(1..=4);
            uniform(r, &[len, d], -1.0, 1.0)
        };
        let triples: Vec<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> =
            (0..5).map(|_| (seq(&mut r), seq(&mut r), seq(&mut r))).collect();
        for (a, _, x) in &triples {
            let lib = dtw_distance(a, x, FrameDistance::Angular).unwrap();
            worst = worst.max((lib - dtw_enumerate(&to_rows(a), &to_rows(x))).abs());
        }
        let inst: Vec<AbxInstance> = triples
            .iter()
            .map(|(a, b, x)| AbxInstance { a: a.clone(), b: b.clone(), x: x.clone(), cat_a: 0, cat_b: 1 })
            .collect();
        let reference: Vec<_> = triples.iter().map(|(a, b, x)| (to_rows(a), to_rows(b), to_rows(x))).collect();
        if abx_score(&inst, FrameDistance::Angular).unwrap() != abx_reference(&reference) {
            mismatches += 1;
        }
    }
    (worst, mismatches)
}

/// Largest `|library − direct|` of conv1d over integer-valued inputs,
/// where every product and partial sum is exact in f64.
pub fn conv1d_max_abs_err(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..cases {
        let mut r = rng(s);
        let (cin, cout) = (r.random_range(1..5), r.random_range(1..5));
        let k = r.random_range(1..6);
        let stride = r.random_range(1..4);
        let pad = r.random_range(0..=k / 2);
        let t = r.random_range(k..k + 12);
        let int = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-9i32..=9) as f64;
        let x: Vec<Vec<f64>> = (0..cin).map(|_| (0..t).map(|_| int(&mut r)).collect()).collect();
        let w: Vec<Vec<Vec<f64>>> =
            (0..cout).map(|_| (0..cin).map(|_| (0..k).map(|_| int(&mut r)).collect()).collect()).collect();
        let b: Vec<f64> = (0..cout).map(|_| int(&mut r)).collect();
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(Tensor::from_rows(&x).unwrap());
        let flat: Vec<f64> = w.iter().flatten().flatten().copied().collect();
        let wv = g.constant(Tensor::new(vec![cout, cin, k], flat).unwrap());
        let bv = g.constant(Tensor::new(vec![cout], b.clone()).unwrap());
        let y = g.conv1d(xv, wv, bv, stride, pad).unwrap();
        let direct = conv1d_direct(&x, &w, &b, stride, pad);
        let lib = to_rows(g.value(y));
        assert_eq!(lib.len(), direct.len());
        for (lr, dr) in lib.iter().zip(&direct) {
            assert_eq!(lr.len(), dr.len());
            for (p, q) in lr.iter().zip(dr) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    worst
}
