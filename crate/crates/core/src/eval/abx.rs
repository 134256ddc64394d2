use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Frame-level dissimilarity used inside the DTW alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameDistance {
    /// `arccos(cos θ) / π`, in `[0, 1]`.
    Angular,
    /// Symmetrised Kullback-Leibler divergence of rows read as distributions.
    Kl,
}

/// One ABX trial: `a` and `x` share category `cat_a`, `b` belongs to `cat_b`.
#[derive(Clone, Debug)]
pub struct AbxInstance {
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
    pub x: Tensor<f64>,
    pub cat_a: usize,
    pub cat_b: usize,
}

pub fn frame_distance(u: &[f64], v: &[f64], kind: FrameDistance) -> Result<f64> {
    match kind {
        FrameDistance::Angular => {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::DegenerateVector("zero frame in angular distance".into()));
            }
            Ok((dot / (nu * nv)).clamp(-1.0, 1.0).acos() / PI)
        }
        FrameDistance::Kl => {
            const EPS: f64 = 1e-12;
            if u.iter().chain(v).any(|x| *x < 0.0) {
                return Err(Error::Contract("KL distance needs non-negative frames".into()));
            }
            let su: f64 = u.iter().sum::<f64>() + EPS * u.len() as f64;
            let sv: f64 = v.iter().sum::<f64>() + EPS * v.len() as f64;
            let mut d = 0.0;
            for (a, b) in u.iter().zip(v) {
                let (p, q) = ((a + EPS) / su, (b + EPS) / sv);
                d += p * (p / q).ln() + q * (q / p).ln();
            }
            Ok(d / 2.0)
        }
    }
}

/// DTW over `[T × D]` sequences with unit steps; the cost of the cheapest
/// path divided by its length. Diagonal moves win cost ties.
pub fn dtw_distance(a: &Tensor<f64>, b: &Tensor<f64>, kind: FrameDistance) -> Result<f64> {
    let (n, da) = a.dims2()?;
    let (m, db) = b.dims2()?;
    if n == 0 || m == 0 {
        return Err(Error::Contract("empty representation in ABX".into()));
    }
    if da != db {
        return Err(crate::error::dim_err("ABX sequences differ in dimension"));
    }
    let mut cost = vec![(f64::INFINITY, 0usize); (n + 1) * (m + 1)];
    cost[0] = (0.0, 0);
    let w = m + 1;
    for i in 1..=n {
        for j in 1..=m {
            let d = frame_distance(a.row(i - 1), b.row(j - 1), kind)?;
            let mut best = cost[(i - 1) * w + j - 1];
            for cand in [cost[(i - 1) * w + j], cost[i * w + j - 1]] {
                if cand.0 < best.0 {
                    best = cand;
                }
            }
            cost[i * w + j] = (best.0 + d, best.1 + 1);
        }
    }
    let (total, len) = cost[n * w + m];
    Ok(total / len as f64)
}

/// Fraction of trials with `d(a, x) < d(b, x)`; exact ties score one half.
pub fn abx_score(instances: &[AbxInstance], kind: FrameDistance) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Degenerate("ABX needs at least one instance".into()));
    }
    let mut score = 0.0;
    for inst in instances {
        if inst.cat_a == inst.cat_b {
            return Err(Error::Contract("ABX categories must differ".into()));
        }
        let dax = dtw_distance(&inst.a, &inst.x, kind)?;
        let dbx = dtw_distance(&inst.b, &inst.x, kind)?;
        score += if dax < dbx {
            1.0
        } else if dax == dbx {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / instances.len() as f64)
}

/// Draws `n` trials from labelled frame sequences. Each maximal run of one
/// label is a segment; A and X are distinct segments of one category and B
/// is a segment of another.
pub fn segment_instances(items: &[(Tensor<f64>, Vec<usize>)], n: usize, seed: u64) -> Result<Vec<AbxInstance>> {
    let mut by_cat: std::collections::BTreeMap<usize, Vec<Tensor<f64>>> = Default::default();
    for (feats, labels) in items {
        if feats.dim(0) != labels.len() {
            return Err(Error::Dimension(format!("{} frames but {} labels", feats.dim(0), labels.len())));
        }
        let mut start = 0;
        for t in 1..=labels.len() {
            if t == labels.len() || labels[t] != labels[start] {
                by_cat.entry(labels[start]).or_default().push(feats.slice_rows(start, t)?);
                start = t;
            }
        }
    }
    let cats: Vec<usize> = by_cat.keys().copied().collect();
    let anchors: Vec<usize> = cats.iter().copied().filter(|c| by_cat[c].len() >= 2).collect();
    if cats.len() < 2 || anchors.is_empty() {
        return Err(Error::Degenerate("ABX needs two categories and one with two segments".into()));
    }
    let mut r = rng::rng_for(seed, "abx_instances", &[]);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let cat_a = anchors[r.random_range(0..anchors.len())];
        let cat_b = loop {
            let c = cats[r.random_range(0..cats.len())];
            if c != cat_a {
                break c;
            }
        };
        let segs = &by_cat[&cat_a];
        let ia = r.random_range(0..segs.len());
        let ix = (ia + r.random_range(1..segs.len())) % segs.len();
        let others = &by_cat[&cat_b];
        let b = others[r.random_range(0..others.len())].clone();
        out.push(AbxInstance { a: segs[ia].clone(), b, x: segs[ix].clone(), cat_a, cat_b });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn separation_and_ties() {
        let a = seq(&[[1.0, 0.0], [1.0, 0.1]]);
        let b = seq(&[[0.0, 1.0]]);
        let x = seq(&[[1.0, 0.05]]);
        let inst = AbxInstance { a: a.clone(), b, x: x.clone(), cat_a: 0, cat_b: 1 };
        assert_eq!(abx_score(&[inst], FrameDistance::Angular).unwrap(), 1.0);
        let same = AbxInstance { a: x.clone(), b: x.clone(), x, cat_a: 0, cat_b: 1 };
        assert_eq!(abx_score(&[same], FrameDistance::Angular).unwrap(), 0.5);
    }

    #[test]
    fn angular_range_and_kl_symmetry() {
        assert!((frame_distance(&[1.0, 0.0], &[-1.0, 0.0], FrameDistance::Angular).unwrap() - 1.0).abs() < 1e-12);
        let p = [0.2, 0.3, 0.5];
        let q = [0.5, 0.25, 0.25];
        let d1 = frame_distance(&p, &q, FrameDistance::Kl).unwrap();
        let d2 = frame_distance(&q, &p, FrameDistance::Kl).unwrap();
        assert!((d1 - d2).abs() < 1e-12 && d1 > 0.0);
        assert!(frame_distance(&[0.0, 0.0], &[1.0, 0.0], FrameDistance::Angular).is_err());
    }

    #[test]
    fn segments_from_separated_classes() {
        let labels = vec![0, 0, 1, 1, 0, 2, 2, 1];
        let feats = Tensor::from_fn(&[8, 3], |i| if i % 3 == labels[i / 3] { 1.0 } else { 0.01 });
        let inst = segment_instances(&[(feats, labels)], 50, 3).unwrap();
        assert_eq!(inst.len(), 50);
        assert!(inst.iter().all(|i| i.cat_a != i.cat_b));
        assert_eq!(abx_score(&inst, FrameDistance::Angular).unwrap(), 1.0);
        assert!(segment_instances(&[(Tensor::zeros(&[2, 3]), vec![0, 0])], 1, 0).is_err());
    }

    #[test]
    fn dtw_of_identical_sequences_is_zero() {
        let a = seq(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        assert!(dtw_distance(&a, &a, FrameDistance::Angular).unwrap() < 1e-6);
    }
}
