use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{kernels, Graph, Real, Var};

/// Masked frame indices for the predictive objective.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSet {
    /// Sorted, unique indices in `[0, T)`.
    pub indices: Vec<usize>,
    pub starts: Vec<usize>,
    pub span: usize,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.indices.binary_search(&t).is_ok()
    }
}

/// Each frame starts a span with probability `start_prob`; the mask is the
/// union of `[t, min(t + span, T))` over starts.
pub fn mask_spans(t: usize, start_prob: f64, span: usize, seed: u64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&start_prob) {
        return Err(Error::Config(format!("mask start probability {start_prob} outside [0, 1]")));
    }
    if span == 0 || span > t {
        return Err(Error::Config(format!("mask span {span} must be in [1, {t}]")));
    }
    let mut r = rng::rng_for(seed, "mask_spans", &[t as u64]);
    let mut hit = vec![false; t];
    let mut starts = Vec::new();
    for s in 0..t {
        if r.random::<f64>() < start_prob {
            starts.push(s);
            hit[s..(s + span).min(t)].iter_mut().for_each(|h| *h = true);
        }
    }
    let indices = (0..t).filter(|&i| hit[i]).collect();
    Ok(MaskSet { indices, starts, span })
}

/// Mean cross-entropy of `logits[T × C]` against `targets` over `rows`.
pub fn cross_entropy<F: Real>(g: &mut Graph<F>, logits: Var, targets: &[usize], rows: &[usize]) -> Result<Var> {
    let (t, c) = g.value(logits).dims2()?;
    if targets.len() != t {
        return Err(crate::error::dim_err(format!("{} targets for {t} frames", targets.len())));
    }
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let x = g.value(logits).data();
    let n = F::c(rows.len() as f64);
    let mut grad = vec![F::zero(); t * c];
    let mut total = F::zero();
    for &r in rows {
        let y = *targets.get(r).ok_or_else(|| crate::error::dim_err("row index out of range"))?;
        if y >= c {
            return Err(crate::error::dim_err(format!("target {y} outside {c} classes")));
        }
        let row = &x[r * c..(r + 1) * c];
        let lse = kernels::log_sum_exp(row.iter().copied());
        total += lse - row[y];
        for j in 0..c {
            grad[r * c + j] += (row[j] - lse).exp() / n;
        }
        grad[r * c + y] -= F::one() / n;
    }
    g.fused_loss(logits, total / n, grad)
}

/// Cross-entropy of cluster targets on masked frames only.
pub fn masked_predictive_loss<F: Real>(g: &mut Graph<F>, logits: Var, targets: &[usize], mask: &MaskSet) -> Result<Var> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    cross_entropy(g, logits, targets, &mask.indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn span_extremes() {
        assert!(mask_spans(50, 0.0, 10, 1).unwrap().is_empty());
        assert_eq!(mask_spans(50, 1.0, 10, 1).unwrap().indices, (0..50).collect::<Vec<_>>());
        assert_eq!(mask_spans(50, 0.3, 4, 7).unwrap(), mask_spans(50, 0.3, 4, 7).unwrap());
    }

    #[test]
    fn masked_fraction_expectation() {
        let mean: f64 = (0..100).map(|s| mask_spans(1000, 0.08, 10, s).unwrap().len() as f64 / 1000.0).sum::<f64>() / 100.0;
        assert!((0.4..=0.8).contains(&mean), "{mean}");
    }

    #[test]
    fn loss_extremes() {
        let k = 4;
        let targets = vec![0, 3, 1, 2, 2];
        let mask = MaskSet { indices: vec![1, 2, 4], starts: vec![1], span: 2 };
        let mut g = Graph::<f64>::new();
        let peaked = g.param(Tensor::from_fn(&[5, k], |i| if i % k == targets[i / k] { 20.0 } else { 0.0 }));
        let l = masked_predictive_loss(&mut g, peaked, &targets, &mask).unwrap();
        assert!(g.value(l).data()[0] < 1e-3);
        let flat = g.param(Tensor::full(&[5, k], 0.7));
        let l = masked_predictive_loss(&mut g, flat, &targets, &mask).unwrap();
        assert!((g.value(l).data()[0] - (k as f64).ln()).abs() < 1e-12);
        assert!(matches!(masked_predictive_loss(&mut g, flat, &targets, &MaskSet::default()), Err(Error::EmptyMask)));
    }
}
