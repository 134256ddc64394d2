use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hypothesis and reference token sequences of one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub hyp: Vec<usize>,
    pub reference: Vec<usize>,
}

impl EvalPair {
    pub fn new(hyp: Vec<usize>, reference: Vec<usize>) -> Self {
        Self { hyp, reference }
    }
}

/// Minimum number of insertions, deletions and substitutions.
pub fn levenshtein<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// `Σ edits / Σ |reference|`; exceeds 1 when insertions dominate.
pub fn token_error_rate(pairs: &[EvalPair]) -> Result<f64> {
    let total: usize = pairs.iter().map(|p| p.reference.len()).sum();
    if total == 0 {
        return Err(Error::Degenerate("token error rate needs reference tokens".into()));
    }
    let edits: usize = pairs.iter().map(|p| levenshtein(&p.hyp, &p.reference)).sum();
    Ok(edits as f64 / total as f64)
}

/// Fraction of utterances whose hypothesis is not exactly the reference.
pub fn utterance_error_rate(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("utterance error rate needs at least one pair".into()));
    }
    let wrong = pairs.iter().filter(|p| p.hyp != p.reference).count();
    Ok(wrong as f64 / pairs.len() as f64)
}

/// Best path decoding of `log_probs[T × (V+1)]` with blank in column 0:
/// per-frame argmax (ties to the lower index), repeats merged, blanks dropped.
pub fn greedy_ctc_decode(log_probs: &Tensor<f64>) -> Result<Vec<usize>> {
    let (t, _) = log_probs.dims2()?;
    let mut out = Vec::new();
    let mut prev = None;
    for i in 0..t {
        let row = log_probs.row(i);
        let mut best = 0;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != crate::objectives::BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_basics() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein::<u8>(&[], &[1, 2, 3, 4]), 4);
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 4, 3]), 1);
        assert_eq!(levenshtein(&"kitten".as_bytes(), &"sitting".as_bytes()), 3);
    }

    #[test]
    fn rates() {
        let ok = EvalPair::new(vec![1, 2], vec![1, 2]);
        let bad = EvalPair::new(vec![1], vec![1, 2]);
        assert_eq!(utterance_error_rate(&[ok.clone(), ok.clone(), ok.clone(), bad.clone()]).unwrap(), 0.25);
        assert_eq!(token_error_rate(&[ok.clone()]).unwrap(), 0.0);
        let dup = EvalPair::new(vec![1, 2, 1, 2, 1, 2], vec![1, 2]);
        assert!(token_error_rate(&[dup]).unwrap() > 1.0);
        assert!(token_error_rate(&[EvalPair::new(vec![1], vec![])]).is_err());
    }

    #[test]
    fn decode_rules() {
        let lp = |ids: &[usize]| {
            let mut t = Tensor::full(&[ids.len(), 3], -5.0);
            for (i, &k) in ids.iter().enumerate() {
                t.data_mut()[i * 3 + k] = -0.01;
            }
            t
        };
        assert_eq!(greedy_ctc_decode(&lp(&[1, 1, 0, 2])).unwrap(), vec![1, 2]);
        assert_eq!(greedy_ctc_decode(&lp(&[0, 0, 0])).unwrap(), Vec::<usize>::new());
        assert_eq!(greedy_ctc_decode(&lp(&[1, 0, 1])).unwrap(), vec![1, 1]);
    }
}
