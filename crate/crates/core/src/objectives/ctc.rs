use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Real, Var};

/// Column of the blank symbol; labels occupy columns `1..=V`.
pub const BLANK: usize = 0;

fn lse2<F: Real>(a: F, b: F) -> F {
    kernels::log_sum_exp([a, b].into_iter())
}

/// Negative log-likelihood of `labels` under CTC, summed over every
/// blank-augmented alignment of `log_probs[T × (V+1)]`.
///
/// The gradient is taken w.r.t. `log_probs` as free inputs:
/// `∂L/∂lp[t,k] = -Σ_{s: l'_s = k} α_t(s) β_t(s) / P`.
pub fn ctc_loss<F: Real>(g: &mut Graph<F>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.value(log_probs);
    let (t_len, width) = lp.dims2()?;
    if let Some(bad) = labels.iter().find(|&&l| l == BLANK || l >= width) {
        return Err(crate::error::dim_err(format!("label {bad} outside 1..{width}")));
    }
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    if t_len < labels.len() + repeats || t_len == 0 {
        return Err(Error::InfeasibleAlignment(format!(
            "{} labels ({repeats} repeats) need more than {t_len} frames",
            labels.len()
        )));
    }
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { BLANK } else { labels[s / 2] };
    let can_skip = |s: usize| s >= 2 && ext(s) != BLANK && ext(s) != ext(s - 2);
    let ninf = F::neg_infinity();
    let at = |t: usize, k: usize| lp.data()[t * width + k];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = at(0, BLANK);
    if s_len > 1 {
        alpha[1] = at(0, ext(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = acc + at(t, ext(s));
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 { lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]) } else { alpha[last] };
    if log_p == ninf {
        return Err(Error::InfeasibleAlignment("no alignment has non-zero probability".into()));
    }

    // beta excludes the emission at t
    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = F::zero();
    if s_len > 1 {
        beta[last + s_len - 2] = F::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + at(t + 1, ext(s2));
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = lse2(acc, next(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = lse2(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![F::zero(); t_len * width];
    for t in 0..t_len {
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if v > ninf {
                grad[t * width + ext(s)] -= v.exp();
            }
        }
    }
    g.fused_loss(log_probs, -log_p, grad)
}
