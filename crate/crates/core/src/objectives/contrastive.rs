use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{kernels, Graph, Real, Tensor, Var};

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`.
pub fn cosine_sim<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(crate::error::dim_err("cosine_sim length mismatch"));
    }
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    if na == F::zero() || nb == F::zero() {
        return Err(Error::DegenerateVector("zero vector in cosine similarity".into()));
    }
    Ok((kernels::dot(a, b) / (na * nb)).max(-F::one()).min(F::one()))
}

/// Where the distractor set of each frame comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistractorPolicy {
    /// Every frame of the same utterance.
    InUtteranceAll,
    /// `k` frames sampled without replacement from the same utterance.
    InUtteranceK { k: usize, seed: u64 },
}

/// Distractor index sets `D_i`; the positive `i` is always a member.
pub fn sample_distractors(t: usize, policy: DistractorPolicy) -> Result<Vec<Vec<usize>>> {
    match policy {
        DistractorPolicy::InUtteranceAll => Ok((0..t).map(|_| (0..t).collect()).collect()),
        DistractorPolicy::InUtteranceK { k, seed } => {
            if k == 0 {
                return Ok((0..t).map(|i| vec![i]).collect());
            }
            if t <= 1 {
                return Err(Error::DegenerateUtterance(format!("{t} frame(s) cannot supply {k} negatives")));
            }
            if k >= t {
                return Err(Error::Config(format!("{k} negatives need more than {t} frames")));
            }
            let mut r = rng::rng_for(seed, "distractors", &[t as u64]);
            Ok((0..t)
                .map(|i| {
                    let mut d = vec![i];
                    // sample from the t-1 other frames, skipping i
                    d.extend(sample(&mut r, t - 1, k).into_iter().map(|j| if j >= i { j + 1 } else { j }));
                    d
                })
                .collect())
        }
    }
}

/// Mean over frames of
/// `-log( exp(φ(z_i, z'_i)/τ) / Σ_{j∈D_i} exp(φ(z_i, z'_j)/τ) )`.
///
/// `z` is the student `[T × P]` on the graph; `teacher` is the constant
/// `[T × P]` target, so no gradient can reach it.
pub fn contrastive_loss<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    teacher: &Tensor<F>,
    tau: f64,
    distractors: &[Vec<usize>],
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let zt = g.value(z);
    let (t, p) = zt.dims2()?;
    if teacher.shape() != zt.shape() {
        return Err(crate::error::dim_err(format!(
            "student {:?} and teacher {:?} projections differ",
            zt.shape(),
            teacher.shape()
        )));
    }
    if distractors.len() != t {
        return Err(Error::Contract(format!("{} distractor sets for {t} frames", distractors.len())));
    }
    for (i, d) in distractors.iter().enumerate() {
        if !d.contains(&i) || d.iter().any(|&j| j >= t) {
            return Err(Error::Contract(format!("distractor set {i} must contain {i} and stay within {t} frames")));
        }
    }
    let normalise = |x: &[F]| -> Result<(Vec<F>, F)> {
        let n = kernels::dot(x, x).sqrt();
        if n == F::zero() {
            return Err(Error::DegenerateVector("zero projection frame".into()));
        }
        Ok((x.iter().map(|v| *v / n).collect(), n))
    };
    let mut u = Vec::with_capacity(t);
    let mut norms = Vec::with_capacity(t);
    let mut v = Vec::with_capacity(t);
    for i in 0..t {
        let (ui, ni) = normalise(zt.row(i))?;
        u.push(ui);
        norms.push(ni);
        v.push(normalise(teacher.row(i))?.0);
    }
    let inv_tau = F::c(1.0 / tau);
    let tn = F::c(t as f64);
    let mut total = F::zero();
    let mut grad = vec![F::zero(); t * p];
    let mut du = vec![F::zero(); p];
    for i in 0..t {
        let d = &distractors[i];
        let logits: Vec<F> = d.iter().map(|&j| kernels::dot(&u[i], &v[j]) * inv_tau).collect();
        let lse = kernels::log_sum_exp(logits.iter().copied());
        let pos = kernels::dot(&u[i], &v[i]) * inv_tau;
        total += lse - pos;
        // dL/du_i = Σ_j (p_ij − [j = i]) v_j / τ, then through the normalisation
        du.fill(F::zero());
        for (&j, l) in d.iter().zip(&logits) {
            let w = (*l - lse).exp() * inv_tau / tn;
            for (o, vv) in du.iter_mut().zip(&v[j]) {
                *o += w * *vv;
            }
        }
        let w = inv_tau / tn;
        for (o, vv) in du.iter_mut().zip(&v[i]) {
            *o -= w * *vv;
        }
        let proj = kernels::dot(&u[i], &du);
        for c in 0..p {
            grad[i * p + c] = (du[c] - u[i][c] * proj) / norms[i];
        }
    }
    g.fused_loss(z, total / tn, grad)
}
