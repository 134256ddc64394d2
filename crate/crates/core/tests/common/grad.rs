//! Finite-difference cases for every differentiable op.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use s3ld::encoder::{aggregate_layers, Bound, Encoder, EncoderConfig};
use s3ld::objectives::{
    contrastive_loss, cross_entropy, ctc_loss, mask_spans, masked_predictive_loss, sample_distractors, DistractorPolicy,
};
use s3ld::tensor::gradcheck::finite_diff_check;
use s3ld::tensor::{Graph, Tensor, Var};
use s3ld::Result;

use super::{away_from_zero, rng, uniform};

pub const EPS: f64 = 1e-5;
pub const CASES: u64 = 20;

/// Scalarises an op output with a fixed random projection.
fn project(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(r.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn check(r: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, out_shape: &[usize], op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let proj = uniform(r, out_shape, -1.0, 1.0);
    finite_diff_check(&inputs, EPS, |g, v| {
        let out = op(g, v)?;
        project(g, out, &proj)
    })
    .expect("op evaluates")
}

fn check_scalar(inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    finite_diff_check(&inputs, EPS, op).expect("loss evaluates")
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..5), r.random_range(1..5))
}

pub type Case = fn(u64) -> f64;

/// `(name, case)` for every op; a case returns the worst relative error.
pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |s| {
            let mut r = rng(s);
            let (m, k) = dims(&mut r);
            let n = r.random_range(1..5);
            let (a, b) = (uniform(&mut r, &[m, k], -1.0, 1.0), uniform(&mut r, &[k, n], -1.0, 1.0));
            check(&mut r, vec![a, b], &[m, n], |g, v| g.matmul(v[0], v[1]))
        }),
        ("add", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let (a, b) = (uniform(&mut r, &[m, n], -1.0, 1.0), uniform(&mut r, &[m, n], -1.0, 1.0));
            check(&mut r, vec![a, b], &[m, n], |g, v| g.add(v[0], v[1]))
        }),
        ("mul", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let (a, b) = (uniform(&mut r, &[m, n], -1.0, 1.0), uniform(&mut r, &[m, n], -1.0, 1.0));
            check(&mut r, vec![a, b], &[m, n], |g, v| g.mul(v[0], v[1]))
        }),
        ("scale", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let c = r.random_range(-2.0..2.0);
            let a = uniform(&mut r, &[m, n], -1.0, 1.0);
            check(&mut r, vec![a], &[m, n], move |g, v| Ok(g.scale(v[0], c)))
        }),
        ("add_bias", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let (a, b) = (uniform(&mut r, &[m, n], -1.0, 1.0), uniform(&mut r, &[n], -1.0, 1.0));
            check(&mut r, vec![a, b], &[m, n], |g, v| g.add_bias(v[0], v[1]))
        }),
        ("linear", |s| {
            let mut r = rng(s);
            let (m, k) = dims(&mut r);
            let n = r.random_range(1..5);
            let x = uniform(&mut r, &[m, k], -1.0, 1.0);
            let w = uniform(&mut r, &[k, n], -1.0, 1.0);
            let b = uniform(&mut r, &[n], -1.0, 1.0);
            check(&mut r, vec![x, w, b], &[m, n], |g, v| g.linear(v[0], v[1], v[2]))
        }),
        ("relu", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let a = away_from_zero(&mut r, &[m, n], 1e-3);
            check(&mut r, vec![a], &[m, n], |g, v| Ok(g.relu(v[0])))
        }),
        ("gelu", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let a = uniform(&mut r, &[m, n], -3.0, 3.0);
            check(&mut r, vec![a], &[m, n], |g, v| Ok(g.gelu(v[0])))
        }),
        ("transpose", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let a = uniform(&mut r, &[m, n], -1.0, 1.0);
            check(&mut r, vec![a], &[n, m], |g, v| g.transpose(v[0]))
        }),
        ("conv1d", |s| {
            let mut r = rng(s);
            let (cin, cout) = dims(&mut r);
            let k = r.random_range(1..5);
            let stride = r.random_range(1..4);
            let pad = k / 2;
            let t = r.random_range(k..k + 8);
            let t_out = (t + 2 * pad - k) / stride + 1;
            let x = uniform(&mut r, &[cin, t], -1.0, 1.0);
            let w = uniform(&mut r, &[cout, cin, k], -1.0, 1.0);
            let b = uniform(&mut r, &[cout], -1.0, 1.0);
            check(&mut r, vec![x, w, b], &[cout, t_out], move |g, v| g.conv1d(v[0], v[1], v[2], stride, pad))
        }),
        ("layer_norm", |s| {
            let mut r = rng(s);
            let m = r.random_range(1..4);
            let d = r.random_range(2..6);
            let x = uniform(&mut r, &[m, d], -2.0, 2.0);
            let gamma = uniform(&mut r, &[d], 0.5, 1.5);
            let beta = uniform(&mut r, &[d], -0.5, 0.5);
            check(&mut r, vec![x, gamma, beta], &[m, d], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("softmax", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let axis = r.random_range(0..2);
            let a = uniform(&mut r, &[m, n], -2.0, 2.0);
            check(&mut r, vec![a], &[m, n], move |g, v| g.softmax(v[0], axis))
        }),
        ("log_softmax", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let a = uniform(&mut r, &[m, n], -2.0, 2.0);
            check(&mut r, vec![a], &[m, n], |g, v| g.log_softmax(v[0]))
        }),
        ("attention", |s| {
            let mut r = rng(s);
            let heads = r.random_range(1..3);
            let d = heads * r.random_range(1..3);
            let (tq, tk) = (r.random_range(1..4), r.random_range(1..4));
            let q = uniform(&mut r, &[tq, d], -1.0, 1.0);
            let k = uniform(&mut r, &[tk, d], -1.0, 1.0);
            let v = uniform(&mut r, &[tk, d], -1.0, 1.0);
            check(&mut r, vec![q, k, v], &[tq, d], move |g, x| g.attention(x[0], x[1], x[2], heads))
        }),
        ("gather_rows", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let idx: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..m)).collect();
            let a = uniform(&mut r, &[m, n], -1.0, 1.0);
            let rows = idx.len();
            check(&mut r, vec![a], &[rows, n], move |g, v| g.gather_rows(v[0], &idx))
        }),
        ("slice_rows", |s| {
            let mut r = rng(s);
            let m = r.random_range(2..6);
            let n = r.random_range(1..4);
            let start = r.random_range(0..m - 1);
            let end = r.random_range(start + 1..=m);
            let a = uniform(&mut r, &[m, n], -1.0, 1.0);
            check(&mut r, vec![a], &[end - start, n], move |g, v| g.slice_rows(v[0], start, end))
        }),
        ("weighted_sum", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let l = r.random_range(1..4);
            let mut inputs: Vec<Tensor<f64>> = (0..l).map(|_| uniform(&mut r, &[m, n], -1.0, 1.0)).collect();
            inputs.push(uniform(&mut r, &[l], -1.0, 1.0));
            check(&mut r, inputs, &[m, n], move |g, v| g.weighted_sum(&v[..l], v[l]))
        }),
        ("aggregate_layers", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let l = r.random_range(1..4);
            let mut inputs: Vec<Tensor<f64>> = (0..l).map(|_| uniform(&mut r, &[m, n], -1.0, 1.0)).collect();
            inputs.push(uniform(&mut r, &[l], -1.0, 1.0));
            check(&mut r, inputs, &[m, n], move |g, v| aggregate_layers(g, &v[..l], v[l]))
        }),
        ("replace_cols", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let cols: Vec<usize> = (0..n).filter(|_| r.random_bool(0.5)).collect();
            let x = uniform(&mut r, &[m, n], -1.0, 1.0);
            let fill = uniform(&mut r, &[m], -1.0, 1.0);
            check(&mut r, vec![x, fill], &[m, n], move |g, v| g.replace_cols(v[0], v[1], &cols))
        }),
        ("dropout", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let keep: Vec<bool> = (0..m * n).map(|_| r.random_bool(0.7)).collect();
            let x = uniform(&mut r, &[m, n], -1.0, 1.0);
            check(&mut r, vec![x], &[m, n], move |g, v| g.dropout(v[0], &keep, 0.3))
        }),
        ("sum", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let x = uniform(&mut r, &[m, n], -1.0, 1.0);
            check_scalar(vec![x], |g, v| Ok(g.sum(v[0])))
        }),
        ("mean", |s| {
            let mut r = rng(s);
            let (m, n) = dims(&mut r);
            let x = uniform(&mut r, &[m, n], -1.0, 1.0);
            check_scalar(vec![x], |g, v| Ok(g.mean(v[0])))
        }),
        ("contrastive_loss", |s| {
            let mut r = rng(s);
            let t = r.random_range(2..6);
            let p = r.random_range(2..5);
            let tau = r.random_range(0.05..1.0);
            let z = uniform(&mut r, &[t, p], -1.0, 1.0);
            let teacher = uniform(&mut r, &[t, p], -1.0, 1.0);
            let policy = if r.random_bool(0.5) {
                DistractorPolicy::InUtteranceAll
            } else {
                DistractorPolicy::InUtteranceK { k: r.random_range(1..t), seed: s }
            };
            let d = sample_distractors(t, policy).unwrap();
            check_scalar(vec![z], move |g, v| contrastive_loss(g, v[0], &teacher, tau, &d))
        }),
        ("ctc_loss", |s| {
            let mut r = rng(s);
            let t = r.random_range(3..8);
            let vocab = r.random_range(2..5);
            let n = r.random_range(1..=t / 2);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(1..vocab)).collect();
            let z = uniform(&mut r, &[t, vocab], -2.0, 2.0);
            check_scalar(vec![z], move |g, v| {
                let lp = g.log_softmax(v[0])?;
                ctc_loss(g, lp, &labels)
            })
        }),
        ("cross_entropy", |s| {
            let mut r = rng(s);
            let (t, c) = (r.random_range(1..6), r.random_range(2..5));
            let targets: Vec<usize> = (0..t).map(|_| r.random_range(0..c)).collect();
            let rows: Vec<usize> = (0..t).filter(|_| r.random_bool(0.7)).collect();
            let rows = if rows.is_empty() { vec![0] } else { rows };
            let z = uniform(&mut r, &[t, c], -2.0, 2.0);
            check_scalar(vec![z], move |g, v| cross_entropy(g, v[0], &targets, &rows))
        }),
        ("masked_predictive_loss", |s| {
            let mut r = rng(s);
            let (t, c) = (r.random_range(4..10), r.random_range(2..5));
            let targets: Vec<usize> = (0..t).map(|_| r.random_range(0..c)).collect();
            let mask = (s..).map(|k| mask_spans(t, 0.3, 2, k).unwrap()).find(|m| !m.is_empty()).unwrap();
            let z = uniform(&mut r, &[t, c], -2.0, 2.0);
            check_scalar(vec![z], move |g, v| masked_predictive_loss(g, v[0], &targets, &mask))
        }),
    ]
}

/// Central difference at the largest step in 1e-5..1e-7 that agrees with
/// the next smaller one (up to that step's rounding noise), so a ReLU kink
/// inside the step is stepped past.
pub fn kink_safe_diff(f: impl Fn(f64) -> f64) -> f64 {
    let central = |e: f64| (f(e) - f(-e)) / (2.0 * e);
    let mut eps = 1e-5;
    let mut cur = central(eps);
    while eps > 1e-7 {
        let next = central(eps / 10.0);
        let noise = 1e-15 / (eps / 10.0);
        if (cur - next).abs() <= 1e-5 * cur.abs().max(next.abs()) + noise {
            return cur;
        }
        eps /= 10.0;
        cur = next;
    }
    cur
}

/// Relative error with the denominator floored at 1e-6: smaller gradients
/// (e.g. exactly-zero key-bias gradients) sit at finite-difference noise.
pub fn composed_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Composed check: tiny encoder, projection and predictor, then the
/// contrastive loss against a fixed random target. Central differences are
/// taken on `n_probe` random input cells and `n_probe` random parameters.
pub fn encoder_case(seed: u64, n_probe: usize) -> f64 {
    let mut r = rng(seed);
    let cfg = EncoderConfig::tiny();
    let enc = Encoder::<f64>::new_student(&cfg, seed).unwrap();
    let t = r.random_range(24..40);
    let mel = uniform(&mut r, &[cfg.n_mels, t], -1.5, 1.5);
    let t_out = cfg.output_frames(t).unwrap();
    let target = uniform(&mut r, &[t_out, cfg.projection_dim], -1.0, 1.0);
    let d = sample_distractors(t_out, DistractorPolicy::InUtteranceAll).unwrap();

    let loss_of = |params: &[Tensor<f64>], mel: &Tensor<f64>, record: bool| {
        let mut g = if record { Graph::new() } else { Graph::inference() };
        let b = Bound(params.iter().map(|p| g.param(p.clone())).collect());
        let x = g.param(mel.clone());
        let out = enc.encode_var(&mut g, &b, x, None).unwrap();
        let proj = enc.project(&mut g, &b, out.final_).unwrap();
        let pred = enc.predict(&mut g, &b, proj).unwrap();
        let loss = contrastive_loss(&mut g, pred, &target, 0.1, &d).unwrap();
        (g, b, x, loss)
    };
    let params: Vec<Tensor<f64>> = enc.params.tensors().to_vec();
    let (g, b, x, loss) = loss_of(&params, &mel, true);
    let grads = g.backward(loss).unwrap();
    let value = |params: &[Tensor<f64>], mel: &Tensor<f64>| {
        let (g, _, _, l) = loss_of(params, mel, false);
        g.value(l).data()[0]
    };

    let mut worst = 0.0f64;
    let gx = grads.wrt(x);
    for _ in 0..n_probe {
        let j = r.random_range(0..mel.len());
        let numeric = kink_safe_diff(|e| {
            let mut m = mel.clone();
            m.data_mut()[j] += e;
            value(&params, &m)
        });
        worst = worst.max(composed_rel_err(gx.data()[j], numeric));
    }
    let live: Vec<usize> = (0..params.len()).filter(|&i| grads.has(b.0[i])).collect();
    for _ in 0..n_probe {
        let i = live[r.random_range(0..live.len())];
        let j = r.random_range(0..params[i].len());
        let numeric = kink_safe_diff(|e| {
            let mut p = params.clone();
            p[i].data_mut()[j] += e;
            value(&p, &mel)
        });
        worst = worst.max(composed_rel_err(grads.wrt(b.0[i]).data()[j], numeric));
    }
    worst
}
