use super::kernels;
use super::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize, k: usize, cols: Vec<F> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LogSoftmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<F> },
    GatherRows { x: Var, idx: Vec<usize> },
    WeightedSum { layers: Vec<Var>, weights: Var },
    ReplaceCols { x: Var, fill: Var, cols: Vec<usize> },
    Dropout { x: Var, mask: Vec<F> },
    Sum(Var),
    Mean(Var),
    /// Scalar loss whose gradient w.r.t. `x` was computed in the forward pass.
    FusedLoss { x: Var, grad: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Append-only tape. Node ids are assigned in creation order, so the node
/// list is topologically sorted by construction.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    /// A graph that evaluates ops without recording anything differentiable.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of differentiable (non-leaf) nodes on the tape.
    pub fn tape_len(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. On an inference graph this is a constant.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        let needs_grad = self.recording;
        self.push_raw(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.push_raw(value, op, needs_grad)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(format!("shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Adds a length-`D` bias to every row of a `[.., D]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.value(x).shape().last().ok_or_else(|| dim_err("bias on scalar"))?;
        if self.value(bias).len() != d {
            return Err(dim_err(format!("bias length {} vs last dim {d}", self.value(bias).len())));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| *v + b[i % d]).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x · w + b` with `w` laid out `[in × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(F::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_fwd);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// 1-D cross-correlation of `x[C_in × T]` with `w[C_out × C_in × K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, t) = self.value(x).dims2()?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, wc_in, k] = ws[..] else {
            return Err(dim_err(format!("conv weight must be 3-D, got {ws:?}")));
        };
        if wc_in != c_in {
            return Err(dim_err(format!("conv expects {wc_in} input channels, got {c_in}")));
        }
        if self.value(b).len() != c_out {
            return Err(dim_err("conv bias length"));
        }
        if k == 0 || stride == 0 {
            return Err(Error::Config("conv kernel and stride must be >= 1".into()));
        }
        let span = t + 2 * pad;
        if span < k {
            return Err(Error::SequenceTooShort(format!(
                "{t} frames with padding {pad} cannot fit kernel {k}"
            )));
        }
        let t_out = (span - k) / stride + 1;
        let cols = kernels::im2col(self.value(x).data(), c_in, t, k, stride, pad, t_out);
        let mut out = vec![F::zero(); c_out * t_out];
        let bias = self.value(b).data();
        for (o, row) in out.chunks_mut(t_out).enumerate() {
            row.fill(bias[o]);
        }
        kernels::matmul_acc(self.value(w).data(), &cols, c_out, c_in * k, t_out, &mut out);
        let value = Tensor::new(vec![c_out, t_out], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, stride, pad, k, cols }, &[x, w, b]))
    }

    /// Normalises each length-`D` row of `x` to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let d = *self.value(x).shape().last().ok_or_else(|| dim_err("layer norm on scalar"))?;
        if d == 0 {
            return Err(dim_err("layer norm over empty feature dim"));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(dim_err("layer norm affine params must match feature dim"));
        }
        if eps <= F::zero() {
            return Err(Error::Config("layer norm eps must be positive".into()));
        }
        let xs = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let mut xhat = vec![F::zero(); xs.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xs.len()];
        let dn = F::c(d as f64);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let xs = self.value(x).data();
        let mut out = vec![F::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xs[idx(j)]).fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for j in 0..n {
                    let e = (xs[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    out[idx(j)] /= s;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("log_softmax on scalar"))?;
        let xs = self.value(x).data();
        let mut out = vec![F::zero(); xs.len()];
        for (orow, row) in out.chunks_mut(d).zip(xs.chunks(d)) {
            let lse = kernels::log_sum_exp(row.iter().copied());
            for (o, v) in orow.iter_mut().zip(row) {
                *o = *v - lse;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// Scaled dot-product attention over `heads` column groups of `q`, `k`, `v`.
    /// `q` is `[Tq × D]`, `k` and `v` are `[Tk × D]`; output is `[Tq × D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, d) = self.value(q).dims2()?;
        let (tk, dk) = self.value(k).dims2()?;
        self.same_shape(k, v)?;
        if d != dk {
            return Err(dim_err("attention q/k width mismatch"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![F::zero(); heads * tq * tk];
        let mut out = vec![F::zero(); tq * d];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let qi = &qs[i * d..][hs.clone()];
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                for j in 0..tk {
                    p[j] = kernels::dot(qi, &ks[j * d..][hs.clone()]) * scale;
                }
                let m = p.iter().copied().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - m).exp();
                    s += *pj;
                }
                let oi = &mut out[i * d..][hs.clone()];
                for j in 0..tk {
                    p[j] /= s;
                    let vj = &vs[j * d..][hs.clone()];
                    for (o, vv) in oi.iter_mut().zip(vj) {
                        *o += p[j] * *vv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![tq, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Attention probabilities saved by an attention node, `[heads × Tq × Tk]`.
    pub fn attention_probs(&self, node: Var) -> Option<&[F]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(dim_err(format!("row index {bad} outside {r} rows")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    /// `Σ_i weights[i] · layers[i]` over equally shaped layers.
    pub fn weighted_sum(&mut self, layers: &[Var], weights: Var) -> Result<Var> {
        let first = *layers.first().ok_or_else(|| Error::Contract("no layers to aggregate".into()))?;
        if self.value(weights).len() != layers.len() {
            return Err(Error::Contract(format!(
                "{} weights for {} layers",
                self.value(weights).len(),
                layers.len()
            )));
        }
        for &l in layers {
            self.same_shape(first, l).map_err(|e| Error::Contract(e.to_string()))?;
        }
        let w = self.value(weights).data().to_vec();
        let mut out = vec![F::zero(); self.value(first).len()];
        for (l, wi) in layers.iter().zip(&w) {
            for (o, v) in out.iter_mut().zip(self.value(*l).data()) {
                *o += *wi * *v;
            }
        }
        let value = Tensor::new(self.value(first).shape().to_vec(), out)?;
        let mut inputs = layers.to_vec();
        inputs.push(weights);
        Ok(self.push(value, Op::WeightedSum { layers: layers.to_vec(), weights }, &inputs))
    }

    /// Replaces the listed columns of `x[R × C]` with the vector `fill[R]`.
    pub fn replace_cols(&mut self, x: Var, fill: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(fill).len() != r {
            return Err(dim_err("fill vector must have one value per row"));
        }
        if cols.iter().any(|&j| j >= c) {
            return Err(dim_err("column index out of range"));
        }
        let mut out = self.value(x).data().to_vec();
        let f = self.value(fill).data();
        for &j in cols {
            for i in 0..r {
                out[i * c + j] = f[i];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::ReplaceCols { x, fill, cols: cols.to_vec() }, &[x, fill]))
    }

    /// Inverted dropout with a caller-supplied keep mask (1 = keep).
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(dim_err("dropout mask length"));
        }
        let s = F::c(1.0 / (1.0 - p));
        let mask: Vec<F> = keep.iter().map(|&k| if k { s } else { F::zero() }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::c(self.value(x).len() as f64);
        let s = self.value(x).sum() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Records a scalar loss whose gradient w.r.t. `x` is already known.
    pub fn fused_loss(&mut self, x: Var, value: F, grad: Vec<F>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(dim_err("fused loss gradient shape"));
        }
        Ok(self.push(Tensor::scalar(value), Op::FusedLoss { x, grad }, &[x]))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.recording {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if n.needs_grad { g } else { None })
            .collect();
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backprop_node(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        if !node.needs_grad {
            return;
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.dim(0), self.nodes[a.0].value.dim(1));
                let n = self.nodes[b.0].value.dim(1);
                acc(*a, &mut |ga| kernels::matmul_nt_acc(g, val(*b), m, n, k, ga));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(val(*a), g, m, k, n, gb));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |gv| gv.iter_mut().zip(g).for_each(|(o, x)| *o += *x));
                }
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += *x * *y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += *x * *y;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += *x * *s)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += *v));
                let d = self.nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += *v;
                    }
                });
            }
            Op::Relu(x) => acc(*x, &mut |gx| {
                for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if *xv > F::zero() {
                        *o += *gv;
                    }
                }
            }),
            Op::Gelu(x) => acc(*x, &mut |gx| {
                for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *o += *gv * gelu_grad(*xv);
                }
            }),
            Op::Transpose(x) => {
                let (r, c) = (self.nodes[x.0].value.dim(0), self.nodes[x.0].value.dim(1));
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, stride, pad, k, cols } => {
                let (c_in, t) = (self.nodes[x.0].value.dim(0), self.nodes[x.0].value.dim(1));
                let c_out = self.nodes[w.0].value.dim(0);
                let t_out = node.value.dim(1);
                acc(*w, &mut |gw| kernels::matmul_nt_acc(g, cols, c_out, t_out, c_in * k, gw));
                acc(*b, &mut |gb| {
                    for (o, row) in g.chunks(t_out).enumerate() {
                        gb[o] += row.iter().copied().sum::<F>();
                    }
                });
                acc(*x, &mut |gx| {
                    let mut gcols = vec![F::zero(); c_in * k * t_out];
                    kernels::matmul_tn_acc(val(*w), g, c_out, c_in * k, t_out, &mut gcols);
                    kernels::col2im_acc(&gcols, c_in, t, *k, *stride, *pad, t_out, gx);
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.nodes[gamma.0].value.len();
                let gam = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] += *v * xhat[i];
                    }
                });
                acc(*beta, &mut |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += *v;
                    }
                });
                acc(*x, &mut |gx| {
                    let dn = F::c(d as f64);
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dxh = g[base + j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xhat[base + j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dxh = g[base + j] * gam[j];
                            gx[base + j] += *rs * (dxh - m1 - xhat[base + j] * m2);
                        }
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dotv: F = (0..*n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*n {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dotv);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let s: F = gr.iter().copied().sum();
                        for ((o, gv), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += *gv - yv.exp() * s;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::GatherRows { x, idx } => {
                let c = self.nodes[x.0].value.dim(1);
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::WeightedSum { layers, weights } => {
                let w = val(*weights).to_vec();
                for (l, wi) in layers.iter().zip(&w) {
                    acc(*l, &mut |gl| gl.iter_mut().zip(g).for_each(|(o, x)| *o += *x * *wi));
                }
                acc(*weights, &mut |gw| {
                    for (i, l) in layers.iter().enumerate() {
                        gw[i] += kernels::dot(g, val(*l));
                    }
                });
            }
            Op::ReplaceCols { x, fill, cols } => {
                let c = self.nodes[x.0].value.dim(1);
                let r = self.nodes[x.0].value.dim(0);
                acc(*x, &mut |gx| {
                    let mut keep = vec![true; c];
                    for &j in cols {
                        keep[j] = false;
                    }
                    for (i, (o, v)) in gx.iter_mut().zip(g).enumerate() {
                        if keep[i % c] {
                            *o += *v;
                        }
                    }
                });
                acc(*fill, &mut |gf| {
                    for &j in cols {
                        for i in 0..r {
                            gf[i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                    *o += *gv * *m;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = F::c(self.nodes[x.0].value.len() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::FusedLoss { x, grad } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(grad).for_each(|(o, d)| *o += *d * g[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (tq, d) = (self.nodes[q.0].value.dim(0), self.nodes[q.0].value.dim(1));
        let tk = self.nodes[k.0].value.dim(0);
        let dh = d / heads;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![F::zero(); tq * d];
        let mut dk = vec![F::zero(); tk * d];
        let mut dv = vec![F::zero(); tk * d];
        let mut dp = vec![F::zero(); tk];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let gi = &g[i * d..][hs.clone()];
                for j in 0..tk {
                    let dvj = &mut dv[j * d..][hs.clone()];
                    for (o, gv) in dvj.iter_mut().zip(gi) {
                        *o += p[j] * *gv;
                    }
                    dp[j] = kernels::dot(gi, &vs[j * d..][hs.clone()]);
                }
                let s: F = p.iter().zip(&dp).map(|(a, b)| *a * *b).sum();
                for j in 0..tk {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for c in hs.clone() {
                        dq[i * d + c] += ds * ks[j * d + c];
                        dk[j * d + c] += ds * qs[i * d + c];
                    }
                }
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![F::zero(); src.len()]);
            slot.iter_mut().zip(&src).for_each(|(o, x)| *o += *x);
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if shape.is_empty() {
        return Ok((1, 1, 1));
    }
    if axis >= shape.len() {
        return Err(dim_err(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn gelu_fwd<F: Real>(x: F) -> F {
    let half = F::c(0.5);
    let inner = F::c(SQRT_2_OVER_PI) * (x + F::c(GELU_C) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::c(0.5);
    let inner = F::c(SQRT_2_OVER_PI) * (x + F::c(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = F::c(SQRT_2_OVER_PI) * (F::one() + F::c(3.0 * GELU_C) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of `v`, or `None` if `v` does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when the loss does not reach `v`.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.get(v).is_some()
    }
}
