use rand::Rng;

use super::config::{conv_out_len, conv_padding, Activation, AttnSpec, ConvSpec, EncoderConfig, LayerSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<F: Real> ParamSet<F> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Returns a copy holding only the first `n` entries.
    pub fn prefix(&self, n: usize) -> Self {
        Self { names: self.names[..n].to_vec(), tensors: self.tensors[..n].to_vec() }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// FNV hash over names and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::label("params");
        for (n, t) in self.iter() {
            h = crate::rng::mix64(h ^ crate::rng::label(n));
            for v in t.data() {
                h = crate::rng::mix64(h ^ v.f64().to_bits());
            }
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug)]
enum Block {
    Conv { w: usize, b: usize, spec: ConvSpec },
    Adapter { w: usize, b: usize },
    Attn { p: AttnParams, heads: usize },
}

#[derive(Clone, Copy, Debug)]
struct AttnParams {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

/// Parameters bound onto a graph, aligned with [`ParamSet`] order.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    fn at(&self, i: usize) -> Var {
        self.0[i]
    }
}

pub struct EncoderOutput {
    /// `[T_out × D]`
    pub final_: Var,
    /// Every attention layer output, `[T_l × D_l]` each.
    pub layers: Vec<Var>,
}

/// Instantiated encoder. Students carry the predictor and aggregation
/// logits after the shared encoder+projection parameters; teachers hold
/// only the shared prefix.
#[derive(Clone, Debug)]
pub struct Encoder<F> {
    pub config: EncoderConfig,
    pub role: Role,
    pub params: ParamSet<F>,
    blocks: Vec<Block>,
    proj: (usize, usize),
    predictor: Vec<(usize, usize, ConvSpec)>,
    agg_logits: Option<usize>,
    shared: usize,
}

const LN_EPS: f64 = 1e-5;

impl<F: Real> Encoder<F> {
    /// Student with uniform(±1/sqrt(fan_in)) weights drawn from `seed`.
    pub fn new_student(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng_for(seed, "encoder_init", &[]);
        let mut params = ParamSet::default();
        let mut init = |params: &mut ParamSet<F>, name: String, shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(name, Tensor::from_fn(shape, |_| F::c(r.random_range(-bound..=bound))))
        };
        let mut blocks = Vec::new();
        let mut width = config.n_mels;
        let mut attn_idx = 0;
        for (i, l) in config.layers.iter().enumerate() {
            match l {
                LayerSpec::Conv(c) => {
                    let fan = width * c.kernel;
                    let w = init(&mut params, format!("enc.{i}.conv.w"), &[c.channels, width, c.kernel], fan);
                    let b = init(&mut params, format!("enc.{i}.conv.b"), &[c.channels], fan);
                    blocks.push(Block::Conv { w, b, spec: *c });
                    width = c.channels;
                }
                LayerSpec::Attention(a) => {
                    if width != a.embed_dim {
                        let w = init(&mut params, format!("enc.{i}.adapter.w"), &[width, a.embed_dim], width);
                        let b = init(&mut params, format!("enc.{i}.adapter.b"), &[a.embed_dim], width);
                        blocks.push(Block::Adapter { w, b });
                        width = a.embed_dim;
                    }
                    for _ in 0..a.count {
                        let p = attn_params(&mut params, &mut init, attn_idx, a);
                        blocks.push(Block::Attn { p, heads: a.n_heads });
                        attn_idx += 1;
                    }
                }
            }
        }
        let pw = init(&mut params, "proj.w".into(), &[width, config.projection_dim], width);
        let pb = init(&mut params, "proj.b".into(), &[config.projection_dim], width);
        let shared = params.len();
        let mut predictor = Vec::new();
        let mut pwidth = config.projection_dim;
        for (i, c) in config.predictor.iter().enumerate() {
            let fan = pwidth * c.kernel;
            let w = init(&mut params, format!("pred.{i}.w"), &[c.channels, pwidth, c.kernel], fan);
            let b = init(&mut params, format!("pred.{i}.b"), &[c.channels], fan);
            predictor.push((w, b, *c));
            pwidth = c.channels;
        }
        let n_agg = config.aggregated().len();
        let agg = params.push("agg.logits", Tensor::zeros(&[n_agg]));
        Ok(Self {
            config: config.clone(),
            role: Role::Student,
            params,
            blocks,
            proj: (pw, pb),
            predictor,
            agg_logits: Some(agg),
            shared,
        })
    }

    /// Teacher initialised as a copy of the student's shared parameters.
    pub fn teacher_from(student: &Encoder<F>) -> Self {
        Self {
            config: student.config.clone(),
            role: Role::Teacher,
            params: student.params.prefix(student.shared),
            blocks: student.blocks.clone(),
            proj: student.proj,
            predictor: Vec::new(),
            agg_logits: None,
            shared: student.shared,
        }
    }

    /// Rebuilds an encoder around loaded parameters, checking names and shapes.
    pub fn with_params(config: &EncoderConfig, role: Role, params: ParamSet<F>) -> Result<Self> {
        let template = Self::new_student(config, 0)?;
        let template = match role {
            Role::Student => template,
            Role::Teacher => Self::teacher_from(&template),
        };
        if template.params.names() != params.names()
            || template.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Version("parameter layout does not match the encoder config".into()));
        }
        Ok(Self { params, ..template })
    }

    /// Number of parameters shared between teacher and student.
    pub fn shared_len(&self) -> usize {
        self.shared
    }

    /// Index of the aggregation logits in the parameter list.
    pub fn agg_index(&self) -> Option<usize> {
        self.agg_logits
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn downsample(&self) -> usize {
        self.config.downsample()
    }

    /// Binds all parameters; trainable ones become graph params.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        self.bind_with(g, |_| trainable)
    }

    /// Binds parameters, marking those selected by `trainable(index)`.
    pub fn bind_with(&self, g: &mut Graph<F>, trainable: impl Fn(usize) -> bool) -> Bound {
        Bound(
            self.params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| if trainable(i) { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        )
    }

    /// Encodes a `[n_mels × T]` input.
    pub fn encode(&self, g: &mut Graph<F>, b: &Bound, mel: &Tensor<F>) -> Result<EncoderOutput> {
        let x = g.constant(mel.clone());
        self.encode_var(g, b, x, None)
    }

    /// Encodes an input already on the graph. `dropout_seed` enables dropout
    /// when the config asks for it.
    pub fn encode_var(&self, g: &mut Graph<F>, b: &Bound, x: Var, dropout_seed: Option<u64>) -> Result<EncoderOutput> {
        let (bins, t) = g.value(x).dims2()?;
        if bins != self.config.n_mels {
            return Err(crate::error::dim_err(format!("encoder expects {} mel bins, got {bins}", self.config.n_mels)));
        }
        if self.config.output_frames(t).is_none() {
            return Err(Error::SequenceTooShort(format!("{t} frames cannot pass the conv stack")));
        }
        // `cur` is channel-major [C × T] while `channel_major`, else [T × D]
        let mut cur = x;
        let mut channel_major = true;
        let mut layers = Vec::new();
        let mut drop_ctr = 0u64;
        let dropout = self.config.dropout;
        let mut maybe_drop = |g: &mut Graph<F>, v: Var| -> Result<Var> {
            match dropout_seed {
                Some(seed) if dropout > 0.0 => {
                    drop_ctr += 1;
                    let mut r = rng::rng_for(seed, "dropout", &[drop_ctr]);
                    let keep: Vec<bool> = (0..g.value(v).len()).map(|_| r.random::<f64>() >= dropout).collect();
                    g.dropout(v, &keep, dropout)
                }
                _ => Ok(v),
            }
        };
        for block in &self.blocks {
            match block {
                Block::Conv { w, b: bias, spec } => {
                    if !channel_major {
                        cur = g.transpose(cur)?;
                        channel_major = true;
                    }
                    if conv_out_len(g.value(cur).dim(1), spec.kernel, spec.stride).is_none() {
                        return Err(Error::SequenceTooShort("conv stack ran out of frames".into()));
                    }
                    cur = g.conv1d(cur, b.at(*w), b.at(*bias), spec.stride, conv_padding(spec.kernel))?;
                    cur = activate(g, cur, self.config.conv_activation);
                }
                Block::Adapter { w, b: bias } => {
                    if channel_major {
                        cur = g.transpose(cur)?;
                        channel_major = false;
                    }
                    cur = g.linear(cur, b.at(*w), b.at(*bias))?;
                }
                Block::Attn { p, heads } => {
                    if channel_major {
                        cur = g.transpose(cur)?;
                        channel_major = false;
                    }
                    cur = self.attention_block(g, b, cur, p, *heads, &mut maybe_drop)?;
                    layers.push(cur);
                }
            }
        }
        if channel_major {
            cur = g.transpose(cur)?;
        }
        Ok(EncoderOutput { final_: cur, layers })
    }

    fn attention_block(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        x: Var,
        p: &AttnParams,
        heads: usize,
        maybe_drop: &mut impl FnMut(&mut Graph<F>, Var) -> Result<Var>,
    ) -> Result<Var> {
        let q = g.linear(x, b.at(p.wq), b.at(p.bq))?;
        let k = g.linear(x, b.at(p.wk), b.at(p.bk))?;
        let v = g.linear(x, b.at(p.wv), b.at(p.bv))?;
        let a = g.attention(q, k, v, heads)?;
        let o = g.linear(a, b.at(p.wo), b.at(p.bo))?;
        let o = maybe_drop(g, o)?;
        let r = g.add(x, o)?;
        let y = g.layer_norm(r, b.at(p.ln1_g), b.at(p.ln1_b), F::c(LN_EPS))?;
        let h = g.linear(y, b.at(p.w1), b.at(p.b1))?;
        let h = activate(g, h, self.config.ff_activation);
        let f = g.linear(h, b.at(p.w2), b.at(p.b2))?;
        let f = maybe_drop(g, f)?;
        let r2 = g.add(y, f)?;
        g.layer_norm(r2, b.at(p.ln2_g), b.at(p.ln2_b), F::c(LN_EPS))
    }

    /// Projection head `[T × D] → [T × projection_dim]`.
    pub fn project(&self, g: &mut Graph<F>, b: &Bound, final_: Var) -> Result<Var> {
        g.linear(final_, b.at(self.proj.0), b.at(self.proj.1))
    }

    /// Student predictor: length-preserving conv stack over time.
    pub fn predict(&self, g: &mut Graph<F>, b: &Bound, projected: Var) -> Result<Var> {
        if self.role != Role::Student {
            return Err(Error::Role("the predictor belongs to the student only".into()));
        }
        let mut cur = g.transpose(projected)?;
        let n = self.predictor.len();
        for (i, (w, bias, spec)) in self.predictor.iter().enumerate() {
            cur = g.conv1d(cur, b.at(*w), b.at(*bias), 1, conv_padding(spec.kernel))?;
            if i + 1 < n {
                cur = activate(g, cur, self.config.conv_activation);
            }
        }
        g.transpose(cur)
    }

    /// Softmax-weighted sum of the aggregated attention layers, using the
    /// bound aggregation logits.
    pub fn aggregate(&self, g: &mut Graph<F>, b: &Bound, out: &EncoderOutput) -> Result<Var> {
        let idx = self.agg_logits.ok_or_else(|| Error::Role("teacher has no aggregation logits".into()))?;
        let layers = self.aggregation_inputs(g, out)?;
        aggregate_layers(g, &layers, b.at(idx))
    }

    /// The layers entering the weighted sum, resampled to the top-stage rate
    /// when earlier stages are included.
    pub fn aggregation_inputs(&self, g: &mut Graph<F>, out: &EncoderOutput) -> Result<Vec<Var>> {
        let range = self.config.aggregated();
        let top = out.layers[self.config.top_stage().start];
        let t_top = g.value(top).dim(0);
        let mut picked = Vec::new();
        for i in range {
            let l = out.layers[i];
            let t = g.value(l).dim(0);
            if t == t_top {
                picked.push(l);
            } else {
                let idx = resample_index(t, t_top);
                picked.push(g.gather_rows(l, &idx)?);
            }
        }
        Ok(picked)
    }
}

/// Nearest-frame map from a `t_src`-frame sequence onto `t_dst` frames.
pub fn resample_index(t_src: usize, t_dst: usize) -> Vec<usize> {
    (0..t_dst)
        .map(|t| (((t as f64 + 0.5) * t_src as f64 / t_dst as f64) as usize).min(t_src.saturating_sub(1)))
        .collect()
}

/// `Σ softmax(logits)_i · layers_i`.
pub fn aggregate_layers<F: Real>(g: &mut Graph<F>, layers: &[Var], logits: Var) -> Result<Var> {
    let w = g.softmax(logits, 0)?;
    g.weighted_sum(layers, w)
}

fn activate<F: Real>(g: &mut Graph<F>, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

fn attn_params<F: Real>(
    params: &mut ParamSet<F>,
    init: &mut impl FnMut(&mut ParamSet<F>, String, &[usize], usize) -> usize,
    idx: usize,
    a: &AttnSpec,
) -> AttnParams {
    let d = a.embed_dim;
    let h = a.inner_dim();
    let f = a.ff_dim;
    let pre = format!("enc.attn{idx}");
    let mut lin = |params: &mut ParamSet<F>, name: &str, i: usize, o: usize| {
        (init(params, format!("{pre}.{name}.w"), &[i, o], i), init(params, format!("{pre}.{name}.b"), &[o], i))
    };
    let (wq, bq) = lin(params, "q", d, h);
    let (wk, bk) = lin(params, "k", d, h);
    let (wv, bv) = lin(params, "v", d, h);
    let (wo, bo) = lin(params, "o", h, d);
    let ln1_g = params.push(format!("{pre}.ln1.g"), Tensor::full(&[d], F::one()));
    let ln1_b = params.push(format!("{pre}.ln1.b"), Tensor::zeros(&[d]));
    let (w1, b1) = lin(params, "ff1", d, f);
    let (w2, b2) = lin(params, "ff2", f, d);
    let ln2_g = params.push(format!("{pre}.ln2.g"), Tensor::full(&[d], F::one()));
    let ln2_b = params.push(format!("{pre}.ln2.b"), Tensor::zeros(&[d]));
    AttnParams { wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b }
}

/// Analytic multiply-add count of a student forward pass (encoder,
/// projection and predictor) on `t` input frames.
pub fn forward_macs(cfg: &EncoderConfig, t: usize) -> Option<u64> {
    let mut t = t as u64;
    let mut width = cfg.n_mels as u64;
    let mut macs = 0u64;
    for l in &cfg.layers {
        match l {
            LayerSpec::Conv(c) => {
                let t_out = conv_out_len(t as usize, c.kernel, c.stride)? as u64;
                macs += c.channels as u64 * width * c.kernel as u64 * t_out;
                t = t_out;
                width = c.channels as u64;
            }
            LayerSpec::Attention(a) => {
                let d = a.embed_dim as u64;
                if width != d {
                    macs += t * width * d;
                    width = d;
                }
                let h = a.inner_dim() as u64;
                let per_layer = 4 * t * d * h + 2 * t * t * h + 2 * t * d * a.ff_dim as u64;
                macs += per_layer * a.count as u64;
            }
        }
    }
    macs += t * width * cfg.projection_dim as u64;
    let mut pw = cfg.projection_dim as u64;
    for p in &cfg.predictor {
        macs += p.channels as u64 * pw * p.kernel as u64 * t;
        pw = p.channels as u64;
    }
    Some(macs)
}
