use std::time::Instant;

use rand::Rng;

use super::batching::{plan_batches, plan_fixed, BatchPlan};
use super::checkpoint::Checkpoint;
use super::data::{encoder_labels, Corpus};
use super::ema::ema_update;
use super::metrics::StepRecord;
use super::schedule::{lr_at, ScheduleConfig};
use crate::augment::{positional_shift, realign, AugmentPolicy};
use crate::dsp::{mfcc, MelSpectrogram};
use crate::encoder::{resample_index, Encoder, EncoderConfig, ParamSet, Role};
use crate::error::{Error, Result};
use crate::objectives::{
    contrastive_loss, cross_entropy, kmeans_assign, kmeans_fit, mask_spans, sample_distractors, DistractorPolicy,
};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, AdamState, Graph, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Contrastive,
    Predictive,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Self::Contrastive),
            "predictive" => Ok(Self::Predictive),
            o => Err(Error::Config(format!("unknown objective {o:?}"))),
        }
    }
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Self::Contrastive => "contrastive",
            Self::Predictive => "predictive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Batching {
    /// Frame-budgeted first-fit-decreasing packing.
    Dynamic { frame_budget: usize },
    /// A fixed number of utterances per micro-batch.
    Fixed { per_batch: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub steps: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accum: usize,
    pub batching: Batching,
    pub alpha: f64,
    pub tau: f64,
    /// In-utterance negatives per frame; `None` uses every frame.
    pub negatives: Option<usize>,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub policy: AugmentPolicy,
    /// Noise mixing and SpecAugment on the student branch.
    pub augment: bool,
    /// Random positional shift on the teacher branch.
    pub shift: bool,
    pub mask_start_prob: f64,
    pub mask_span: usize,
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    /// Attention layer whose output is clustered for second-stage targets.
    pub kmeans_layer: usize,
    pub mfcc_coeffs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Contrastive,
            steps: 300,
            accum: 4,
            batching: Batching::Dynamic { frame_budget: 7200 },
            alpha: 0.999,
            tau: 0.1,
            negatives: None,
            schedule: ScheduleConfig::cosine(3e-4, 300),
            adam: AdamConfig::default(),
            policy: AugmentPolicy::default(),
            augment: true,
            shift: true,
            mask_start_prob: 0.08,
            mask_span: 10,
            kmeans_k: 10,
            kmeans_iters: 25,
            kmeans_layer: 0,
            mfcc_coeffs: 13,
            seed: 42,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accum == 0 {
            return Err(Error::Config("train.accum must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("train.alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("objective.tau must be positive, got {}", self.tau)));
        }
        match self.batching {
            Batching::Dynamic { frame_budget: 0 } => return Err(Error::Config("train.frame_budget must be positive".into())),
            Batching::Fixed { per_batch: 0 } => return Err(Error::Config("train.fixed_batch must be positive".into())),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.mask_start_prob) || self.mask_span == 0 {
            return Err(Error::Config("mask.start_prob must be in [0, 1] and mask.span >= 1".into()));
        }
        if self.kmeans_k < 2 {
            return Err(Error::Config("kmeans.k must be >= 2".into()));
        }
        self.schedule.validate()?;
        self.policy.validate()
    }

    /// Policy actually applied to the student branch.
    fn student_policy(&self) -> AugmentPolicy {
        if self.augment {
            self.policy.clone()
        } else {
            AugmentPolicy { seed: self.policy.seed, ..AugmentPolicy::identity() }
        }
    }
}

/// Per-utterance result of one forward/backward pass.
struct UttGrads<F> {
    loss: f64,
    student: Vec<Tensor<F>>,
    extra: Vec<Tensor<F>>,
}

/// Pretraining state: student, EMA teacher, optimizer moments, and the
/// objective's own parameters and targets.
pub struct Pretrainer<F> {
    pub cfg: PretrainConfig,
    pub student: Encoder<F>,
    pub teacher: Encoder<F>,
    /// Mask embedding and cluster head of the predictive objective.
    pub extra: ParamSet<F>,
    pub adam: Adam<F>,
    pub adam_extra: Adam<F>,
    pub step: usize,
    /// Encoder-rate cluster targets per utterance (predictive only).
    pub targets: Vec<Vec<usize>>,
    pub target_stage: usize,
    plans: Vec<BatchPlan>,
}

impl<F: Real> Pretrainer<F> {
    pub fn new(cfg: PretrainConfig, encoder: &EncoderConfig, corpus: &Corpus) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Config("pretraining corpus is empty".into()));
        }
        let student = Encoder::new_student(encoder, rng::derive(cfg.seed, &[rng::label("student_init")]))?;
        let teacher = Encoder::teacher_from(&student);
        let extra = match cfg.objective {
            Objective::Contrastive => ParamSet::default(),
            Objective::Predictive => predictive_params(encoder, cfg.kmeans_k, cfg.seed),
        };
        let adam = Adam::new(cfg.adam, student.params.tensors());
        let adam_extra = Adam::new(cfg.adam, extra.tensors());
        let mut p = Self {
            cfg,
            student,
            teacher,
            extra,
            adam,
            adam_extra,
            step: 0,
            targets: Vec::new(),
            target_stage: 0,
            plans: Vec::new(),
        };
        if p.cfg.objective == Objective::Predictive {
            p.targets = p.mfcc_targets(corpus)?;
            p.target_stage = 1;
        }
        Ok(p)
    }

    /// Micro-batch number `m` of the endless sequence of per-epoch plans.
    fn microbatch(&mut self, corpus: &Corpus, mut m: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut epoch = 0;
        loop {
            if epoch == self.plans.len() {
                let seed = rng::derive(self.cfg.seed, &[rng::label("epoch"), epoch as u64]);
                let frames = corpus.frames();
                self.plans.push(match self.cfg.batching {
                    Batching::Dynamic { frame_budget } => plan_batches(&frames, frame_budget, seed)?,
                    Batching::Fixed { per_batch } => plan_fixed(&frames, per_batch, seed)?,
                });
            }
            let n = self.plans[epoch].batches.len();
            if m < n {
                let b = &self.plans[epoch].batches[m];
                return Ok((b.ids.clone(), b.frames.clone()));
            }
            m -= n;
            epoch += 1;
        }
    }

    /// Runs one optimizer step over the next `accum` micro-batches.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<StepRecord> {
        let start = Instant::now();
        let phase = self.prepare_step(corpus)?;
        let mut microbatches = Vec::with_capacity(self.cfg.accum);
        for j in 0..self.cfg.accum {
            microbatches.push(self.microbatch(corpus, self.step * self.cfg.accum + j)?);
        }
        let lr = lr_at(&self.cfg.schedule, self.step);
        let (loss, frames) = self.accumulate_step(corpus, &microbatches, lr)?;
        Ok(StepRecord {
            step: self.step - 1,
            phase,
            loss,
            lr,
            frames,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Switches the predictive objective to second-stage targets halfway.
    fn prepare_step(&mut self, corpus: &Corpus) -> Result<String> {
        if self.cfg.objective == Objective::Contrastive {
            return Ok("pretrain".into());
        }
        if self.target_stage == 1 && self.step >= self.cfg.steps / 2 && self.cfg.steps >= 2 {
            self.targets = self.layer_targets(corpus)?;
            self.target_stage = 2;
        }
        Ok(format!("predictive.stage{}", self.target_stage))
    }

    /// Averages gradients over every utterance of the micro-batches
    /// (`(ids, frames)` pairs), applies one Adam step at `lr`, then one EMA
    /// update. Returns the mean utterance loss and the real frames used.
    pub fn accumulate_step(&mut self, corpus: &Corpus, microbatches: &[(Vec<usize>, Vec<usize>)], lr: f64) -> Result<(f64, usize)> {
        if microbatches.is_empty() {
            return Err(Error::Config("accumulation needs at least one micro-batch".into()));
        }
        let mut g_student: Vec<Tensor<F>> = self.student.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut g_extra: Vec<Tensor<F>> = self.extra.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut results = Vec::new();
        let mut frames = 0;
        for (ids, lens) in microbatches {
            for (&id, &len) in ids.iter().zip(lens) {
                frames += len;
                if let Some(r) = self.utterance(corpus, id, len)? {
                    results.push(r);
                }
            }
        }
        if results.is_empty() {
            return Err(Error::Degenerate("no utterance in the step produced a loss".into()));
        }
        // mean over utterances == concatenated-batch mean reduction
        let w = F::c(1.0 / results.len() as f64);
        let mut loss = 0.0;
        for r in &results {
            loss += r.loss;
            for (acc, g) in g_student.iter_mut().zip(&r.student).chain(g_extra.iter_mut().zip(&r.extra)) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += w * *v;
                }
            }
        }
        loss /= results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.step as u64, reason: format!("loss is {loss}") });
        }
        let step = self.step as u64;
        let tag = |e: Error| match e {
            Error::Diverged { reason, .. } => Error::Diverged { step, reason },
            e => e,
        };
        self.adam.step(self.student.params.tensors_mut(), &g_student, lr).map_err(tag)?;
        if !self.extra.is_empty() {
            self.adam_extra.step(self.extra.tensors_mut(), &g_extra, lr).map_err(tag)?;
        }
        let shared = self.student.shared_len();
        ema_update(self.teacher.params.tensors_mut(), &self.student.params.tensors()[..shared], self.cfg.alpha)?;
        self.step += 1;
        Ok((loss, frames))
    }

    fn utterance_seed(&self, id: usize) -> u64 {
        rng::derive(self.cfg.seed, &[rng::label("pretrain_utt"), self.step as u64, id as u64])
    }

    fn utterance(&self, corpus: &Corpus, id: usize, len: usize) -> Result<Option<UttGrads<F>>> {
        match self.cfg.objective {
            Objective::Contrastive => self.contrastive_utterance(corpus, id, len),
            Objective::Predictive => self.predictive_utterance(corpus, id, len),
        }
    }

    fn student_input(&self, corpus: &Corpus, id: usize, len: usize, seed: u64) -> Result<Tensor<F>> {
        let policy = self.cfg.student_policy();
        let x = corpus.student_input(id, &policy, self.cfg.augment, seed)?;
        Ok(crop_frames(&x, len)?.cast())
    }

    fn contrastive_utterance(&self, corpus: &Corpus, id: usize, len: usize) -> Result<Option<UttGrads<F>>> {
        let seed = self.utterance_seed(id);
        let clean = crop_frames(&corpus.utterances[id].clean, len)?;
        let (teacher_in, shift) = if self.cfg.shift {
            let m = MelSpectrogram { values: clean, hop: corpus.features.hop, frame_labels: None };
            let (m, p) = positional_shift(&m, self.cfg.policy.max_shift_frames, rng::derive(seed, &[rng::label("shift")]))?;
            (m.values, p)
        } else {
            (clean, 0)
        };
        let mut tg = Graph::inference();
        let tb = self.teacher.bind(&mut tg, false);
        let tout = self.teacher.encode(&mut tg, &tb, &teacher_in.cast())?;
        let tz = self.teacher.project(&mut tg, &tb, tout.final_)?;
        let tz = tg.value(tz).clone();

        let x = self.student_input(corpus, id, len, seed)?;
        let mut g = Graph::new();
        let sb = self.student.bind(&mut g, true);
        let xv = g.constant(x);
        let out = self.student.encode_var(&mut g, &sb, xv, Some(seed))?;
        let z = self.student.project(&mut g, &sb, out.final_)?;
        let p = self.student.predict(&mut g, &sb, z)?;
        let (drop, n) = realign(tz.dim(0), g.value(p).dim(0), shift, self.student.downsample());
        if n < 2 {
            return Ok(None);
        }
        let ps = g.slice_rows(p, 0, n)?;
        let target = tz.slice_rows(drop, drop + n)?;
        let policy = match self.cfg.negatives {
            Some(k) => DistractorPolicy::InUtteranceK { k: k.min(n - 1), seed },
            None => DistractorPolicy::InUtteranceAll,
        };
        let d = sample_distractors(n, policy)?;
        let loss = contrastive_loss(&mut g, ps, &target, self.cfg.tau, &d)?;
        let grads = g.backward(loss)?;
        Ok(Some(UttGrads {
            loss: g.value(loss).data()[0].f64(),
            student: sb.0.iter().map(|&v| grads.wrt(v)).collect(),
            extra: Vec::new(),
        }))
    }

    fn predictive_utterance(&self, corpus: &Corpus, id: usize, len: usize) -> Result<Option<UttGrads<F>>> {
        let seed = self.utterance_seed(id);
        let x = self.student_input(corpus, id, len, seed)?;
        let t_mel = x.dim(1);
        let mask = mask_spans(t_mel, self.cfg.mask_start_prob, self.cfg.mask_span.min(t_mel), seed)?;
        let mut g = Graph::new();
        let sb = self.student.bind(&mut g, true);
        let eb: Vec<_> = self.extra.tensors().iter().map(|t| g.param(t.clone())).collect();
        let xv = g.constant(x);
        let xm = g.replace_cols(xv, eb[0], &mask.indices)?;
        let out = self.student.encode_var(&mut g, &sb, xm, Some(seed))?;
        let z = self.student.project(&mut g, &sb, out.final_)?;
        let logits = g.linear(z, eb[1], eb[2])?;
        let t_out = g.value(logits).dim(0);
        let ds = self.student.downsample();
        let rows: Vec<usize> =
            (0..t_out).filter(|&u| mask.contains((u * ds + ds / 2).min(t_mel - 1))).collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let targets = &self.targets[id];
        let loss = cross_entropy(&mut g, logits, &targets[..t_out.min(targets.len())], &rows)?;
        let grads = g.backward(loss)?;
        Ok(Some(UttGrads {
            loss: g.value(loss).data()[0].f64(),
            student: sb.0.iter().map(|&v| grads.wrt(v)).collect(),
            extra: eb.iter().map(|&v| grads.wrt(v)).collect(),
        }))
    }

    /// First-stage targets: k-means over MFCCs of the clean features.
    fn mfcc_targets(&self, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
        let mut per_utt = Vec::new();
        let mut all = Vec::new();
        for u in &corpus.utterances {
            let m = MelSpectrogram { values: u.clean.clone(), hop: corpus.features.hop, frame_labels: None };
            let c = mfcc(&m, self.cfg.mfcc_coeffs)?;
            let rows: Vec<Vec<f64>> = (0..c.dim(1)).map(|t| (0..c.dim(0)).map(|k| c.at(k, t)).collect()).collect();
            all.extend(rows.iter().cloned());
            per_utt.push(rows);
        }
        let model = kmeans_fit(&all, self.cfg.kmeans_k, self.cfg.kmeans_iters, rng::derive(self.cfg.seed, &[rng::label("kmeans1")]))?;
        let ds = self.student.downsample();
        per_utt
            .iter()
            .zip(&corpus.utterances)
            .map(|(rows, u)| {
                let labels = kmeans_assign(rows, &model)?;
                let t_out = self.student.config.output_frames(u.n_frames()).unwrap_or(0);
                Ok(encoder_labels(&labels, t_out, ds))
            })
            .collect()
    }

    /// Second-stage targets: k-means over a learned attention layer.
    fn layer_targets(&self, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
        let layer = self.cfg.kmeans_layer;
        let mut per_utt = Vec::new();
        let mut all = Vec::new();
        for u in &corpus.utterances {
            let mut g = Graph::inference();
            let b = self.student.bind(&mut g, false);
            let out = self.student.encode(&mut g, &b, &u.clean.cast())?;
            let l = *out.layers.get(layer).ok_or_else(|| Error::Config(format!("kmeans.layer {layer} out of range")))?;
            let v = g.value(l);
            let t_out = g.value(out.final_).dim(0);
            let rows: Vec<Vec<f64>> = (0..v.dim(0)).map(|t| v.row(t).iter().map(|x| x.f64()).collect()).collect();
            all.extend(rows.iter().cloned());
            per_utt.push((rows, t_out));
        }
        let model = kmeans_fit(&all, self.cfg.kmeans_k, self.cfg.kmeans_iters, rng::derive(self.cfg.seed, &[rng::label("kmeans2")]))?;
        per_utt
            .iter()
            .map(|(rows, t_out)| {
                let labels = kmeans_assign(rows, &model)?;
                Ok(resample_index(labels.len(), *t_out).into_iter().map(|i| labels[i]).collect())
            })
            .collect()
    }

    /// Runs until `cfg.steps`, handing every record to `on_step`.
    pub fn run(&mut self, corpus: &Corpus, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            let rec = self.train_step(corpus)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.student.config.to_text());
        c.set("kind", "pretrain");
        c.set("step", self.step);
        c.set("alpha", self.cfg.alpha);
        c.set("seed", self.cfg.seed);
        c.set("objective", self.cfg.objective.name());
        c.set("adam_t", self.adam.state.t);
        c.set("target_stage", self.target_stage);
        c.push_group("student", &self.student.params.cast());
        c.push_group("teacher", &self.teacher.params.cast());
        c.push_group("extra", &self.extra.cast());
        let named = |names: &[String], ts: &[Tensor<F>]| {
            let mut p = ParamSet::default();
            for (n, t) in names.iter().zip(ts) {
                p.push(n.clone(), t.cast());
            }
            p
        };
        c.push_group("adam.m", &named(self.student.params.names(), &self.adam.state.m));
        c.push_group("adam.v", &named(self.student.params.names(), &self.adam.state.v));
        c.push_group("adam_extra.m", &named(self.extra.names(), &self.adam_extra.state.m));
        c.push_group("adam_extra.v", &named(self.extra.names(), &self.adam_extra.state.v));
        if !self.targets.is_empty() {
            let lens: Vec<f32> = self.targets.iter().map(|t| t.len() as f32).collect();
            let flat: Vec<f32> = self.targets.iter().flatten().map(|&v| v as f32).collect();
            c.push("targets/lengths", Tensor::new(vec![lens.len()], lens).expect("1-d"));
            c.push("targets/labels", Tensor::new(vec![flat.len()], flat).expect("1-d"));
        }
        c
    }

    /// Restores a run. `cfg` supplies everything not stored in the file;
    /// the seed, objective and EMA rate must agree with the checkpoint.
    pub fn from_checkpoint(cfg: PretrainConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderConfig::parse(&ck.config_text)?;
        if ck.meta_get::<String>("kind")? != "pretrain" {
            return Err(Error::Version("not a pretraining checkpoint".into()));
        }
        if ck.meta_get::<String>("objective")? != cfg.objective.name() || ck.meta_get::<u64>("seed")? != cfg.seed {
            return Err(Error::Config("checkpoint objective/seed differ from the run config".into()));
        }
        let student = Encoder::with_params(&encoder, Role::Student, ck.group("student").cast())?;
        let teacher = Encoder::with_params(&encoder, Role::Teacher, ck.group("teacher").cast())?;
        let extra: ParamSet<F> = ck.group("extra").cast();
        let expect_extra: ParamSet<F> = match cfg.objective {
            Objective::Contrastive => ParamSet::default(),
            Objective::Predictive => predictive_params(&encoder, cfg.kmeans_k, cfg.seed),
        };
        if expect_extra.names() != extra.names() {
            return Err(Error::Version("objective parameters do not match the run config".into()));
        }
        let t = ck.meta_get::<u64>("adam_t")?;
        let state = |m: &str, v: &str| AdamState::<F> {
            m: ck.group(m).tensors().iter().map(Tensor::cast).collect(),
            v: ck.group(v).tensors().iter().map(Tensor::cast).collect(),
            t,
        };
        let adam = Adam { config: cfg.adam, state: state("adam.m", "adam.v") };
        let adam_extra = Adam { config: cfg.adam, state: state("adam_extra.m", "adam_extra.v") };
        if adam.state.m.len() != student.params.len() || adam_extra.state.m.len() != extra.len() {
            return Err(Error::Corruption("optimizer state does not match the parameters".into()));
        }
        let targets = match (ck.get("targets/lengths"), ck.get("targets/labels")) {
            (Some(lens), Some(flat)) => {
                let mut out = Vec::new();
                let mut pos = 0;
                for &l in lens.data() {
                    let l = l as usize;
                    let slice = flat.data().get(pos..pos + l).ok_or_else(|| Error::Corruption("target table truncated".into()))?;
                    out.push(slice.iter().map(|&v| v as usize).collect());
                    pos += l;
                }
                out
            }
            _ => Vec::new(),
        };
        Ok(Self {
            cfg,
            student,
            teacher,
            extra,
            adam,
            adam_extra,
            step: ck.meta_get("step")?,
            targets,
            target_stage: ck.meta_get("target_stage")?,
            plans: Vec::new(),
        })
    }
}

/// Mask embedding `[n_mels]` and cluster head `[projection × k]`.
fn predictive_params<F: Real>(encoder: &EncoderConfig, k: usize, seed: u64) -> ParamSet<F> {
    let mut r = rng::rng_for(seed, "predictive_init", &[]);
    let d = encoder.projection_dim;
    let bound = 1.0 / (d as f64).sqrt();
    let mut p = ParamSet::default();
    p.push("mlm.mask", Tensor::from_fn(&[encoder.n_mels], |_| F::c(r.random_range(-0.1..0.1))));
    p.push("mlm.head.w", Tensor::from_fn(&[d, k], |_| F::c(r.random_range(-bound..bound))));
    p.push("mlm.head.b", Tensor::zeros(&[k]));
    p
}

/// Keeps the first `len` frames of a `[bins × T]` array.
pub fn crop_frames(x: &Tensor<f64>, len: usize) -> Result<Tensor<f64>> {
    let (bins, t) = x.dims2()?;
    if len >= t {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(bins * len);
    for b in 0..bins {
        out.extend_from_slice(&x.data()[b * t..b * t + len]);
    }
    Tensor::new(vec![bins, len], out)
}
