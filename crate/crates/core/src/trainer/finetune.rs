use std::time::Instant;

use rand::Rng;

use super::checkpoint::Checkpoint;
use super::data::{encoder_labels, Corpus};
use super::metrics::StepRecord;
use super::schedule::{lr_at, ScheduleConfig};
use crate::encoder::{aggregate_layers, Encoder, EncoderConfig, ParamSet, Role};
use crate::error::{Error, Result};
use crate::eval::greedy_ctc_decode;
use crate::objectives::{cross_entropy, ctc_loss};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Per-frame softmax over phone classes.
    Frame,
    /// Phone sequence via CTC; column 0 is the blank.
    Ctc,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(Self::Frame),
            "ctc" => Ok(Self::Ctc),
            o => Err(Error::Config(format!("unknown head {o:?}"))),
        }
    }
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Frame => "frame",
            Self::Ctc => "ctc",
        }
    }

    fn width(self, n_classes: usize) -> usize {
        match self {
            Self::Frame => n_classes,
            Self::Ctc => n_classes + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub head: HeadKind,
    pub steps: usize,
    /// Utterances per step.
    pub batch: usize,
    pub lr: f64,
    /// Train only the aggregation logits and the head.
    pub freeze: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { head: HeadKind::Frame, steps: 200, batch: 8, lr: 2e-3, freeze: true, seed: 42 }
    }
}

/// Encoder plus downstream head.
#[derive(Clone, Debug)]
pub struct Downstream<F> {
    pub encoder: Encoder<F>,
    pub head: ParamSet<F>,
    pub kind: HeadKind,
    pub n_classes: usize,
}

/// Aggregation inputs of one utterance computed without a tape.
pub fn frozen_layers<F: Real>(encoder: &Encoder<F>, mel: &Tensor<f64>) -> Result<Vec<Tensor<F>>> {
    let mut g = Graph::inference();
    let b = encoder.bind(&mut g, false);
    let out = encoder.encode(&mut g, &b, &mel.cast())?;
    let layers = encoder.aggregation_inputs(&mut g, &out)?;
    Ok(layers.iter().map(|&v| g.value(v).clone()).collect())
}

impl<F: Real> Downstream<F> {
    pub fn new(encoder: Encoder<F>, kind: HeadKind, n_classes: usize, seed: u64) -> Result<Self> {
        if encoder.role != Role::Student {
            return Err(Error::Role("downstream heads need the student encoder (it owns the aggregation logits)".into()));
        }
        if n_classes < 2 {
            return Err(Error::Config("a downstream head needs at least two classes".into()));
        }
        let d = encoder.config.output_dim();
        let c = kind.width(n_classes);
        let bound = 1.0 / (d as f64).sqrt();
        let mut r = rng::rng_for(seed, "head_init", &[]);
        let mut head = ParamSet::default();
        head.push("head.w", Tensor::from_fn(&[d, c], |_| F::c(r.random_range(-bound..bound))));
        head.push("head.b", Tensor::zeros(&[c]));
        Ok(Self { encoder, head, kind, n_classes })
    }

    fn head_logits(&self, g: &mut Graph<F>, agg: Var, w: Var, b: Var) -> Result<Var> {
        let logits = g.linear(agg, w, b)?;
        match self.kind {
            HeadKind::Frame => Ok(logits),
            HeadKind::Ctc => g.log_softmax(logits),
        }
    }

    /// Head outputs `[T_out × width]`: raw logits for the frame head,
    /// log-probabilities for CTC.
    pub fn logits(&self, mel: &Tensor<f64>) -> Result<Tensor<F>> {
        let layers = frozen_layers(&self.encoder, mel)?;
        let mut g = Graph::inference();
        let lv: Vec<Var> = layers.into_iter().map(|t| g.constant(t)).collect();
        let agg_idx = self.encoder.agg_index().expect("student");
        let logits = g.constant(self.encoder.params.tensors()[agg_idx].clone());
        let agg = aggregate_layers(&mut g, &lv, logits)?;
        let w = g.constant(self.head.tensors()[0].clone());
        let b = g.constant(self.head.tensors()[1].clone());
        let out = self.head_logits(&mut g, agg, w, b)?;
        Ok(g.value(out).clone())
    }

    /// Per-frame class decisions (blank excluded for the CTC head).
    pub fn frame_predictions(&self, mel: &Tensor<f64>) -> Result<Vec<usize>> {
        let l = self.logits(mel)?;
        let skip = usize::from(self.kind == HeadKind::Ctc);
        Ok((0..l.dim(0)).map(|t| argmax(&l.row(t)[skip..])).collect())
    }

    /// Phone sequence: greedy CTC decoding, or collapsed frame decisions.
    pub fn decode(&self, mel: &Tensor<f64>) -> Result<Vec<usize>> {
        match self.kind {
            HeadKind::Ctc => {
                let l = self.logits(mel)?.cast::<f64>();
                Ok(greedy_ctc_decode(&l)?.into_iter().map(|t| t - 1).collect())
            }
            HeadKind::Frame => {
                let mut seq = self.frame_predictions(mel)?;
                seq.dedup();
                Ok(seq)
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.encoder.config.to_text());
        c.set("kind", "finetune");
        c.set("head", self.kind.name());
        c.set("n_classes", self.n_classes);
        c.push_group("student", &self.encoder.params.cast());
        c.push_group("head", &self.head.cast());
        c
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_get::<String>("kind")? != "finetune" {
            return Err(Error::Version("not a finetuned checkpoint".into()));
        }
        let config = EncoderConfig::parse(&ck.config_text)?;
        let encoder = Encoder::with_params(&config, Role::Student, ck.group("student").cast())?;
        let kind: HeadKind = ck.meta_get::<String>("head")?.parse()?;
        let n_classes: usize = ck.meta_get("n_classes")?;
        let mut m = Self::new(encoder, kind, n_classes, 0)?;
        let head: ParamSet<F> = ck.group("head").cast();
        if head.names() != m.head.names() || head.tensors().iter().zip(m.head.tensors()).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Version("head parameters do not match".into()));
        }
        m.head = head;
        Ok(m)
    }

    /// Loss of one labelled utterance; `None` when CTC cannot align it.
    fn utterance_loss(&self, g: &mut Graph<F>, agg: Var, w: Var, b: Var, labels: &UttLabels) -> Result<Option<Var>> {
        let out = self.head_logits(g, agg, w, b)?;
        let t_out = g.value(out).dim(0);
        match self.kind {
            HeadKind::Frame => {
                let targets = encoder_labels(&labels.mel, t_out, self.encoder.downsample());
                let rows: Vec<usize> = (0..t_out).collect();
                cross_entropy(g, out, &targets, &rows).map(Some)
            }
            HeadKind::Ctc => {
                let seq: Vec<usize> = labels.phones.iter().map(|p| p + 1).collect();
                match ctc_loss(g, out, &seq) {
                    Ok(l) => Ok(Some(l)),
                    Err(Error::InfeasibleAlignment(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            }
        }
    }
}

struct UttLabels {
    mel: Vec<usize>,
    phones: Vec<usize>,
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains the head (and the encoder unless frozen) on labelled utterances
/// with a tri-phase schedule.
pub fn finetune<F: Real>(
    model: &mut Downstream<F>,
    corpus: &Corpus,
    cfg: &FinetuneConfig,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    if cfg.batch == 0 {
        return Err(Error::Config("finetune.batch must be >= 1".into()));
    }
    let labels: Vec<UttLabels> = corpus
        .utterances
        .iter()
        .map(|u| {
            Ok(UttLabels {
                mel: u.frame_labels.clone().ok_or_else(|| Error::Config(format!("{} has no labels", u.id)))?,
                phones: u.phones().unwrap_or_default(),
            })
        })
        .collect::<Result<_>>()?;
    let schedule = ScheduleConfig::tri_phase(cfg.lr, cfg.steps);
    schedule.validate()?;
    let agg_idx = model.encoder.agg_index().expect("student");
    let frozen: Option<Vec<Vec<Tensor<F>>>> = if cfg.freeze {
        Some(corpus.utterances.iter().map(|u| frozen_layers(&model.encoder, &u.clean)).collect::<Result<_>>()?)
    } else {
        None
    };
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam_enc = Adam::new(adam_cfg, model.encoder.params.tensors());
    let mut adam_head = Adam::new(adam_cfg, model.head.tensors());
    for step in 0..cfg.steps {
        let start = Instant::now();
        let mut r = rng::rng_for(cfg.seed, "finetune_batch", &[step as u64]);
        let ids: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..corpus.len())).collect();
        let mut g_enc: Vec<Tensor<F>> = model.encoder.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut g_head: Vec<Tensor<F>> = model.head.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut losses = Vec::new();
        let mut frames = 0;
        let mut per_utt = Vec::new();
        for &id in &ids {
            let mut g = Graph::new();
            let (enc_vars, agg) = match &frozen {
                Some(f) => {
                    let lv: Vec<Var> = f[id].iter().map(|t| g.constant(t.clone())).collect();
                    let logits = g.param(model.encoder.params.tensors()[agg_idx].clone());
                    let agg = aggregate_layers(&mut g, &lv, logits)?;
                    (vec![(agg_idx, logits)], agg)
                }
                None => {
                    let b = model.encoder.bind(&mut g, true);
                    let out = model.encoder.encode(&mut g, &b, &corpus.utterances[id].clean.cast())?;
                    let agg = model.encoder.aggregate(&mut g, &b, &out)?;
                    (b.0.iter().copied().enumerate().collect(), agg)
                }
            };
            let w = g.param(model.head.tensors()[0].clone());
            let b = g.param(model.head.tensors()[1].clone());
            let Some(loss) = model.utterance_loss(&mut g, agg, w, b, &labels[id])? else { continue };
            frames += corpus.utterances[id].n_frames();
            let grads = g.backward(loss)?;
            losses.push(g.value(loss).data()[0].f64());
            per_utt.push((enc_vars.iter().map(|&(i, v)| (i, grads.wrt(v))).collect::<Vec<_>>(), [grads.wrt(w), grads.wrt(b)]));
        }
        if losses.is_empty() {
            continue;
        }
        let scale = F::c(1.0 / losses.len() as f64);
        for (enc, head) in &per_utt {
            for (i, gr) in enc {
                g_enc[*i].data_mut().iter_mut().zip(gr.data()).for_each(|(a, v)| *a += scale * *v);
            }
            for (acc, gr) in g_head.iter_mut().zip(head) {
                acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, v)| *a += scale * *v);
            }
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: step as u64, reason: format!("finetune loss is {loss}") });
        }
        let lr = lr_at(&schedule, step);
        adam_enc.step(model.encoder.params.tensors_mut(), &g_enc, lr)?;
        adam_head.step(model.head.tensors_mut(), &g_head, lr)?;
        on_step(&StepRecord {
            step,
            phase: format!("finetune.{}", model.kind.name()),
            loss,
            lr,
            frames,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
    }
    Ok(())
}
