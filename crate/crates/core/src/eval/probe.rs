use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoder::{aggregate_layers, Encoder};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::augment::mix_noise;
use crate::dsp::SynthSpec;
use crate::trainer::{encoder_labels, frozen_layers, Corpus, NoiseMix};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    /// Fraction of utterances used for training; the rest are held out.
    pub train_frac: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 1e-2, train_frac: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub train_frames: usize,
    pub test_frames: usize,
}

/// Frozen aggregation inputs of one utterance and its frame labels.
#[derive(Clone, Debug)]
pub struct FrozenUtterance {
    /// `[T × D]` per aggregated layer.
    pub layers: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
}

pub fn frozen_utterances(encoder: &Encoder<f32>, corpus: &Corpus) -> Result<Vec<FrozenUtterance>> {
    let ds = encoder.downsample();
    corpus
        .utterances
        .iter()
        .map(|u| {
            let layers: Vec<Tensor<f64>> = frozen_layers(encoder, &u.clean)?.iter().map(Tensor::cast).collect();
            let mel = u.frame_labels.as_ref().ok_or_else(|| Error::Config(format!("{} has no labels", u.id)))?;
            let labels = encoder_labels(mel, layers[0].dim(0), ds);
            Ok(FrozenUtterance { layers, labels })
        })
        .collect()
}

fn stack(items: &[&FrozenUtterance]) -> Result<(Vec<Tensor<f64>>, Vec<usize>)> {
    let n_layers = items[0].layers.len();
    let d = items[0].layers[0].dim(1);
    let mut layers = vec![Vec::new(); n_layers];
    let mut labels = Vec::new();
    for it in items {
        if it.layers.len() != n_layers || it.layers.iter().any(|l| l.dim(1) != d || l.dim(0) != it.labels.len()) {
            return Err(crate::error::dim_err("probe features are inconsistent"));
        }
        for (acc, l) in layers.iter_mut().zip(&it.layers) {
            acc.extend_from_slice(l.data());
        }
        labels.extend_from_slice(&it.labels);
    }
    let n = labels.len();
    let layers = layers.into_iter().map(|v| Tensor::new(vec![n, d], v)).collect::<Result<_>>()?;
    Ok((layers, labels))
}

fn accuracy(layers: &[Tensor<f64>], labels: &[usize], params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::inference();
    let lv: Vec<Var> = layers.iter().map(|t| g.constant(t.clone())).collect();
    let p: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
    let agg = aggregate_layers(&mut g, &lv, p[0])?;
    let logits = g.linear(agg, p[1], p[2])?;
    let l = g.value(logits);
    let correct = (0..labels.len())
        .filter(|&t| {
            let row = l.row(t);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best == labels[t]
        })
        .count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Trains softmax-weighted layer aggregation plus a linear softmax
/// classifier on frozen features (80/20 split by utterance) and reports
/// held-out frame accuracy.
pub fn probe_features(items: &[FrozenUtterance], n_classes: usize, seed: u64, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let mut seen = vec![false; n_classes];
    for it in items {
        for &l in &it.labels {
            *seen.get_mut(l).ok_or_else(|| crate::error::dim_err(format!("label {l} outside {n_classes} classes")))? = true;
        }
    }
    if seen.iter().filter(|s| **s).count() < 2 {
        return Err(Error::Degenerate("linear probe needs at least two classes in the data".into()));
    }
    if items.len() < 2 {
        return Err(Error::Degenerate("linear probe needs at least two utterances".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng::rng_for(seed, "probe_split", &[]));
    let n_train = ((items.len() as f64 * cfg.train_frac).round() as usize).clamp(1, items.len() - 1);
    let train: Vec<&FrozenUtterance> = order[..n_train].iter().map(|&i| &items[i]).collect();
    let test: Vec<&FrozenUtterance> = order[n_train..].iter().map(|&i| &items[i]).collect();
    let (tr_layers, tr_labels) = stack(&train)?;
    let (te_layers, te_labels) = stack(&test)?;
    let d = tr_layers[0].dim(1);

    let mut r = rng::rng_for(seed, "probe_init", &[]);
    let bound = 1.0 / (d as f64).sqrt();
    let mut params = vec![
        Tensor::zeros(&[tr_layers.len()]),
        Tensor::from_fn(&[d, n_classes], |_| r.random_range(-bound..bound)),
        Tensor::zeros(&[n_classes]),
    ];
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &params);
    let rows: Vec<usize> = (0..tr_labels.len()).collect();
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let lv: Vec<Var> = tr_layers.iter().map(|t| g.constant(t.clone())).collect();
        let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let agg = aggregate_layers(&mut g, &lv, p[0])?;
        let logits = g.linear(agg, p[1], p[2])?;
        let loss = crate::objectives::cross_entropy(&mut g, logits, &tr_labels, &rows)?;
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor<f64>> = p.iter().map(|&v| grads.wrt(v)).collect();
        adam.step(&mut params, &gs, cfg.lr)?;
    }
    Ok(ProbeResult {
        accuracy: accuracy(&te_layers, &te_labels, &params)?,
        train_accuracy: accuracy(&tr_layers, &tr_labels, &params)?,
        train_frames: tr_labels.len(),
        test_frames: te_labels.len(),
    })
}

/// Linear-probe accuracy of a frozen encoder on a labelled corpus.
pub fn linear_probe_eval(encoder: &Encoder<f32>, corpus: &Corpus, seed: u64, cfg: &ProbeConfig) -> Result<ProbeResult> {
    probe_features(&frozen_utterances(encoder, corpus)?, corpus.n_classes, seed, cfg)
}

/// Held-out labelled corpus for probing. With `snr_db` set every utterance
/// is mixed with babble at that SNR before feature extraction; labels stay
/// those of the clean signal.
pub fn probe_corpus(n: usize, spec: &SynthSpec, seed: u64, snr_db: Option<f64>) -> Result<Corpus> {
    let clean = Corpus::synthetic(n, spec, seed, NoiseMix::Babble)?;
    let Some(snr) = snr_db else { return Ok(clean) };
    let waves = clean
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let noise = &clean.noise[i % clean.noise.len()];
            Ok((u.id.clone(), mix_noise(&u.wave, noise, snr, i as u64)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::from_waveforms(waves, clean.n_classes, clean.features.clone(), NoiseMix::Babble, seed)
}
