use crate::augment::{mix_noise, spec_augment, AugmentPolicy};
use crate::dsp::{log_mel, synth_noise, synth_utterance, FeatureConfig, MelSpectrogram, NoiseKind, SynthSpec, Waveform};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Clips per noise kind kept in the mixing pool.
const NOISE_CLIPS: usize = 4;

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub wave: Waveform,
    /// Normalised clean log-mel, `[n_mels × T]`.
    pub clean: Tensor<f64>,
    /// Mel-rate phone labels, when the source is labelled.
    pub frame_labels: Option<Vec<usize>>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.clean.dim(1)
    }

    /// Phone label sequence with adjacent duplicates merged.
    pub fn phones(&self) -> Option<Vec<usize>> {
        self.wave.labels.as_ref().map(|_| self.wave.class_sequence())
    }
}

/// Which noise kinds the student branch may be mixed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMix {
    White,
    Babble,
    Mixed,
}

impl std::str::FromStr for NoiseMix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(Self::White),
            "babble" => Ok(Self::Babble),
            "mixed" => Ok(Self::Mixed),
            o => Err(Error::Config(format!("unknown noise mix {o:?}"))),
        }
    }
}

impl NoiseMix {
    pub fn name(self) -> &'static str {
        match self {
            Self::White => "white",
            Self::Babble => "babble",
            Self::Mixed => "mixed",
        }
    }

    fn kinds(self) -> &'static [NoiseKind] {
        match self {
            Self::White => &[NoiseKind::White],
            Self::Babble => &[NoiseKind::Babble],
            Self::Mixed => &[NoiseKind::White, NoiseKind::Babble],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub features: FeatureConfig,
    pub noise: Vec<Waveform>,
    pub n_classes: usize,
}

/// Zero-mean, unit-variance scaling over the whole utterance.
pub fn normalize(m: &Tensor<f64>) -> Tensor<f64> {
    let n = m.len().max(1) as f64;
    let mean = m.data().iter().sum::<f64>() / n;
    let var = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-5);
    m.map(|v| (v - mean) * inv)
}

/// Seed of the `i`-th synthetic utterance of a corpus.
pub fn utterance_seed(corpus_seed: u64, i: usize) -> u64 {
    rng::derive(corpus_seed, &[rng::label("utterance"), i as u64])
}

impl Corpus {
    /// `n` synthetic utterances; utterance `i` uses [`utterance_seed`].
    pub fn synthetic(n: usize, spec: &SynthSpec, seed: u64, noise: NoiseMix) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("corpus needs at least one utterance".into()));
        }
        let waves = (0..n)
            .map(|i| {
                let s = utterance_seed(seed, i);
                Ok((format!("synth:{s}"), synth_utterance(spec, s)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_waveforms(waves, spec.n_classes(), FeatureConfig::default(), noise, seed)
    }

    pub fn from_waveforms(
        waves: Vec<(String, Waveform)>,
        n_classes: usize,
        features: FeatureConfig,
        noise: NoiseMix,
        seed: u64,
    ) -> Result<Self> {
        let mut utterances = Vec::with_capacity(waves.len());
        for (id, wave) in waves {
            let mel = log_mel(&wave, &features)?;
            if mel.n_frames() == 0 {
                return Err(Error::SequenceTooShort(format!("{id} is shorter than one analysis window")));
            }
            utterances.push(Utterance { id, clean: normalize(&mel.values), frame_labels: mel.frame_labels, wave });
        }
        let longest = utterances.iter().map(|u| u.wave.len()).max().unwrap_or(0);
        let mut pool = Vec::new();
        for (k, kind) in noise.kinds().iter().enumerate() {
            for c in 0..NOISE_CLIPS {
                let s = rng::derive(seed, &[rng::label("noise_pool"), k as u64, c as u64]);
                pool.push(synth_noise(*kind, longest + features.sample_rate as usize, s)?);
            }
        }
        Ok(Self { utterances, features, noise: pool, n_classes })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.utterances.iter().map(Utterance::n_frames).collect()
    }

    /// Student-branch input: noise mixed at a random SNR, re-analysed,
    /// normalised, then SpecAugment. With `noisy == false` only SpecAugment
    /// (per `policy`) is applied to the clean features.
    pub fn student_input(&self, i: usize, policy: &AugmentPolicy, noisy: bool, seed: u64) -> Result<Tensor<f64>> {
        use rand::Rng;
        let u = &self.utterances[i];
        let base = if noisy && !self.noise.is_empty() {
            let mut r = rng::rng_for(seed, "student_noise", &[]);
            let clip = &self.noise[r.random_range(0..self.noise.len())];
            let snr = r.random_range(policy.snr_db_min..=policy.snr_db_max);
            let mixed = mix_noise(&u.wave, clip, snr, r.random())?;
            normalize(&log_mel(&mixed, &self.features)?.values)
        } else {
            u.clean.clone()
        };
        let mel = MelSpectrogram { values: base, hop: self.features.hop, frame_labels: None };
        Ok(spec_augment(&mel, policy, rng::derive(seed, &[rng::label("spec_augment")]))?.0.values)
    }
}

/// Label of encoder frame `u`: the mel label at the centre of its stride
/// window, `min(u·ds + ds/2, T − 1)`.
pub fn encoder_labels(mel_labels: &[usize], t_out: usize, downsample: usize) -> Vec<usize> {
    let last = mel_labels.len().saturating_sub(1);
    (0..t_out).map(|u| mel_labels[(u * downsample + downsample / 2).min(last)]).collect()
}
