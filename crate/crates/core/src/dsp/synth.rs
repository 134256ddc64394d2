use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Segment, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of the synthetic vowel-like corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// `(F1, F2)` in Hz for each phone class.
    pub formants: Vec<(f64, f64)>,
    pub min_dur_s: f64,
    pub max_dur_s: f64,
    pub min_seg_ms: f64,
    pub max_seg_ms: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Relative per-segment formant jitter.
    pub formant_jitter: f64,
    /// Relative per-utterance formant scaling (speaker vocal-tract spread).
    pub speaker_spread: f64,
    /// Level of the aspiration noise relative to the voiced source.
    pub breath: f64,
    pub amplitude: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            formants: vec![(730.0, 1090.0), (270.0, 2290.0), (300.0, 870.0), (530.0, 1840.0), (570.0, 840.0)],
            min_dur_s: 1.0,
            max_dur_s: 2.0,
            min_seg_ms: 120.0,
            max_seg_ms: 300.0,
            f0_min: 90.0,
            f0_max: 260.0,
            formant_jitter: 0.08,
            speaker_spread: 0.0,
            breath: 0.05,
            amplitude: 0.9,
        }
    }
}

impl SynthSpec {
    pub fn n_classes(&self) -> usize {
        self.formants.len()
    }

    /// Keeps the first `n` classes of the default inventory, extending it
    /// with evenly spread formant pairs when `n` exceeds it.
    pub fn with_classes(mut self, n: usize) -> Self {
        let base = Self::default().formants;
        self.formants = (0..n)
            .map(|i| base.get(i).copied().unwrap_or((300.0 + 97.0 * i as f64 % 600.0, 900.0 + 211.0 * i as f64 % 1500.0)))
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.formants.is_empty() {
            return Err(Error::Config("empty phone inventory".into()));
        }
        if !(0.5..=30.0).contains(&self.min_dur_s) || !(0.5..=30.0).contains(&self.max_dur_s) || self.min_dur_s > self.max_dur_s {
            return Err(Error::Config(format!(
                "duration range [{}, {}] s must lie within [0.5, 30]",
                self.min_dur_s, self.max_dur_s
            )));
        }
        if self.min_seg_ms <= 0.0 || self.min_seg_ms > self.max_seg_ms {
            return Err(Error::Config("segment duration range".into()));
        }
        if self.f0_min <= 0.0 || self.f0_min > self.f0_max {
            return Err(Error::Config("f0 range".into()));
        }
        if !(0.0..0.5).contains(&self.speaker_spread) || !(0.0..0.5).contains(&self.formant_jitter) {
            return Err(Error::Config("formant jitter and speaker spread must be in [0, 0.5)".into()));
        }
        if !(0.0..=0.9).contains(&self.amplitude) || self.amplitude == 0.0 {
            return Err(Error::Config("amplitude must be in (0, 0.9]".into()));
        }
        Ok(())
    }
}

fn resonance(f: f64, centre: f64, bandwidth: f64) -> f64 {
    let x = (f - centre) / bandwidth;
    1.0 / (1.0 + x * x)
}

/// Renders one voiced segment: harmonics of `f0` shaped by two formants.
fn render_vowel(out: &mut [f64], f0: f64, f1: f64, f2: f64, phase0: f64) {
    let sr = SAMPLE_RATE as f64;
    let n_harm = ((4000.0 / f0) as usize).max(1);
    let amps: Vec<f64> = (1..=n_harm)
        .map(|h| {
            let f = h as f64 * f0;
            (resonance(f, f1, 80.0) + 0.7 * resonance(f, f2, 120.0)) / (1.0 + f / 2000.0)
        })
        .collect();
    for (i, s) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut v = 0.0;
        for (h, a) in amps.iter().enumerate() {
            v += a * (2.0 * PI * (h + 1) as f64 * f0 * t + phase0 * (h + 1) as f64).sin();
        }
        *s = v;
    }
}

/// Deterministic synthetic utterance with aligned phone labels.
pub fn synth_utterance(spec: &SynthSpec, seed: u64) -> Result<Waveform> {
    spec.validate()?;
    let mut rng = rng::rng_for(seed, "synth_utterance", &[]);
    let sr = SAMPLE_RATE as f64;
    let dur = rng.random_range(spec.min_dur_s..=spec.max_dur_s);
    let n = (dur * sr).round() as usize;
    let f0 = rng.random_range(spec.f0_min..=spec.f0_max);
    let vtl = 1.0 + spec.speaker_spread * rng.random_range(-1.0..=1.0);
    let breath = Normal::new(0.0, 1.0).expect("unit normal");

    let mut samples = vec![0.0; n];
    let mut labels = Vec::new();
    let mut pos = 0;
    let mut prev: Option<usize> = None;
    let k = spec.n_classes();
    while pos < n {
        let seg_ms = rng.random_range(spec.min_seg_ms..=spec.max_seg_ms);
        let mut len = (seg_ms * sr / 1000.0) as usize;
        let min_len = (spec.min_seg_ms * sr / 1000.0) as usize;
        // fold a short tail into the final segment
        if n - pos < len + min_len {
            len = n - pos;
        }
        let class = match (prev, k) {
            (_, 1) => 0,
            (None, _) => rng.random_range(0..k),
            (Some(p), _) => (p + rng.random_range(1..k)) % k,
        };
        let (f1, f2) = spec.formants[class];
        let j1 = vtl * (1.0 + spec.formant_jitter * rng.random_range(-1.0..=1.0));
        let j2 = vtl * (1.0 + spec.formant_jitter * rng.random_range(-1.0..=1.0));
        let seg_f0 = f0 * (1.0 + 0.05 * rng.random_range(-1.0..=1.0));
        let level = rng.random_range(0.6..=1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let seg = &mut samples[pos..pos + len];
        render_vowel(seg, seg_f0, f1 * j1, f2 * j2, phase);
        let peak = seg.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let fade = (0.01 * sr) as usize;
        for (i, s) in seg.iter_mut().enumerate() {
            let edge = i.min(len - 1 - i);
            let env = if edge < fade { 0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos() } else { 1.0 };
            *s = level * env * (*s / peak) + spec.breath * breath.sample(&mut rng);
        }
        labels.push(Segment { start: pos, end: pos + len, class });
        prev = Some(class);
        pos += len;
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let gain = spec.amplitude / peak;
    samples.iter_mut().for_each(|s| *s *= gain);
    Waveform::new(samples, Some(labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Babble,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(Self::White),
            "babble" => Ok(Self::Babble),
            other => Err(Error::Config(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Zero-mean noise. `Babble` overlays several synthetic talkers.
pub fn synth_noise(kind: NoiseKind, length: usize, seed: u64) -> Result<Waveform> {
    if length == 0 {
        return Err(Error::Config("noise length must be positive".into()));
    }
    let mut rng = rng::rng_for(seed, "synth_noise", &[]);
    let mut samples = match kind {
        NoiseKind::White => {
            let normal = Normal::new(0.0, 0.3).expect("normal");
            (0..length).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; length];
            let mut buf = vec![0.0; length];
            for _ in 0..6 {
                let f0 = rng.random_range(90.0..260.0);
                let f1 = rng.random_range(250.0..800.0);
                let f2 = rng.random_range(800.0..2500.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                render_vowel(&mut buf, f0, f1, f2, phase);
                let rate = rng.random_range(2.0..6.0);
                let off = rng.random_range(0.0..2.0 * PI);
                for (i, (a, b)) in acc.iter_mut().zip(&buf).enumerate() {
                    let t = i as f64 / SAMPLE_RATE as f64;
                    *a += b * (0.5 + 0.5 * (2.0 * PI * rate * t + off).sin());
                }
            }
            acc
        }
    };
    let mean = samples.iter().sum::<f64>() / length as f64;
    samples.iter_mut().for_each(|s| *s -= mean);
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
    Waveform::new(samples, None)
}
