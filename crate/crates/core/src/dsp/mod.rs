//! Synthetic speech and the acoustic front end (STFT, log-mel, MFCC).

mod features;
mod synth;
pub mod wav;

pub use features::{
    hz_to_mel, log_mel, mel_filterbank, mel_to_hz, mfcc, stft_power, FeatureConfig, MelSpectrogram, Window,
    LOG_FLOOR,
};
pub use synth::{synth_noise, synth_utterance, NoiseKind, SynthSpec};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Labelled span `[start, end)` in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub labels: Option<Vec<Segment>>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, labels: Option<Vec<Segment>>) -> Result<Self> {
        let w = Self { samples, sample_rate: SAMPLE_RATE, labels };
        w.validate()?;
        Ok(w)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::DegenerateSignal("non-finite sample".into()));
        }
        if let Some(labels) = &self.labels {
            let mut prev_end = 0;
            for seg in labels {
                if seg.start < prev_end || seg.end <= seg.start || seg.end > self.samples.len() {
                    return Err(Error::Contract(format!("bad label segment {seg:?}")));
                }
                prev_end = seg.end;
            }
        }
        Ok(())
    }

    /// Class sequence of the label segments.
    pub fn class_sequence(&self) -> Vec<usize> {
        self.labels.as_ref().map(|l| l.iter().map(|s| s.class).collect()).unwrap_or_default()
    }
}

/// Mean power of a signal.
pub fn power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64
}
