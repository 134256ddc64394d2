use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hann,
    Rectangular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: f64,
    pub window: Window,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { n_fft: 400, hop: 160, n_mels: 40, fmin: 20.0, fmax: 7600.0, sample_rate: 16000.0, window: Window::Hann }
    }
}

impl FeatureConfig {
    /// Number of frames produced for `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            1 + (len - self.n_fft) / self.hop
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// Log-mel energies `[n_mels × frames]` plus optional per-frame classes.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor<f64>,
    pub hop: usize,
    pub frame_labels: Option<Vec<usize>>,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.dim(0)
    }

    pub fn n_frames(&self) -> usize {
        self.values.dim(1)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn window(kind: Window, n: usize) -> Vec<f64> {
    match kind {
        // periodic Hann
        Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
        Window::Rectangular => vec![1.0; n],
    }
}

/// Power spectrogram `[n_fft/2+1 × frames]` of a windowed, hopped signal.
pub fn stft_power(w: &Waveform, cfg: &FeatureConfig) -> Result<Tensor<f64>> {
    if cfg.n_fft < 2 || cfg.n_fft % 2 != 0 {
        return Err(Error::Config(format!("n_fft {} must be even and >= 2", cfg.n_fft)));
    }
    if cfg.hop == 0 || cfg.hop > cfg.n_fft {
        return Err(Error::Config(format!("hop {} must be in [1, n_fft]", cfg.hop)));
    }
    if w.len() < cfg.n_fft {
        return Err(Error::SequenceTooShort(format!("{} samples < n_fft {}", w.len(), cfg.n_fft)));
    }
    let frames = cfg.n_frames(w.len());
    let bins = cfg.n_bins();
    let win = window(cfg.window, cfg.n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut out = vec![0.0; bins * frames];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(w.samples[start + i] * win[i], 0.0);
        }
        fft.process(&mut buf);
        for (b, c) in buf.iter().take(bins).enumerate() {
            out[b * frames + t] = c.norm_sqr();
        }
    }
    Tensor::new(vec![bins, frames], out)
}

/// Triangular mel filters `[n_mels × n_fft/2+1]`, each scaled to peak at 1.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sr: f64, fmin: f64, fmax: f64) -> Result<Tensor<f64>> {
    if n_mels < 2 {
        return Err(Error::Config("n_mels must be >= 2".into()));
    }
    if !(0.0 <= fmin && fmin < fmax && fmax <= sr / 2.0) {
        return Err(Error::Config(format!("need 0 <= fmin < fmax <= sr/2, got {fmin}..{fmax}")));
    }
    let bins = n_fft / 2 + 1;
    if n_mels >= bins {
        return Err(Error::Config(format!("{n_mels} filters exceed {bins} FFT bins")));
    }
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |b: usize| b as f64 * sr / n_fft as f64;
    let mut out = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut out[m * bins..(m + 1) * bins];
        for (b, slot) in row.iter_mut().enumerate() {
            let f = bin_hz(b);
            *slot = if f > lo && f <= centre {
                (f - lo) / (centre - lo)
            } else if f > centre && f < hi {
                (hi - f) / (hi - centre)
            } else {
                0.0
            };
        }
        let peak = row.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::Config(format!(
                "mel filter {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; too many filters for n_fft {n_fft}"
            )));
        }
        row.iter_mut().for_each(|v| *v /= peak);
    }
    Tensor::new(vec![n_mels, bins], out)
}

/// Natural-log mel energies with a floor, plus majority-vote frame labels.
pub fn log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    let power = stft_power(w, cfg)?;
    let fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax)?;
    let frames = power.dim(1);
    let bins = power.dim(0);
    let mut out = vec![0.0; cfg.n_mels * frames];
    for m in 0..cfg.n_mels {
        let filt = fb.row(m);
        for (b, &wgt) in filt.iter().enumerate() {
            if wgt == 0.0 {
                continue;
            }
            let prow = &power.data()[b * frames..(b + 1) * frames];
            for (o, p) in out[m * frames..(m + 1) * frames].iter_mut().zip(prow) {
                *o += wgt * p;
            }
        }
    }
    debug_assert_eq!(bins, cfg.n_bins());
    out.iter_mut().for_each(|v| *v = v.max(LOG_FLOOR).ln());
    let frame_labels = w.labels.as_ref().map(|segs| {
        (0..frames)
            .map(|t| {
                let (s, e) = (t * cfg.hop, t * cfg.hop + cfg.n_fft);
                let mut counts: Vec<usize> = Vec::new();
                for seg in segs {
                    let overlap = seg.end.min(e).saturating_sub(seg.start.max(s));
                    if overlap > 0 {
                        if counts.len() <= seg.class {
                            counts.resize(seg.class + 1, 0);
                        }
                        counts[seg.class] += overlap;
                    }
                }
                // first maximum wins, so ties go to the lower class id
                let mut best = 0;
                for (c, &n) in counts.iter().enumerate() {
                    if n > counts[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    });
    Ok(MelSpectrogram { values: Tensor::new(vec![cfg.n_mels, frames], out)?, hop: cfg.hop, frame_labels })
}

/// Orthonormal DCT-II along the mel axis, keeping `n_coeff` coefficients.
pub fn mfcc(m: &MelSpectrogram, n_coeff: usize) -> Result<Tensor<f64>> {
    let (n, frames) = m.values.dims2()?;
    if n_coeff > n || n_coeff == 0 {
        return Err(Error::Config(format!("n_coeff {n_coeff} must be in [1, n_mels={n}]")));
    }
    let mut basis = vec![0.0; n_coeff * n];
    for k in 0..n_coeff {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            basis[k * n + i] = s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    let mut out = vec![0.0; n_coeff * frames];
    crate::tensor::kernels::matmul_acc(&basis, m.values.data(), n_coeff, n, frames, &mut out);
    Tensor::new(vec![n_coeff, frames], out)
}
