//! Input perturbations for the two encoder branches: multi-condition noise
//! mixing and SpecAugment on the student side, random positional shifting on
//! the teacher side.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::{power, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub n_time_masks: usize,
    pub max_time_mask_frames: usize,
    pub n_freq_masks: usize,
    pub max_freq_mask_bins: usize,
    pub freq_mask_noise_std: f64,
    pub max_shift_frames: usize,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            snr_db_min: 5.0,
            snr_db_max: 20.0,
            n_time_masks: 2,
            max_time_mask_frames: 20,
            n_freq_masks: 2,
            max_freq_mask_bins: 8,
            freq_mask_noise_std: 0.1,
            max_shift_frames: 16,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves inputs untouched.
    pub fn identity() -> Self {
        Self {
            n_time_masks: 0,
            n_freq_masks: 0,
            max_time_mask_frames: 0,
            max_freq_mask_bins: 0,
            max_shift_frames: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.snr_db_min <= self.snr_db_max) {
            return Err(Error::Config("augment.snr_db_min must not exceed augment.snr_db_max".into()));
        }
        if !(self.freq_mask_noise_std >= 0.0) {
            return Err(Error::Config("augment.freq_mask_noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// What SpecAugment and shifting did to an input.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskRecord {
    /// Half-open frame intervals zeroed.
    pub time: Vec<(usize, usize)>,
    /// Half-open mel-bin intervals replaced by noise.
    pub freq: Vec<(usize, usize)>,
    pub shift: usize,
}

impl MaskRecord {
    pub fn covers(&self, bin: usize, frame: usize) -> bool {
        self.time.iter().any(|&(a, b)| (a..b).contains(&frame)) || self.freq.iter().any(|&(a, b)| (a..b).contains(&bin))
    }
}

/// Noise cropped at a seeded offset and scaled so that
/// `10·log10(P_clean / P_noise) = snr_db`.
pub fn scaled_noise(clean: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    if noise.len() < clean.len() {
        return Err(Error::Contract(format!("noise ({}) shorter than clean ({})", noise.len(), clean.len())));
    }
    let mut r = rng::rng_for(seed, "mix_noise", &[]);
    let offset = r.random_range(0..=noise.len() - clean.len());
    let crop = &noise.samples[offset..offset + clean.len()];
    let (pc, pn) = (power(&clean.samples), power(crop));
    if pc == 0.0 || pn == 0.0 {
        return Err(Error::DegenerateSignal("zero-power clean or noise signal".into()));
    }
    let gain = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(crop.iter().map(|v| v * gain).collect())
}

/// Adds noise at `snr_db` and clips to [-1, 1]. Labels are preserved.
pub fn mix_noise(clean: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    let n = scaled_noise(clean, noise, snr_db, seed)?;
    let samples = clean.samples.iter().zip(&n).map(|(c, v)| (c + v).clamp(-1.0, 1.0)).collect();
    Waveform::new(samples, clean.labels.clone())
}

/// SpecAugment: frequency bands are filled with Gaussian noise, then time
/// spans are zeroed. Cells outside the returned record are untouched.
pub fn spec_augment(m: &MelSpectrogram, policy: &AugmentPolicy, seed: u64) -> Result<(MelSpectrogram, MaskRecord)> {
    let (bins, frames) = m.values.dims2()?;
    let mut r = rng::rng_for(seed, "spec_augment", &[]);
    let mut values = m.values.data().to_vec();
    let mut record = MaskRecord::default();
    let normal = Normal::new(0.0, policy.freq_mask_noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..policy.n_freq_masks {
        let width = r.random_range(0..=policy.max_freq_mask_bins.min(bins));
        let start = r.random_range(0..=bins - width);
        if width == 0 {
            continue;
        }
        for b in start..start + width {
            for v in &mut values[b * frames..(b + 1) * frames] {
                *v = normal.sample(&mut r);
            }
        }
        record.freq.push((start, start + width));
    }
    for _ in 0..policy.n_time_masks {
        let width = r.random_range(0..=policy.max_time_mask_frames.min(frames));
        let start = r.random_range(0..=frames - width);
        if width == 0 {
            continue;
        }
        for b in 0..bins {
            values[b * frames + start..b * frames + start + width].fill(0.0);
        }
        record.time.push((start, start + width));
    }
    let out = MelSpectrogram { values: Tensor::new(vec![bins, frames], values)?, hop: m.hop, frame_labels: m.frame_labels.clone() };
    Ok((out, record))
}

/// Prepends `p ~ U[0, max_shift]` all-zero frames.
pub fn positional_shift(m: &MelSpectrogram, max_shift: usize, seed: u64) -> Result<(MelSpectrogram, usize)> {
    let mut r = rng::rng_for(seed, "positional_shift", &[]);
    let p = r.random_range(0..=max_shift);
    Ok((shift_by(m, p)?, p))
}

/// Prepends exactly `p` zero frames.
pub fn shift_by(m: &MelSpectrogram, p: usize) -> Result<MelSpectrogram> {
    if p == 0 {
        return Ok(m.clone());
    }
    let (bins, frames) = m.values.dims2()?;
    let t = frames + p;
    let mut values = vec![0.0; bins * t];
    for b in 0..bins {
        values[b * t + p..(b + 1) * t].copy_from_slice(&m.values.data()[b * frames..(b + 1) * frames]);
    }
    let frame_labels = m.frame_labels.as_ref().map(|l| {
        let first = l.first().copied().unwrap_or(0);
        std::iter::repeat_n(first, p).chain(l.iter().copied()).collect()
    });
    Ok(MelSpectrogram { values: Tensor::new(vec![bins, t], values)?, hop: m.hop, frame_labels })
}

/// Frames to drop from the shifted teacher output and the common length
/// of both streams after realignment.
pub fn realign(teacher_frames: usize, student_frames: usize, shift: usize, downsample: usize) -> (usize, usize) {
    let drop = shift.div_ceil(downsample.max(1));
    let len = teacher_frames.saturating_sub(drop).min(student_frames);
    (drop, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_mel, synth_noise, synth_utterance, FeatureConfig, NoiseKind, SynthSpec};

    fn mel() -> MelSpectrogram {
        let w = synth_utterance(&SynthSpec::default(), 3).unwrap();
        log_mel(&w, &FeatureConfig::default()).unwrap()
    }

    #[test]
    fn high_snr_is_nearly_clean() {
        let clean = synth_utterance(&SynthSpec::default(), 1).unwrap();
        let noise = synth_noise(NoiseKind::White, clean.len() + 500, 2).unwrap();
        let out = mix_noise(&clean, &noise, 100.0, 9).unwrap();
        let diff = out.samples.iter().zip(&clean.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-4);
    }

    #[test]
    fn zero_db_has_equal_power() {
        let clean = synth_utterance(&SynthSpec::default(), 1).unwrap();
        let noise = synth_noise(NoiseKind::Babble, clean.len() + 500, 2).unwrap();
        for snr in [0.0, 7.5, -3.0] {
            let n = scaled_noise(&clean, &noise, snr, 4).unwrap();
            let ratio = power(&clean.samples) / power(&n);
            assert!((ratio / 10f64.powf(snr / 10.0) - 1.0).abs() < 1e-6);
        }
        assert_eq!(mix_noise(&clean, &noise, 0.0, 4).unwrap(), mix_noise(&clean, &noise, 0.0, 4).unwrap());
    }

    #[test]
    fn silent_inputs_are_degenerate() {
        let clean = Waveform::new(vec![0.0; 100], None).unwrap();
        let noise = synth_noise(NoiseKind::White, 200, 2).unwrap();
        assert!(matches!(mix_noise(&clean, &noise, 0.0, 1), Err(Error::DegenerateSignal(_))));
    }

    #[test]
    fn zero_masks_is_identity() {
        let m = mel();
        let (out, rec) = spec_augment(&m, &AugmentPolicy::identity(), 5).unwrap();
        assert_eq!(out, m);
        assert_eq!(rec, MaskRecord::default());
    }

    #[test]
    fn time_masks_are_exact_zero() {
        let m = mel();
        let policy = AugmentPolicy { n_freq_masks: 3, n_time_masks: 3, ..AugmentPolicy::default() };
        for seed in 0..20 {
            let (out, rec) = spec_augment(&m, &policy, seed).unwrap();
            for &(a, b) in &rec.time {
                for t in a..b {
                    for bin in 0..m.n_mels() {
                        assert_eq!(out.values.at(bin, t), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn shift_prepends_zero_frames() {
        let m = mel();
        let out = shift_by(&m, 4).unwrap();
        assert_eq!(out.n_frames(), m.n_frames() + 4);
        for b in 0..m.n_mels() {
            for t in 0..4 {
                assert_eq!(out.values.at(b, t), 0.0);
            }
            for t in 0..m.n_frames() {
                assert_eq!(out.values.at(b, t + 4).to_bits(), m.values.at(b, t).to_bits());
            }
        }
        let (same, p) = positional_shift(&m, 0, 3).unwrap();
        assert_eq!((same, p), (m, 0));
    }

    #[test]
    fn realignment_rule() {
        assert_eq!(realign(13, 13, 0, 8), (0, 13));
        assert_eq!(realign(15, 13, 9, 8), (2, 13));
        assert_eq!(realign(14, 13, 8, 8), (1, 13));
        assert_eq!(realign(14, 13, 3, 8), (1, 13));
    }
}
