//! Flat `key = value` run configuration with dotted namespaces.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::augment::AugmentPolicy;
use crate::dsp::SynthSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{FrameDistance, ProbeConfig};
use crate::tensor::AdamConfig;
use crate::trainer::{
    Batching, FinetuneConfig, HeadKind, NoiseMix, Objective, PretrainConfig, ScheduleConfig, ScheduleKind,
};

/// Every accepted key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "42"),
    ("out", "runs/default"),
    ("run.label", "auto"),
    ("encoder.preset", "tiny"),
    ("data.manifest", ""),
    ("data.n_utterances", "200"),
    ("data.n_classes", "5"),
    ("data.speaker_spread", "0.0"),
    ("data.noise", "mixed"),
    ("augment.enabled", "true"),
    ("augment.snr_db_min", "5"),
    ("augment.snr_db_max", "20"),
    ("augment.n_time_masks", "2"),
    ("augment.max_time_mask", "20"),
    ("augment.n_freq_masks", "2"),
    ("augment.max_freq_mask", "8"),
    ("augment.freq_noise_std", "0.1"),
    ("shift.enabled", "true"),
    ("shift.max_frames", "16"),
    ("objective.kind", "contrastive"),
    ("objective.tau", "0.1"),
    ("objective.negatives", "all"),
    ("mask.start_prob", "0.08"),
    ("mask.span", "10"),
    ("kmeans.k", "10"),
    ("kmeans.iters", "25"),
    ("kmeans.layer", "0"),
    ("train.pretrain", "true"),
    ("train.steps", "300"),
    ("train.alpha", "0.999"),
    ("train.accum", "4"),
    ("train.batching", "dynamic"),
    ("train.frame_budget", "7200"),
    ("train.fixed_batch", "8"),
    ("train.lr", "3e-4"),
    ("train.schedule", "cosine"),
    ("train.warm_frac", "0.1"),
    ("train.hold_frac", "0.8"),
    ("train.checkpoint_every", "100"),
    ("finetune.head", "frame"),
    ("finetune.steps", "200"),
    ("finetune.batch", "8"),
    ("finetune.lr", "2e-3"),
    ("finetune.freeze", "true"),
    ("finetune.n_utterances", "100"),
    ("probe.steps", "300"),
    ("probe.lr", "0.01"),
    ("probe.snr_db", "5"),
    ("eval.n_utterances", "100"),
    ("eval.abx_instances", "200"),
    ("eval.distance", "angular"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key {key} has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        parse_bool(key, self.raw(key))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Resolved configuration in the same format the loader reads.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        EncoderConfig::from_preset_or_path(self.raw("encoder.preset"))
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let n: usize = self.get("data.n_classes")?;
        if n == 0 {
            return Err(Error::Config("data.n_classes must be >= 1".into()));
        }
        let spec = SynthSpec { speaker_spread: self.get("data.speaker_spread")?, ..SynthSpec::default().with_classes(n) };
        spec.validate()?;
        Ok(spec)
    }

    pub fn noise_mix(&self) -> Result<NoiseMix> {
        self.raw("data.noise").parse()
    }

    pub fn augment_policy(&self) -> Result<AugmentPolicy> {
        let p = AugmentPolicy {
            snr_db_min: self.get("augment.snr_db_min")?,
            snr_db_max: self.get("augment.snr_db_max")?,
            n_time_masks: self.get("augment.n_time_masks")?,
            max_time_mask_frames: self.get("augment.max_time_mask")?,
            n_freq_masks: self.get("augment.n_freq_masks")?,
            max_freq_mask_bins: self.get("augment.max_freq_mask")?,
            freq_mask_noise_std: self.get("augment.freq_noise_std")?,
            max_shift_frames: self.get("shift.max_frames")?,
            seed: self.seed()?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let steps: usize = self.get("train.steps")?;
        let lr: f64 = self.get("train.lr")?;
        let kind: ScheduleKind = self.raw("train.schedule").parse()?;
        let schedule = ScheduleConfig {
            kind,
            base_lr: lr,
            total_steps: steps,
            warm_frac: self.get("train.warm_frac")?,
            hold_frac: self.get("train.hold_frac")?,
        };
        let batching = match self.raw("train.batching") {
            "dynamic" => Batching::Dynamic { frame_budget: self.get("train.frame_budget")? },
            "fixed" => Batching::Fixed { per_batch: self.get("train.fixed_batch")? },
            o => return Err(Error::Config(format!("train.batching: expected dynamic or fixed, got {o:?}"))),
        };
        let negatives = match self.raw("objective.negatives") {
            "all" => None,
            _ => Some(self.get("objective.negatives")?),
        };
        let cfg = PretrainConfig {
            objective: self.raw("objective.kind").parse::<Objective>()?,
            steps,
            accum: self.get("train.accum")?,
            batching,
            alpha: self.get("train.alpha")?,
            tau: self.get("objective.tau")?,
            negatives,
            schedule,
            adam: AdamConfig { lr, ..AdamConfig::default() },
            policy: self.augment_policy()?,
            augment: self.flag("augment.enabled")?,
            shift: self.flag("shift.enabled")?,
            mask_start_prob: self.get("mask.start_prob")?,
            mask_span: self.get("mask.span")?,
            kmeans_k: self.get("kmeans.k")?,
            kmeans_iters: self.get("kmeans.iters")?,
            kmeans_layer: self.get("kmeans.layer")?,
            mfcc_coeffs: 13,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finetune(&self) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            head: self.raw("finetune.head").parse::<HeadKind>()?,
            steps: self.get("finetune.steps")?,
            batch: self.get("finetune.batch")?,
            lr: self.get("finetune.lr")?,
            freeze: self.flag("finetune.freeze")?,
            seed: self.seed()?,
        })
    }

    pub fn probe(&self) -> Result<ProbeConfig> {
        Ok(ProbeConfig { steps: self.get("probe.steps")?, lr: self.get("probe.lr")?, ..ProbeConfig::default() })
    }

    /// `None` means clean probe data.
    pub fn probe_snr(&self) -> Result<Option<f64>> {
        match self.raw("probe.snr_db") {
            "clean" | "inf" => Ok(None),
            _ => Ok(Some(self.get("probe.snr_db")?)),
        }
    }

    pub fn distance(&self) -> Result<FrameDistance> {
        match self.raw("eval.distance") {
            "angular" => Ok(FrameDistance::Angular),
            "kl" => Ok(FrameDistance::Kl),
            o => Err(Error::Config(format!("eval.distance: expected angular or kl, got {o:?}"))),
        }
    }

    /// Label distinguishing ablation runs in their metric logs.
    pub fn label(&self) -> Result<String> {
        let l = self.raw("run.label");
        if l != "auto" {
            return Ok(l.to_string());
        }
        let mut parts = Vec::new();
        if !self.flag("train.pretrain")? {
            parts.push("no_pretrain".to_string());
        }
        if !self.flag("shift.enabled")? {
            parts.push("no_shift".into());
        }
        if !self.flag("augment.enabled")? {
            parts.push("no_augment".into());
        }
        if self.raw("train.batching") == "fixed" {
            parts.push("no_batching".into());
        }
        if self.raw("train.alpha") != "0.999" {
            parts.push(format!("alpha_{}", self.raw("train.alpha")));
        }
        if self.raw("objective.kind") != "contrastive" {
            parts.push(self.raw("objective.kind").to_string());
        }
        Ok(if parts.is_empty() { "baseline".into() } else { parts.join("+") })
    }

    /// Parses every key once so that bad values fail before any compute.
    pub fn validate(&self) -> Result<()> {
        self.encoder()?;
        self.synth_spec()?;
        self.noise_mix()?;
        self.pretrain()?;
        self.finetune()?;
        self.probe()?;
        self.probe_snr()?;
        self.distance()?;
        self.label()?;
        self.flag("train.pretrain")?;
        for key in ["data.n_utterances", "train.checkpoint_every", "finetune.n_utterances", "eval.n_utterances", "eval.abx_instances"] {
            self.get::<usize>(key)?;
        }
        Ok(())
    }
}

/// Defaults, then the file (if any), then command-line overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = path {
        rc.apply_text(&std::fs::read_to_string(p)?)?;
    }
    for (k, v) in overrides {
        rc.set(k, v)?;
    }
    rc.validate()?;
    Ok(rc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let rc = load_config(None, &[]).unwrap();
        assert_eq!(rc.label().unwrap(), "baseline");
        assert_eq!(rc.pretrain().unwrap().alpha, 0.999);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default().apply_text("train.stepz = 4").unwrap_err().to_string();
        assert!(err.contains("train.stepz"), "{err}");
    }

    #[test]
    fn overrides_beat_file_and_text_round_trips() {
        let mut rc = RunConfig::default();
        rc.apply_text("objective.tau = 0.2\n# comment\n\ntrain.steps=5").unwrap();
        rc.set("objective.tau", "0.05").unwrap();
        assert_eq!(rc.get::<f64>("objective.tau").unwrap(), 0.05);
        let mut again = RunConfig::default();
        again.apply_text(&rc.to_text()).unwrap();
        assert_eq!(again, rc);
    }

    #[test]
    fn labels_name_ablations() {
        let mut rc = RunConfig::default();
        rc.set("shift.enabled", "false").unwrap();
        rc.set("train.alpha", "0").unwrap();
        assert_eq!(rc.label().unwrap(), "no_shift+alpha_0");
    }
}
