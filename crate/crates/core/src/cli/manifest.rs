//! Line-delimited JSON corpus manifests.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::wav::read_wav;
use crate::dsp::{synth_utterance, Segment, SynthSpec, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// A WAV path (relative to the manifest) or `synth:<seed>`.
    pub source: String,
    pub duration_s: f64,
    pub labels: bool,
    /// `[start, end, class]` sample spans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<[usize; 3]>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl ManifestEntry {
    pub fn from_waveform(id: String, source: String, w: &Waveform) -> Self {
        let segments = w.labels.as_ref().map(|l| l.iter().map(|s| [s.start, s.end, s.class]).collect());
        Self { id, source, duration_s: w.duration_s(), labels: w.labels.is_some(), segments }
    }

    /// Loads or regenerates the audio. Synthetic sources are rebuilt from
    /// `spec`; file sources take their labels from `segments`.
    pub fn load(&self, base: &Path, spec: &SynthSpec) -> Result<Waveform> {
        if let Some(seed) = self.source.strip_prefix("synth:") {
            let seed: u64 = seed.parse().map_err(|_| Error::Config(format!("{}: bad synthetic seed", self.id)))?;
            return synth_utterance(spec, seed);
        }
        let mut w = read_wav(&base.join(&self.source))?;
        if let Some(segs) = &self.segments {
            w = Waveform::new(w.samples, Some(segs.iter().map(|&[start, end, class]| Segment { start, end, class }).collect()))?;
        }
        Ok(w)
    }
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate manifest id {:?}", e.id)));
            }
            if !(e.duration_s > 0.0) {
                return Err(Error::Config(format!("{}: duration must be positive", e.id)));
            }
            if e.labels != e.segments.is_some() {
                return Err(Error::Config(format!("{}: labels flag disagrees with segments", e.id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("plain record") + "\n").collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("manifest line {}: {e}", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// All waveforms with their ids, resolving file sources next to `path`.
    pub fn load_all(&self, path: &Path, spec: &SynthSpec) -> Result<Vec<(String, Waveform)>> {
        let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
        self.entries.iter().map(|e| Ok((e.id.clone(), e.load(&base, spec)?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_checks() {
        let spec = SynthSpec::default();
        let w = synth_utterance(&spec, 7).unwrap();
        let m = Manifest { entries: vec![ManifestEntry::from_waveform("u0".into(), "synth:7".into(), &w)] };
        let back = Manifest::parse(&m.to_jsonl()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.entries[0].load(Path::new("."), &spec).unwrap(), w);
        let dup = Manifest { entries: vec![m.entries[0].clone(), m.entries[0].clone()] };
        assert!(dup.validate().is_err());
        assert!(Manifest::parse("{\"id\":1}").is_err());
    }
}
