use serde::Serialize;

use crate::encoder::{forward_macs, EncoderConfig};
use crate::trainer::StepRecord;

/// Cost summary of a model and the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub params: usize,
    pub checkpoint_bytes: u64,
    pub wall_ms: u64,
    pub frames: usize,
    /// Forward multiply-adds per input mel frame, measured on 100 frames.
    pub macs_per_frame: f64,
}

pub fn efficiency_report(cfg: &EncoderConfig, params: usize, records: &[StepRecord], checkpoint_bytes: u64) -> EfficiencyReport {
    const REF_FRAMES: usize = 100;
    EfficiencyReport {
        params,
        checkpoint_bytes,
        wall_ms: records.iter().map(|r| r.wall_ms).sum(),
        frames: records.iter().map(|r| r.frames).sum(),
        macs_per_frame: forward_macs(cfg, REF_FRAMES).map_or(0.0, |m| m as f64 / REF_FRAMES as f64),
    }
}
