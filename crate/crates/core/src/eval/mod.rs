//! Evaluation: token and utterance error rates, CTC greedy decoding, ABX
//! discriminability, linear probing and cost accounting.

mod abx;
mod efficiency;
mod probe;
mod text;

pub use abx::{abx_score, segment_instances, dtw_distance, frame_distance, AbxInstance, FrameDistance};
pub use efficiency::{efficiency_report, EfficiencyReport};
pub use probe::{frozen_utterances, linear_probe_eval, probe_corpus, probe_features, FrozenUtterance, ProbeConfig, ProbeResult};
pub use text::{greedy_ctc_decode, levenshtein, token_error_rate, utterance_error_rate, EvalPair};
