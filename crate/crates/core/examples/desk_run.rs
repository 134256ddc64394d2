//! Pretrains the tiny preset on a synthetic corpus and compares linear-probe
//! accuracy of the frozen student before and after.
//!
//! cargo run --release --example desk_run -- [steps] [frame_budget] [seed] [probe_snr_db]

use std::time::Instant;

use s3ld::cli::EVAL_SEED_XOR;
use s3ld::dsp::SynthSpec;
use s3ld::encoder::EncoderConfig;
use s3ld::eval::{linear_probe_eval, probe_corpus, ProbeConfig};
use s3ld::trainer::{Batching, Corpus, NoiseMix, PretrainConfig, Pretrainer, ScheduleConfig};

fn main() -> s3ld::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let steps = arg(0, 300.0) as usize;
    let budget = arg(1, 600.0) as usize;
    let seed = arg(2, 42.0) as u64;
    let snr = arg(3, 5.0);

    let spec = SynthSpec::default();
    let corpus = Corpus::synthetic(200, &spec, seed, NoiseMix::Mixed)?;
    let eval_seed = seed ^ EVAL_SEED_XOR;
    let probe_set = probe_corpus(100, &spec, eval_seed, snr.is_finite().then_some(snr))?;
    let cfg = PretrainConfig {
        steps,
        batching: Batching::Dynamic { frame_budget: budget },
        schedule: ScheduleConfig::cosine(3e-4, steps),
        seed,
        ..PretrainConfig::default()
    };
    let mut p = Pretrainer::<f32>::new(cfg, &EncoderConfig::tiny(), &corpus)?;
    let probe_cfg = ProbeConfig::default();
    let base = linear_probe_eval(&p.student, &probe_set, eval_seed, &probe_cfg)?;
    println!("random-init probe {:.3} (train {:.3})", base.accuracy, base.train_accuracy);

    let t0 = Instant::now();
    let mut losses = Vec::new();
    p.run(&corpus, |_, r| {
        losses.push(r.loss);
        if r.step % 20 == 0 {
            println!("step {:4} loss {:.4} lr {:.2e} frames {} {} ms", r.step, r.loss, r.lr, r.frames, r.wall_ms);
        }
        Ok(())
    })?;
    let n = losses.len().min(20);
    let first: f64 = losses[..n].iter().sum::<f64>() / n as f64;
    let last: f64 = losses[losses.len() - n..].iter().sum::<f64>() / n as f64;
    println!("pretrain {:?}; loss {first:.4} -> {last:.4} (ratio {:.3})", t0.elapsed(), last / first);
    let tuned = linear_probe_eval(&p.student, &probe_set, eval_seed, &probe_cfg)?;
    println!("pretrained probe {:.3} (train {:.3})", tuned.accuracy, tuned.train_accuracy);
    Ok(())
}
