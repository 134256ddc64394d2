//! Training-loop measurements shared by the mechanics and acceptance tests.

use rand::Rng;
use s3ld::dsp::SynthSpec;
use s3ld::encoder::{Encoder, EncoderConfig};
use s3ld::tensor::{Graph, Real, Tensor};
use s3ld::trainer::{
    plan_batches, plan_fixed, Batching, Checkpoint, Corpus, NoiseMix, Objective, PretrainConfig, Pretrainer,
    ScheduleConfig, StepRecord,
};

use super::rng;

pub fn small_corpus(n: usize, seed: u64) -> Corpus {
    Corpus::synthetic(n, &SynthSpec::default(), seed, NoiseMix::Mixed).unwrap()
}

pub fn small_config(steps: usize, accum: usize, per_batch: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        steps,
        accum,
        batching: Batching::Fixed { per_batch },
        schedule: ScheduleConfig::cosine(3e-4, steps),
        seed,
        ..PretrainConfig::default()
    }
}

fn max_diff<F: Real>(a: &[Tensor<F>], b: &[Tensor<F>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

/// Largest parameter difference between two optimizer steps on the same
/// eight utterances: one accumulated over four micro-batches of two, one on
/// the concatenated batch (64-bit).
pub fn accumulation_gap(seed: u64) -> f64 {
    let corpus = small_corpus(8, seed);
    let frames: Vec<usize> = corpus.frames().iter().map(|&f| f.min(120)).collect();
    let cfg = small_config(2, 4, 2, seed);
    let enc = EncoderConfig::tiny();
    let mut split = Pretrainer::<f64>::new(cfg.clone(), &enc, &corpus).unwrap();
    let mut whole = Pretrainer::<f64>::new(cfg, &enc, &corpus).unwrap();
    let micro: Vec<(Vec<usize>, Vec<usize>)> =
        (0..4).map(|j| (vec![2 * j, 2 * j + 1], vec![frames[2 * j], frames[2 * j + 1]])).collect();
    let concat = vec![((0..8).collect(), frames.clone())];
    let mut worst = 0.0f64;
    for _ in 0..2 {
        let (la, fa) = split.accumulate_step(&corpus, &micro, 1e-3).unwrap();
        let (lb, fb) = whole.accumulate_step(&corpus, &concat, 1e-3).unwrap();
        assert_eq!(fa, fb);
        worst = worst.max((la - lb).abs());
        worst = worst.max(max_diff(split.student.params.tensors(), whole.student.params.tensors()));
        worst = worst.max(max_diff(split.teacher.params.tensors(), whole.teacher.params.tensors()));
    }
    worst
}

#[derive(Debug)]
pub struct EmaRun {
    /// α = 0: largest |teacher − student| seen after any step.
    pub copy_dev: f64,
    /// α = 1: largest |teacher − initial teacher| seen after any step.
    pub frozen_dev: f64,
    /// 0 < α < 1: teacher coordinates found outside the running
    /// [min, max] of the initial teacher and every student iterate.
    pub hull_violations: usize,
    pub steps: usize,
}

fn ema_trace(alpha: f64, steps: usize, seed: u64, mut check: impl FnMut(&Pretrainer<f64>)) {
    let corpus = small_corpus(16, seed);
    let cfg = PretrainConfig { alpha, ..small_config(steps, 1, 2, seed) };
    let mut p = Pretrainer::<f64>::new(cfg, &EncoderConfig::tiny(), &corpus).unwrap();
    check(&p);
    p.run(&corpus, |p, _| {
        check(p);
        Ok(())
    })
    .unwrap();
}

/// EMA fixpoints and convex-hull containment over `steps`-step runs.
pub fn ema_run(steps: usize, seed: u64) -> EmaRun {
    let mut copy_dev = 0.0f64;
    ema_trace(0.0, steps, seed, |p| {
        let shared = p.student.shared_len();
        if p.step > 0 {
            copy_dev = copy_dev.max(max_diff(p.teacher.params.tensors(), &p.student.params.tensors()[..shared]));
        }
    });
    let mut frozen_dev = 0.0f64;
    let mut initial: Option<Vec<Tensor<f64>>> = None;
    ema_trace(1.0, steps, seed, |p| {
        let t = p.teacher.params.tensors();
        match &initial {
            None => initial = Some(t.to_vec()),
            Some(i) => frozen_dev = frozen_dev.max(max_diff(t, i)),
        }
    });
    let mut bounds: Option<Vec<(f64, f64)>> = None;
    let mut hull_violations = 0;
    ema_trace(0.9, steps, seed, |p| {
        let shared = p.student.shared_len();
        let flat = |ts: &[Tensor<f64>]| -> Vec<f64> { ts.iter().flat_map(|t| t.data().iter().copied()).collect() };
        let student = flat(&p.student.params.tensors()[..shared]);
        let teacher = flat(p.teacher.params.tensors());
        let b = bounds.get_or_insert_with(|| teacher.iter().map(|&v| (v, v)).collect());
        for (lh, &s) in b.iter_mut().zip(&student) {
            lh.0 = lh.0.min(s);
            lh.1 = lh.1.max(s);
        }
        // one rounding of α·t + (1−α)·s may land an ulp past an endpoint
        hull_violations += teacher
            .iter()
            .zip(b.iter())
            .filter(|(&v, &(lo, hi))| {
                let tol = 4.0 * f64::EPSILON * lo.abs().max(hi.abs());
                v < lo - tol || v > hi + tol
            })
            .count();
    });
    EmaRun { copy_dev, frozen_dev, hull_violations, steps }
}

fn run_records(p: &mut Pretrainer<f32>, corpus: &Corpus, until: usize) -> Vec<StepRecord> {
    let mut out = Vec::new();
    while p.step < until {
        out.push(p.train_step(corpus).unwrap());
    }
    out
}

/// Runs `2n` steps straight through and again as `n` steps, a checkpoint
/// round trip through bytes, then `n` more. Returns whether the final
/// checkpoints are byte-identical and the step logs agree (wall time aside).
pub fn resume_is_identical(objective: Objective, n: usize, seed: u64) -> bool {
    let corpus = small_corpus(16, seed);
    let cfg = PretrainConfig { objective, ..small_config(2 * n, 2, 2, seed) };
    let enc = EncoderConfig::tiny();
    let mut straight = Pretrainer::<f32>::new(cfg.clone(), &enc, &corpus).unwrap();
    let full = run_records(&mut straight, &corpus, 2 * n);

    let mut first = Pretrainer::<f32>::new(cfg.clone(), &enc, &corpus).unwrap();
    let mut log = run_records(&mut first, &corpus, n);
    let bytes = first.to_checkpoint().to_bytes();
    drop(first);
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Pretrainer::<f32>::from_checkpoint(cfg, &ck).unwrap();
    log.extend(run_records(&mut resumed, &corpus, 2 * n));

    let same_log = full.len() == log.len() && full.iter().zip(&log).all(|(a, b)| a.same_trajectory(b));
    same_log && straight.to_checkpoint().to_bytes() == resumed.to_checkpoint().to_bytes()
}

/// `(dynamic waste, fixed waste)` for 500 random utterance lengths. The
/// fixed plan uses the same number of batches as the dynamic one.
pub fn padding_waste(budget: usize, seed: u64) -> (f64, f64, usize) {
    let mut r = rng(seed);
    let frames: Vec<usize> = (0..500).map(|_| r.random_range(40..=400)).collect();
    let dynamic = plan_batches(&frames, budget, seed).unwrap();
    let max_seen = dynamic.batches.iter().map(|b| b.real_frames()).max().unwrap();
    let per = ((frames.len() as f64 / dynamic.batches.len() as f64).round() as usize).max(1);
    let fixed = plan_fixed(&frames, per, seed).unwrap();
    (dynamic.padding_waste(), fixed.padding_waste(), max_seen)
}

/// `(output shape, downsample, trainable parameters, seconds)` of the
/// paper preset on a 40×100 input.
pub fn paper_shape() -> (Vec<usize>, usize, usize, f64) {
    let t0 = std::time::Instant::now();
    let cfg = EncoderConfig::paper();
    let enc = Encoder::<f32>::new_student(&cfg, 0).unwrap();
    let mut r = rng(0);
    let mel = Tensor::from_fn(&[40, 100], |_| r.random_range(-1.0f32..1.0));
    let mut g = Graph::inference();
    let b = enc.bind(&mut g, false);
    let out = enc.encode(&mut g, &b, &mel).unwrap();
    let shape = g.value(out.final_).shape().to_vec();
    (shape, enc.downsample(), enc.param_count(), t0.elapsed().as_secs_f64())
}
