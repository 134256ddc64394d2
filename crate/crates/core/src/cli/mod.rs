//! Command-line front end: configuration, manifests and the five commands.

mod config;
mod manifest;

pub use config::{load_config, RunConfig, DEFAULTS};
pub use manifest::{Manifest, ManifestEntry};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dsp::wav::write_wav;
use crate::dsp::{synth_utterance, FeatureConfig};
use crate::encoder::{aggregate_layers, Encoder, EncoderConfig, Role};
use crate::error::{Error, Result};
use crate::eval::{
    abx_score, efficiency_report, linear_probe_eval, probe_corpus, segment_instances, token_error_rate,
    utterance_error_rate, EfficiencyReport, EvalPair,
};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};
use crate::trainer::{
    encoder_labels, finetune, frozen_layers, utterance_seed, Checkpoint, Corpus, Downstream, MetricsLog, Pretrainer,
    StepRecord,
};

/// Seed offset of the held-out evaluation corpus.
pub const EVAL_SEED_XOR: u64 = 0x5eed;
/// Seed offset of the labelled finetuning corpus.
pub const FINETUNE_SEED_XOR: u64 = 0xf17e;

#[derive(Parser, Debug)]
#[command(name = "s3ld", version, about = "Self-supervised speech representation learning at desk scale")]
pub struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra overrides, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus manifest (and optionally WAV files).
    SynthData(SynthArgs),
    /// Teacher-student pretraining.
    Pretrain(PretrainArgs),
    /// Train a downstream head on a pretrained encoder.
    Finetune(FinetuneArgs),
    /// Probe accuracy, error rates, ABX and cost of a checkpoint.
    Eval(EvalArgs),
    /// Print the header and tensor table of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Also write one WAV file per utterance under `<out>/wav/`.
    #[arg(long)]
    pub wav: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// `tiny`, `paper`, or a path to an encoder description.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// `contrastive` or `predictive`.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub no_shift: bool,
    #[arg(long)]
    pub no_augment: bool,
    /// Fixed-count batches instead of frame-budget packing.
    #[arg(long)]
    pub no_batching: bool,
    /// Skip training; the checkpoint holds the random initialisation.
    #[arg(long)]
    pub no_pretrain: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Continue from a pretraining checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Metrics log label (default derived from the toggles).
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Defaults to `<out>/checkpoint.s3ld`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `frame` or `ctc`.
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Update the encoder too.
    #[arg(long)]
    pub unfreeze: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Defaults to `<out>/finetuned.s3ld`, else `<out>/checkpoint.s3ld`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also compute ABX discriminability.
    #[arg(long)]
    pub abx: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn push_opt<T: ToString>(o: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        o.push((key.to_string(), v.to_string()));
    }
}

impl Cli {
    /// Command-line overrides in application order.
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o = Vec::new();
        push_opt(&mut o, "seed", &self.seed);
        push_opt(&mut o, "out", &self.out.as_ref().map(|p| p.display().to_string()));
        match &self.command {
            Command::SynthData(a) => {
                push_opt(&mut o, "data.n_utterances", &a.n);
                push_opt(&mut o, "data.n_classes", &a.classes);
            }
            Command::Pretrain(a) => {
                push_opt(&mut o, "encoder.preset", &a.preset);
                push_opt(&mut o, "train.steps", &a.steps);
                push_opt(&mut o, "objective.kind", &a.objective);
                push_opt(&mut o, "objective.tau", &a.tau);
                push_opt(&mut o, "train.alpha", &a.alpha);
                push_opt(&mut o, "data.manifest", &a.manifest.as_ref().map(|p| p.display().to_string()));
                push_opt(&mut o, "data.n_utterances", &a.n);
                push_opt(&mut o, "run.label", &a.label);
                for (flag, key, value) in [
                    (a.no_shift, "shift.enabled", "false"),
                    (a.no_augment, "augment.enabled", "false"),
                    (a.no_batching, "train.batching", "fixed"),
                    (a.no_pretrain, "train.pretrain", "false"),
                ] {
                    if flag {
                        o.push((key.into(), value.into()));
                    }
                }
            }
            Command::Finetune(a) => {
                push_opt(&mut o, "finetune.head", &a.head);
                push_opt(&mut o, "finetune.steps", &a.steps);
                push_opt(&mut o, "data.manifest", &a.manifest.as_ref().map(|p| p.display().to_string()));
                push_opt(&mut o, "finetune.n_utterances", &a.n);
                if a.unfreeze {
                    o.push(("finetune.freeze".into(), "false".into()));
                }
            }
            Command::Eval(a) => {
                push_opt(&mut o, "data.manifest", &a.manifest.as_ref().map(|p| p.display().to_string()));
                push_opt(&mut o, "eval.n_utterances", &a.n);
            }
            Command::InspectCheckpoint(_) => {}
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(o)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            let _ = e.print();
            std::process::exit(0);
        }
        Error::Config(e.to_string())
    })?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::InspectCheckpoint(a) = &cli.command {
        return inspect(&a.path);
    }
    let rc = load_config(cli.config.as_deref(), &cli.overrides()?)?;
    let out = PathBuf::from(rc.raw("out"));
    std::fs::create_dir_all(&out)?;
    match &cli.command {
        Command::SynthData(a) => synth_data(&rc, &out, a.wav),
        Command::Pretrain(a) => pretrain(&rc, &out, a.resume.as_deref()),
        Command::Finetune(a) => finetune_cmd(&rc, &out, a.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.s3ld"))),
        Command::Eval(a) => {
            let ck = a.checkpoint.clone().unwrap_or_else(|| {
                let f = out.join("finetuned.s3ld");
                if f.exists() {
                    f
                } else {
                    out.join("checkpoint.s3ld")
                }
            });
            eval_cmd(&rc, &out, &ck, a.abx)
        }
        Command::InspectCheckpoint(_) => unreachable!(),
    }
}

#[derive(Serialize)]
struct Header<'a> {
    kind: &'a str,
    command: &'a str,
    label: String,
    config: BTreeMap<&'a str, &'a str>,
}

/// Opens `<out>/metrics.<label>.jsonl` and writes the resolved config first.
fn open_log(rc: &RunConfig, out: &Path, command: &str, append: bool) -> Result<(MetricsLog, PathBuf)> {
    let label = rc.label()?;
    let name = if command == "pretrain" { format!("metrics.{label}.jsonl") } else { format!("metrics.{command}.jsonl") };
    let path = out.join(name);
    let mut log = if append { MetricsLog::append(&path)? } else { MetricsLog::create(&path)? };
    log.write(&Header { kind: "config", command, label, config: rc.iter().collect() })?;
    std::fs::write(out.join("config.txt"), rc.to_text())?;
    Ok((log, path))
}

/// Corpus from `data.manifest`, or `n` synthetic utterances from `seed`.
pub fn load_corpus(rc: &RunConfig, n_key: &str, seed: u64) -> Result<Corpus> {
    let spec = rc.synth_spec()?;
    let noise = rc.noise_mix()?;
    let manifest = rc.raw("data.manifest");
    if manifest.is_empty() {
        return Corpus::synthetic(rc.get(n_key)?, &spec, seed, noise);
    }
    let path = Path::new(manifest);
    let waves = Manifest::read(path)?.load_all(path, &spec)?;
    if waves.is_empty() {
        return Err(Error::Config(format!("{manifest}: empty manifest")));
    }
    Corpus::from_waveforms(waves, spec.n_classes(), FeatureConfig::default(), noise, seed)
}

fn synth_data(rc: &RunConfig, out: &Path, wav: bool) -> Result<()> {
    let n: usize = rc.get("data.n_utterances")?;
    if n == 0 {
        return Err(Error::Config("data.n_utterances must be >= 1".into()));
    }
    let spec = rc.synth_spec()?;
    let seed = rc.seed()?;
    if wav {
        std::fs::create_dir_all(out.join("wav"))?;
    }
    let mut m = Manifest::default();
    for i in 0..n {
        let s = utterance_seed(seed, i);
        let w = synth_utterance(&spec, s)?;
        let id = format!("utt{i:05}");
        let source = if wav {
            let rel = format!("wav/{id}.wav");
            write_wav(&out.join(&rel), &w)?;
            rel
        } else {
            format!("synth:{s}")
        };
        m.entries.push(ManifestEntry::from_waveform(id, source, &w));
    }
    let path = out.join("manifest.jsonl");
    m.write(&path)?;
    std::fs::write(out.join("config.txt"), rc.to_text())?;
    println!("wrote {} utterances to {}", n, path.display());
    Ok(())
}

fn pretrain(rc: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = rc.pretrain()?;
    let enc = rc.encoder()?;
    let corpus = load_corpus(rc, "data.n_utterances", rc.seed()?)?;
    let (mut p, mut wall_ms, mut frames) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let wall: u64 = ck.meta_get("wall_ms").unwrap_or(0);
            let fr: usize = ck.meta_get("frames").unwrap_or(0);
            (Pretrainer::<f32>::from_checkpoint(cfg, &ck)?, wall, fr)
        }
        None => (Pretrainer::<f32>::new(cfg, &enc, &corpus)?, 0, 0),
    };
    let (mut log, log_path) = open_log(rc, out, "pretrain", resume.is_some())?;
    let ck_path = out.join("checkpoint.s3ld");
    let every: usize = rc.get("train.checkpoint_every")?;
    let save = |p: &Pretrainer<f32>, wall_ms: u64, frames: usize| -> Result<()> {
        let mut c = p.to_checkpoint();
        c.config_text = p.student.config.to_text();
        c.set("wall_ms", wall_ms);
        c.set("frames", frames);
        c.set("label", rc.label()?);
        c.save(&ck_path)
    };
    if rc.flag("train.pretrain")? {
        let mut last = None;
        p.run(&corpus, |p, r| {
            log.write(r)?;
            wall_ms += r.wall_ms;
            frames += r.frames;
            if every > 0 && p.step % every == 0 && p.step < p.cfg.steps {
                log.flush()?;
                save(p, wall_ms, frames)?;
            }
            last = Some(r.loss);
            Ok(())
        })?;
        if let Some(l) = last {
            println!("pretrained {} steps, final loss {l:.4}", p.step);
        }
    } else {
        log.write(&serde_json::json!({"kind": "skipped", "reason": "train.pretrain = false"}))?;
        println!("pretraining skipped; checkpoint holds the random initialisation");
    }
    log.flush()?;
    save(&p, wall_ms, frames)?;
    println!("checkpoint {}\nmetrics {}", ck_path.display(), log_path.display());
    Ok(())
}

/// Student encoder of a pretraining or finetuning checkpoint.
fn student_of(ck: &Checkpoint) -> Result<Encoder<f32>> {
    let config = EncoderConfig::parse(&ck.config_text)?;
    Encoder::with_params(&config, Role::Student, ck.group("student"))
}

fn finetune_cmd(rc: &RunConfig, out: &Path, ck_path: PathBuf) -> Result<()> {
    let cfg = rc.finetune()?;
    let ck = Checkpoint::load(&ck_path)?;
    let seed = rc.seed()?;
    let corpus = load_corpus(rc, "finetune.n_utterances", seed ^ FINETUNE_SEED_XOR)?;
    let mut model = match ck.meta_get::<String>("kind")?.as_str() {
        "pretrain" => Downstream::new(student_of(&ck)?, cfg.head, corpus.n_classes, rng::derive(seed, &[rng::label("head")]))?,
        "finetune" => {
            let m = Downstream::<f32>::from_checkpoint(&ck)?;
            if m.kind != cfg.head {
                return Err(Error::Config(format!("checkpoint has a {} head but finetune.head is {}", m.kind.name(), cfg.head.name())));
            }
            m
        }
        other => return Err(Error::Version(format!("unknown checkpoint kind {other:?}"))),
    };
    let (mut log, log_path) = open_log(rc, out, "finetune", false)?;
    let mut wall_ms: u64 = ck.meta_get("wall_ms").unwrap_or(0);
    let mut frames: usize = ck.meta_get("frames").unwrap_or(0);
    let mut last = None;
    finetune(&mut model, &corpus, &cfg, |r| {
        log.write(r)?;
        wall_ms += r.wall_ms;
        frames += r.frames;
        last = Some(r.loss);
        Ok(())
    })?;
    log.flush()?;
    let mut c = model.to_checkpoint();
    c.set("wall_ms", wall_ms);
    c.set("frames", frames);
    let path = out.join("finetuned.s3ld");
    c.save(&path)?;
    if let Some(l) = last {
        println!("finetuned {} head for {} steps, final loss {l:.4}", cfg.head.name(), cfg.steps);
    }
    println!("checkpoint {}\nmetrics {}", path.display(), log_path.display());
    Ok(())
}

/// Aggregated (softmax-weighted) encoder representation `[T_out × D]`.
pub fn aggregated_features(encoder: &Encoder<f32>, mel: &Tensor<f64>) -> Result<Tensor<f64>> {
    let layers = frozen_layers(encoder, mel)?;
    let mut g = Graph::inference();
    let lv: Vec<Var> = layers.into_iter().map(|t| g.constant(t)).collect();
    let idx = encoder.agg_index().ok_or_else(|| Error::Role("aggregation needs the student encoder".into()))?;
    let logits = g.constant(encoder.params.tensors()[idx].clone());
    let agg = aggregate_layers(&mut g, &lv, logits)?;
    Ok(g.value(agg).cast())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub kind: String,
    pub probe_accuracy: f64,
    pub probe_snr_db: Option<f64>,
    pub head: Option<String>,
    pub head_accuracy: Option<f64>,
    pub ter: Option<f64>,
    pub uer_eq7: Option<f64>,
    pub abx: Option<f64>,
    pub efficiency: EfficiencyReport,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "checkpoint       {} ({})", self.checkpoint, self.kind);
        let _ = writeln!(s, "probe_accuracy   {:.4}", self.probe_accuracy);
        let _ = writeln!(s, "head             {}", self.head.as_deref().unwrap_or("-"));
        let _ = writeln!(s, "head_accuracy    {}", f(self.head_accuracy));
        let _ = writeln!(s, "ter              {}", f(self.ter));
        let _ = writeln!(s, "uer_eq7          {}", f(self.uer_eq7));
        let _ = writeln!(s, "abx              {}", f(self.abx));
        let e = &self.efficiency;
        let _ = writeln!(s, "params           {}", e.params);
        let _ = writeln!(s, "checkpoint_bytes {}", e.checkpoint_bytes);
        let _ = writeln!(s, "train_wall_ms    {}", e.wall_ms);
        let _ = writeln!(s, "train_frames     {}", e.frames);
        let _ = write!(s, "macs_per_frame   {:.0}", e.macs_per_frame);
        s
    }
}

fn eval_cmd(rc: &RunConfig, out: &Path, ck_path: &Path, abx: bool) -> Result<()> {
    let ck = Checkpoint::load(ck_path)?;
    let kind: String = ck.meta_get("kind")?;
    let model = match kind.as_str() {
        "pretrain" => None,
        "finetune" => Some(Downstream::<f32>::from_checkpoint(&ck)?),
        other => return Err(Error::Version(format!("unknown checkpoint kind {other:?}"))),
    };
    let encoder = match &model {
        Some(m) => m.encoder.clone(),
        None => student_of(&ck)?,
    };
    let seed = rc.seed()?;
    let eval_seed = seed ^ EVAL_SEED_XOR;
    let spec = rc.synth_spec()?;
    let n: usize = rc.get("eval.n_utterances")?;
    let snr = rc.probe_snr()?;
    let (probe_set, clean) = if rc.raw("data.manifest").is_empty() {
        (probe_corpus(n, &spec, eval_seed, snr)?, probe_corpus(n, &spec, eval_seed, None)?)
    } else {
        let c = load_corpus(rc, "eval.n_utterances", eval_seed)?;
        (c.clone(), c)
    };
    let probe = linear_probe_eval(&encoder, &probe_set, eval_seed, &rc.probe()?)?;

    let (mut head_accuracy, mut ter, mut uer) = (None, None, None);
    if let Some(m) = &model {
        let ds = m.encoder.downsample();
        let (mut correct, mut total) = (0usize, 0usize);
        let mut pairs = Vec::new();
        for u in &clean.utterances {
            let preds = m.frame_predictions(&u.clean)?;
            if let Some(l) = &u.frame_labels {
                let target = encoder_labels(l, preds.len(), ds);
                correct += preds.iter().zip(&target).filter(|(a, b)| a == b).count();
                total += preds.len();
            }
            if let Some(ph) = u.phones() {
                pairs.push(EvalPair::new(m.decode(&u.clean)?, ph));
            }
        }
        head_accuracy = (total > 0).then(|| correct as f64 / total as f64);
        if !pairs.is_empty() {
            ter = Some(token_error_rate(&pairs)?);
            uer = Some(utterance_error_rate(&pairs)?);
        }
    }

    let abx_value = if abx {
        let ds = encoder.downsample();
        let items = clean
            .utterances
            .iter()
            .filter_map(|u| u.frame_labels.as_ref().map(|l| (u, l)))
            .map(|(u, l)| {
                let f = aggregated_features(&encoder, &u.clean)?;
                let labels = encoder_labels(l, f.dim(0), ds);
                Ok((f, labels))
            })
            .collect::<Result<Vec<_>>>()?;
        let inst = segment_instances(&items, rc.get("eval.abx_instances")?, eval_seed)?;
        Some(abx_score(&inst, rc.distance()?)?)
    } else {
        None
    };

    let params = encoder.param_count() + model.as_ref().map_or(0, |m| m.head.scalar_count());
    let record = StepRecord {
        step: 0,
        phase: "train".into(),
        loss: 0.0,
        lr: 0.0,
        frames: ck.meta_get("frames").unwrap_or(0),
        wall_ms: ck.meta_get("wall_ms").unwrap_or(0),
    };
    let bytes = std::fs::metadata(ck_path)?.len();
    let report = EvalReport {
        checkpoint: ck_path.display().to_string(),
        kind,
        probe_accuracy: probe.accuracy,
        probe_snr_db: snr,
        head: model.as_ref().map(|m| m.kind.name().to_string()),
        head_accuracy,
        ter,
        uer_eq7: uer,
        abx: abx_value,
        efficiency: efficiency_report(&encoder.config, params, &[record], bytes),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.into()))?;
    std::fs::write(out.join("eval.json"), &json)?;
    let (mut log, _) = open_log(rc, out, "eval", false)?;
    log.write(&report)?;
    log.flush()?;
    println!("{}", report.table());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    println!("# {}", path.display());
    for (k, v) in &ck.meta {
        println!("{k} = {v}");
    }
    println!("\n# encoder\n{}", ck.config_text.trim_end());
    println!("\n# tensors");
    let mut total = 0;
    for (name, t) in &ck.arrays {
        println!("{name} {:?}", t.shape());
        total += t.len();
    }
    println!("\n{} tensors, {total} values", ck.arrays.len());
    Ok(())
}
