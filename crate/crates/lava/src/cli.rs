//! Command-line front end: data generation, training, distillation,
//! decoding, evaluation, benchmarking, and a gradient self-check. Every
//! command prints one JSON object to stdout; training additionally streams
//! line-delimited epoch metrics to a log file (or stderr). Any flag can
//! come from a `key = value` config file via `--config`, with explicit
//! flags taking precedence.

use crate::bench::{run_bench, BenchOptions};
use crate::checkpoint::{load_nat, load_teacher, save_nat, save_teacher};
use crate::config::{LambdaSchedule, ModelConfig, SamplingMode, TrainConfig};
use crate::data::{gen_synthetic, read_parallel, write_parallel, SyntheticTask, Vocabulary};
use crate::decoding::{
    dynamic_decode, greedy_decode, link_rescore_decode, npd_decode, sequential_decode,
    DecodeResult, Direction, Strategy,
};
use crate::error::{Error, Result};
use crate::metrics::{bleu, exact_match, repeated_token_rate};
use crate::nat::NatModel;
use crate::teacher::{import_encoder_weights, Teacher};
use crate::tensor::{grad_check, Tape, Tensor};
use crate::training::{train_nat, train_teacher, TrainSummary};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "lava",
    version,
    about = "Non-autoregressive translation models, from data to benchmarks",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus plus its vocabulary.
    GenData(GenDataArgs),
    /// Train the autoregressive teacher and save its checkpoint.
    TrainTeacher(TrainTeacherArgs),
    /// Re-target a corpus with the teacher's beam outputs.
    Distill(DistillArgs),
    /// Train the non-autoregressive model and save its checkpoint.
    TrainNat(TrainNatArgs),
    /// Decode sentences from a file with a chosen strategy.
    Decode(DecodeArgs),
    /// Score a model on a parallel corpus.
    Eval(EvalArgs),
    /// Compare decoding strategies against the teacher baseline.
    Bench(BenchArgs),
    /// Verify analytic gradients against central differences.
    GradCheck(GradCheckArgs),
}

/// `on` / `off`, so boolean flags can round-trip through config files.
#[derive(Clone, Copy, Debug)]
struct OnOff(bool);

impl std::str::FromStr for OnOff {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(OnOff(true)),
            "off" => Ok(OnOff(false)),
            other => Err(Error::usage(format!("expected on|off, got {other:?}"))),
        }
    }
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    rel_clip: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
}

impl ModelFlags {
    fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_blocks: self.blocks,
            rel_clip: self.rel_clip,
            max_len: self.max_len,
            dropout: self.dropout,
            ..ModelConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr_max: f64,
    #[arg(long, default_value_t = 200)]
    warmup_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    dev_fraction: f64,
    #[arg(long, default_value_t = 5)]
    average_best: usize,
    /// Epoch metrics as line-delimited JSON go here (default: stderr).
    #[arg(long)]
    metrics_log: Option<PathBuf>,
}

impl TrainFlags {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            warmup_steps: self.warmup_steps,
            seed: self.seed,
            gamma: self.gamma,
            dev_fraction: self.dev_fraction,
            average_best: self.average_best,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "copy")]
    task: SyntheticTask,
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long, default_value_t = 32)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
}

#[derive(Args)]
struct TrainNatArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Look-around sizes as `L,R`, each 0 or 1.
    #[arg(long, default_value = "1,1")]
    la: String,
    #[arg(long, default_value = "on")]
    va: OnOff,
    #[arg(long, default_value = "on")]
    cross: OnOff,
    #[arg(long, default_value = "dss")]
    sampling: SamplingMode,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    #[arg(long, default_value = "linear:0.1:5")]
    lambda: LambdaSchedule,
    #[arg(long, default_value = "on")]
    bow: OnOff,
    #[arg(long, default_value = "off")]
    kd: OnOff,
    #[arg(long, default_value_t = 4)]
    kd_beam: usize,
    #[arg(long, default_value = "off")]
    init_encoder: OnOff,
    /// Teacher checkpoint, required with `--kd on` or `--init-encoder on`.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct StrategyFlags {
    #[arg(long, default_value = "greedy")]
    strategy: Strategy,
    /// Candidate lengths for noisy parallel decoding.
    #[arg(long, default_value_t = 9)]
    candidates: usize,
    /// Sampled sequences for link rescoring.
    #[arg(long, default_value_t = 9)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 4)]
    max_rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Teacher checkpoint for strategies that rescore.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    strategy: StrategyFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[command(flatten)]
    strategy: StrategyFlags,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Comma-separated list; `at-beam` names the always-on baseline.
    #[arg(long, default_value = "greedy,npd,link-rescore,seq-l2r,dynamic,at-beam")]
    strategies: String,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 9)]
    candidates: usize,
    #[arg(long, default_value_t = 9)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 4)]
    max_rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap the number of evaluated sentences (0 = all).
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

/// Splice config-file entries in front of the explicit flags, so the
/// command line wins wherever both speak.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    if argv.len() < 2 {
        return Ok(argv);
    }
    let mut rest = argv[2..].to_vec();
    let mut cfg_path: Option<String> = None;
    let mut i = 0;
    while i < rest.len() {
        if rest[i] == "--config" {
            if i + 1 >= rest.len() {
                return Err(Error::usage("--config needs a file path"));
            }
            cfg_path = Some(rest.remove(i + 1));
            rest.remove(i);
        } else if let Some(p) = rest[i].strip_prefix("--config=") {
            cfg_path = Some(p.to_string());
            rest.remove(i);
        } else {
            i += 1;
        }
    }
    let mut out = argv[..2].to_vec();
    if let Some(path) = cfg_path {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::usage(format!("cannot read config file {path}: {e}")))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::usage(format!("{path}:{}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(Error::usage(format!(
                    "{path}:{}: empty key or value",
                    lineno + 1
                )));
            }
            out.push(format!("--{key}"));
            out.push(value.to_string());
        }
    }
    out.extend(rest);
    Ok(out)
}

pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
            0
        }
        Err(Error::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<Value> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::TrainTeacher(a) => cmd_train_teacher(a),
        Cmd::Distill(a) => cmd_distill(a),
        Cmd::TrainNat(a) => cmd_train_nat(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
    }
}

fn metrics_writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(std::io::stderr()),
    })
}

fn summary_json(summary: &TrainSummary, checkpoint: &Path) -> Value {
    let last = summary.metrics.last();
    json!({
        "checkpoint": checkpoint.display().to_string(),
        "epochs": summary.metrics.len(),
        "final_loss": last.map(|m| m.loss),
        "final_token_acc": last.map(|m| m.token_acc),
        "dev_losses": summary.dev_losses,
        "metrics": summary.metrics,
    })
}

fn cmd_gen_data(a: GenDataArgs) -> Result<Value> {
    let pairs = gen_synthetic(a.task, a.pairs, (a.min_len, a.max_len), a.vocab_size, a.seed)?;
    let vocab = Vocabulary::synthetic(a.vocab_size);
    write_parallel(&a.out, &pairs, &vocab)?;
    let vocab_path = a.out.join("vocab.txt");
    vocab.save(&vocab_path)?;
    Ok(json!({
        "task": format!("{:?}", a.task).to_lowercase(),
        "pairs": pairs.len(),
        "vocab_size": a.vocab_size,
        "source": a.out.join("source.txt").display().to_string(),
        "target": a.out.join("target.txt").display().to_string(),
        "vocab": vocab_path.display().to_string(),
    }))
}

fn cmd_train_teacher(a: TrainTeacherArgs) -> Result<Value> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let corpus = read_parallel(&a.src, &a.tgt, &vocab)?;
    let cfg = a.model.to_config(vocab.size());
    cfg.validate()?;
    let tc = a.train.to_config();
    let mut teacher = Teacher::new(&cfg, &mut ChaCha8Rng::seed_from_u64(tc.seed));
    let mut log = metrics_writer(&a.train.metrics_log)?;
    let summary = train_teacher(&mut teacher, &corpus, &tc, &mut *log)?;
    save_teacher(&a.out, &teacher, &vocab)?;
    Ok(summary_json(&summary, &a.out))
}

fn cmd_distill(a: DistillArgs) -> Result<Value> {
    let (teacher, vocab) = load_teacher(&a.teacher)?;
    let corpus = read_parallel(&a.src, &a.tgt, &vocab)?;
    let distilled = teacher.distill_dataset(&corpus, a.beam);
    let changed = corpus
        .iter()
        .zip(&distilled)
        .filter(|(o, d)| o.target != d.target)
        .count();
    write_parallel(&a.out, &distilled, &vocab)?;
    vocab.save(&a.out.join("vocab.txt"))?;
    Ok(json!({
        "pairs": distilled.len(),
        "changed_fraction": changed as f64 / corpus.len().max(1) as f64,
        "source": a.out.join("source.txt").display().to_string(),
        "target": a.out.join("target.txt").display().to_string(),
    }))
}

fn parse_la(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::usage(format!("bad --la {s:?}, expected L,R with each 0 or 1"));
    let (l, r) = s.split_once(',').ok_or_else(bad)?;
    let l: usize = l.trim().parse().map_err(|_| bad())?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    if l > 1 || r > 1 {
        return Err(bad());
    }
    Ok((l, r))
}

fn cmd_train_nat(a: TrainNatArgs) -> Result<Value> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let mut corpus = read_parallel(&a.src, &a.tgt, &vocab)?;
    let (left, right) = parse_la(&a.la)?;
    let cfg = ModelConfig {
        left_size: left,
        right_size: right,
        vocab_attention: a.va.0,
        cross_attention: a.cross.0,
        ..a.model.to_config(vocab.size())
    };
    cfg.validate()?;
    let tc = TrainConfig {
        sampling: a.sampling,
        alpha: a.alpha,
        lambda: a.lambda,
        use_bow: a.bow.0,
        use_kd: a.kd.0,
        init_encoder_from_teacher: a.init_encoder.0,
        ..a.train.to_config()
    };
    let teacher = if tc.use_kd || tc.init_encoder_from_teacher {
        let path = a.teacher.as_ref().ok_or_else(|| {
            Error::usage("--kd on / --init-encoder on need --teacher CHECKPOINT")
        })?;
        Some(load_teacher(path)?.0)
    } else {
        None
    };
    if tc.use_kd {
        corpus = teacher
            .as_ref()
            .expect("teacher loaded above")
            .distill_dataset(&corpus, a.kd_beam);
    }
    let mut model = NatModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(tc.seed));
    if tc.init_encoder_from_teacher {
        let t = teacher.as_ref().expect("teacher loaded above");
        import_encoder_weights(&mut model.encoder, &t.export_encoder_weights())?;
    }
    let mut log = metrics_writer(&a.train.metrics_log)?;
    let summary = train_nat(&mut model, &corpus, &tc, &mut *log)?;
    save_nat(&a.out, &model, &vocab)?;
    Ok(summary_json(&summary, &a.out))
}

fn strategy_teacher(flags: &StrategyFlags) -> Result<Option<Teacher>> {
    match flags.strategy {
        Strategy::Npd | Strategy::LinkRescore => {
            let path = flags.teacher.as_ref().ok_or_else(|| {
                Error::usage(format!(
                    "strategy {:?} needs --teacher CHECKPOINT",
                    flags.strategy
                ))
            })?;
            Ok(Some(load_teacher(path)?.0))
        }
        _ => Ok(None),
    }
}

fn decode_with(
    model: &NatModel,
    teacher: Option<&Teacher>,
    flags: &StrategyFlags,
    x: &[usize],
) -> Result<DecodeResult> {
    match flags.strategy {
        Strategy::Greedy => greedy_decode(model, x),
        Strategy::Npd => npd_decode(model, teacher.expect("checked"), x, flags.candidates),
        Strategy::LinkRescore => {
            link_rescore_decode(model, teacher.expect("checked"), x, flags.samples, flags.seed)
        }
        Strategy::SeqL2r => sequential_decode(model, x, Direction::L2r, flags.beam),
        Strategy::SeqR2l => sequential_decode(model, x, Direction::R2l, flags.beam),
        Strategy::Dynamic => dynamic_decode(model, x, flags.threshold, flags.max_rounds),
    }
}

fn cmd_decode(a: DecodeArgs) -> Result<Value> {
    let (model, vocab) = load_nat(&a.model)?;
    let teacher = strategy_teacher(&a.strategy)?;
    let text = std::fs::read_to_string(&a.input)?;
    let mut sentences = Vec::new();
    for line in text.lines() {
        let x = vocab.encode(line);
        let res = decode_with(&model, teacher.as_ref(), &a.strategy, &x)?;
        sentences.push(json!({
            "source": line,
            "output": vocab.decode(&res.tokens),
            "tokens": res.tokens,
            "token_probs": res.token_probs,
            "latency_ms": res.latency_ms,
            "candidates_scored": res.candidates_scored,
            "refinement_trace": res.refinement_trace,
        }));
    }
    Ok(json!({
        "strategy": a.strategy.strategy,
        "sentences": sentences,
    }))
}

fn cmd_eval(a: EvalArgs) -> Result<Value> {
    let (model, vocab) = load_nat(&a.model)?;
    let teacher = strategy_teacher(&a.strategy)?;
    let pairs = read_parallel(&a.src, &a.tgt, &vocab)?;
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut total_ms = 0.0;
    for p in &pairs {
        let res = decode_with(&model, teacher.as_ref(), &a.strategy, &p.source)?;
        total_ms += res.latency_ms;
        hyps.push(res.tokens);
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
    Ok(json!({
        "strategy": a.strategy.strategy,
        "sentences": pairs.len(),
        "bleu": bleu(&hyps, &refs, 4)?,
        "exact_match": exact_match(&hyps, &refs),
        "repeat_rate": repeated_token_rate(&hyps),
        "mean_latency_ms": total_ms / pairs.len().max(1) as f64,
    }))
}

fn parse_strategies(s: &str) -> Result<Vec<Strategy>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() || part == "at-beam" {
            // the teacher baseline always runs
            continue;
        }
        let strategy: Strategy = part.parse()?;
        if !out.contains(&strategy) {
            out.push(strategy);
        }
    }
    Ok(out)
}

fn cmd_bench(a: BenchArgs) -> Result<Value> {
    let (model, vocab) = load_nat(&a.model)?;
    let (teacher, _) = load_teacher(&a.teacher)?;
    let mut pairs = read_parallel(&a.src, &a.tgt, &vocab)?;
    if a.limit > 0 && pairs.len() > a.limit {
        pairs.truncate(a.limit);
    }
    let opts = BenchOptions {
        warmup: a.warmup,
        npd_candidates: a.candidates,
        link_samples: a.samples,
        seed: a.seed,
        beam_width: a.beam,
        dynamic_threshold: a.threshold,
        dynamic_rounds: a.max_rounds,
        strategies: parse_strategies(&a.strategies)?,
    };
    let report = run_bench(&model, &teacher, &pairs, &opts)?;
    Ok(serde_json::to_value(&report).expect("bench report serializes"))
}

/// Scalar-valued probes over every differentiable op family, checked
/// against central differences on seeded random inputs.
pub fn grad_battery(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut check = |name: &str, x0: Vec<f64>, shape: &[usize], f: Box<dyn Fn(&Tape, &Tensor) -> Tensor>| {
        let report = grad_check(|t, x| f(t, x), &x0, shape, 1e-5);
        out.push((name.to_string(), report.max_rel_err));
    };

    let c6 = draw(6);
    let c62 = draw(6);
    check("add_mul", draw(6), &[2, 3], {
        let (a, b) = (c6.clone(), c62.clone());
        Box::new(move |t, x| {
            let ca = t.constant(a.clone(), &[2, 3]);
            let cb = t.constant(b.clone(), &[2, 3]);
            x.add(&ca).mul(&cb).sum_all()
        })
    });
    check("sub_scale_neg", draw(6), &[2, 3], {
        let a = c6.clone();
        Box::new(move |t, x| {
            let ca = t.constant(a.clone(), &[2, 3]);
            x.sub(&ca).scale(1.7).neg().sum_all()
        })
    });
    let w34 = draw(12);
    check("matmul", draw(6), &[2, 3], {
        let w = w34.clone();
        Box::new(move |t, x| {
            let cw = t.constant(w.clone(), &[3, 4]);
            x.matmul(&cw).sum_all()
        })
    });
    let w43 = draw(12);
    check("matmul_nt", draw(6), &[2, 3], {
        let w = w43.clone();
        Box::new(move |t, x| {
            let cw = t.constant(w.clone(), &[4, 3]);
            x.matmul_nt(&cw).sum_all()
        })
    });
    let c8 = draw(8);
    check("softmax", draw(8), &[2, 4], {
        let p = c8.clone();
        Box::new(move |t, x| {
            let cw = t.constant(p.clone(), &[2, 4]);
            x.softmax(1).mul(&cw).sum_all()
        })
    });
    check("log_softmax", draw(8), &[2, 4], {
        Box::new(move |_, x| x.log_softmax(1).take_per_row(&[1, 3]).sum_all())
    });
    check("relu_sigmoid", draw(6), &[2, 3], {
        Box::new(move |_, x| x.scale(2.0).relu().sigmoid().sum_all())
    });
    check("log_sigmoid", draw(6), &[2, 3], {
        Box::new(move |_, x| x.log_sigmoid().sum_all())
    });
    check("add_row", draw(8), &[2, 4], {
        let b = c6.clone();
        Box::new(move |t, x| {
            let cb = t.constant(b[..4].to_vec(), &[1, 4]);
            x.add_row(&cb).sigmoid().sum_all()
        })
    });
    check("gather_slice_concat", draw(12), &[4, 3], {
        Box::new(move |_, x| {
            let g = x.gather_rows(&[0, 2, 2]);
            let s = x.slice_rows(1, 4);
            Tensor::concat_cols(&[&g, &s]).softmax(1).sum_all()
        })
    });
    check("layer_norm", draw(8), &[2, 4], {
        let g = c6.clone();
        Box::new(move |t, x| {
            let gamma = t.constant(g[..4].to_vec(), &[1, 4]);
            let beta = t.constant(g[1..5].to_vec(), &[1, 4]);
            x.layer_norm(&gamma, &beta, 1e-6).sum_all()
        })
    });
    check("masked_ops", draw(12), &[3, 4], {
        Box::new(move |_, x| {
            let sm = x.masked_softmax(&[true, false, true, true, true, true, false, true, true, true, true, false]);
            let mx = x.masked_max_rows(&[true, true, false]);
            sm.sum_all().add(&mx.sum_all())
        })
    });
    check("sum_axis0_take", draw(12), &[3, 4], {
        Box::new(move |_, x| x.sum_axis0().log_sigmoid().take(&[0, 2]).sum_all())
    });
    check("relative_logits", draw(15), &[3, 5], {
        Box::new(move |_, x| x.relative_logits(2).sum_all())
    });
    out
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<Value> {
    let checks = grad_battery(a.seed);
    let worst = checks.iter().map(|(_, e)| *e).fold(0.0f64, f64::max);
    let ok = worst <= a.tolerance;
    let value = json!({
        "checks": checks
            .iter()
            .map(|(name, err)| json!({ "name": name, "max_rel_err": err }))
            .collect::<Vec<_>>(),
        "worst": worst,
        "tolerance": a.tolerance,
        "ok": ok,
    });
    if ok {
        Ok(value)
    } else {
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
        Err(Error::train(format!(
            "gradient check failed: worst {worst:.3e} above {:.3e}",
            a.tolerance
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_entries_yield_to_explicit_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "# comment\npairs = 7\nseed = 3\n").unwrap();
        let argv = vec![
            "lava".to_string(),
            "gen-data".to_string(),
            "--config".to_string(),
            cfg.display().to_string(),
            "--seed".to_string(),
            "9".to_string(),
        ];
        let expanded = expand_config(argv).unwrap();
        let as_str: Vec<&str> = expanded.iter().map(|s| s.as_str()).collect();
        assert_eq!(
            as_str,
            vec!["lava", "gen-data", "--pairs", "7", "--seed", "3", "--seed", "9"]
        );
        // clap resolves the duplicate in favor of the later, explicit flag
        let with_out: Vec<String> = expanded
            .into_iter()
            .chain(["--out".to_string(), dir.path().join("d").display().to_string()])
            .collect();
        let cli = Cli::try_parse_from(&with_out).unwrap();
        match cli.cmd {
            Cmd::GenData(a) => {
                assert_eq!(a.pairs, 7);
                assert_eq!(a.seed, 9);
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn bad_config_lines_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, "pairs 7\n").unwrap();
        let argv = vec![
            "lava".into(),
            "gen-data".into(),
            "--config".into(),
            cfg.display().to_string(),
        ];
        assert!(expand_config(argv).is_err());
        let argv = vec!["lava".into(), "gen-data".into(), "--config".into(), "/no/such/file".into()];
        assert!(expand_config(argv).is_err());
    }

    #[test]
    fn exit_codes_follow_convention() {
        assert_eq!(run_cli(["lava", "no-such-command"]), 2);
        assert_eq!(run_cli(["lava", "gen-data", "--bogus-flag", "1"]), 2);
        assert_eq!(run_cli(["lava", "--help"]), 0);
        // runtime failure: unreadable vocabulary
        assert_eq!(
            run_cli([
                "lava",
                "train-nat",
                "--src",
                "/no/src",
                "--tgt",
                "/no/tgt",
                "--vocab",
                "/no/vocab",
                "--out",
                "/no/out",
            ]),
            1
        );
    }

    #[test]
    fn la_and_strategy_lists_parse() {
        assert_eq!(parse_la("1,1").unwrap(), (1, 1));
        assert_eq!(parse_la("0 , 1").unwrap(), (0, 1));
        assert!(parse_la("2,1").is_err());
        assert!(parse_la("11").is_err());
        let s = parse_strategies("greedy,npd,at-beam,dynamic,greedy").unwrap();
        assert_eq!(s, vec![Strategy::Greedy, Strategy::Npd, Strategy::Dynamic]);
        assert!(parse_strategies("greedy,warp").is_err());
    }

    #[test]
    fn grad_battery_is_tight() {
        for (name, err) in grad_battery(0) {
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn missing_teacher_for_rescoring_is_a_usage_error() {
        let flags = StrategyFlags {
            strategy: Strategy::Npd,
            candidates: 9,
            samples: 9,
            beam: 4,
            threshold: 0.5,
            max_rounds: 4,
            seed: 0,
            teacher: None,
        };
        match strategy_teacher(&flags) {
            Err(Error::Usage(msg)) => assert!(msg.contains("--teacher"), "{msg}"),
            other => panic!("expected usage error, got {:?}", other.map(|_| ())),
        }
    }
}
