//! Wall-clock comparison of the inference strategies against the
//! autoregressive teacher. Everything here runs on the calling thread,
//! batch size one, so the numbers reflect per-sentence latency rather
//! than throughput tricks.

use crate::data::SentencePair;
use crate::decoding::{
    dynamic_decode, greedy_decode, link_rescore_decode, npd_decode, sequential_decode,
    DecodeResult, Direction, Strategy,
};
use crate::error::{Error, Result};
use crate::metrics::{bleu, repeated_token_rate};
use crate::nat::NatModel;
use crate::teacher::Teacher;
use serde::Serialize;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct BenchOptions {
    /// Untimed decodes run before the measured sweep, per strategy.
    pub warmup: usize,
    pub npd_candidates: usize,
    pub link_samples: usize,
    pub seed: u64,
    pub beam_width: usize,
    pub dynamic_threshold: f64,
    pub dynamic_rounds: usize,
    pub strategies: Vec<Strategy>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 5,
            npd_candidates: 9,
            link_samples: 9,
            seed: 0,
            beam_width: 4,
            dynamic_threshold: 0.5,
            dynamic_rounds: 4,
            strategies: vec![
                Strategy::Greedy,
                Strategy::Npd,
                Strategy::LinkRescore,
                Strategy::SeqL2r,
                Strategy::Dynamic,
            ],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub mean_latency_ms: f64,
    /// Teacher beam latency divided by this strategy's latency.
    pub speedup_vs_at: f64,
    pub bleu: f64,
    pub repeat_rate: f64,
    pub mean_candidates_scored: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub sentences: usize,
    pub at_mean_latency_ms: f64,
    pub at_bleu: f64,
    pub at_repeat_rate: f64,
    pub strategies: Vec<StrategyReport>,
}

fn decode_one(
    model: &NatModel,
    teacher: &Teacher,
    strategy: Strategy,
    x: &[usize],
    opts: &BenchOptions,
) -> Result<DecodeResult> {
    match strategy {
        Strategy::Greedy => greedy_decode(model, x),
        Strategy::Npd => npd_decode(model, teacher, x, opts.npd_candidates),
        Strategy::LinkRescore => link_rescore_decode(model, teacher, x, opts.link_samples, opts.seed),
        Strategy::SeqL2r => sequential_decode(model, x, Direction::L2r, opts.beam_width),
        Strategy::SeqR2l => sequential_decode(model, x, Direction::R2l, opts.beam_width),
        Strategy::Dynamic => dynamic_decode(model, x, opts.dynamic_threshold, opts.dynamic_rounds),
    }
}

/// Decode the whole evaluation set once per strategy plus the teacher
/// baseline, reporting mean per-sentence latency, quality, and speedups.
pub fn run_bench(
    model: &NatModel,
    teacher: &Teacher,
    pairs: &[SentencePair],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if pairs.is_empty() {
        return Err(Error::data("benchmark needs at least one sentence"));
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
    let at_cap = teacher.cfg.pos_rows() - 1;

    for i in 0..opts.warmup {
        let x = &pairs[i % pairs.len()].source;
        teacher.beam_decode(x, opts.beam_width, at_cap);
    }
    let mut at_hyps = Vec::with_capacity(pairs.len());
    let mut at_total_ms = 0.0;
    for p in pairs {
        let t0 = Instant::now();
        let (toks, _) = teacher.beam_decode(&p.source, opts.beam_width, at_cap);
        at_total_ms += t0.elapsed().as_secs_f64() * 1e3;
        at_hyps.push(toks);
    }
    let at_mean_latency_ms = at_total_ms / pairs.len() as f64;
    let at_bleu = bleu(&at_hyps, &refs, 4)?;
    let at_repeat_rate = repeated_token_rate(&at_hyps);

    let mut strategies = Vec::new();
    for &strategy in &opts.strategies {
        for i in 0..opts.warmup {
            let x = &pairs[i % pairs.len()].source;
            decode_one(model, teacher, strategy, x, opts)?;
        }
        let mut hyps = Vec::with_capacity(pairs.len());
        let mut total_ms = 0.0;
        let mut total_scored = 0usize;
        for p in pairs {
            let res = decode_one(model, teacher, strategy, &p.source, opts)?;
            total_ms += res.latency_ms;
            total_scored += res.candidates_scored;
            hyps.push(res.tokens);
        }
        let mean_latency_ms = total_ms / pairs.len() as f64;
        strategies.push(StrategyReport {
            strategy,
            mean_latency_ms,
            speedup_vs_at: at_mean_latency_ms / mean_latency_ms,
            bleu: bleu(&hyps, &refs, 4)?,
            repeat_rate: repeated_token_rate(&hyps),
            mean_candidates_scored: total_scored as f64 / pairs.len() as f64,
        });
    }
    Ok(BenchReport {
        sentences: pairs.len(),
        at_mean_latency_ms,
        at_bleu,
        at_repeat_rate,
        strategies,
    })
}
