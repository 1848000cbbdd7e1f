//! Losses, schedules applied, and the two training loops.

use crate::block::RunMode;
use crate::config::{SamplingMode, TrainConfig, LEN_DELTA_MAX};
use crate::data::{SentencePair, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::metrics::repeated_token_rate;
use crate::nat::{resolve_target_length, NatModel, ReadoutMode, ReadoutOutput};
use crate::teacher::Teacher;
use crate::tensor::{argmax, Adam, Param, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

/// w̄ rows: per-row peaked softmax over `logits` mixing `w_vocab` rows.
pub fn peaked_softmax_embed(logits: &Tensor, alpha: f64, w_vocab: &Tensor) -> Tensor {
    assert!(alpha > 0.0, "peaked-softmax temperature must be positive");
    logits.scale(alpha).softmax(1).matmul(w_vocab)
}

/// Label-smoothed cross-entropy of the current head plus plain NLL of the
/// neighbor heads against their shifted targets (BOS left of position 0,
/// EOS right of the last). Sum over positions.
pub fn ce_loss(out: &ReadoutOutput, targets: &[usize], gamma: f64) -> Result<Tensor> {
    let m = out.cur_logits.shape()[0];
    let v = out.cur_logits.shape()[1];
    if targets.len() != m {
        return Err(Error::train(format!(
            "{} targets for {} readout positions",
            targets.len(),
            m
        )));
    }
    if targets.iter().any(|&t| t >= v || t == PAD) {
        return Err(Error::train("target contains PAD or out-of-vocabulary ids"));
    }
    let lp = out.cur_logits.log_softmax(1);
    let nll = lp.take_per_row(targets).sum_all().neg();
    let mut loss = if gamma == 0.0 {
        nll
    } else {
        let uniform = lp.sum_all().neg().scale(gamma / v as f64);
        nll.scale(1.0 - gamma).add(&uniform)
    };
    if let Some(left) = &out.left_logits {
        let mut shifted = vec![BOS];
        shifted.extend_from_slice(&targets[..m - 1]);
        loss = loss.add(&left.log_softmax(1).take_per_row(&shifted).sum_all().neg());
    }
    if let Some(right) = &out.right_logits {
        let mut shifted: Vec<usize> = targets[1..].to_vec();
        shifted.push(EOS);
        loss = loss.add(&right.log_softmax(1).take_per_row(&shifted).sum_all().neg());
    }
    Ok(loss)
}

/// Bag-of-words loss over summed current-head logits: the binary predictor
/// p_bow = sigmoid(sum_i (W z̄_i + b)) is penalized on the target's word
/// set, duplicates counting once.
pub fn bow_loss(zbar: &Tensor, w_cur: &Tensor, b_cur: &Tensor, targets: &[usize]) -> Tensor {
    let logits = zbar.matmul(w_cur).add_row(b_cur).sum_axis0();
    bow_loss_from_summed_logits(&logits, targets)
}

/// Same loss given the already-summed `[|V|]` logits.
pub fn bow_loss_from_summed_logits(summed: &Tensor, targets: &[usize]) -> Tensor {
    let members: Vec<usize> = targets.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    summed.log_sigmoid().take(&members).sum_all().neg()
}

/// L = L_ce + λ_t · L_bow.
pub fn combined_loss(ce: &Tensor, bow: &Tensor, lambda_t: f64) -> Tensor {
    ce.add(&bow.scale(lambda_t))
}

/// Cross-entropy of the length head against the clipped true difference.
pub fn length_loss(length_logits: &Tensor, n: usize, m_true: usize) -> Tensor {
    let delta = (m_true as i64 - n as i64).clamp(-LEN_DELTA_MAX, LEN_DELTA_MAX);
    let class = (delta + LEN_DELTA_MAX) as usize;
    length_logits.log_softmax(1).take_per_row(&[class]).sum_all().neg()
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub bow: f64,
    pub length_acc: f64,
    pub token_acc: f64,
    pub repeat_rate: f64,
}

pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    /// Dev losses per epoch, the checkpoint-selection criterion.
    pub dev_losses: Vec<f64>,
}

fn split_dev(pairs: &[SentencePair], frac: f64, rng: &mut ChaCha8Rng) -> (Vec<SentencePair>, Vec<SentencePair>) {
    let mut shuffled: Vec<SentencePair> = pairs.to_vec();
    shuffled.shuffle(rng);
    let n_dev = ((pairs.len() as f64 * frac).round() as usize).min(pairs.len().saturating_sub(1));
    let dev = shuffled.split_off(shuffled.len() - n_dev);
    (shuffled, dev)
}

/// Average the `keep` best snapshots by dev loss into the live parameters.
fn average_checkpoints(
    history: Vec<(f64, BTreeMap<String, Vec<f64>>)>,
    keep: usize,
    apply: &mut dyn FnMut(&str, &[f64]),
) {
    if history.is_empty() || keep == 0 {
        return;
    }
    let mut ranked = history;
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let chosen: Vec<_> = ranked.into_iter().take(keep).map(|(_, s)| s).collect();
    let k = chosen.len() as f64;
    let names: Vec<String> = chosen[0].keys().cloned().collect();
    for name in names {
        let len = chosen[0][&name].len();
        let mut avg = vec![0.0; len];
        for snap in &chosen {
            for (a, v) in avg.iter_mut().zip(&snap[&name]) {
                *a += v / k;
            }
        }
        apply(&name, &avg);
    }
}

fn collect_params(visit: &mut dyn FnMut(&mut dyn FnMut(&Param))) -> BTreeMap<String, Vec<f64>> {
    let mut map = BTreeMap::new();
    visit(&mut |p: &Param| {
        map.insert(p.name().to_string(), p.values().to_vec());
    });
    map
}

fn check_pair(pair: &SentencePair, vocab_size: usize, max_len: usize) -> Result<()> {
    if pair.source.is_empty() || pair.target.is_empty() {
        return Err(Error::train("empty source or target sentence"));
    }
    if pair.source.len() > max_len || pair.target.len() > max_len {
        return Err(Error::train(format!(
            "sentence longer than max_len {max_len}: source {}, target {}",
            pair.source.len(),
            pair.target.len()
        )));
    }
    for &t in pair.source.iter().chain(&pair.target) {
        if t >= vocab_size {
            return Err(Error::train(format!("token id {t} outside vocabulary")));
        }
        if t == PAD || t == BOS || t == EOS {
            return Err(Error::train(format!("reserved token id {t} inside a sentence")));
        }
    }
    Ok(())
}

/// Scheduled-sampling ground-truth probability: decays 1 -> 0.5 linearly
/// over the epochs.
pub fn ss_gt_prob(epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return 1.0;
    }
    1.0 - 0.5 * (epoch as f64 / (total_epochs - 1) as f64)
}

struct GradAccum {
    grads: BTreeMap<String, Vec<f64>>,
    count: usize,
}

impl GradAccum {
    fn new() -> Self {
        GradAccum {
            grads: BTreeMap::new(),
            count: 0,
        }
    }

    fn absorb(&mut self, tape: &Tape, visit: &mut dyn FnMut(&mut dyn FnMut(&Param))) {
        visit(&mut |p: &Param| {
            let g = tape.grad_for(p);
            let slot = self
                .grads
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            for (s, v) in slot.iter_mut().zip(&g) {
                *s += v;
            }
        });
        self.count += 1;
    }

    fn step(&mut self, adam: &mut Adam, lr: f64, visit_mut: &mut dyn FnMut(&mut dyn FnMut(&mut Param))) {
        let k = self.count.max(1) as f64;
        let grads = std::mem::take(&mut self.grads);
        visit_mut(&mut |p: &mut Param| {
            if let Some(g) = grads.get(p.name()) {
                let mean: Vec<f64> = g.iter().map(|v| v / k).collect();
                adam.update(p, &mean, lr);
            }
        });
        self.count = 0;
    }
}

/// One teacher-forced NAT loss over a single pair. Returns (total, ce, bow)
/// as tensors on `tape`.
pub fn nat_pair_loss(
    model: &NatModel,
    tape: &Tape,
    pair: &SentencePair,
    tc: &TrainConfig,
    epoch: usize,
    mode: &mut RunMode,
    ss_rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let m = pair.target.len();
    let enc = model.encoder.encode_all_valid(tape, &pair.source, mode);
    let len_logits = model.predict_length_logits(tape, &enc)?;
    let len_ce = length_loss(&len_logits, enc.n, m);
    let d_input = model.copy_source_input(&enc, m);
    let trace = model.decoder_forward(tape, &d_input, &enc, mode);
    let mut readout_mode = match tc.sampling {
        SamplingMode::Tf => ReadoutMode::TrainTf {
            targets: &pair.target,
        },
        SamplingMode::Ss => ReadoutMode::TrainSs {
            targets: &pair.target,
            gt_prob: ss_gt_prob(epoch, tc.epochs),
            rng: ss_rng,
        },
        SamplingMode::Dss => ReadoutMode::TrainDss { alpha: tc.alpha },
    };
    let out = model.look_around_readout(tape, &trace.z_final, &mut readout_mode);
    let ce = ce_loss(&out, &pair.target, tc.gamma)?;
    let lambda = tc.lambda.at(epoch);
    let bow = tc.use_bow.then(|| {
        bow_loss_from_summed_logits(&out.cur_logits.sum_axis0(), &pair.target)
    });
    let total = match &bow {
        Some(b) => combined_loss(&ce, b, lambda),
        None => ce.clone(),
    };
    Ok((total.add(&len_ce), ce, bow))
}

/// Dev-set criterion: per-token readout NLL plus length CE, computed in eval
/// mode with the readout conditioned exactly as at inference (model-predicted
/// neighbors, not ground truth). Teacher-forced conditioning would rank
/// epochs by a quantity that self-conditioned training deliberately trades
/// away, and checkpoint selection would then favor the wrong snapshots.
fn nat_dev_loss(model: &NatModel, dev: &[SentencePair]) -> Result<f64> {
    if dev.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for pair in dev {
        let tape = Tape::no_grad();
        let mut mode = RunMode::Eval;
        let enc = model.encoder.encode_all_valid(&tape, &pair.source, &mut mode);
        let len_logits = model.predict_length_logits(&tape, &enc)?;
        let len_ce = length_loss(&len_logits, enc.n, pair.target.len());
        let d_input = model.copy_source_input(&enc, pair.target.len());
        let trace = model.decoder_forward(&tape, &d_input, &enc, &mut mode);
        let out = model.look_around_readout(&tape, &trace.z_final, &mut ReadoutMode::Infer);
        let ce = ce_loss(&out, &pair.target, 0.0)?;
        total += ce.item() + len_ce.item();
        tokens += pair.target.len();
    }
    Ok(total / tokens.max(1) as f64)
}

/// Greedy dev diagnostics: length accuracy, teacher-forced-length token
/// accuracy, and repeat rate of free decodes.
fn nat_dev_diagnostics(model: &NatModel, dev: &[SentencePair]) -> Result<(f64, f64, f64)> {
    if dev.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let mut len_hits = 0usize;
    let mut tok_hits = 0usize;
    let mut tok_total = 0usize;
    let mut decodes = Vec::new();
    for pair in dev {
        let tape = Tape::no_grad();
        let mut mode = RunMode::Eval;
        let enc = model.encoder.encode_all_valid(&tape, &pair.source, &mut mode);
        let delta = model.predict_delta_m(&tape, &enc)?;
        let true_delta = (pair.target.len() as i64 - enc.n as i64).clamp(-LEN_DELTA_MAX, LEN_DELTA_MAX);
        if delta == true_delta {
            len_hits += 1;
        }
        // token accuracy with the length teacher-forced
        let m = pair.target.len();
        let d_input = model.copy_source_input(&enc, m);
        let trace = model.decoder_forward(&tape, &d_input, &enc, &mut mode);
        let out = model.look_around_readout(&tape, &trace.z_final, &mut ReadoutMode::Infer);
        let (toks, _) = out.argmax_tokens();
        tok_hits += toks
            .iter()
            .zip(&pair.target)
            .filter(|(a, b)| a == b)
            .count();
        tok_total += m;
        // free decode for the repeat rate
        let free_m = resolve_target_length(enc.n, delta);
        let d_free = model.copy_source_input(&enc, free_m);
        let trace_free = model.decoder_forward(&tape, &d_free, &enc, &mut mode);
        let out_free = model.look_around_readout(&tape, &trace_free.z_final, &mut ReadoutMode::Infer);
        decodes.push(out_free.argmax_tokens().0);
    }
    Ok((
        len_hits as f64 / dev.len() as f64,
        tok_hits as f64 / tok_total.max(1) as f64,
        repeated_token_rate(&decodes),
    ))
}

/// Train the NAT model. Expects KD/encoder-init to have been applied by the
/// caller; `corpus` is what the model actually fits. Dev split, epoch
/// metrics on `log` (one JSON object per line), checkpoint averaging of the
/// best epochs by dev loss.
pub fn train_nat(
    model: &mut NatModel,
    corpus: &[SentencePair],
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    tc.validate()?;
    if corpus.is_empty() {
        return Err(Error::train("empty training corpus"));
    }
    for pair in corpus {
        check_pair(pair, model.cfg.vocab_size, model.cfg.max_len)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let (train_set, dev_set) = split_dev(corpus, tc.dev_fraction, &mut rng);
    let mut adam = Adam::new();
    let mut step = 0usize;
    let mut metrics = Vec::new();
    let mut dev_losses = Vec::new();
    let mut history: Vec<(f64, BTreeMap<String, Vec<f64>>)> = Vec::new();

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sum_total = 0.0;
        let mut sum_ce = 0.0;
        let mut sum_bow = 0.0;
        let mut n_tokens = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let mut accum = GradAccum::new();
            for &idx in batch {
                let pair = &train_set[idx];
                let tape = Tape::new();
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen::<u64>());
                let mut ss_rng = ChaCha8Rng::seed_from_u64(rng.gen::<u64>());
                let mut mode = RunMode::Train {
                    dropout: model.cfg.dropout,
                    rng: &mut dropout_rng,
                };
                let (total, ce, bow) =
                    nat_pair_loss(model, &tape, pair, tc, epoch, &mut mode, &mut ss_rng)?;
                let v = total.item();
                if !v.is_finite() {
                    return Err(Error::train(format!(
                        "non-finite loss {v} at epoch {epoch}, step {step}"
                    )));
                }
                sum_total += v;
                sum_ce += ce.item();
                if let Some(b) = &bow {
                    sum_bow += b.item();
                }
                n_tokens += pair.target.len();
                total.backward();
                accum.absorb(&tape, &mut |f| model.visit(f));
            }
            step += 1;
            let lr = tc.lr_at(step);
            accum.step(&mut adam, lr, &mut |f| model.visit_mut(f));
        }
        let dev_loss = nat_dev_loss(model, &dev_set)?;
        dev_losses.push(dev_loss);
        history.push((dev_loss, collect_params(&mut |f| model.visit(f))));
        let (length_acc, token_acc, repeat_rate) = nat_dev_diagnostics(model, &dev_set)?;
        let em = EpochMetrics {
            epoch,
            loss: sum_total / n_tokens.max(1) as f64,
            ce: sum_ce / n_tokens.max(1) as f64,
            bow: sum_bow / n_tokens.max(1) as f64,
            length_acc,
            token_acc,
            repeat_rate,
        };
        serde_json::to_writer(&mut *log, &em).map_err(|e| Error::train(e.to_string()))?;
        writeln!(log)?;
        metrics.push(em);
    }

    average_checkpoints(history, tc.average_best.max(1), &mut |name, avg| {
        model.visit_mut(&mut |p: &mut Param| {
            if p.name() == name {
                p.set_values(avg);
            }
        });
    });
    Ok(TrainSummary {
        metrics,
        dev_losses,
    })
}

/// Teacher-forced dev NLL per token for the teacher.
fn teacher_dev_loss(teacher: &Teacher, dev: &[SentencePair]) -> Result<f64> {
    if dev.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for pair in dev {
        total -= teacher.score_sequence(&pair.source, &pair.target)?;
        tokens += pair.target.len() + 1;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Train the autoregressive teacher with label-smoothed cross-entropy.
pub fn train_teacher(
    teacher: &mut Teacher,
    corpus: &[SentencePair],
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    tc.validate()?;
    if corpus.is_empty() {
        return Err(Error::train("empty training corpus"));
    }
    for pair in corpus {
        check_pair(pair, teacher.cfg.vocab_size, teacher.cfg.max_len)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let (train_set, dev_set) = split_dev(corpus, tc.dev_fraction, &mut rng);
    let mut adam = Adam::new();
    let mut step = 0usize;
    let mut metrics = Vec::new();
    let mut dev_losses = Vec::new();
    let mut history: Vec<(f64, BTreeMap<String, Vec<f64>>)> = Vec::new();
    let v = teacher.cfg.vocab_size;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sum_total = 0.0;
        let mut n_tokens = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let mut accum = GradAccum::new();
            for &idx in batch {
                let pair = &train_set[idx];
                let tape = Tape::new();
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen::<u64>());
                let mut mode = RunMode::Train {
                    dropout: teacher.cfg.dropout,
                    rng: &mut dropout_rng,
                };
                let enc = teacher.encoder.encode_all_valid(&tape, &pair.source, &mut mode);
                let mut y_in = vec![BOS];
                y_in.extend_from_slice(&pair.target);
                let mut targets = pair.target.clone();
                targets.push(EOS);
                let logits = teacher.decoder_logits(&tape, &enc, &y_in, &mut mode);
                let lp = logits.log_softmax(1);
                let nll = lp.take_per_row(&targets).sum_all().neg();
                let loss = if tc.gamma == 0.0 {
                    nll
                } else {
                    let uniform = lp.sum_all().neg().scale(tc.gamma / v as f64);
                    nll.scale(1.0 - tc.gamma).add(&uniform)
                };
                let val = loss.item();
                if !val.is_finite() {
                    return Err(Error::train(format!(
                        "non-finite loss {val} at epoch {epoch}, step {step}"
                    )));
                }
                sum_total += val;
                n_tokens += targets.len();
                loss.backward();
                accum.absorb(&tape, &mut |f| teacher.visit(f));
            }
            step += 1;
            let lr = tc.lr_at(step);
            accum.step(&mut adam, lr, &mut |f| teacher.visit_mut(f));
        }
        let dev_loss = teacher_dev_loss(teacher, &dev_set)?;
        dev_losses.push(dev_loss);
        history.push((dev_loss, collect_params(&mut |f| teacher.visit(f))));
        // teacher-forced next-token accuracy and greedy repeat rate on dev
        let (token_acc, repeat_rate) = if dev_set.is_empty() {
            (0.0, 0.0)
        } else {
            let mut hits = 0usize;
            let mut total = 0usize;
            let mut decodes = Vec::new();
            for pair in &dev_set {
                let tape = Tape::no_grad();
                let mut mode = RunMode::Eval;
                let enc = teacher.encoder.encode_all_valid(&tape, &pair.source, &mut mode);
                let mut y_in = vec![BOS];
                y_in.extend_from_slice(&pair.target);
                let mut targets = pair.target.clone();
                targets.push(EOS);
                let logits = teacher.decoder_logits(&tape, &enc, &y_in, &mut mode);
                let data = logits.to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    if argmax(&data[i * v..(i + 1) * v]) == t {
                        hits += 1;
                    }
                }
                total += targets.len();
                decodes.push(teacher.beam_decode(&pair.source, 1, teacher.cfg.max_len).0);
            }
            (hits as f64 / total.max(1) as f64, repeated_token_rate(&decodes))
        };
        let em = EpochMetrics {
            epoch,
            loss: sum_total / n_tokens.max(1) as f64,
            ce: sum_total / n_tokens.max(1) as f64,
            bow: 0.0,
            length_acc: 0.0,
            token_acc,
            repeat_rate,
        };
        serde_json::to_writer(&mut *log, &em).map_err(|e| Error::train(e.to_string()))?;
        writeln!(log)?;
        metrics.push(em);
    }

    average_checkpoints(history, tc.average_best.max(1), &mut |name, avg| {
        teacher.visit_mut(&mut |p: &mut Param| {
            if p.name() == name {
                p.set_values(avg);
            }
        });
    });
    Ok(TrainSummary {
        metrics,
        dev_losses,
    })
}
