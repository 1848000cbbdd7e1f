//! Non-autoregressive model: length prediction, copied decoder input,
//! vocabulary attention, and the look-around readout.

use crate::block::{pair_mask, RunMode, TransformerBlock};
use crate::config::{ModelConfig, LEN_CLASSES, LEN_DELTA_MAX};
use crate::data::{BOS, EOS};
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Param, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// How the readout obtains neighbor-token embeddings.
pub enum ReadoutMode<'a> {
    /// Model's own argmax neighbor predictions (decoding).
    Infer,
    /// Ground-truth neighbors from `targets` (teacher forcing).
    TrainTf { targets: &'a [usize] },
    /// Coin-flip per position between ground truth and the model's argmax.
    TrainSs {
        targets: &'a [usize],
        gt_prob: f64,
        rng: &'a mut ChaCha8Rng,
    },
    /// Differentiable peaked-softmax mixture of embedding rows.
    TrainDss { alpha: f64 },
}

/// One explicit neighbor fed into the gate pathway during refinement or
/// sequential decoding.
#[derive(Clone, Copy, Debug)]
pub enum NeighborInput {
    /// Keep the model's own argmax prediction for this side.
    Model,
    /// Embed this token id instead.
    Token(usize),
}

pub struct DecoderTrace {
    /// Z^(0) (the copied input) through Z^(N) (after the last block).
    pub z_layers: Vec<Tensor>,
    /// Vocabulary-attention outputs; N+1 entries when VA is on, empty otherwise.
    pub a_layers: Vec<Tensor>,
    /// Representation handed to the readout: A^(N) with VA, else Z^(N).
    pub z_final: Tensor,
}

pub struct ReadoutOutput {
    /// Pre-softmax logits `[m, |V|]`; None when the side is disabled.
    pub left_logits: Option<Tensor>,
    pub right_logits: Option<Tensor>,
    /// Current-token logits `[m, |V|]` over the fused representation.
    pub cur_logits: Tensor,
    /// Fused per-position representations `[m, 3d]`.
    pub zbar: Tensor,
    /// Argmax ids of the side heads (empty when disabled).
    pub left_ids: Vec<usize>,
    pub right_ids: Vec<usize>,
}

impl ReadoutOutput {
    /// Argmax token per position with its probability under the current head.
    pub fn argmax_tokens(&self) -> (Vec<usize>, Vec<f64>) {
        let probs = self.cur_logits.softmax(1);
        let v = probs.shape()[1];
        let data = probs.to_vec();
        let mut toks = Vec::new();
        let mut ps = Vec::new();
        for row in data.chunks(v) {
            let t = argmax(row);
            toks.push(t);
            ps.push(row[t]);
        }
        (toks, ps)
    }
}

/// Everything a one-pass decode produces, for tests and the greedy strategy.
pub struct NatForwardOutput {
    pub delta_m: i64,
    pub m: usize,
    pub tokens: Vec<usize>,
    pub token_probs: Vec<f64>,
    pub left_ids: Vec<usize>,
    pub right_ids: Vec<usize>,
}

/// a_j = softmax(z_j W^T) W, rowwise over `z`: every output row is a convex
/// combination of vocabulary rows.
pub fn vocabulary_attention(z: &Tensor, w_vocab: &Tensor) -> Tensor {
    z.matmul_nt(w_vocab).softmax(1).matmul(w_vocab)
}

/// m = max(1, n + delta).
pub fn resolve_target_length(n: usize, delta_m: i64) -> usize {
    (n as i64 + delta_m).max(1) as usize
}

/// Source row index feeding decoder position `i`: floor((n/m)*i), 0-based.
pub fn copy_indices(n: usize, m: usize) -> Vec<usize> {
    assert!(n >= 1 && m >= 1, "copy_indices needs n, m >= 1");
    (0..m).map(|i| n * i / m).collect()
}

pub struct NatModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    /// Vocabulary embedding table `[|V|, d]`: attention target, neighbor
    /// embedding rows, and peaked-softmax mixture basis, all one storage.
    pub w_vocab: Param,
    /// Decoder position embeddings used by the readout.
    pub pos_table: Param,
    pub dec_blocks: Vec<TransformerBlock>,
    /// Per-layer [Z; A] fusion, 2d -> d; empty when VA is off.
    pub fuse_w: Vec<Param>,
    pub fuse_b: Vec<Param>,
    pub w_left: Param,
    pub b_left: Param,
    pub w_right: Param,
    pub b_right: Param,
    /// Current readout over the fused width 3d.
    pub w_cur: Param,
    pub b_cur: Param,
    pub gate_lw: Param,
    pub gate_lb: Param,
    pub gate_rw: Param,
    pub gate_rb: Param,
    /// Boundary position embeddings standing in for p_{-1} and p_{m}.
    pub sent_left: Param,
    pub sent_right: Param,
    pub len_w: Param,
    pub len_b: Param,
}

impl NatModel {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("invalid model config");
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        // Vocabulary attention computes softmax(z W^T) with no temperature, so
        // the embedding table needs unit-scale logits at init; with the usual
        // 0.02 std the attention starts indistinguishable from uniform and the
        // decoder collapses to a position-only predictor it never escapes.
        let emb_std = 1.0 / (d as f64).sqrt();
        let encoder = Encoder::new("enc", cfg, rng);
        let dec_blocks: Vec<TransformerBlock> = (0..cfg.n_blocks)
            .map(|i| {
                TransformerBlock::new(
                    &format!("nat.b{i}"),
                    d,
                    cfg.n_heads,
                    cfg.d_ff,
                    cfg.rel_clip,
                    cfg.cross_attention,
                    rng,
                )
            })
            .collect();
        let (fuse_w, fuse_b) = if cfg.vocab_attention {
            (
                (0..cfg.n_blocks)
                    .map(|i| Param::randn(&format!("nat.b{i}.fuse_w"), &[2 * d, d], 0.02, rng))
                    .collect(),
                (0..cfg.n_blocks)
                    .map(|i| Param::zeros(&format!("nat.b{i}.fuse_b"), &[d]))
                    .collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        NatModel {
            cfg: cfg.clone(),
            encoder,
            w_vocab: Param::randn("nat.wvocab", &[v, d], emb_std, rng),
            pos_table: Param::randn("nat.pos", &[cfg.pos_rows(), d], emb_std, rng),
            dec_blocks,
            fuse_w,
            fuse_b,
            w_left: Param::randn("nat.la.wl", &[d, v], 0.02, rng),
            b_left: Param::zeros("nat.la.bl", &[v]),
            w_right: Param::randn("nat.la.wr", &[d, v], 0.02, rng),
            b_right: Param::zeros("nat.la.br", &[v]),
            w_cur: Param::randn("nat.la.wc", &[3 * d, v], 0.02, rng),
            b_cur: Param::zeros("nat.la.bc", &[v]),
            gate_lw: Param::randn("nat.la.glw", &[d, d], 0.02, rng),
            gate_lb: Param::zeros("nat.la.glb", &[d]),
            gate_rw: Param::randn("nat.la.grw", &[d, d], 0.02, rng),
            gate_rb: Param::zeros("nat.la.grb", &[d]),
            sent_left: Param::randn("nat.la.sent_l", &[1, d], emb_std, rng),
            sent_right: Param::randn("nat.la.sent_r", &[1, d], emb_std, rng),
            len_w: Param::randn("nat.len.w", &[d, LEN_CLASSES], 0.02, rng),
            len_b: Param::zeros("nat.len.b", &[LEN_CLASSES]),
        }
    }

    /// Length-difference logits `[1, 41]` from max-pooled encoder rows.
    pub fn predict_length_logits(&self, tape: &Tape, enc: &EncoderOutput) -> Result<Tensor> {
        if !enc.mask.iter().any(|&m| m) {
            return Err(Error::data("length prediction over a fully masked source"));
        }
        let pooled = enc.h.masked_max_rows(&enc.mask);
        Ok(pooled
            .matmul(&tape.read(&self.len_w))
            .add_row(&tape.read(&self.len_b)))
    }

    /// Argmax length difference in [-20, 20].
    pub fn predict_delta_m(&self, tape: &Tape, enc: &EncoderOutput) -> Result<i64> {
        let logits = self.predict_length_logits(tape, enc)?;
        Ok(argmax(&logits.to_vec()) as i64 - LEN_DELTA_MAX)
    }

    /// Decoder input rows copied from the encoder by the floor rule.
    pub fn copy_source_input(&self, enc: &EncoderOutput, m: usize) -> Tensor {
        enc.h.gather_rows(&copy_indices(enc.n, m))
    }

    /// Run the decoder stack on input `d_input` `[m, d]`. Self-attention is
    /// bidirectional over all m positions; cross-attention sees the live
    /// source rows when configured.
    pub fn decoder_forward(
        &self,
        tape: &Tape,
        d_input: &Tensor,
        enc: &EncoderOutput,
        mode: &mut RunMode,
    ) -> DecoderTrace {
        let m = d_input.shape()[0];
        let self_mask = vec![true; m * m];
        let cross_mask = pair_mask(&vec![true; m], &enc.mask);
        let w = tape.read(&self.w_vocab);
        let mut z = mode.apply_dropout(d_input);
        let mut z_layers = vec![z.clone()];
        let mut a_layers = Vec::new();
        for (i, block) in self.dec_blocks.iter().enumerate() {
            let fused = if self.cfg.vocab_attention {
                let a = vocabulary_attention(&z, &w);
                let cat = Tensor::concat_cols(&[&z, &a]);
                a_layers.push(a);
                cat.matmul(&tape.read(&self.fuse_w[i]))
                    .add_row(&tape.read(&self.fuse_b[i]))
            } else {
                z.clone()
            };
            let cross = self
                .cfg
                .cross_attention
                .then_some((&enc.h, cross_mask.as_slice()));
            z = block.forward(tape, &fused, &self_mask, cross, mode);
            z_layers.push(z.clone());
        }
        let z_final = if self.cfg.vocab_attention {
            let a = vocabulary_attention(&z, &w);
            a_layers.push(a.clone());
            a
        } else {
            z.clone()
        };
        DecoderTrace {
            z_layers,
            a_layers,
            z_final,
        }
    }

    /// Position rows `[m+2, d]`: sentinel, p_0..p_{m-1}, sentinel. Row i+1
    /// is p_i, so slices at offsets 0/1/2 give p_{i-1}, p_i, p_{i+1}.
    fn position_rows(&self, tape: &Tape, m: usize) -> Tensor {
        assert!(
            m <= self.cfg.pos_rows(),
            "target length {m} exceeds position table rows {}",
            self.cfg.pos_rows()
        );
        let ids: Vec<usize> = (0..m).collect();
        let pos = tape.read(&self.pos_table).gather_rows(&ids);
        Tensor::concat_rows(&[
            &tape.read(&self.sent_left),
            &pos,
            &tape.read(&self.sent_right),
        ])
    }

    /// Neighbor embedding rows for one side given its head logits.
    /// `shifted_targets` are the ground-truth neighbor ids for TF/SS.
    fn neighbor_embeddings(
        &self,
        side_logits: &Tensor,
        w: &Tensor,
        shifted_targets: Option<Vec<usize>>,
        mode: &mut ReadoutMode,
    ) -> Tensor {
        let v = self.cfg.vocab_size;
        match mode {
            ReadoutMode::Infer => {
                let data = side_logits.to_vec();
                let ids: Vec<usize> = data.chunks(v).map(argmax).collect();
                w.gather_rows(&ids)
            }
            ReadoutMode::TrainTf { .. } => {
                w.gather_rows(&shifted_targets.expect("TF needs targets"))
            }
            ReadoutMode::TrainSs { gt_prob, rng, .. } => {
                let gt = shifted_targets.expect("SS needs targets");
                let data = side_logits.to_vec();
                let ids: Vec<usize> = gt
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| {
                        if rng.gen::<f64>() < *gt_prob {
                            t
                        } else {
                            argmax(&data[i * v..(i + 1) * v])
                        }
                    })
                    .collect();
                w.gather_rows(&ids)
            }
            ReadoutMode::TrainDss { alpha } => {
                assert!(*alpha > 0.0, "peaked-softmax temperature must be positive");
                side_logits.scale(*alpha).softmax(1).matmul(w)
            }
        }
    }

    /// The look-around readout over final representations `z_final` `[m, d]`.
    ///
    /// Left head: softmax(W_l (z_i + p_{i-1}) + b_l); right mirrors with
    /// p_{i+1}. Neighbor embeddings (per `mode`) are gated and concatenated
    /// with z_i + p_i; the current head reads the fused width-3d rows.
    /// A disabled side contributes an exact-zero slot and no distributions.
    pub fn look_around_readout(
        &self,
        tape: &Tape,
        z_final: &Tensor,
        mode: &mut ReadoutMode,
    ) -> ReadoutOutput {
        let m = z_final.shape()[0];
        let d = self.cfg.d_model;
        assert!(m >= 1, "readout over an empty sequence");
        if let ReadoutMode::TrainTf { targets } | ReadoutMode::TrainSs { targets, .. } = mode {
            assert_eq!(targets.len(), m, "targets must match the readout length");
        }
        let pos_full = self.position_rows(tape, m);
        let p_prev = pos_full.slice_rows(0, m);
        let p_cur = pos_full.slice_rows(1, m + 1);
        let p_next = pos_full.slice_rows(2, m + 2);
        let w = tape.read(&self.w_vocab);
        let v = self.cfg.vocab_size;

        let targets_of = |mode: &ReadoutMode| match mode {
            ReadoutMode::TrainTf { targets } | ReadoutMode::TrainSs { targets, .. } => {
                Some(targets.to_vec())
            }
            _ => None,
        };

        let mut left_logits = None;
        let mut left_slot = tape.zeros(&[m, d]);
        let mut left_ids = Vec::new();
        if self.cfg.left_size == 1 {
            let logits = z_final
                .add(&p_prev)
                .matmul(&tape.read(&self.w_left))
                .add_row(&tape.read(&self.b_left));
            let shifted = targets_of(mode).map(|t| {
                let mut ids = vec![BOS];
                ids.extend_from_slice(&t[..m - 1]);
                ids
            });
            let w_l = self.neighbor_embeddings(&logits, &w, shifted, mode);
            let gate = w_l
                .add(&p_prev)
                .matmul(&tape.read(&self.gate_lw))
                .add_row(&tape.read(&self.gate_lb))
                .sigmoid();
            left_slot = gate.mul(&w_l);
            left_ids = logits.to_vec().chunks(v).map(argmax).collect();
            left_logits = Some(logits);
        }

        let mut right_logits = None;
        let mut right_slot = tape.zeros(&[m, d]);
        let mut right_ids = Vec::new();
        if self.cfg.right_size == 1 {
            let logits = z_final
                .add(&p_next)
                .matmul(&tape.read(&self.w_right))
                .add_row(&tape.read(&self.b_right));
            let shifted = targets_of(mode).map(|t| {
                let mut ids: Vec<usize> = t[1..].to_vec();
                ids.push(EOS);
                ids
            });
            let w_r = self.neighbor_embeddings(&logits, &w, shifted, mode);
            let gate = w_r
                .add(&p_next)
                .matmul(&tape.read(&self.gate_rw))
                .add_row(&tape.read(&self.gate_rb))
                .sigmoid();
            right_slot = gate.mul(&w_r);
            right_ids = logits.to_vec().chunks(v).map(argmax).collect();
            right_logits = Some(logits);
        }

        let zbar = Tensor::concat_cols(&[&z_final.add(&p_cur), &left_slot, &right_slot]);
        let cur_logits = zbar
            .matmul(&tape.read(&self.w_cur))
            .add_row(&tape.read(&self.b_cur));
        ReadoutOutput {
            left_logits,
            right_logits,
            cur_logits,
            zbar,
            left_ids,
            right_ids,
        }
    }

    /// Current-token log-probabilities at position `i`, recomputed in
    /// isolation with explicit control over each neighbor pathway. Edge
    /// positions fall back to BOS (left of 0) and EOS (right of m-1) when a
    /// token override is requested via `Model` at a missing neighbor; pass
    /// `Token` ids from the working sequence during refinement.
    pub fn current_logprobs_with_neighbors(
        &self,
        tape: &Tape,
        z_final: &Tensor,
        i: usize,
        left: NeighborInput,
        right: NeighborInput,
    ) -> Vec<f64> {
        let m = z_final.shape()[0];
        let d = self.cfg.d_model;
        assert!(i < m, "position {i} out of range for length {m}");
        let pos_full = self.position_rows(tape, m);
        let p_prev = pos_full.slice_rows(i, i + 1);
        let p_cur = pos_full.slice_rows(i + 1, i + 2);
        let p_next = pos_full.slice_rows(i + 2, i + 3);
        let z_i = z_final.slice_rows(i, i + 1);
        let w = tape.read(&self.w_vocab);
        let v = self.cfg.vocab_size;

        let left_slot = if self.cfg.left_size == 1 {
            let id = match left {
                NeighborInput::Token(t) => t,
                NeighborInput::Model => {
                    let logits = z_i
                        .add(&p_prev)
                        .matmul(&tape.read(&self.w_left))
                        .add_row(&tape.read(&self.b_left));
                    argmax(&logits.to_vec())
                }
            };
            assert!(id < v, "left neighbor id {id} out of vocabulary");
            let w_l = w.gather_rows(&[id]);
            let gate = w_l
                .add(&p_prev)
                .matmul(&tape.read(&self.gate_lw))
                .add_row(&tape.read(&self.gate_lb))
                .sigmoid();
            gate.mul(&w_l)
        } else {
            tape.zeros(&[1, d])
        };
        let right_slot = if self.cfg.right_size == 1 {
            let id = match right {
                NeighborInput::Token(t) => t,
                NeighborInput::Model => {
                    let logits = z_i
                        .add(&p_next)
                        .matmul(&tape.read(&self.w_right))
                        .add_row(&tape.read(&self.b_right));
                    argmax(&logits.to_vec())
                }
            };
            assert!(id < v, "right neighbor id {id} out of vocabulary");
            let w_r = w.gather_rows(&[id]);
            let gate = w_r
                .add(&p_next)
                .matmul(&tape.read(&self.gate_rw))
                .add_row(&tape.read(&self.gate_rb))
                .sigmoid();
            gate.mul(&w_r)
        } else {
            tape.zeros(&[1, d])
        };
        let zbar = Tensor::concat_cols(&[&z_i.add(&p_cur), &left_slot, &right_slot]);
        zbar.matmul(&tape.read(&self.w_cur))
            .add_row(&tape.read(&self.b_cur))
            .log_softmax(1)
            .to_vec()
    }

    /// Readout for position `i` alone, everything else masked out. Used by
    /// the parallelism harness: must match the joint readout bitwise.
    pub fn readout_single_position(&self, tape: &Tape, z_final: &Tensor, i: usize) -> Vec<f64> {
        let m = z_final.shape()[0];
        assert!(i < m);
        let pos_full = self.position_rows(tape, m);
        let p_prev = pos_full.slice_rows(i, i + 1);
        let p_cur = pos_full.slice_rows(i + 1, i + 2);
        let p_next = pos_full.slice_rows(i + 2, i + 3);
        let z_i = z_final.slice_rows(i, i + 1);
        let d = self.cfg.d_model;
        let w = tape.read(&self.w_vocab);

        let slot = |on: bool,
                    p: &Tensor,
                    w_side: &Param,
                    b_side: &Param,
                    gw: &Param,
                    gb: &Param| {
            if !on {
                return tape.zeros(&[1, d]);
            }
            let logits = z_i
                .add(p)
                .matmul(&tape.read(w_side))
                .add_row(&tape.read(b_side));
            let id = argmax(&logits.to_vec());
            let emb = w.gather_rows(&[id]);
            let gate = emb
                .add(p)
                .matmul(&tape.read(gw))
                .add_row(&tape.read(gb))
                .sigmoid();
            gate.mul(&emb)
        };
        let left_slot = slot(
            self.cfg.left_size == 1,
            &p_prev,
            &self.w_left,
            &self.b_left,
            &self.gate_lw,
            &self.gate_lb,
        );
        let right_slot = slot(
            self.cfg.right_size == 1,
            &p_next,
            &self.w_right,
            &self.b_right,
            &self.gate_rw,
            &self.gate_rb,
        );
        let zbar = Tensor::concat_cols(&[&z_i.add(&p_cur), &left_slot, &right_slot]);
        zbar.matmul(&tape.read(&self.w_cur))
            .add_row(&tape.read(&self.b_cur))
            .to_vec()
    }

    /// One-pass decode: encode, predict length, copy, decode, read out.
    pub fn nat_forward(&self, x: &[usize]) -> Result<NatForwardOutput> {
        if x.is_empty() {
            return Err(Error::data("cannot decode an empty source"));
        }
        let tape = Tape::no_grad();
        let mut mode = RunMode::Eval;
        let enc = self.encoder.encode_all_valid(&tape, x, &mut mode);
        let delta_m = self.predict_delta_m(&tape, &enc)?;
        let m = resolve_target_length(enc.n, delta_m);
        let d_input = self.copy_source_input(&enc, m);
        let trace = self.decoder_forward(&tape, &d_input, &enc, &mut mode);
        let out = self.look_around_readout(&tape, &trace.z_final, &mut ReadoutMode::Infer);
        let (tokens, token_probs) = out.argmax_tokens();
        Ok(NatForwardOutput {
            delta_m,
            m,
            tokens,
            token_probs,
            left_ids: out.left_ids,
            right_ids: out.right_ids,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        f(&self.w_vocab);
        f(&self.pos_table);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.visit(f);
            if self.cfg.vocab_attention {
                f(&self.fuse_w[i]);
                f(&self.fuse_b[i]);
            }
        }
        for p in [
            &self.w_left,
            &self.b_left,
            &self.w_right,
            &self.b_right,
            &self.w_cur,
            &self.b_cur,
            &self.gate_lw,
            &self.gate_lb,
            &self.gate_rw,
            &self.gate_rb,
            &self.sent_left,
            &self.sent_right,
            &self.len_w,
            &self.len_b,
        ] {
            f(p);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        f(&mut self.w_vocab);
        f(&mut self.pos_table);
        for b in &mut self.dec_blocks {
            b.visit_mut(f);
        }
        if self.cfg.vocab_attention {
            for (w, b) in self.fuse_w.iter_mut().zip(&mut self.fuse_b) {
                f(w);
                f(b);
            }
        }
        for p in [
            &mut self.w_left,
            &mut self.b_left,
            &mut self.w_right,
            &mut self.b_right,
            &mut self.w_cur,
            &mut self.b_cur,
            &mut self.gate_lw,
            &mut self.gate_lb,
            &mut self.gate_rw,
            &mut self.gate_rb,
            &mut self.sent_left,
            &mut self.sent_right,
            &mut self.len_w,
            &mut self.len_b,
        ] {
            f(p);
        }
    }
}
