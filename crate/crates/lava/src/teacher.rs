//! Autoregressive transformer used as the distillation teacher, rescoring
//! judge, and latency baseline.

use crate::block::{causal_mask, pair_mask, RunMode, TransformerBlock};
use crate::config::ModelConfig;
use crate::data::{SentencePair, BOS, EOS, PAD};
use crate::encoder::{embed_tokens, Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, Tensor};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub struct Teacher {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub dec_token_table: Param,
    pub dec_pos_table: Param,
    pub dec_blocks: Vec<TransformerBlock>,
    pub out_bias: Param,
}

impl Teacher {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("invalid model config");
        let encoder = Encoder::new("enc", cfg, rng);
        let dec_blocks = (0..cfg.n_blocks)
            .map(|i| {
                TransformerBlock::new(
                    &format!("dec.b{i}"),
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.d_ff,
                    cfg.rel_clip,
                    true,
                    rng,
                )
            })
            .collect();
        Teacher {
            cfg: cfg.clone(),
            encoder,
            dec_token_table: Param::randn("dec.tok", &[cfg.vocab_size, cfg.d_model], 0.02, rng),
            dec_pos_table: Param::randn("dec.pos", &[cfg.pos_rows(), cfg.d_model], 0.02, rng),
            dec_blocks,
            out_bias: Param::zeros("dec.out_b", &[cfg.vocab_size]),
        }
    }

    /// Teacher-forced decoder logits `[len(y_in), |V|]` for the shifted
    /// input `y_in = [BOS] ++ y`. Output projection is tied to the decoder
    /// token table.
    pub fn decoder_logits(
        &self,
        tape: &Tape,
        enc: &EncoderOutput,
        y_in: &[usize],
        mode: &mut RunMode,
    ) -> Tensor {
        let m = y_in.len();
        let tok = tape.read(&self.dec_token_table);
        let pos = tape.read(&self.dec_pos_table);
        let mut z = embed_tokens(y_in, &tok, &pos);
        z = mode.apply_dropout(&z);
        let self_mask = causal_mask(m);
        let cross_mask = pair_mask(&vec![true; m], &enc.mask);
        for block in &self.dec_blocks {
            z = block.forward(tape, &z, &self_mask, Some((&enc.h, &cross_mask)), mode);
        }
        z.matmul_nt(&tok).add_row(&tape.read(&self.out_bias))
    }

    fn check_scoreable(&self, y: &[usize]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::data("cannot score an empty sequence"));
        }
        for &t in y {
            if t >= self.cfg.vocab_size {
                return Err(Error::data(format!(
                    "token id {t} out of vocabulary (size {})",
                    self.cfg.vocab_size
                )));
            }
            if t == PAD || t == BOS || t == EOS {
                return Err(Error::data(format!("sequence contains reserved token id {t}")));
            }
        }
        Ok(())
    }

    /// Total log-probability of `y` given `x`, including the EOS term, from
    /// one teacher-forced pass.
    pub fn score_sequence(&self, x: &[usize], y: &[usize]) -> Result<f64> {
        self.check_scoreable(y)?;
        let tape = Tape::no_grad();
        let mut mode = RunMode::Eval;
        let enc = self.encoder.encode_all_valid(&tape, x, &mut mode);
        Ok(self.score_with_encoding(&tape, &enc, y))
    }

    /// Scoring against an already-encoded source; used to share the encoder
    /// pass across rescoring candidates.
    pub fn score_with_encoding(&self, tape: &Tape, enc: &EncoderOutput, y: &[usize]) -> f64 {
        let mut y_in = Vec::with_capacity(y.len() + 1);
        y_in.push(BOS);
        y_in.extend_from_slice(y);
        let mut targets = y.to_vec();
        targets.push(EOS);
        let logits = self.decoder_logits(tape, enc, &y_in, &mut RunMode::Eval);
        logits.log_softmax(1).take_per_row(&targets).sum_all().item()
    }

    /// Next-token log-probabilities after the prefix `prefix`.
    fn next_token_logprobs(&self, tape: &Tape, enc: &EncoderOutput, prefix: &[usize]) -> Vec<f64> {
        let mut y_in = Vec::with_capacity(prefix.len() + 1);
        y_in.push(BOS);
        y_in.extend_from_slice(prefix);
        let logits = self.decoder_logits(tape, enc, &y_in, &mut RunMode::Eval);
        let m = y_in.len();
        let last = logits.slice_rows(m - 1, m).log_softmax(1);
        last.to_vec()
    }

    /// Beam search with hypotheses ranked by length-normalized log-prob
    /// (divided by token count including EOS). Returns the winner's tokens
    /// and its normalized score.
    pub fn beam_decode(&self, x: &[usize], beam_width: usize, max_len: usize) -> (Vec<usize>, f64) {
        assert!(beam_width >= 1, "beam_width must be >= 1");
        assert!(max_len >= 1, "max_len must be >= 1");
        let tape = Tape::no_grad();
        let enc = self.encoder.encode_all_valid(&tape, x, &mut RunMode::Eval);

        struct Hyp {
            toks: Vec<usize>,
            logp: f64,
        }
        let mut active = vec![Hyp { toks: Vec::new(), logp: 0.0 }];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        let vocab = self.cfg.vocab_size;

        for _ in 0..max_len {
            let mut pool: Vec<Hyp> = Vec::new();
            for h in &active {
                let lp = self.next_token_logprobs(&tape, &enc, &h.toks);
                if !h.toks.is_empty() {
                    finished.push((h.toks.clone(), h.logp + lp[EOS]));
                }
                let mut order: Vec<usize> = (0..vocab)
                    .filter(|&v| v != PAD && v != BOS && v != EOS)
                    .collect();
                order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap());
                for &v in order.iter().take(beam_width) {
                    let mut toks = h.toks.clone();
                    toks.push(v);
                    pool.push(Hyp {
                        toks,
                        logp: h.logp + lp[v],
                    });
                }
            }
            pool.sort_by(|a, b| b.logp.partial_cmp(&a.logp).unwrap());
            pool.truncate(beam_width);
            active = pool;
        }
        // Length cap reached: close out the surviving hypotheses with their
        // EOS term so every finished score equals score_sequence of its toks.
        for h in &active {
            let lp = self.next_token_logprobs(&tape, &enc, &h.toks);
            finished.push((h.toks.clone(), h.logp + lp[EOS]));
        }
        finished
            .into_iter()
            .map(|(toks, logp)| {
                let norm = logp / (toks.len() + 1) as f64;
                (toks, norm)
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("at least one finished hypothesis")
    }

    /// Replace every target with the teacher's beam output. Sources whose
    /// beam output is somehow empty keep their original target.
    pub fn distill_dataset(&self, pairs: &[SentencePair], beam_width: usize) -> Vec<SentencePair> {
        pairs
            .iter()
            .map(|p| {
                let (toks, _) = self.beam_decode(&p.source, beam_width, self.cfg.max_len);
                SentencePair {
                    source: p.source.clone(),
                    target: if toks.is_empty() { p.target.clone() } else { toks },
                }
            })
            .collect()
    }

    /// Encoder parameters keyed by canonical name, for NAT initialization.
    pub fn export_encoder_weights(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let mut map = BTreeMap::new();
        self.encoder.visit(&mut |p| {
            map.insert(p.name().to_string(), (p.shape().to_vec(), p.values().to_vec()));
        });
        map
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        f(&self.dec_token_table);
        f(&self.dec_pos_table);
        for b in &self.dec_blocks {
            b.visit(f);
        }
        f(&self.out_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        f(&mut self.dec_token_table);
        f(&mut self.dec_pos_table);
        for b in &mut self.dec_blocks {
            b.visit_mut(f);
        }
        f(&mut self.out_bias);
    }
}

/// Load exported encoder weights into an encoder. The key sets must match
/// exactly; a missing or extra key is an error naming it.
pub fn import_encoder_weights(
    encoder: &mut Encoder,
    weights: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
) -> Result<()> {
    let mut expected = std::collections::HashSet::new();
    encoder.visit(&mut |p| {
        expected.insert(p.name().to_string());
    });
    for key in weights.keys() {
        if !expected.contains(key.as_str()) {
            return Err(Error::checkpoint(format!("unexpected encoder weight {key:?}")));
        }
    }
    let mut failure: Option<Error> = None;
    encoder.visit_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        match weights.get(p.name()) {
            None => failure = Some(Error::checkpoint(format!("missing encoder weight {:?}", p.name()))),
            Some((shape, data)) => {
                if shape != p.shape() {
                    failure = Some(Error::checkpoint(format!(
                        "shape mismatch for {:?}: checkpoint {shape:?}, model {:?}",
                        p.name(),
                        p.shape()
                    )));
                } else {
                    p.set_values(data);
                }
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_blocks: 2,
            rel_clip: 2,
            max_len: 12,
            ..ModelConfig::default()
        }
    }

    fn teacher() -> Teacher {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Teacher::new(&tiny_cfg(), &mut rng)
    }

    #[test]
    fn untrained_per_token_logprob_is_near_uniform() {
        let t = teacher();
        let y = [4, 5, 6, 7];
        let score = t.score_sequence(&[4, 5, 6], &y).unwrap();
        let per_token = score / (y.len() + 1) as f64;
        let uniform = -(10.0f64).ln();
        assert!(
            (per_token - uniform).abs() < 0.5,
            "per-token {per_token} vs uniform {uniform}"
        );
    }

    #[test]
    fn scoring_rejects_reserved_and_oov_tokens() {
        let t = teacher();
        assert!(t.score_sequence(&[4], &[]).is_err());
        assert!(t.score_sequence(&[4], &[5, PAD]).is_err());
        assert!(t.score_sequence(&[4], &[5, EOS]).is_err());
        assert!(t.score_sequence(&[4], &[99]).is_err());
    }

    #[test]
    fn batched_score_equals_incremental_rollout() {
        let t = teacher();
        let x = [5, 6, 7];
        let y = [8, 4, 9, 6];
        let batched = t.score_sequence(&x, &y).unwrap();
        // one token at a time
        let tape = Tape::no_grad();
        let enc = t.encoder.encode_all_valid(&tape, &x, &mut RunMode::Eval);
        let mut incremental = 0.0;
        let mut prefix: Vec<usize> = Vec::new();
        for &tok in y.iter() {
            let lp = t.next_token_logprobs(&tape, &enc, &prefix);
            incremental += lp[tok];
            prefix.push(tok);
        }
        let lp = t.next_token_logprobs(&tape, &enc, &prefix);
        incremental += lp[EOS];
        assert!(
            (batched - incremental).abs() < 1e-9,
            "batched {batched} vs incremental {incremental}"
        );
    }

    #[test]
    fn causality_perturbing_a_token_leaves_earlier_logits_unchanged() {
        let t = teacher();
        let tape = Tape::no_grad();
        let enc = t.encoder.encode_all_valid(&tape, &[4, 5], &mut RunMode::Eval);
        let y1 = [BOS, 6, 7, 8, 9];
        let mut y2 = y1;
        y2[3] = 4; // perturb the token entering at row 3
        let l1 = t.decoder_logits(&tape, &enc, &y1, &mut RunMode::Eval).to_vec();
        let l2 = t.decoder_logits(&tape, &enc, &y2, &mut RunMode::Eval).to_vec();
        let v = t.cfg.vocab_size;
        assert_eq!(&l1[0..3 * v], &l2[0..3 * v], "rows before the perturbed input changed");
        assert_ne!(&l1[3 * v..], &l2[3 * v..], "perturbation had no effect at all");
    }

    #[test]
    fn beam_width_one_matches_greedy_rollout() {
        let t = teacher();
        let x = [4, 7, 5];
        let (beam_toks, _) = t.beam_decode(&x, 1, 8);
        // manual greedy
        let tape = Tape::no_grad();
        let enc = t.encoder.encode_all_valid(&tape, &x, &mut RunMode::Eval);
        let mut toks: Vec<usize> = Vec::new();
        for _ in 0..8 {
            let lp = t.next_token_logprobs(&tape, &enc, &toks);
            let mut best = 4;
            for v in 4..t.cfg.vocab_size {
                if lp[v] > lp[best] {
                    best = v;
                }
            }
            if !toks.is_empty() && lp[EOS] > lp[best] {
                break;
            }
            toks.push(best);
        }
        assert_eq!(beam_toks, toks);
    }

    #[test]
    fn beam_score_matches_score_sequence_after_denormalization() {
        let t = teacher();
        let x = [4, 7, 5, 9];
        for width in [1, 3] {
            let (toks, norm) = t.beam_decode(&x, width, 8);
            let direct = t.score_sequence(&x, &toks).unwrap();
            let denorm = norm * (toks.len() + 1) as f64;
            assert!(
                (denorm - direct).abs() < 1e-9,
                "width {width}: beam {denorm} vs scored {direct}"
            );
        }
    }

    #[test]
    fn wider_beam_never_scores_below_greedy() {
        let t = teacher();
        for x in [[4, 5, 6], [9, 8, 7], [5, 5, 9]] {
            let (_, g) = t.beam_decode(&x, 1, 8);
            let (_, b) = t.beam_decode(&x, 4, 8);
            assert!(b >= g - 1e-12, "beam {b} < greedy {g}");
        }
    }

    #[test]
    fn distill_preserves_corpus_size_and_determinism() {
        let t = teacher();
        let pairs: Vec<SentencePair> = (0..5)
            .map(|i| SentencePair {
                source: vec![4 + i % 4, 5, 6],
                target: vec![4, 5],
            })
            .collect();
        let d1 = t.distill_dataset(&pairs, 2);
        let d2 = t.distill_dataset(&pairs, 2);
        assert_eq!(d1.len(), pairs.len());
        assert_eq!(d1, d2);
        for (orig, dist) in pairs.iter().zip(&d1) {
            assert_eq!(orig.source, dist.source);
            assert!(!dist.target.is_empty());
        }
    }

    #[test]
    fn encoder_export_import_round_trips_bitwise() {
        let t = teacher();
        let weights = t.export_encoder_weights();
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let mut fresh = Encoder::new("enc", &tiny_cfg(), &mut rng);
        import_encoder_weights(&mut fresh, &weights).unwrap();
        let tape = Tape::no_grad();
        let ids = [4, 8, 9, 5, 6];
        let a = t
            .encoder
            .encode_all_valid(&tape, &ids, &mut RunMode::Eval)
            .h
            .to_vec();
        let b = fresh
            .encode_all_valid(&tape, &ids, &mut RunMode::Eval)
            .h
            .to_vec();
        assert_eq!(a, b, "imported encoder output differs");
    }

    #[test]
    fn import_reports_missing_and_unexpected_keys() {
        let t = teacher();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fresh = Encoder::new("enc", &tiny_cfg(), &mut rng);
        let mut weights = t.export_encoder_weights();
        let (k, v) = weights.iter().next().map(|(k, v)| (k.clone(), v.clone())).unwrap();
        weights.remove(&k);
        let err = import_encoder_weights(&mut fresh, &weights).unwrap_err();
        assert!(err.to_string().contains(&k), "error {err} does not name {k}");
        weights.insert(k.clone(), v);
        weights.insert("enc.bogus".into(), (vec![1], vec![0.0]));
        let err = import_encoder_weights(&mut fresh, &weights).unwrap_err();
        assert!(err.to_string().contains("enc.bogus"));
    }
}
