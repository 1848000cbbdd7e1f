//! Token/position embedding and the N-block encoder.

use crate::block::{pair_mask, RunMode, TransformerBlock};
use crate::config::ModelConfig;
use crate::tensor::{Param, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

/// Token embedding (scaled by sqrt(d)) plus absolute position embedding.
pub fn embed_tokens(ids: &[usize], token_table: &Tensor, pos_table: &Tensor) -> Tensor {
    let n = ids.len();
    assert!(n >= 1, "embed_tokens: empty id sequence");
    assert!(
        n <= pos_table.shape()[0],
        "embed_tokens: sequence length {n} exceeds position table rows {}",
        pos_table.shape()[0]
    );
    let d = token_table.shape()[1];
    let positions: Vec<usize> = (0..n).collect();
    let tok = token_table.gather_rows(ids).scale((d as f64).sqrt());
    let pos = pos_table.gather_rows(&positions);
    tok.add(&pos)
}

pub struct EncoderOutput {
    pub h: Tensor,
    pub n: usize,
    pub mask: Vec<bool>,
}

pub struct Encoder {
    pub token_table: Param,
    pub pos_table: Param,
    pub blocks: Vec<TransformerBlock>,
}

impl Encoder {
    /// Parameter names take the form `{prefix}.tok`, `{prefix}.pos`,
    /// `{prefix}.b{i}.*`.
    pub fn new(prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                TransformerBlock::new(
                    &format!("{prefix}.b{i}"),
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.d_ff,
                    cfg.rel_clip,
                    false,
                    rng,
                )
            })
            .collect();
        Encoder {
            token_table: Param::randn(format!("{prefix}.tok"), &[cfg.vocab_size, cfg.d_model], 0.02, rng),
            pos_table: Param::randn(format!("{prefix}.pos"), &[cfg.pos_rows(), cfg.d_model], 0.02, rng),
            blocks,
        }
    }

    /// `mask[i]` marks real (non-PAD) positions; PAD rows are excluded from
    /// every attention pattern so their contents cannot leak into live rows.
    pub fn encode(&self, tape: &Tape, ids: &[usize], mask: &[bool], mode: &mut RunMode) -> EncoderOutput {
        assert_eq!(ids.len(), mask.len(), "encode: ids/mask length mismatch");
        let n = ids.len();
        let attn_mask = pair_mask(mask, mask);
        let mut h = embed_tokens(ids, &tape.read(&self.token_table), &tape.read(&self.pos_table));
        h = mode.apply_dropout(&h);
        for block in &self.blocks {
            h = block.forward(tape, &h, &attn_mask, None, mode);
        }
        EncoderOutput {
            h,
            n,
            mask: mask.to_vec(),
        }
    }

    /// Encode a sequence with no padding.
    pub fn encode_all_valid(&self, tape: &Tape, ids: &[usize], mode: &mut RunMode) -> EncoderOutput {
        self.encode(tape, ids, &vec![true; ids.len()], mode)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.token_table);
        f(&self.pos_table);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.token_table);
        f(&mut self.pos_table);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_blocks: 2,
            rel_clip: 2,
            max_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn embed_zero_tables_give_zero_output() {
        let tape = Tape::no_grad();
        let tok = tape.zeros(&[10, 4]);
        let pos = tape.zeros(&[8, 4]);
        let e = embed_tokens(&[4, 5, 6], &tok, &pos);
        assert_eq!(e.to_vec(), vec![0.0; 12]);
    }

    #[test]
    fn same_token_at_two_positions_differs_by_position_rows() {
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tok = Param::randn("tok", &[10, 4], 1.0, &mut rng);
        let pos = Param::randn("pos", &[8, 4], 1.0, &mut rng);
        let e = embed_tokens(&[7, 7], &tape.read(&tok), &tape.read(&pos)).to_vec();
        let p = pos.values();
        for j in 0..4 {
            let diff = e[4 + j] - e[j];
            let want = p[4 + j] - p[j];
            assert!((diff - want).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "exceeds position table rows")]
    fn embed_rejects_overflow_of_position_table() {
        let tape = Tape::no_grad();
        let tok = tape.zeros(&[10, 4]);
        let pos = tape.zeros(&[2, 4]);
        embed_tokens(&[4, 5, 6], &tok, &pos);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new("enc", &cfg, &mut rng);
        let tape = Tape::no_grad();
        let ids = [4, 9, 5, 4];
        let a = enc.encode_all_valid(&tape, &ids, &mut RunMode::Eval);
        let b = enc.encode_all_valid(&tape, &ids, &mut RunMode::Eval);
        assert_eq!(a.h.shape(), &[4, 8]);
        assert_eq!(a.h.to_vec(), b.h.to_vec());
        assert_eq!(a.n, 4);
    }

    #[test]
    fn changing_a_pad_id_never_changes_live_rows() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new("enc", &cfg, &mut rng);
        let tape = Tape::no_grad();
        let mask = [true, true, true, false, false];
        let a = enc.encode(&tape, &[4, 9, 5, 0, 0], &mask, &mut RunMode::Eval);
        let b = enc.encode(&tape, &[4, 9, 5, 7, 11], &mask, &mut RunMode::Eval);
        let (av, bv) = (a.h.to_vec(), b.h.to_vec());
        assert_eq!(&av[0..24], &bv[0..24], "live rows depend on PAD content");
    }

    #[test]
    fn parameter_names_are_unique_and_prefixed() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new("enc", &cfg, &mut rng);
        let mut names = std::collections::HashSet::new();
        let mut count = 0;
        enc.visit(&mut |p| {
            assert!(p.name().starts_with("enc."), "name {}", p.name());
            assert!(names.insert(p.name().to_string()), "duplicate {}", p.name());
            count += 1;
        });
        // tok + pos + 2 blocks x (attn 9 + ln1 2 + ffn 4 + ln2 2)
        assert_eq!(count, 2 + 2 * 17);
    }
}
