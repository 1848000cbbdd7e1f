//! Post-norm transformer block with relative-position self-attention and
//! optional cross-attention, shared by the encoder, the AT teacher decoder,
//! and the NAT decoder.

use crate::tensor::{Param, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

/// Forward-pass mode: eval is deterministic, train applies dropout.
pub enum RunMode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl RunMode<'_> {
    pub fn apply_dropout(&mut self, t: &Tensor) -> Tensor {
        match self {
            RunMode::Eval => t.clone(),
            RunMode::Train { dropout, rng } => t.dropout(*dropout, rng),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, RunMode::Train { .. })
    }
}

pub struct LayerNormParams {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNormParams {
    pub fn new(prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: Param::ones(format!("{prefix}.g"), &[d]),
            bias: Param::zeros(format!("{prefix}.b"), &[d]),
        }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Tensor {
        x.layer_norm(&tape.read(&self.gain), &tape.read(&self.bias), 1e-5)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gain);
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Multi-head attention. `rel` holds one `[2k+1, head_dim]` table of
/// relative-key embeddings shared across heads; present only for
/// self-attention.
pub struct AttentionParams {
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub bk: Param,
    pub wv: Param,
    pub bv: Param,
    pub wo: Param,
    pub bo: Param,
    pub rel: Option<Param>,
    pub n_heads: usize,
    pub rel_clip: usize,
}

impl AttentionParams {
    pub fn new(prefix: &str, d: usize, n_heads: usize, rel_clip: Option<usize>, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(d % n_heads, 0, "n_heads {n_heads} must divide d {d}");
        let head_dim = d / n_heads;
        let w = |name: &str, rng: &mut ChaCha8Rng| Param::randn(format!("{prefix}.{name}"), &[d, d], 0.02, rng);
        AttentionParams {
            wq: w("wq", rng),
            bq: Param::zeros(format!("{prefix}.bq"), &[d]),
            wk: w("wk", rng),
            bk: Param::zeros(format!("{prefix}.bk"), &[d]),
            wv: w("wv", rng),
            bv: Param::zeros(format!("{prefix}.bv"), &[d]),
            wo: w("wo", rng),
            bo: Param::zeros(format!("{prefix}.bo"), &[d]),
            rel: rel_clip.map(|k| {
                Param::randn(format!("{prefix}.rel"), &[2 * k + 1, head_dim], 0.02, rng)
            }),
            n_heads,
            rel_clip: rel_clip.unwrap_or(0),
        }
    }

    /// Attend queries `xq` `[m,d]` over keys/values `xkv` `[n,d]`.
    /// `mask[i*n+j]` keeps key `j` for query `i`. Relative-key logits are
    /// added when this instance carries a table (requires `m == n`).
    pub fn attend(&self, tape: &Tape, xq: &Tensor, xkv: &Tensor, mask: &[bool]) -> Tensor {
        let d = xq.shape()[1];
        let m = xq.shape()[0];
        let n = xkv.shape()[0];
        assert_eq!(mask.len(), m * n, "attention mask length {} for {m}x{n}", mask.len());
        let head_dim = d / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = xq.matmul(&tape.read(&self.wq)).add_row(&tape.read(&self.bq));
        let k = xkv.matmul(&tape.read(&self.wk)).add_row(&tape.read(&self.bk));
        let v = xkv.matmul(&tape.read(&self.wv)).add_row(&tape.read(&self.bv));
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
            let qh = q.slice_cols(c0, c1);
            let kh = k.slice_cols(c0, c1);
            let vh = v.slice_cols(c0, c1);
            let mut scores = qh.matmul_nt(&kh);
            if let Some(rel) = &self.rel {
                assert_eq!(m, n, "relative positions require self-attention");
                let qr = qh.matmul_nt(&tape.read(rel));
                scores = scores.add(&qr.relative_logits(self.rel_clip));
            }
            let probs = scores.scale(scale).masked_softmax(mask);
            heads.push(probs.matmul(&vh));
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        Tensor::concat_cols(&refs)
            .matmul(&tape.read(&self.wo))
            .add_row(&tape.read(&self.bo))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.wq);
        f(&self.bq);
        f(&self.wk);
        f(&self.bk);
        f(&self.wv);
        f(&self.bv);
        f(&self.wo);
        f(&self.bo);
        if let Some(r) = &self.rel {
            f(r);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.wq);
        f(&mut self.bq);
        f(&mut self.wk);
        f(&mut self.bk);
        f(&mut self.wv);
        f(&mut self.bv);
        f(&mut self.wo);
        f(&mut self.bo);
        if let Some(r) = &mut self.rel {
            f(r);
        }
    }
}

pub struct FeedForward {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl FeedForward {
    pub fn new(prefix: &str, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            w1: Param::randn(format!("{prefix}.w1"), &[d, d_ff], 0.02, rng),
            b1: Param::zeros(format!("{prefix}.b1"), &[d_ff]),
            w2: Param::randn(format!("{prefix}.w2"), &[d_ff, d], 0.02, rng),
            b2: Param::zeros(format!("{prefix}.b2"), &[d]),
        }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Tensor {
        x.matmul(&tape.read(&self.w1))
            .add_row(&tape.read(&self.b1))
            .relu()
            .matmul(&tape.read(&self.w2))
            .add_row(&tape.read(&self.b2))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

pub struct TransformerBlock {
    pub self_attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub cross_attn: Option<(AttentionParams, LayerNormParams)>,
    pub ffn: FeedForward,
    pub ln2: LayerNormParams,
}

impl TransformerBlock {
    pub fn new(
        prefix: &str,
        d: usize,
        n_heads: usize,
        d_ff: usize,
        rel_clip: usize,
        cross: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TransformerBlock {
            self_attn: AttentionParams::new(&format!("{prefix}.sa"), d, n_heads, Some(rel_clip), rng),
            ln1: LayerNormParams::new(&format!("{prefix}.ln1"), d),
            cross_attn: cross.then(|| {
                (
                    AttentionParams::new(&format!("{prefix}.ca"), d, n_heads, None, rng),
                    LayerNormParams::new(&format!("{prefix}.lnc"), d),
                )
            }),
            ffn: FeedForward::new(&format!("{prefix}.ff"), d, d_ff, rng),
            ln2: LayerNormParams::new(&format!("{prefix}.ln2"), d),
        }
    }

    /// Post-norm residual stack: self-attention, optional cross-attention
    /// over `cross` = (encoder rows, mask), then the FFN.
    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        self_mask: &[bool],
        cross: Option<(&Tensor, &[bool])>,
        mode: &mut RunMode,
    ) -> Tensor {
        let sa = self.self_attn.attend(tape, x, x, self_mask);
        let mut h = self.ln1.apply(tape, &mode.apply_dropout(&sa).add(x));
        match (&self.cross_attn, cross) {
            (Some((attn, ln)), Some((ctx, cmask))) => {
                let ca = attn.attend(tape, &h, ctx, cmask);
                h = ln.apply(tape, &mode.apply_dropout(&ca).add(&h));
            }
            (None, None) => {}
            (Some(_), None) => panic!("block has cross-attention but no context was given"),
            (None, Some(_)) => panic!("context given to a block without cross-attention"),
        }
        let ff = self.ffn.apply(tape, &h);
        self.ln2.apply(tape, &mode.apply_dropout(&ff).add(&h))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.self_attn.visit(f);
        self.ln1.visit(f);
        if let Some((attn, ln)) = &self.cross_attn {
            attn.visit(f);
            ln.visit(f);
        }
        self.ffn.visit(f);
        self.ln2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.self_attn.visit_mut(f);
        self.ln1.visit_mut(f);
        if let Some((attn, ln)) = &mut self.cross_attn {
            attn.visit_mut(f);
            ln.visit_mut(f);
        }
        self.ffn.visit_mut(f);
        self.ln2.visit_mut(f);
    }
}

/// `mask[i*n+j] = q_valid[i] && k_valid[j]`
pub fn pair_mask(q_valid: &[bool], k_valid: &[bool]) -> Vec<bool> {
    let mut out = Vec::with_capacity(q_valid.len() * k_valid.len());
    for &qi in q_valid {
        for &kj in k_valid {
            out.push(qi && kj);
        }
    }
    out
}

/// Causal self-attention mask over `n` valid positions.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            out[i * n + j] = true;
        }
    }
    out
}
