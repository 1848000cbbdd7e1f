//! Vocabulary, parallel corpora, synthetic tasks, and batching.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token/id bijection with the four specials pinned to ids 0 through 3.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn from_content_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::data(format!("duplicate token {tok:?} in vocabulary")));
            }
        }
        let v = Vocabulary {
            token_to_id,
            id_to_token,
        };
        if v.size() < 5 {
            return Err(Error::data(format!(
                "vocabulary needs at least one non-special token, got size {}",
                v.size()
            )));
        }
        Ok(v)
    }

    /// Frequency-ordered vocabulary from a stream of tokens. Ties break
    /// lexicographically; tokens seen fewer than `min_count` times are
    /// dropped (they encode to `<unk>`).
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for tok in corpus {
            seen_any = true;
            *counts.entry(tok.as_ref().to_string()).or_insert(0) += 1;
        }
        if !seen_any {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_content_tokens(entries.into_iter().map(|(t, _)| t).collect())
    }

    /// Vocabulary of `size` total ids: the specials plus `w0, w1, ...`.
    pub fn synthetic(size: usize) -> Self {
        assert!(size >= 5, "synthetic vocabulary needs size >= 5, got {size}");
        let tokens = (0..size - NUM_SPECIALS).map(|i| format!("w{i}")).collect();
        Self::from_content_tokens(tokens).expect("generated tokens are distinct")
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    /// Whitespace-split a line into ids, unknown tokens mapping to `<unk>`.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id_of(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        toks.join(" ")
    }

    /// One non-special token per line; line index = id - 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.id_to_token[NUM_SPECIALS..] {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::data(format!("empty token line in {}", path.display())));
        }
        Self::from_content_tokens(tokens)
    }

    /// Non-special tokens in id order, for checkpoint embedding.
    pub fn content_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    pub fn from_saved_tokens(tokens: Vec<String>) -> Result<Self> {
        Self::from_content_tokens(tokens)
    }
}

/// One aligned sentence pair; ids only, no BOS/EOS markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    Copy,
    Reverse,
    Remap,
    Multimodal,
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "remap" => Ok(SyntheticTask::Remap),
            "multimodal" => Ok(SyntheticTask::Multimodal),
            other => Err(Error::usage(format!(
                "unknown task {other:?}, expected copy|reverse|remap|multimodal"
            ))),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::Remap => "remap",
            SyntheticTask::Multimodal => "multimodal",
        };
        f.write_str(s)
    }
}

/// Tokenwise bijection used by the remap task: rotate the content ids by
/// half the content-vocabulary size.
pub fn remap_token(id: usize, vocab_size: usize) -> usize {
    let content = vocab_size - NUM_SPECIALS;
    let shift = content / 2;
    NUM_SPECIALS + ((id - NUM_SPECIALS + shift) % content)
}

fn random_sentence(rng: &mut ChaCha8Rng, len_range: (usize, usize), vocab_size: usize) -> Vec<usize> {
    let len = rng.gen_range(len_range.0..=len_range.1);
    (0..len)
        .map(|_| rng.gen_range(NUM_SPECIALS..vocab_size))
        .collect()
}

/// The two targets a multimodal source owns: the identity, and the identity
/// with its first two tokens swapped. Single-token sources collapse to one.
pub fn multimodal_targets(source: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let a = source.to_vec();
    let mut b = source.to_vec();
    if b.len() >= 2 {
        b.swap(0, 1);
    }
    (a, b)
}

/// Deterministic synthetic parallel corpus.
///
/// The multimodal task draws sources from a pool of roughly `n_pairs / 8`
/// distinct sentences so each source recurs often enough for both of its
/// targets to show up in the corpus.
pub fn gen_synthetic(
    task: SyntheticTask,
    n_pairs: usize,
    len_range: (usize, usize),
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<SentencePair>> {
    if vocab_size < 8 {
        return Err(Error::data(format!("vocab_size must be >= 8, got {vocab_size}")));
    }
    if len_range.0 < 1 || len_range.0 > len_range.1 {
        return Err(Error::data(format!(
            "invalid length range {}..={}",
            len_range.0, len_range.1
        )));
    }
    if n_pairs == 0 {
        return Err(Error::data("n_pairs must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    match task {
        SyntheticTask::Copy => {
            for _ in 0..n_pairs {
                let s = random_sentence(&mut rng, len_range, vocab_size);
                pairs.push(SentencePair {
                    target: s.clone(),
                    source: s,
                });
            }
        }
        SyntheticTask::Reverse => {
            for _ in 0..n_pairs {
                let s = random_sentence(&mut rng, len_range, vocab_size);
                let t: Vec<usize> = s.iter().rev().copied().collect();
                pairs.push(SentencePair { source: s, target: t });
            }
        }
        SyntheticTask::Remap => {
            for _ in 0..n_pairs {
                let s = random_sentence(&mut rng, len_range, vocab_size);
                let t: Vec<usize> = s.iter().map(|&v| remap_token(v, vocab_size)).collect();
                pairs.push(SentencePair { source: s, target: t });
            }
        }
        SyntheticTask::Multimodal => {
            let pool_size = (n_pairs / 8).max(1);
            let pool: Vec<Vec<usize>> = (0..pool_size)
                .map(|_| random_sentence(&mut rng, len_range, vocab_size))
                .collect();
            for _ in 0..n_pairs {
                let src = pool[rng.gen_range(0..pool_size)].clone();
                let (a, b) = multimodal_targets(&src);
                let target = if rng.gen::<bool>() { b } else { a };
                pairs.push(SentencePair { source: src, target });
            }
        }
    }
    Ok(pairs)
}

/// PAD-filled matrices over a group of pairs, with validity masks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub src_width: usize,
    pub tgt_width: usize,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_mask: Vec<bool>,
}

impl Batch {
    fn from_pairs(pairs: &[SentencePair]) -> Self {
        let size = pairs.len();
        let src_width = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let tgt_width = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let mut src = vec![PAD; size * src_width];
        let mut tgt = vec![PAD; size * tgt_width];
        let mut src_mask = vec![false; size * src_width];
        let mut tgt_mask = vec![false; size * tgt_width];
        for (r, p) in pairs.iter().enumerate() {
            for (c, &id) in p.source.iter().enumerate() {
                src[r * src_width + c] = id;
                src_mask[r * src_width + c] = true;
            }
            for (c, &id) in p.target.iter().enumerate() {
                tgt[r * tgt_width + c] = id;
                tgt_mask[r * tgt_width + c] = true;
            }
        }
        Batch {
            size,
            src_width,
            tgt_width,
            src,
            tgt,
            src_mask,
            tgt_mask,
        }
    }

    /// Unpadded source row `r`.
    pub fn source_row(&self, r: usize) -> Vec<usize> {
        let w = self.src_width;
        (0..w)
            .filter(|&c| self.src_mask[r * w + c])
            .map(|c| self.src[r * w + c])
            .collect()
    }

    /// Unpadded target row `r`.
    pub fn target_row(&self, r: usize) -> Vec<usize> {
        let w = self.tgt_width;
        (0..w)
            .filter(|&c| self.tgt_mask[r * w + c])
            .map(|c| self.tgt[r * w + c])
            .collect()
    }
}

/// Group pairs into batches in the given order.
pub fn batchify(pairs: &[SentencePair], batch_size: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    pairs.chunks(batch_size).map(Batch::from_pairs).collect()
}

/// Write `source.txt` / `target.txt` under `dir`, one sentence per line.
pub fn write_parallel(dir: &Path, pairs: &[SentencePair], vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut src = String::new();
    let mut tgt = String::new();
    for p in pairs {
        src.push_str(&vocab.decode(&p.source));
        src.push('\n');
        tgt.push_str(&vocab.decode(&p.target));
        tgt.push('\n');
    }
    fs::write(dir.join("source.txt"), src)?;
    fs::write(dir.join("target.txt"), tgt)?;
    Ok(())
}

/// Read an aligned pair of files; lines must match one-to-one and every
/// sentence must be non-empty.
pub fn read_parallel(src_path: &Path, tgt_path: &Path, vocab: &Vocabulary) -> Result<Vec<SentencePair>> {
    let src_text = fs::read_to_string(src_path)?;
    let tgt_text = fs::read_to_string(tgt_path)?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::data(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            src_path.display(),
            src_lines.len(),
            tgt_path.display(),
            tgt_lines.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let source = vocab.encode(s);
        let target = vocab.encode(t);
        if source.is_empty() || target.is_empty() {
            return Err(Error::data(format!("empty sentence at line {}", i + 1)));
        }
        pairs.push(SentencePair { source, target });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_orders_by_frequency_then_lexicographic() {
        let v = Vocabulary::build(["a", "a", "b"], 1).unwrap();
        assert_eq!(v.id_of("a"), 4);
        assert_eq!(v.id_of("b"), 5);
        assert_eq!(v.size(), 6);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::build(["z", "m", "a"], 1).unwrap();
        assert_eq!(v.id_of("a"), 4);
        assert_eq!(v.id_of("m"), 5);
        assert_eq!(v.id_of("z"), 6);
    }

    #[test]
    fn encode_decode_round_trip_and_unk() {
        let v = Vocabulary::build(["hello", "world", "hello"], 1).unwrap();
        let ids = v.encode("hello world");
        assert_eq!(v.encode(&v.decode(&ids)), ids);
        assert_eq!(v.id_of("missing"), UNK);
    }

    #[test]
    fn min_count_drops_rare_tokens() {
        let v = Vocabulary::build(["a", "a", "b"], 2).unwrap();
        assert_eq!(v.id_of("a"), 4);
        assert_eq!(v.id_of("b"), UNK);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: Vec<&str> = vec![];
        assert!(Vocabulary::build(empty, 1).is_err());
    }

    #[test]
    fn copy_task_copies() {
        let pairs = gen_synthetic(SyntheticTask::Copy, 20, (1, 6), 12, 0).unwrap();
        for p in &pairs {
            assert_eq!(p.source, p.target);
        }
    }

    #[test]
    fn reverse_task_reverses() {
        let pairs = gen_synthetic(SyntheticTask::Reverse, 20, (1, 6), 12, 0).unwrap();
        for p in &pairs {
            let rev: Vec<usize> = p.source.iter().rev().copied().collect();
            assert_eq!(p.target, rev);
        }
    }

    #[test]
    fn remap_is_a_bijection_applied_tokenwise() {
        let vocab_size = 12;
        let pairs = gen_synthetic(SyntheticTask::Remap, 20, (1, 6), vocab_size, 1).unwrap();
        for p in &pairs {
            for (s, t) in p.source.iter().zip(&p.target) {
                assert_eq!(*t, remap_token(*s, vocab_size));
            }
        }
        // bijective over the content ids
        let mut seen = std::collections::HashSet::new();
        for id in NUM_SPECIALS..vocab_size {
            let m = remap_token(id, vocab_size);
            assert!((NUM_SPECIALS..vocab_size).contains(&m));
            assert!(seen.insert(m));
        }
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let a = gen_synthetic(SyntheticTask::Multimodal, 200, (2, 8), 16, 9).unwrap();
        let b = gen_synthetic(SyntheticTask::Multimodal, 200, (2, 8), 16, 9).unwrap();
        let c = gen_synthetic(SyntheticTask::Multimodal, 200, (2, 8), 16, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn multimodal_sources_own_two_targets_with_balanced_sampling() {
        let pairs = gen_synthetic(SyntheticTask::Multimodal, 10_000, (2, 10), 16, 3).unwrap();
        let mut by_source: HashMap<Vec<usize>, std::collections::HashSet<Vec<usize>>> = HashMap::new();
        let mut swapped = 0usize;
        let mut swappable = 0usize;
        for p in &pairs {
            by_source
                .entry(p.source.clone())
                .or_default()
                .insert(p.target.clone());
            let (a, b) = multimodal_targets(&p.source);
            if a != b {
                swappable += 1;
                if p.target == b {
                    swapped += 1;
                }
            }
        }
        let distinct = by_source.len();
        let ambiguous = by_source.values().filter(|t| t.len() >= 2).count();
        let frac = ambiguous as f64 / distinct as f64;
        assert!(frac >= 0.30, "only {frac:.2} of sources show two targets");
        let swap_rate = swapped as f64 / swappable as f64;
        assert!(
            (swap_rate - 0.5).abs() <= 0.05,
            "template frequency {swap_rate:.3} outside 0.5 +/- 0.05"
        );
    }

    #[test]
    fn batchify_pads_and_masks_consistently() {
        let pairs = vec![
            SentencePair {
                source: vec![5, 6],
                target: vec![7, 8, 9],
            },
            SentencePair {
                source: vec![4, 5, 6],
                target: vec![9],
            },
        ];
        let batches = batchify(&pairs, 2);
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.src_width, 3);
        assert_eq!(b.tgt_width, 3);
        assert_eq!(b.src[2], PAD);
        assert!(!b.src_mask[2]);
        let mask_src: usize = b.src_mask.iter().filter(|&&m| m).count();
        let mask_tgt: usize = b.tgt_mask.iter().filter(|&&m| m).count();
        assert_eq!(mask_src, 5);
        assert_eq!(mask_tgt, 4);
        assert_eq!(b.source_row(0), vec![5, 6]);
        assert_eq!(b.target_row(1), vec![9]);
    }

    #[test]
    fn batchify_conserves_tokens() {
        let pairs = gen_synthetic(SyntheticTask::Copy, 57, (1, 9), 20, 5).unwrap();
        let total: usize = pairs.iter().map(|p| p.source.len() + p.target.len()).sum();
        let batched: usize = batchify(&pairs, 8)
            .iter()
            .map(|b| {
                b.src_mask.iter().filter(|&&m| m).count() + b.tgt_mask.iter().filter(|&&m| m).count()
            })
            .sum();
        assert_eq!(total, batched);
    }

    #[test]
    fn parallel_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::synthetic(16);
        let pairs = gen_synthetic(SyntheticTask::Reverse, 30, (1, 7), 16, 2).unwrap();
        write_parallel(dir.path(), &pairs, &vocab).unwrap();
        let loaded = read_parallel(
            &dir.path().join("source.txt"),
            &dir.path().join("target.txt"),
            &vocab,
        )
        .unwrap();
        assert_eq!(pairs, loaded);
    }

    #[test]
    fn vocab_file_round_trip_and_line_indexing() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(["x", "y", "x", "z"], 1).unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // line index = id - 4
        assert_eq!(lines[0], v.token(4));
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.size(), v.size());
        assert_eq!(loaded.id_of("y"), v.id_of("y"));
    }

    #[test]
    fn generated_ids_never_include_specials() {
        for task in [
            SyntheticTask::Copy,
            SyntheticTask::Reverse,
            SyntheticTask::Remap,
            SyntheticTask::Multimodal,
        ] {
            let pairs = gen_synthetic(task, 50, (1, 8), 10, 7).unwrap();
            for p in &pairs {
                assert!(p.source.iter().all(|&id| (NUM_SPECIALS..10).contains(&id)));
                assert!(p.target.iter().all(|&id| (NUM_SPECIALS..10).contains(&id)));
            }
        }
    }
}
