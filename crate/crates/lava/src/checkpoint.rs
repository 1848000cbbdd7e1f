//! Binary model checkpoints. Layout: magic `LAVA`, format version (u32),
//! model kind (u8), config as JSON, the vocabulary's content tokens, then
//! every named tensor sorted by name. All integers and floats are
//! little-endian; strings and tensors carry explicit lengths, so a load
//! either reproduces the saved model bit for bit or fails loudly.

use crate::config::ModelConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nat::NatModel;
use crate::teacher::Teacher;
use crate::tensor::Param;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LAVA";
const VERSION: u32 = 1;
const KIND_TEACHER: u8 = 1;
const KIND_NAT: u8 = 2;
/// Upper bound on any length field, to fail fast on corrupt files instead
/// of attempting a huge allocation.
const MAX_LEN: u64 = 1 << 32;

type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn truncated(what: &str) -> Error {
    Error::checkpoint(format!("truncated checkpoint while reading {what}"))
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_u64::<LittleEndian>(bytes.len() as u64)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_len(r: &mut impl Read, what: &str) -> Result<usize> {
    let len = r.read_u64::<LittleEndian>().map_err(|_| truncated(what))?;
    if len > MAX_LEN {
        return Err(Error::checkpoint(format!(
            "implausible length {len} for {what}"
        )));
    }
    Ok(len as usize)
}

fn read_bytes(r: &mut impl Read, what: &str) -> Result<Vec<u8>> {
    let len = read_len(r, what)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| truncated(what))?;
    Ok(buf)
}

fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    String::from_utf8(read_bytes(r, what)?)
        .map_err(|_| Error::checkpoint(format!("invalid utf-8 in {what}")))
}

fn collect(visit: &mut dyn FnMut(&mut dyn FnMut(&Param))) -> TensorMap {
    let mut map = TensorMap::new();
    visit(&mut |p: &Param| {
        map.insert(p.name().to_string(), (p.shape().to_vec(), p.values().to_vec()));
    });
    map
}

fn write_checkpoint(
    path: &Path,
    kind: u8,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    tensors: &TensorMap,
) -> Result<()> {
    assert_eq!(
        vocab.size(),
        cfg.vocab_size,
        "vocabulary size must match the model configuration"
    );
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(kind)?;
    let cfg_json = serde_json::to_string(cfg)
        .map_err(|e| Error::checkpoint(format!("cannot serialize config: {e}")))?;
    write_bytes(&mut w, cfg_json.as_bytes())?;
    let tokens = vocab.content_tokens();
    w.write_u64::<LittleEndian>(tokens.len() as u64)?;
    for tok in tokens {
        write_bytes(&mut w, tok.as_bytes())?;
    }
    w.write_u64::<LittleEndian>(tensors.len() as u64)?;
    for (name, (shape, data)) in tensors {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_u32::<LittleEndian>(shape.len() as u32)?;
        for &dim in shape {
            w.write_u64::<LittleEndian>(dim as u64)?;
        }
        w.write_u64::<LittleEndian>(data.len() as u64)?;
        for &x in data {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(u8, ModelConfig, Vocabulary, TensorMap)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::checkpoint(format!(
            "bad magic {magic:?}, not a model checkpoint"
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| truncated("version"))?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let kind = r.read_u8().map_err(|_| truncated("kind"))?;
    let cfg_json = read_string(&mut r, "config")?;
    let cfg: ModelConfig = serde_json::from_str(&cfg_json)
        .map_err(|e| Error::checkpoint(format!("bad config json: {e}")))?;
    let n_tokens = read_len(&mut r, "vocabulary size")?;
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 20));
    for i in 0..n_tokens {
        tokens.push(read_string(&mut r, &format!("vocabulary token {i}"))?);
    }
    let vocab = Vocabulary::from_saved_tokens(tokens)?;
    if vocab.size() != cfg.vocab_size {
        return Err(Error::checkpoint(format!(
            "vocabulary has {} ids but the config says {}",
            vocab.size(),
            cfg.vocab_size
        )));
    }
    let n_tensors = read_len(&mut r, "tensor count")?;
    let mut tensors = TensorMap::new();
    for _ in 0..n_tensors {
        let name = read_string(&mut r, "tensor name")?;
        let rank = r
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated(&format!("shape of {name}")))? as usize;
        if rank > 8 {
            return Err(Error::checkpoint(format!(
                "implausible rank {rank} for tensor {name}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_len(&mut r, &format!("shape of {name}"))?);
        }
        let count = read_len(&mut r, &format!("element count of {name}"))?;
        if count != shape.iter().product::<usize>() {
            return Err(Error::checkpoint(format!(
                "tensor {name}: {count} elements do not fill shape {shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(
                r.read_f64::<LittleEndian>()
                    .map_err(|_| truncated(&format!("data of {name}")))?,
            );
        }
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::checkpoint("trailing bytes after the last tensor"));
    }
    Ok((kind, cfg, vocab, tensors))
}

fn fill(
    visit_mut: &mut dyn FnMut(&mut dyn FnMut(&mut Param)),
    tensors: &TensorMap,
) -> Result<()> {
    let mut consumed = 0usize;
    let mut failure: Option<Error> = None;
    let mut seen = Vec::new();
    visit_mut(&mut |p: &mut Param| {
        if failure.is_some() {
            return;
        }
        seen.push(p.name().to_string());
        match tensors.get(p.name()) {
            None => failure = Some(Error::checkpoint(format!("missing tensor {}", p.name()))),
            Some((shape, data)) => {
                if shape != p.shape() {
                    failure = Some(Error::checkpoint(format!(
                        "tensor {} has shape {shape:?}, expected {:?}",
                        p.name(),
                        p.shape()
                    )));
                } else {
                    p.set_values(data);
                    consumed += 1;
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if consumed != tensors.len() {
        let extra = tensors
            .keys()
            .find(|k| !seen.contains(k))
            .expect("some stored tensor was never consumed");
        return Err(Error::checkpoint(format!(
            "checkpoint carries unexpected tensor {extra}"
        )));
    }
    Ok(())
}

pub fn save_teacher(path: &Path, teacher: &Teacher, vocab: &Vocabulary) -> Result<()> {
    let tensors = collect(&mut |f| teacher.visit(f));
    write_checkpoint(path, KIND_TEACHER, &teacher.cfg, vocab, &tensors)
}

pub fn load_teacher(path: &Path) -> Result<(Teacher, Vocabulary)> {
    let (kind, cfg, vocab, tensors) = read_checkpoint(path)?;
    if kind != KIND_TEACHER {
        return Err(Error::checkpoint(format!(
            "expected a teacher checkpoint, found kind {kind}"
        )));
    }
    let mut teacher = Teacher::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    fill(&mut |f| teacher.visit_mut(f), &tensors)?;
    Ok((teacher, vocab))
}

pub fn save_nat(path: &Path, model: &NatModel, vocab: &Vocabulary) -> Result<()> {
    let tensors = collect(&mut |f| model.visit(f));
    write_checkpoint(path, KIND_NAT, &model.cfg, vocab, &tensors)
}

pub fn load_nat(path: &Path) -> Result<(NatModel, Vocabulary)> {
    let (kind, cfg, vocab, tensors) = read_checkpoint(path)?;
    if kind != KIND_NAT {
        return Err(Error::checkpoint(format!(
            "expected a model checkpoint, found kind {kind}"
        )));
    }
    let mut model = NatModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    fill(&mut |f| model.visit_mut(f), &tensors)?;
    Ok((model, vocab))
}
