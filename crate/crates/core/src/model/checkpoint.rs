//! Self-describing checkpoint files.
//!
//! Plain text: a fixed header, the class assignment, then every parameter
//! tensor (and optionally optimizer accumulators) with f64 values written as
//! 16-digit hex bit patterns. Bit patterns rather than decimals make saves
//! byte-deterministic and reloads bit-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus;
use crate::error::{Error, Result};
use crate::model::{ClassAssignment, ModelConfig, ModelKind, ModelParams};
use crate::numerics::Tensor;

const MAGIC: &str = "dialogue-vae checkpoint v1";

/// Optimizer accumulators per parameter: (E[g²], E[Δx²]).
pub type OptState = BTreeMap<String, (Vec<f64>, Vec<f64>)>;

pub struct Checkpoint {
    pub params: ModelParams,
    pub epochs_done: usize,
    pub global_step: usize,
    pub vocab_path: String,
    pub vocab_sha256: String,
    pub opt: Option<OptState>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("writing to a String cannot fail");
    }
    out
}

fn push_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{:016x}", v.to_bits()).expect("writing to a String cannot fail");
    }
    out.push('\n');
}

/// Writes atomically: the content goes to a sibling temp file first and is
/// renamed into place, so a crash never leaves a truncated checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.params;
    let c = &p.config;
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    writeln!(out, "kind {}", p.kind.as_str()).expect("writing to a String cannot fail");
    writeln!(out, "vocab_size {}", c.vocab_size).unwrap();
    writeln!(out, "embed_dim {}", c.embed_dim).unwrap();
    writeln!(out, "enc_hidden {}", c.enc_hidden).unwrap();
    writeln!(out, "latent_dim {}", c.latent_dim).unwrap();
    writeln!(out, "n_classes {}", c.n_classes).unwrap();
    writeln!(out, "max_len {}", c.max_len).unwrap();
    writeln!(out, "word_dropout {}", c.word_dropout).unwrap();
    writeln!(out, "class_seed {}", p.class_seed).unwrap();
    writeln!(out, "epochs_done {}", ckpt.epochs_done).unwrap();
    writeln!(out, "global_step {}", ckpt.global_step).unwrap();
    writeln!(out, "vocab_path {}", ckpt.vocab_path).unwrap();
    writeln!(out, "vocab_sha256 {}", ckpt.vocab_sha256).unwrap();
    out.push_str("class_of");
    for &cls in &p.classes.class_of {
        write!(out, " {cls}").unwrap();
    }
    out.push('\n');

    for (name, t) in p.tensors() {
        write!(out, "tensor {name}").unwrap();
        for d in t.shape() {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        push_floats(&mut out, t.data());
    }
    if let Some(opt) = &ckpt.opt {
        for (name, (eg2, edx2)) in opt {
            writeln!(out, "opt {name} {}", eg2.len()).unwrap();
            push_floats(&mut out, eg2);
            push_floats(&mut out, edx2);
        }
    }
    out.push_str("end\n");

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    lines: Vec<String>,
    at: usize,
}

impl<'a> Reader<'a> {
    fn next(&mut self) -> Result<&str> {
        let line = self.lines.get(self.at).ok_or_else(|| Error::Parse {
            path: self.path.to_path_buf(),
            line: self.at + 1,
            detail: "unexpected end of file".into(),
        })?;
        self.at += 1;
        Ok(line)
    }

    fn err(&self, detail: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.at,
            detail,
        }
    }

    /// Consumes a `key value` line, returning the value.
    fn field(&mut self, key: &str) -> Result<String> {
        let line = self.next()?.to_string();
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(self.err(format!("expected field {key:?}, got {line:?}"))),
        }
    }

    fn parse_field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        v.parse()
            .map_err(|_| self.err(format!("bad value {v:?} for {key}")))
    }

    fn floats(&mut self, want: usize) -> Result<Vec<f64>> {
        let line = self.next()?.to_string();
        let values: Vec<f64> = line
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| u64::from_str_radix(s, 16).map(f64::from_bits))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.err("bad float bit pattern".into()))?;
        if values.len() != want {
            return Err(self.err(format!("expected {want} values, got {}", values.len())));
        }
        Ok(values)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        path,
        lines: corpus::read_lines(path)?,
        at: 0,
    };
    if r.next()? != MAGIC {
        return Err(r.err(format!("not a checkpoint file (missing {MAGIC:?})")));
    }
    let kind = ModelKind::parse(&r.field("kind")?)?;
    let config = ModelConfig {
        vocab_size: r.parse_field("vocab_size")?,
        embed_dim: r.parse_field("embed_dim")?,
        enc_hidden: r.parse_field("enc_hidden")?,
        latent_dim: r.parse_field("latent_dim")?,
        n_classes: r.parse_field("n_classes")?,
        max_len: r.parse_field("max_len")?,
        word_dropout: r.parse_field("word_dropout")?,
    };
    let class_seed: u64 = r.parse_field("class_seed")?;
    let epochs_done: usize = r.parse_field("epochs_done")?;
    let global_step: usize = r.parse_field("global_step")?;
    let vocab_path = r.field("vocab_path")?;
    let vocab_sha256 = r.field("vocab_sha256")?;

    let class_line = r.field("class_of")?;
    let class_of: Vec<usize> = class_line
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| r.err("bad class id".into()))?;
    if class_of.len() != config.vocab_size {
        return Err(r.err(format!(
            "class_of lists {} words, vocab_size is {}",
            class_of.len(),
            config.vocab_size
        )));
    }
    let classes = ClassAssignment::from_class_of(class_of, config.n_classes)?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut opt: OptState = BTreeMap::new();
    loop {
        let line = r.next()?.to_string();
        if line == "end" {
            break;
        }
        let mut parts = line.split(' ');
        match parts.next() {
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| r.err("tensor line missing name".into()))?
                    .to_string();
                let shape: Vec<usize> = parts
                    .map(|s| s.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| r.err(format!("bad shape on tensor {name}")))?;
                let numel: usize = shape.iter().product();
                let data = r.floats(numel)?;
                if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                    return Err(r.err(format!("duplicate tensor {name}")));
                }
            }
            Some("opt") => {
                let name = parts
                    .next()
                    .ok_or_else(|| r.err("opt line missing name".into()))?
                    .to_string();
                let numel: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| r.err(format!("bad length on opt {name}")))?;
                let eg2 = r.floats(numel)?;
                let edx2 = r.floats(numel)?;
                if opt.insert(name.clone(), (eg2, edx2)).is_some() {
                    return Err(r.err(format!("duplicate opt state {name}")));
                }
            }
            _ => return Err(r.err(format!("unexpected line {line:?}"))),
        }
    }

    let params = ModelParams::from_parts(kind, config, classes, class_seed, tensors)?;
    for (name, (eg2, _)) in &opt {
        let t = params
            .tensors()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::DataCorruption(format!("opt state for unknown tensor {name}")))?;
        if t.1.numel() != eg2.len() {
            return Err(Error::DataCorruption(format!(
                "opt state for {name} has {} values, tensor has {}",
                eg2.len(),
                t.1.numel()
            )));
        }
    }
    Ok(Checkpoint {
        params,
        epochs_done,
        global_step,
        vocab_path,
        vocab_sha256,
        opt: if opt.is_empty() { None } else { Some(opt) },
    })
}
