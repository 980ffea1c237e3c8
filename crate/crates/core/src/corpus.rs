//! Corpus ingestion: tokenization, vocabulary, encoding, and pair extraction.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercases and splits text into word and punctuation tokens. Runs of
/// alphanumerics stay together; an apostrophe starts a new token so that
/// clitics come off the host word ("he's" → [he, 's]); any other punctuation
/// character stands alone.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in lower.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else if ch == '\'' {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_of: HashMap<String, usize>,
    token_of: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Counts tokens across `files` and keeps those seen at least `min_count`
    /// times. Ids 0..3 are reserved; real tokens get ids from 4 up, ordered
    /// by descending count then lexicographically, so the assignment is
    /// deterministic for a given corpus.
    pub fn build(files: &[PathBuf], min_count: u64) -> Result<Vocabulary> {
        if min_count == 0 {
            return Err(Error::Usage("min_count must be at least 1".into()));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        for path in files {
            for line in read_lines(path)? {
                for tok in tokenize(&line) {
                    *freq.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut kept: Vec<(String, u64)> = freq
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut vocab = Vocabulary::reserved_only();
        for (tok, count) in kept {
            vocab.id_of.insert(tok.clone(), vocab.token_of.len());
            vocab.token_of.push(tok);
            vocab.counts.push(count);
        }
        Ok(vocab)
    }

    fn reserved_only() -> Vocabulary {
        Vocabulary {
            id_of: RESERVED
                .iter()
                .enumerate()
                .map(|(i, t)| (t.to_string(), i))
                .collect(),
            token_of: RESERVED.iter().map(|t| t.to_string()).collect(),
            counts: vec![0; RESERVED.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of.get(id).map(|s| s.as_str())
    }

    /// Ids of the tokens that are not PAD/UNK/BOS/EOS, ascending.
    pub fn content_ids(&self) -> impl Iterator<Item = usize> + '_ {
        RESERVED.len()..self.len()
    }

    /// Encodes tokens to ids, mapping out-of-vocabulary tokens to UNK,
    /// truncating to `max_len` interior tokens, and wrapping in BOS/EOS.
    pub fn encode(&self, tokens: &[String], max_len: usize) -> Vec<usize> {
        let mut ids = vec![BOS];
        for tok in tokens.iter().take(max_len) {
            ids.push(self.id(tok).unwrap_or(UNK));
        }
        ids.push(EOS);
        ids
    }

    /// Inverse of encode modulo UNKs: skips PAD and BOS, stops at EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut tokens = Vec::new();
        for &id in ids {
            if id == PAD || id == BOS {
                continue;
            }
            if id == EOS {
                break;
            }
            match self.token(id) {
                Some(tok) => tokens.push(tok.to_string()),
                None => {
                    return Err(Error::DataCorruption(format!(
                        "id {id} not in vocabulary of size {}",
                        self.len()
                    )))
                }
            }
        }
        Ok(tokens)
    }

    /// Serializes as text: 4 reserved header lines, then `token<TAB>count`
    /// per content token in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, tok) in self.token_of.iter().enumerate() {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&self.counts[i].to_string());
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let mut vocab = Vocabulary::reserved_only();
        for (lineno, line) in read_lines(path)?.into_iter().enumerate() {
            let parse_err = |detail: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail,
            };
            let (tok, count_str) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>count".into()))?;
            let count: u64 = count_str
                .parse()
                .map_err(|_| parse_err(format!("bad count {count_str:?}")))?;
            if lineno < RESERVED.len() {
                if tok != RESERVED[lineno] {
                    return Err(parse_err(format!(
                        "expected reserved token {:?}, got {tok:?}",
                        RESERVED[lineno]
                    )));
                }
                continue;
            }
            if vocab.id_of.contains_key(tok) {
                return Err(parse_err(format!("duplicate token {tok:?}")));
            }
            vocab.id_of.insert(tok.to_string(), vocab.token_of.len());
            vocab.token_of.push(tok.to_string());
            vocab.counts.push(count);
        }
        if vocab.token_of.len() < RESERVED.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                detail: "missing reserved-token header".into(),
            });
        }
        Ok(vocab)
    }
}

/// A prompt/response pair, encoded and BOS/EOS-delimited.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialoguePair {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

/// Raw adjacent-line pairs from one file: (line_i, line_{i+1}) for every
/// consecutive pair. Blank (whitespace-only) lines are dropped first so a
/// stray empty line neither forms a pair nor splits the file in two.
pub fn pair_adjacent(path: &Path) -> Result<Vec<(String, String)>> {
    let lines: Vec<String> = read_lines(path)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    Ok(lines
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect())
}

/// Encodes raw pairs from every manifest file, never pairing across files.
pub fn encode_pairs(
    files: &[PathBuf],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<DialoguePair>> {
    let mut pairs = Vec::new();
    for path in files {
        for (x_raw, y_raw) in pair_adjacent(path)? {
            let x = vocab.encode(&tokenize(&x_raw), max_len);
            let y = vocab.encode(&tokenize(&y_raw), max_len);
            if x.len() > 2 && y.len() > 2 {
                pairs.push(DialoguePair { x, y });
            }
        }
    }
    Ok(pairs)
}

/// Reads a manifest: one corpus file path per line, relative paths resolved
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut files = Vec::new();
    for line in read_lines(path)? {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let p = PathBuf::from(trimmed);
        files.push(if p.is_absolute() { p } else { base.join(p) });
    }
    Ok(files)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}
