//! Command-line pipeline: prepare → train → generate → eval, driven by a
//! flat `key = value` config file with `--key value` overrides.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::corpus::{self, tokenize, DialoguePair, Vocabulary};
use crate::decoding::{generate_replies, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::eval::{render_stats_table, render_stats_tsv, reply_stats, shell_sweep, ReplyStats};
use crate::model::{load_checkpoint, sha256_hex, ModelConfig, ModelKind, ModelParams};
use crate::training::{self, TrainConfig};

pub const HELP: &str = "\
dialogue-vae: train and compare dialogue response generators.

usage: dialogue-vae <command> [--config FILE] [--key value ...] [replies.tsv ...]

commands:
  prepare      build the vocabulary and encoded pair cache from the corpus
  train        train one model variant, writing per-epoch checkpoints
  generate     decode replies for every prompt with one strategy
  eval         score replies files into a statistics table
  shell-sweep  generate and score latent-shell replies across radii
               (same as: eval --shell-sweep)

Settings come from an optional --config file (lines of `key = value`,
`#` starts a comment), each overridable on the command line as --key value.
Unknown keys are rejected. Keys and defaults:

  seed = 0                 root seed; every random choice derives from it
  corpus_manifest =        file listing one corpus file path per line
  prompt_file =            file with one prompt per line
  checkpoint_dir = checkpoints
  output_dir = out

  min_count = 2            drop tokens rarer than this from the vocabulary
  max_len = 50             token cap per utterance (and per generated reply)

  embed_dim = 32           word embedding width
  enc_hidden = 32          encoder GRU width per direction
  latent_dim = 8           latent variable width
  n_classes = 0            output-softmax classes; 0 picks ~sqrt(vocab)
  word_dropout = 0.5       decoder-input UNK replacement rate (latent model)

  model = latent           train/target variant: latent | baseline
  epochs = 3
  kl_anneal_steps = 0      steps to ramp the KL weight; 0 = one epoch's worth
  adadelta_rho = 0.95
  adadelta_eps = 1e-6
  batch_size = 1
  log_every = 50           steps between log lines; 0 = epoch ends only

  strategy = ml-beam       ml-beam | mmi-beam | temp-sample | latent-shell
  width = 2                beam width
  tau = 0.35               sampling temperature in (0, 1]
  mmi_lambda = 0.45        anti-LM penalty weight
  mmi_window = 6           anti-LM penalty applies to the first g words
  radius = 0               latent shell radius for generate
  n = 1                    replies per prompt for generate
  radii = 0,2,4,8          shell-sweep radius list
  samples_per_radius = 5   replies per prompt per radius in shell-sweep
";

const REPLY_HEADER: &str = "prompt_index\tsample_index\tstrategy\tradius_or_tau\treply_text";

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_manifest: String,
    pub prompt_file: String,
    pub checkpoint_dir: String,
    pub output_dir: String,
    pub min_count: u64,
    pub max_len: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub latent_dim: usize,
    pub n_classes: usize,
    pub word_dropout: f64,
    pub model: String,
    pub epochs: usize,
    pub kl_anneal_steps: usize,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub batch_size: usize,
    pub log_every: usize,
    pub strategy: String,
    pub width: usize,
    pub tau: f64,
    pub mmi_lambda: f64,
    pub mmi_window: usize,
    pub radius: f64,
    pub n: usize,
    pub radii: String,
    pub samples_per_radius: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            corpus_manifest: String::new(),
            prompt_file: String::new(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
            min_count: 2,
            max_len: 50,
            embed_dim: 32,
            enc_hidden: 32,
            latent_dim: 8,
            n_classes: 0,
            word_dropout: 0.5,
            model: "latent".into(),
            epochs: 3,
            kl_anneal_steps: 0,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            batch_size: 1,
            log_every: 50,
            strategy: "ml-beam".into(),
            width: 2,
            tau: 0.35,
            mmi_lambda: 0.45,
            mmi_window: 6,
            radius: 0.0,
            n: 1,
            radii: "0,2,4,8".into(),
            samples_per_radius: 5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("config key {key}: {e} (got {value:?})")))
}

impl RunConfig {
    /// Applies one `key = value` setting. Unknown keys are an error so typos
    /// never silently fall back to defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "corpus_manifest" => self.corpus_manifest = value.into(),
            "prompt_file" => self.prompt_file = value.into(),
            "checkpoint_dir" => self.checkpoint_dir = value.into(),
            "output_dir" => self.output_dir = value.into(),
            "min_count" => self.min_count = parse_num(key, value)?,
            "max_len" => self.max_len = parse_num(key, value)?,
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "enc_hidden" => self.enc_hidden = parse_num(key, value)?,
            "latent_dim" => self.latent_dim = parse_num(key, value)?,
            "n_classes" => self.n_classes = parse_num(key, value)?,
            "word_dropout" => self.word_dropout = parse_num(key, value)?,
            "model" => self.model = value.into(),
            "epochs" => self.epochs = parse_num(key, value)?,
            "kl_anneal_steps" => self.kl_anneal_steps = parse_num(key, value)?,
            "adadelta_rho" => self.adadelta_rho = parse_num(key, value)?,
            "adadelta_eps" => self.adadelta_eps = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "log_every" => self.log_every = parse_num(key, value)?,
            "strategy" => self.strategy = value.into(),
            "width" => self.width = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "mmi_lambda" => self.mmi_lambda = parse_num(key, value)?,
            "mmi_window" => self.mmi_window = parse_num(key, value)?,
            "radius" => self.radius = parse_num(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "radii" => self.radii = value.into(),
            "samples_per_radius" => self.samples_per_radius = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Loads a config file: blank lines and `#` comment lines are skipped,
    /// everything else must be `key = value`.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        for (i, line) in corpus::read_lines(path)?.into_iter().enumerate() {
            let parse_err = |detail: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail,
            };
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".into()))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn radii_list(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for part in self.radii.split(',') {
            out.push(parse_num("radii", part.trim())?);
        }
        if out.is_empty() {
            return Err(Error::Config("radii must list at least one radius".into()));
        }
        Ok(out)
    }

    fn decode_config(&self, strategy: Strategy) -> DecodeConfig {
        DecodeConfig {
            strategy,
            width: self.width,
            tau: self.tau,
            mmi_lambda: self.mmi_lambda,
            mmi_window: self.mmi_window,
            radius: self.radius,
            max_len: self.max_len,
        }
    }

    fn output_dir(&self) -> &Path {
        Path::new(&self.output_dir)
    }

    fn checkpoint_dir(&self) -> &Path {
        Path::new(&self.checkpoint_dir)
    }

    fn vocab_path(&self) -> PathBuf {
        self.output_dir().join("vocab.txt")
    }

    fn pairs_path(&self) -> PathBuf {
        self.output_dir().join("pairs.txt")
    }
}

/// Entry point behind `main`: parses `<command> [--config FILE] [--key value]
/// [positional ...]` and dispatches. Errors bubble up for the binary to print
/// on the diagnostic stream with a nonzero exit code.
pub fn run(args: &[String]) -> Result<()> {
    let mut it = args.iter();
    let Some(command) = it.next() else {
        return Err(Error::Usage(format!("no command given\n\n{HELP}")));
    };
    if command == "--help" || command == "-h" || command == "help" {
        print!("{HELP}");
        return Ok(());
    }

    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut positional: Vec<String> = Vec::new();
    let mut sweep = command == "shell-sweep";
    while let Some(arg) = it.next() {
        if arg == "--help" || arg == "-h" {
            print!("{HELP}");
            return Ok(());
        } else if arg == "--shell-sweep" {
            sweep = true;
        } else if let Some(key) = arg.strip_prefix("--") {
            let value = it
                .next()
                .ok_or_else(|| Error::Usage(format!("flag --{key} needs a value")))?;
            let key = key.replace('-', "_");
            if key == "config" {
                config_path = Some(PathBuf::from(value));
            } else {
                overrides.push((key, value.clone()));
            }
        } else {
            positional.push(arg.clone());
        }
    }

    let mut cfg = RunConfig::default();
    if let Some(path) = config_path {
        cfg.load_file(&path)?;
    }
    for (key, value) in &overrides {
        cfg.set(key, value)?;
    }

    if !positional.is_empty() && command != "eval" {
        return Err(Error::Usage(format!(
            "unexpected argument {:?} for {command}",
            positional[0]
        )));
    }

    match command.as_str() {
        "prepare" => cmd_prepare(&cfg),
        "train" => cmd_train(&cfg),
        "generate" => cmd_generate(&cfg),
        "eval" | "shell-sweep" => cmd_eval(&cfg, &positional, sweep),
        other => Err(Error::Usage(format!(
            "unknown command {other:?} (expected prepare, train, generate, eval, or shell-sweep)"
        ))),
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    if cfg.corpus_manifest.is_empty() {
        return Err(Error::Config("corpus_manifest is required for prepare".into()));
    }
    let files = corpus::read_manifest(Path::new(&cfg.corpus_manifest))?;
    if files.is_empty() {
        return Err(Error::Config(format!(
            "manifest {} lists no corpus files",
            cfg.corpus_manifest
        )));
    }
    let vocab = Vocabulary::build(&files, cfg.min_count)?;
    if vocab.content_ids().next().is_none() {
        return Err(Error::Config(format!(
            "corpus has no tokens appearing at least {} times",
            cfg.min_count
        )));
    }
    let pairs = corpus::encode_pairs(&files, &vocab, cfg.max_len)?;
    if pairs.is_empty() {
        return Err(Error::Config(
            "corpus yields no usable adjacent utterance pairs".into(),
        ));
    }

    fs::create_dir_all(cfg.output_dir()).map_err(|e| Error::io(cfg.output_dir(), e))?;
    vocab.save(&cfg.vocab_path())?;
    let mut cache = String::new();
    for pair in &pairs {
        let x: Vec<String> = pair.x.iter().map(|id| id.to_string()).collect();
        let y: Vec<String> = pair.y.iter().map(|id| id.to_string()).collect();
        cache.push_str(&x.join(" "));
        cache.push('\t');
        cache.push_str(&y.join(" "));
        cache.push('\n');
    }
    write_atomic(&cfg.pairs_path(), &cache)?;

    let mut tokens = 0usize;
    for file in &files {
        for line in corpus::read_lines(file)? {
            tokens += tokenize(&line).len();
        }
    }
    println!("files {}", files.len());
    println!("pairs {}", pairs.len());
    println!("tokens {tokens}");
    println!("vocab {}", vocab.len());
    Ok(())
}

fn load_pairs(path: &Path) -> Result<Vec<DialoguePair>> {
    let mut pairs = Vec::new();
    for (i, line) in corpus::read_lines(path)?.into_iter().enumerate() {
        let parse_err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let (x_str, y_str) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected x_ids<TAB>y_ids".into()))?;
        let ids = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|tok| {
                    tok.parse()
                        .map_err(|e| parse_err(format!("bad token id {tok:?}: {e}")))
                })
                .collect()
        };
        pairs.push(DialoguePair {
            x: ids(x_str)?,
            y: ids(y_str)?,
        });
    }
    Ok(pairs)
}

fn require_prepared(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found; run prepare first",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let vocab_path = cfg.vocab_path();
    require_prepared(&vocab_path)?;
    require_prepared(&cfg.pairs_path())?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let pairs = load_pairs(&cfg.pairs_path())?;
    let kind = ModelKind::parse(&cfg.model)?;

    let n_classes = if cfg.n_classes == 0 {
        ModelConfig::auto_classes(vocab.len())
    } else {
        cfg.n_classes
    };
    let mconfig = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: cfg.embed_dim,
        enc_hidden: cfg.enc_hidden,
        latent_dim: cfg.latent_dim,
        n_classes,
        max_len: cfg.max_len,
        word_dropout: cfg.word_dropout,
    };
    let mut params = ModelParams::init(kind, mconfig, cfg.seed)?;
    let tcfg = TrainConfig {
        seed: cfg.seed,
        epochs: cfg.epochs,
        kl_anneal_steps: cfg.kl_anneal_steps,
        rho: cfg.adadelta_rho,
        eps: cfg.adadelta_eps,
        batch_size: cfg.batch_size,
        log_every: cfg.log_every,
    };

    let dir = cfg.checkpoint_dir();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(format!("train-{}.log", kind.as_str()));
    // Append so an interrupted run's history survives the resume.
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    writeln!(log, "# start {} at unix {now}", kind.as_str()).map_err(|e| Error::io(&log_path, e))?;

    let vocab_bytes = fs::read(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let report = training::train(
        &mut params,
        &pairs,
        &tcfg,
        dir,
        &vocab_path.to_string_lossy(),
        &sha256_hex(&vocab_bytes),
        &mut log,
    )?;
    println!(
        "trained {} through step {} ({} new steps); last epoch mean recon {:.4}, mean kl {:.4}",
        kind.as_str(),
        report.global_step,
        report.steps_run,
        report.final_epoch_mean_recon,
        report.final_epoch_mean_kl
    );
    Ok(())
}

/// Tokenizes and encodes the prompt file, skipping blank lines.
fn load_prompts(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut prompts = Vec::new();
    for line in corpus::read_lines(path)? {
        let tokens = tokenize(&line);
        if tokens.is_empty() {
            continue;
        }
        prompts.push(vocab.encode(&tokens, max_len));
    }
    if prompts.is_empty() {
        return Err(Error::Config(format!(
            "prompt file {} has no prompts",
            path.display()
        )));
    }
    Ok(prompts)
}

/// Loads the newest checkpoint of `kind` and verifies it was trained against
/// the exact vocabulary file on disk.
fn load_latest(cfg: &RunConfig, kind: ModelKind) -> Result<ModelParams> {
    let dir = cfg.checkpoint_dir();
    let (_, path) = training::latest_checkpoint(dir, kind).ok_or_else(|| {
        Error::Config(format!(
            "no {} checkpoint in {}; run train --model {} first",
            kind.as_str(),
            dir.display(),
            kind.as_str()
        ))
    })?;
    let ckpt = load_checkpoint(&path)?;
    let vocab_path = cfg.vocab_path();
    let bytes = fs::read(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    if sha256_hex(&bytes) != ckpt.vocab_sha256 {
        return Err(Error::Config(format!(
            "{} was trained against a different vocabulary than {}",
            path.display(),
            vocab_path.display()
        )));
    }
    Ok(ckpt.params)
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let strategy = Strategy::parse(&cfg.strategy)?;
    if cfg.n == 0 {
        return Err(Error::Usage("n must be at least 1".into()));
    }
    if cfg.prompt_file.is_empty() {
        return Err(Error::Config("prompt_file is required for generate".into()));
    }
    let vocab_path = cfg.vocab_path();
    require_prepared(&vocab_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let prompts = load_prompts(Path::new(&cfg.prompt_file), &vocab, cfg.max_len)?;

    let kind = match strategy {
        Strategy::LatentShell => ModelKind::Latent,
        _ => ModelKind::Baseline,
    };
    let params = load_latest(cfg, kind)?;
    // The anti-LM is the same baseline decoder run without a prompt.
    let lm = match strategy {
        Strategy::MmiBeam => Some(&params),
        _ => None,
    };

    let dcfg = cfg.decode_config(strategy);
    let rows = generate_replies(&params, lm, &prompts, &dcfg, cfg.seed, cfg.n)?;

    let knob = match strategy {
        Strategy::TempSample => cfg.tau.to_string(),
        Strategy::LatentShell => cfg.radius.to_string(),
        _ => "-".to_string(),
    };
    let mut out = String::from(REPLY_HEADER);
    out.push('\n');
    for (p, s, ids) in &rows {
        let text = vocab.decode(ids)?.join(" ");
        out.push_str(&format!("{p}\t{s}\t{}\t{knob}\t{text}\n", strategy.as_str()));
    }
    let name = match strategy {
        Strategy::LatentShell => format!("replies-latent-shell-r{}.tsv", cfg.radius),
        _ => format!("replies-{}.tsv", strategy.as_str()),
    };
    fs::create_dir_all(cfg.output_dir()).map_err(|e| Error::io(cfg.output_dir(), e))?;
    let path = cfg.output_dir().join(name);
    write_atomic(&path, &out)?;
    println!("wrote {} replies to {}", rows.len(), path.display());
    Ok(())
}

/// Parses a replies file back into (prompt index, reply tokens) items plus a
/// stats-row label: the strategy name, or the radius for latent-shell files.
fn load_replies(path: &Path) -> Result<(String, Vec<(usize, Vec<String>)>)> {
    let lines = corpus::read_lines(path)?;
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    if lines.first().map(String::as_str) != Some(REPLY_HEADER) {
        return Err(parse_err(
            1,
            format!("expected replies header {REPLY_HEADER:?}"),
        ));
    }
    let mut label: Option<String> = None;
    let mut items = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let [p_str, s_str, strategy, knob, text] = fields.as_slice() else {
            return Err(parse_err(
                lineno,
                format!("expected 5 tab-separated fields, got {}", fields.len()),
            ));
        };
        let p: usize = p_str
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad prompt_index {p_str:?}: {e}")))?;
        let _: usize = s_str
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad sample_index {s_str:?}: {e}")))?;
        let row_label = if *strategy == "latent-shell" {
            (*knob).to_string()
        } else {
            (*strategy).to_string()
        };
        match &label {
            None => label = Some(row_label),
            Some(l) if *l != row_label => {
                return Err(parse_err(
                    lineno,
                    format!("mixed reply sources in one file: {l:?} then {row_label:?}"),
                ))
            }
            Some(_) => {}
        }
        items.push((p, text.split_whitespace().map(str::to_string).collect()));
    }
    let label = label.ok_or_else(|| parse_err(1, "no reply rows".into()))?;
    Ok((label, items))
}

/// Prints `#`-prefixed notes for adjacent inversions in a column expected to
/// be nondecreasing.
fn flag_inversions(rows: &[(String, ReplyStats)], column: &str, value: impl Fn(&ReplyStats) -> f64) {
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if value(&b.1) < value(&a.1) {
            println!(
                "# {column} inversion: {} at {} > {} at {}",
                value(&a.1),
                a.0,
                value(&b.1),
                b.0
            );
        }
    }
}

fn cmd_eval(cfg: &RunConfig, replies_files: &[String], sweep: bool) -> Result<()> {
    let vocab_path = cfg.vocab_path();
    require_prepared(&vocab_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    if cfg.prompt_file.is_empty() {
        return Err(Error::Config("prompt_file is required for eval".into()));
    }
    let prompts = load_prompts(Path::new(&cfg.prompt_file), &vocab, cfg.max_len)?;
    let baseline = load_latest(cfg, ModelKind::Baseline)?;
    fs::create_dir_all(cfg.output_dir()).map_err(|e| Error::io(cfg.output_dir(), e))?;

    let (rows, out_name) = if sweep {
        let latent = load_latest(cfg, ModelKind::Latent)?;
        let base = cfg.decode_config(Strategy::LatentShell);
        let sweep_rows = shell_sweep(
            &latent,
            &baseline,
            &vocab,
            &prompts,
            &cfg.radii_list()?,
            cfg.samples_per_radius,
            &base,
            cfg.seed,
        )?;
        let rows: Vec<(String, ReplyStats)> = sweep_rows
            .into_iter()
            .map(|r| (r.radius.to_string(), r.stats))
            .collect();
        (rows, "shell-sweep.tsv")
    } else {
        if replies_files.is_empty() {
            return Err(Error::Usage(
                "eval needs replies files (or --shell-sweep)".into(),
            ));
        }
        let mut rows = Vec::new();
        for file in replies_files {
            let (label, items) = load_replies(Path::new(file))?;
            rows.push((label, reply_stats(&baseline, &vocab, &prompts, &items)?));
        }
        (rows, "stats.tsv")
    };

    let path = cfg.output_dir().join(out_name);
    write_atomic(&path, &render_stats_tsv(&rows))?;
    print!("{}", render_stats_table(&rows));
    if sweep {
        flag_inversions(&rows, "unique_pct", |s| s.unique_pct);
        flag_inversions(&rows, "mean_nll", |s| s.mean_nll);
    }
    Ok(())
}
