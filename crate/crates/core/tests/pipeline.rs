//! End-to-end runs of the compiled binary: artifact layout, error contracts,
//! and cross-run determinism at toy scale.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dialogue-vae")
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dvae-pipeline-{name}"));
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_in(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fail_in(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        !out.status.success(),
        "command {args:?} unexpectedly succeeded:\n{}",
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes corpus, manifest, prompts, and a toy-sized config into `dir`.
fn write_fixture(dir: &Path) {
    fs::write(
        dir.join("corpus.txt"),
        "where are you going ?\n\
         i am going home .\n\
         why ?\n\
         because i am tired .\n\
         what do you want ?\n\
         i want to go home .\n",
    )
    .unwrap();
    fs::write(dir.join("manifest.txt"), "corpus.txt\n").unwrap();
    fs::write(
        dir.join("prompts.txt"),
        "where are you going ?\nwhat do you want ?\nwhy ?\n",
    )
    .unwrap();
    fs::write(
        dir.join("run.cfg"),
        "# toy pipeline settings\n\
         corpus_manifest = manifest.txt\n\
         prompt_file = prompts.txt\n\
         min_count = 1\n\
         max_len = 10\n\
         embed_dim = 5\n\
         enc_hidden = 6\n\
         latent_dim = 3\n\
         epochs = 2\n\
         log_every = 0\n\
         n = 2\n",
    )
    .unwrap();
}

fn reply_texts(path: &Path) -> Vec<(usize, String)> {
    let content = fs::read_to_string(path).unwrap();
    content
        .lines()
        .skip(1)
        .map(|line| {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 5, "row {line:?}");
            (fields[0].parse().unwrap(), fields[4].to_string())
        })
        .collect()
}

#[test]
fn help_documents_every_config_key() {
    let dir = fresh_dir("help");
    let text = ok_in(&dir, &["--help"]);
    for key in [
        "seed",
        "corpus_manifest",
        "prompt_file",
        "checkpoint_dir",
        "output_dir",
        "min_count",
        "max_len",
        "embed_dim",
        "enc_hidden",
        "latent_dim",
        "n_classes",
        "word_dropout",
        "model",
        "epochs",
        "kl_anneal_steps",
        "adadelta_rho",
        "adadelta_eps",
        "batch_size",
        "log_every",
        "strategy",
        "width",
        "tau",
        "mmi_lambda",
        "mmi_window",
        "radius",
        "radii",
        "samples_per_radius",
    ] {
        assert!(text.contains(key), "--help does not mention {key}");
    }
    for command in ["prepare", "train", "generate", "eval", "shell-sweep"] {
        assert!(text.contains(command), "--help does not mention {command}");
    }
}

#[test]
fn prepare_reports_pair_count_and_reruns_identically() {
    let dir = fresh_dir("prepare");
    fs::write(dir.join("tiny.txt"), "a b c\nd e f\na c e\n").unwrap();
    fs::write(dir.join("manifest.txt"), "tiny.txt\n").unwrap();
    let args = [
        "prepare",
        "--corpus-manifest",
        "manifest.txt",
        "--min-count",
        "1",
    ];
    let stdout = ok_in(&dir, &args);
    assert!(stdout.contains("pairs 2"), "stdout: {stdout}");
    assert!(stdout.contains("files 1"), "stdout: {stdout}");

    let vocab1 = fs::read(dir.join("out/vocab.txt")).unwrap();
    let pairs1 = fs::read(dir.join("out/pairs.txt")).unwrap();
    ok_in(&dir, &args);
    assert_eq!(vocab1, fs::read(dir.join("out/vocab.txt")).unwrap());
    assert_eq!(pairs1, fs::read(dir.join("out/pairs.txt")).unwrap());
}

#[test]
fn missing_corpus_file_names_the_path() {
    let dir = fresh_dir("missing-corpus");
    fs::write(dir.join("manifest.txt"), "nowhere.txt\n").unwrap();
    let stderr = fail_in(&dir, &["prepare", "--corpus-manifest", "manifest.txt"]);
    assert!(stderr.contains("nowhere.txt"), "stderr: {stderr}");
}

#[test]
fn train_before_prepare_says_run_prepare_first() {
    let dir = fresh_dir("train-unprepared");
    let stderr = fail_in(&dir, &["train"]);
    assert!(stderr.contains("run prepare first"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_fails_with_file_position() {
    let dir = fresh_dir("bad-key");
    fs::write(dir.join("bad.cfg"), "widht = 3\n").unwrap();
    let stderr = fail_in(&dir, &["prepare", "--config", "bad.cfg"]);
    assert!(stderr.contains("bad.cfg:1") && stderr.contains("widht"), "stderr: {stderr}");
    let stderr = fail_in(&dir, &["prepare", "--widht", "3"]);
    assert!(stderr.contains("widht"), "stderr: {stderr}");
}

#[test]
fn full_pipeline_from_corpus_to_stats() {
    let dir = fresh_dir("full");
    write_fixture(&dir);
    let cfg = ["--config", "run.cfg"];

    ok_in(&dir, &["prepare", "--config", "run.cfg"]);
    assert!(dir.join("out/vocab.txt").exists());
    assert!(dir.join("out/pairs.txt").exists());

    ok_in(&dir, &["train", "--config", "run.cfg", "--model", "baseline"]);
    ok_in(&dir, &["train", "--config", "run.cfg", "--model", "latent"]);
    assert!(dir.join("checkpoints/baseline-epoch2.ckpt").exists());
    assert!(dir.join("checkpoints/latent-epoch2.ckpt").exists());
    let log = fs::read_to_string(dir.join("checkpoints/train-latent.log")).unwrap();
    assert!(
        log.lines().any(|l| !l.starts_with('#') && !l.trim().is_empty()),
        "training log has no data lines:\n{log}"
    );

    for strategy in ["ml-beam", "mmi-beam", "temp-sample", "latent-shell"] {
        ok_in(
            &dir,
            &[&["generate"], cfg.as_slice(), &["--strategy", strategy]].concat(),
        );
    }
    assert!(dir.join("out/replies-ml-beam.tsv").exists());
    assert!(dir.join("out/replies-latent-shell-r0.tsv").exists());

    // Each replies file scores into one stats row labeled by its source.
    let stdout = ok_in(
        &dir,
        &[
            &["eval"],
            cfg.as_slice(),
            &["out/replies-ml-beam.tsv", "out/replies-temp-sample.tsv"],
        ]
        .concat(),
    );
    assert!(stdout.contains("ml-beam"), "stdout: {stdout}");
    let stats = fs::read_to_string(dir.join("out/stats.tsv")).unwrap();
    assert_eq!(stats.lines().count(), 3, "stats.tsv:\n{stats}");
    assert!(stats.starts_with("strategy_or_radius\tzipf\tmean_nll\tunique_pct\tttr\n"));

    // Deterministic beam decoding: repeated generate is byte-identical.
    let first = fs::read(dir.join("out/replies-ml-beam.tsv")).unwrap();
    ok_in(
        &dir,
        &[&["generate"], cfg.as_slice(), &["--strategy", "ml-beam"]].concat(),
    );
    assert_eq!(first, fs::read(dir.join("out/replies-ml-beam.tsv")).unwrap());

    let sweep_out = ok_in(
        &dir,
        &[
            &["shell-sweep"],
            cfg.as_slice(),
            &["--radii", "0,2", "--samples-per-radius", "2"],
        ]
        .concat(),
    );
    assert!(sweep_out.contains("strategy/radius"), "stdout: {sweep_out}");
    let sweep = fs::read_to_string(dir.join("out/shell-sweep.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "shell-sweep.tsv:\n{sweep}");
}

#[test]
fn zero_radius_replies_repeat_and_tau_changes_samples() {
    let dir = fresh_dir("knobs");
    write_fixture(&dir);
    let cfg = ["--config", "run.cfg"];
    ok_in(&dir, &["prepare", "--config", "run.cfg"]);
    ok_in(
        &dir,
        &[
            &["train"],
            cfg.as_slice(),
            &["--model", "baseline", "--epochs", "1"],
        ]
        .concat(),
    );
    ok_in(
        &dir,
        &[
            &["train"],
            cfg.as_slice(),
            &["--model", "latent", "--epochs", "1"],
        ]
        .concat(),
    );

    ok_in(
        &dir,
        &[
            &["generate"],
            cfg.as_slice(),
            &["--strategy", "latent-shell", "--radius", "0", "--n", "5"],
        ]
        .concat(),
    );
    let rows = reply_texts(&dir.join("out/replies-latent-shell-r0.tsv"));
    assert_eq!(rows.len(), 15);
    for prompt in 0..3 {
        let texts: Vec<&String> = rows.iter().filter(|(p, _)| *p == prompt).map(|(_, t)| t).collect();
        assert_eq!(texts.len(), 5);
        assert!(
            texts.windows(2).all(|w| w[0] == w[1]),
            "radius 0 replies differ for prompt {prompt}: {texts:?}"
        );
    }

    let sample_args = |tau: &'static str| {
        [
            &["generate"],
            cfg.as_slice(),
            &["--strategy", "temp-sample", "--n", "4", "--tau", tau],
        ]
        .concat()
    };
    ok_in(&dir, &sample_args("0.35"));
    let sharp: Vec<String> = reply_texts(&dir.join("out/replies-temp-sample.tsv"))
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    ok_in(&dir, &sample_args("1.0"));
    let flat: Vec<String> = reply_texts(&dir.join("out/replies-temp-sample.tsv"))
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    assert_ne!(sharp, flat, "temperature had no effect on sampled replies");
}

#[test]
fn eval_rejects_malformed_replies_file() {
    let dir = fresh_dir("bad-replies");
    write_fixture(&dir);
    ok_in(&dir, &["prepare", "--config", "run.cfg"]);
    ok_in(
        &dir,
        &["train", "--config", "run.cfg", "--model", "baseline", "--epochs", "1"],
    );
    fs::write(dir.join("broken.tsv"), "prompt\treply\n0\thi\n").unwrap();
    let stderr = fail_in(
        &dir,
        &["eval", "--config", "run.cfg", "broken.tsv"],
    );
    assert!(stderr.contains("broken.tsv:1"), "stderr: {stderr}");
}

#[test]
fn generate_with_wrong_model_checkpoint_is_a_config_error() {
    let dir = fresh_dir("mismatch");
    write_fixture(&dir);
    ok_in(&dir, &["prepare", "--config", "run.cfg"]);
    ok_in(
        &dir,
        &["train", "--config", "run.cfg", "--model", "baseline", "--epochs", "1"],
    );
    // latent-shell needs the latent model, which was never trained.
    let stderr = fail_in(
        &dir,
        &["generate", "--config", "run.cfg", "--strategy", "latent-shell"],
    );
    assert!(
        stderr.contains("latent") && stderr.contains("train"),
        "stderr: {stderr}"
    );
}
