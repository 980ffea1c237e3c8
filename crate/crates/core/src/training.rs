//! ELBO optimization: KL annealing, decoder word dropout, Adadelta updates,
//! per-epoch checkpoints, and deterministic resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{DialoguePair, RESERVED, UNK};
use crate::error::{Error, Result};
use crate::model::{
    load_checkpoint, save_checkpoint, Bound, Checkpoint, GaussianParams, ModelKind, ModelParams,
    OptState, Side,
};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// 0 means "ramp over one epoch's optimizer steps".
    pub kl_anneal_steps: usize,
    pub rho: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Steps between log lines; 0 logs only at epoch boundaries.
    pub log_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "adadelta_rho {} outside [0, 1)",
                self.rho
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "adadelta_eps {} must be positive",
                self.eps
            )));
        }
        Ok(())
    }
}

/// KL(N(mu, diag(exp(logvar))) ‖ N(0, I)) in closed form.
pub fn kl_gaussian(g: &GaussianParams) -> f64 {
    g.mu
        .iter()
        .zip(&g.log_sigma_diag)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
        * 0.5
}

/// Linear ramp min(1, step/total); total = 0 means the ramp is already done.
pub fn anneal_weight(step: usize, kl_anneal_steps: usize) -> f64 {
    if kl_anneal_steps == 0 {
        1.0
    } else {
        (step as f64 / kl_anneal_steps as f64).min(1.0)
    }
}

/// Replaces each non-reserved token with UNK independently at `rate`.
/// Reserved ids pass through untouched; a uniform draw is consumed per
/// candidate regardless of rate so the stream stays aligned.
pub fn word_dropout(ids: &[usize], rate: f64, rng: &mut (impl Rng + ?Sized)) -> Vec<usize> {
    ids.iter()
        .map(|&id| {
            if id >= RESERVED.len() && rng.random::<f64>() < rate {
                UNK
            } else {
                id
            }
        })
        .collect()
}

pub struct ElboNodes {
    pub recon_nll: NodeId,
    pub kl: Option<NodeId>,
    pub weighted_total: NodeId,
}

/// Builds the per-pair loss graph on an already-bound tape. `dec_inputs` are
/// the (possibly word-dropped) teacher-forcing tokens, one per target in
/// `pair.y[1..]`; `eps` is the standard-normal draw for the latent sample and
/// is ignored by the baseline, which decodes from z = 0.
pub fn elbo_graph(
    b: &mut Bound,
    pair: &DialoguePair,
    dec_inputs: &[usize],
    eps: &[f64],
    kl_weight: f64,
) -> Result<ElboNodes> {
    let enc_x = b.encode_seq(Side::Prompt, &pair.x)?;
    let h_x = b.represent(Side::Prompt, enc_x)?;
    let targets = &pair.y[1..];
    match b.params.kind {
        ModelKind::Latent => {
            let enc_y = b.encode_seq(Side::Response, &pair.y)?;
            let h_y = b.represent(Side::Response, enc_y)?;
            let (mu, logvar) = b.recognize(h_x, h_y)?;
            let z = b.sample_latent(mu, logvar, eps)?;
            let h0 = b.decoder_start(h_x, z)?;
            let recon_nll = b.sequence_nll(h0, dec_inputs, targets)?;
            let kl = b.kl(mu, logvar)?;
            let w = b.tape.leaf(Tensor::scalar(kl_weight));
            let weighted = b.tape.mul(kl, w)?;
            let weighted_total = b.tape.add(recon_nll, weighted)?;
            Ok(ElboNodes {
                recon_nll,
                kl: Some(kl),
                weighted_total,
            })
        }
        ModelKind::Baseline => {
            let zeros = Tensor::vector(vec![0.0; b.params.config.latent_dim])?;
            let z = b.tape.leaf(zeros);
            let h0 = b.decoder_start(h_x, z)?;
            let recon_nll = b.sequence_nll(h0, dec_inputs, targets)?;
            Ok(ElboNodes {
                recon_nll,
                kl: None,
                weighted_total: recon_nll,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub recon_nll: f64,
    pub kl: f64,
    pub weighted_total: f64,
}

/// One single-sample ELBO evaluation: word-drops the decoder inputs, draws
/// eps, and returns the three loss components at the given KL weight.
pub fn elbo_loss(
    params: &ModelParams,
    pair: &DialoguePair,
    kl_weight: f64,
    rng: &mut (impl Rng + ?Sized),
) -> Result<ElboBreakdown> {
    let dec_inputs = word_dropout(
        &pair.y[..pair.y.len() - 1],
        params.config.word_dropout,
        rng,
    );
    let eps: Vec<f64> = match params.kind {
        ModelKind::Latent => (0..params.config.latent_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
        ModelKind::Baseline => Vec::new(),
    };
    let mut tape = Tape::new();
    let mut b = Bound::attach(&mut tape, params);
    let nodes = elbo_graph(&mut b, pair, &dec_inputs, &eps, kl_weight)?;
    Ok(ElboBreakdown {
        recon_nll: tape.value(nodes.recon_nll).item()?,
        kl: nodes.kl.map_or(0.0, |k| tape.value(k).item().expect("kl node is scalar")),
        weighted_total: tape.value(nodes.weighted_total).item()?,
    })
}

/// One Adadelta coordinate sweep:
/// E[g²] ← ρE[g²]+(1−ρ)g²; Δx = −(√(E[Δx²]+ε)/√(E[g²]+ε))·g;
/// E[Δx²] ← ρE[Δx²]+(1−ρ)Δx²; x ← x+Δx.
pub fn adadelta_update(
    x: &mut [f64],
    g: &[f64],
    eg2: &mut [f64],
    edx2: &mut [f64],
    rho: f64,
    eps: f64,
) {
    for i in 0..x.len() {
        eg2[i] = rho * eg2[i] + (1.0 - rho) * g[i] * g[i];
        let dx = -((edx2[i] + eps).sqrt() / (eg2[i] + eps).sqrt()) * g[i];
        edx2[i] = rho * edx2[i] + (1.0 - rho) * dx * dx;
        x[i] += dx;
    }
}

pub struct AdadeltaState {
    pub rho: f64,
    pub eps: f64,
    eg2: BTreeMap<String, Vec<f64>>,
    edx2: BTreeMap<String, Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(params: &ModelParams, rho: f64, eps: f64) -> AdadeltaState {
        let zeros = |p: &ModelParams| -> BTreeMap<String, Vec<f64>> {
            p.tensors()
                .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
                .collect()
        };
        AdadeltaState {
            rho,
            eps,
            eg2: zeros(params),
            edx2: zeros(params),
        }
    }

    pub fn from_saved(saved: &OptState, rho: f64, eps: f64) -> AdadeltaState {
        let mut eg2 = BTreeMap::new();
        let mut edx2 = BTreeMap::new();
        for (name, (g, d)) in saved {
            eg2.insert(name.clone(), g.clone());
            edx2.insert(name.clone(), d.clone());
        }
        AdadeltaState { rho, eps, eg2, edx2 }
    }

    pub fn to_saved(&self) -> OptState {
        self.eg2
            .iter()
            .map(|(name, g)| (name.clone(), (g.clone(), self.edx2[name].clone())))
            .collect()
    }

    /// Applies one update from per-parameter gradients keyed like the
    /// parameter tensors.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Vec<f64>>) {
        for (name, g) in grads {
            let (shape, mut x) = {
                let t = params.tensor(name);
                (t.shape().to_vec(), t.data().to_vec())
            };
            let eg2 = self.eg2.get_mut(name).expect("accumulator mirrors params");
            let edx2 = self.edx2.get_mut(name).expect("accumulator mirrors params");
            adadelta_update(&mut x, g, eg2, edx2, self.rho, self.eps);
            params.replace(name, Tensor::new(shape, x).expect("shape unchanged"));
        }
    }
}

pub fn checkpoint_path(dir: &Path, kind: ModelKind, epoch: usize) -> PathBuf {
    dir.join(format!("{}-epoch{}.ckpt", kind.as_str(), epoch))
}

/// Highest-numbered `{kind}-epoch{N}.ckpt` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path, kind: ModelKind) -> Option<(usize, PathBuf)> {
    let prefix = format!("{}-epoch", kind.as_str());
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = std::fs::read_dir(dir).ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(n) = name
            .strip_prefix(&prefix)
            .and_then(|rest| rest.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    pub steps_run: usize,
    pub global_step: usize,
    pub final_epoch_mean_recon: f64,
    pub final_epoch_mean_kl: f64,
}

fn log_err(e: std::io::Error) -> Error {
    Error::io(Path::new("training log"), e)
}

/// Runs (or resumes) training. Pairs are re-sorted into a canonical order
/// before the seeded shuffle, so the trajectory does not depend on input file
/// order. One checkpoint is written per epoch; if `checkpoint_dir` already
/// holds checkpoints for this kind, training resumes after the latest one.
pub fn train(
    params: &mut ModelParams,
    pairs: &[DialoguePair],
    cfg: &TrainConfig,
    checkpoint_dir: &Path,
    vocab_path: &str,
    vocab_sha256: &str,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Usage("no training pairs".into()));
    }
    std::fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;

    let mut canon: Vec<&DialoguePair> = pairs.iter().collect();
    canon.sort_by(|a, b| (&a.x, &a.y).cmp(&(&b.x, &b.y)));

    let steps_per_epoch = canon.len().div_ceil(cfg.batch_size);
    let effective_anneal = if cfg.kl_anneal_steps == 0 {
        steps_per_epoch
    } else {
        cfg.kl_anneal_steps
    };

    let mut start_epoch = 0usize;
    let mut global_step = 0usize;
    let mut opt = AdadeltaState::new(params, cfg.rho, cfg.eps);
    if let Some((epochs_done, path)) = latest_checkpoint(checkpoint_dir, params.kind) {
        let ckpt = load_checkpoint(&path)?;
        if ckpt.params.kind != params.kind || ckpt.params.config != params.config {
            return Err(Error::Config(format!(
                "checkpoint {} does not match the requested model configuration",
                path.display()
            )));
        }
        *params = ckpt.params;
        start_epoch = epochs_done;
        global_step = ckpt.global_step;
        if let Some(saved) = &ckpt.opt {
            opt = AdadeltaState::from_saved(saved, cfg.rho, cfg.eps);
        }
        writeln!(log, "# resumed after epoch {epochs_done}").map_err(log_err)?;
    }

    let rate = params.config.word_dropout;
    let mut report = TrainReport {
        steps_run: 0,
        global_step,
        final_epoch_mean_recon: 0.0,
        final_epoch_mean_kl: 0.0,
    };

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..canon.len()).collect();
        order.shuffle(&mut rng::indexed_stream(cfg.seed, "shuffle", epoch as u64));
        let mut drop_rng = rng::indexed_stream(cfg.seed, "dropout", epoch as u64);
        let mut eps_rng = rng::indexed_stream(cfg.seed, "eps", epoch as u64);

        let (mut ep_recon, mut ep_kl, mut ep_pairs) = (0.0, 0.0, 0usize);
        let (mut iv_recon, mut iv_kl, mut iv_pairs) = (0.0, 0.0, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            let weight = anneal_weight(global_step, effective_anneal);
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &idx in batch {
                let pair = canon[idx];
                let dec_inputs =
                    word_dropout(&pair.y[..pair.y.len() - 1], rate, &mut drop_rng);
                let eps: Vec<f64> = match params.kind {
                    ModelKind::Latent => (0..params.config.latent_dim)
                        .map(|_| eps_rng.sample(StandardNormal))
                        .collect(),
                    ModelKind::Baseline => Vec::new(),
                };
                let mut tape = Tape::new();
                let mut b = Bound::attach(&mut tape, params);
                let nodes = elbo_graph(&mut b, pair, &dec_inputs, &eps, weight)?;
                let total = b.tape.value(nodes.weighted_total).item()?;
                if !total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss {total} at step {global_step} (epoch {epoch})"
                    )));
                }
                let recon = b.tape.value(nodes.recon_nll).item()?;
                let kl = nodes.kl.map_or(0.0, |k| {
                    b.tape.value(k).item().expect("kl node is scalar")
                });
                let grads = b.tape.backward(nodes.weighted_total)?;
                let pg = b.param_grads(&grads);
                for (name, g) in pg {
                    match acc.get_mut(&name) {
                        Some(sum) => {
                            for (s, v) in sum.iter_mut().zip(&g) {
                                *s += v;
                            }
                        }
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
                ep_recon += recon;
                ep_kl += kl;
                iv_recon += recon;
                iv_kl += kl;
            }
            ep_pairs += batch.len();
            iv_pairs += batch.len();
            if batch.len() > 1 {
                let scale = 1.0 / batch.len() as f64;
                for v in acc.values_mut() {
                    for x in v.iter_mut() {
                        *x *= scale;
                    }
                }
            }
            opt.step(params, &acc);
            global_step += 1;
            report.steps_run += 1;

            if cfg.log_every > 0 && global_step % cfg.log_every == 0 && iv_pairs > 0 {
                writeln!(
                    log,
                    "{global_step}\t{}\t{}\t{weight}",
                    iv_recon / iv_pairs as f64,
                    iv_kl / iv_pairs as f64
                )
                .map_err(log_err)?;
                (iv_recon, iv_kl, iv_pairs) = (0.0, 0.0, 0);
            }
        }
        if iv_pairs > 0 {
            let weight = anneal_weight(global_step - 1, effective_anneal);
            writeln!(
                log,
                "{global_step}\t{}\t{}\t{weight}",
                iv_recon / iv_pairs as f64,
                iv_kl / iv_pairs as f64
            )
            .map_err(log_err)?;
        }

        report.global_step = global_step;
        report.final_epoch_mean_recon = ep_recon / ep_pairs as f64;
        report.final_epoch_mean_kl = ep_kl / ep_pairs as f64;

        let ckpt = Checkpoint {
            params: params.clone(),
            epochs_done: epoch + 1,
            global_step,
            vocab_path: vocab_path.to_string(),
            vocab_sha256: vocab_sha256.to_string(),
            opt: Some(opt.to_saved()),
        };
        save_checkpoint(&checkpoint_path(checkpoint_dir, params.kind, epoch + 1), &ckpt)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS, EOS};
    use crate::model::ModelConfig;
    use crate::numerics::grad_check;
    use proptest::prelude::*;

    fn toy_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            embed_dim: 3,
            enc_hidden: 4,
            latent_dim: 2,
            n_classes: 2,
            max_len: 12,
            word_dropout: 0.5,
        }
    }

    fn toy_pair() -> DialoguePair {
        DialoguePair {
            x: vec![BOS, 5, 6, EOS],
            y: vec![BOS, 7, 4, 8, EOS],
        }
    }

    #[test]
    fn kl_closed_form_matches_hand_values() {
        let zero = GaussianParams {
            mu: vec![0.0; 3],
            log_sigma_diag: vec![0.0; 3],
        };
        assert_eq!(kl_gaussian(&zero), 0.0);
        let unit_shift = GaussianParams {
            mu: vec![1.0],
            log_sigma_diag: vec![0.0],
        };
        assert_eq!(kl_gaussian(&unit_shift), 0.5);
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        let g = GaussianParams {
            mu: vec![0.3, -1.1, 0.7, 0.05],
            log_sigma_diag: vec![0.4, -0.8, 0.0, 1.2],
        };
        let exact = kl_gaussian(&g);
        let mut rng = rng::stream(11, "kl-mc");
        let n = 1_000_000usize;
        let mut sum = 0.0;
        for _ in 0..n {
            // x ~ Q, accumulate log Q(x) − log P(x); the 2π terms cancel.
            let mut diff = 0.0;
            for (m, lv) in g.mu.iter().zip(&g.log_sigma_diag) {
                let e: f64 = rng.sample(StandardNormal);
                let x = m + (0.5 * lv).exp() * e;
                let log_q = -0.5 * (lv + e * e);
                let log_p = -0.5 * x * x;
                diff += log_q - log_p;
            }
            sum += diff;
        }
        let mc = sum / n as f64;
        assert!(
            (mc - exact).abs() <= 0.01 * exact.abs(),
            "mc {mc} vs exact {exact}"
        );
    }

    #[test]
    fn anneal_weight_ramps_linearly() {
        assert_eq!(anneal_weight(0, 100), 0.0);
        assert_eq!(anneal_weight(50, 100), 0.5);
        assert_eq!(anneal_weight(100, 100), 1.0);
        assert_eq!(anneal_weight(250, 100), 1.0);
        assert_eq!(anneal_weight(7, 0), 1.0);
    }

    #[test]
    fn word_dropout_rate_extremes() {
        let ids = vec![BOS, 9, 4, 12, EOS];
        let mut rng = rng::stream(3, "wd");
        assert_eq!(word_dropout(&ids, 0.0, &mut rng), ids);
        assert_eq!(
            word_dropout(&ids, 1.0, &mut rng),
            vec![BOS, UNK, UNK, UNK, EOS]
        );
    }

    #[test]
    fn word_dropout_concentrates_at_rate() {
        let ids = vec![10usize; 100_000];
        let mut rng = rng::stream(4, "wd-frac");
        let out = word_dropout(&ids, 0.5, &mut rng);
        let dropped = out.iter().filter(|&&id| id == UNK).count();
        let frac = dropped as f64 / ids.len() as f64;
        assert!((frac - 0.5).abs() <= 0.01, "fraction {frac}");
    }

    #[test]
    fn zero_kl_weight_reduces_to_reconstruction() {
        let params = ModelParams::init(ModelKind::Latent, toy_config(14), 5).unwrap();
        let mut rng = rng::stream(6, "elbo");
        let b = elbo_loss(&params, &toy_pair(), 0.0, &mut rng).unwrap();
        assert!(b.kl > 0.0);
        assert_eq!(b.weighted_total, b.recon_nll);
    }

    #[test]
    fn zero_recognition_weights_give_zero_kl() {
        let mut params = ModelParams::init(ModelKind::Latent, toy_config(14), 5).unwrap();
        for name in ["recog.w_mu", "recog.b_mu", "recog.w_sigma", "recog.b_sigma"] {
            let shape = params.tensor(name).shape().to_vec();
            let n: usize = shape.iter().product();
            params.replace(name, Tensor::new(shape, vec![0.0; n]).unwrap());
        }
        let mut rng = rng::stream(6, "elbo");
        let b = elbo_loss(&params, &toy_pair(), 1.0, &mut rng).unwrap();
        assert_eq!(b.kl, 0.0);
        assert_eq!(b.weighted_total, b.recon_nll);
    }

    #[test]
    fn baseline_elbo_has_no_kl_term() {
        let params = ModelParams::init(ModelKind::Baseline, toy_config(14), 5).unwrap();
        let mut rng = rng::stream(6, "elbo");
        let b = elbo_loss(&params, &toy_pair(), 1.0, &mut rng).unwrap();
        assert_eq!(b.kl, 0.0);
        assert_eq!(b.weighted_total, b.recon_nll);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let params = ModelParams::init(ModelKind::Latent, toy_config(14), 9).unwrap();
        let pair = toy_pair();
        let dec_inputs = vec![BOS, 7, UNK, 8];
        let eps = vec![0.37, -1.21];
        for slot in ["recog.w_mu", "recog.b_sigma", "dec.u_h", "embedding"] {
            let probe = params.tensor(slot).clone();
            let err = grad_check(
                |tape, probe_node| {
                    let mut b = Bound::attach_with_override(tape, &params, slot, probe_node);
                    let nodes = elbo_graph(&mut b, &pair, &dec_inputs, &eps, 0.7)?;
                    Ok(nodes.weighted_total)
                },
                &probe,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{slot}: rel err {err}");
        }
    }

    #[test]
    fn adadelta_zero_gradient_is_identity() {
        let mut x = vec![1.5, -2.0];
        let mut eg2 = vec![0.0; 2];
        let mut edx2 = vec![0.0; 2];
        adadelta_update(&mut x, &[0.0, 0.0], &mut eg2, &mut edx2, 0.95, 1e-6);
        assert_eq!(x, vec![1.5, -2.0]);
    }

    #[test]
    fn adadelta_first_step_opposes_gradient() {
        let mut x = vec![0.0, 0.0];
        let mut eg2 = vec![0.0; 2];
        let mut edx2 = vec![0.0; 2];
        adadelta_update(&mut x, &[3.0, -2.0], &mut eg2, &mut edx2, 0.95, 1e-6);
        assert!(x[0] < 0.0 && x[1] > 0.0, "{x:?}");
    }

    #[test]
    fn adadelta_descends_a_parabola() {
        let mut x = vec![5.0];
        let mut eg2 = vec![0.0];
        let mut edx2 = vec![0.0];
        let mut prev = x[0] * x[0];
        for _ in 0..200 {
            let g = vec![2.0 * x[0]];
            adadelta_update(&mut x, &g, &mut eg2, &mut edx2, 0.95, 1e-6);
            let f = x[0] * x[0];
            assert!(f < prev, "f went {prev} -> {f}");
            prev = f;
        }
    }

    fn tiny_pairs() -> Vec<DialoguePair> {
        // Four prompts, each with one fixed response, duplicated so an epoch
        // gives the optimizer enough steps to leave Adadelta's slow start.
        let base = [
            (vec![BOS, 4, EOS], vec![BOS, 5, EOS]),
            (vec![BOS, 6, EOS], vec![BOS, 7, EOS]),
            (vec![BOS, 8, EOS], vec![BOS, 9, EOS]),
            (vec![BOS, 10, EOS], vec![BOS, 11, EOS]),
        ];
        let mut pairs = Vec::new();
        for _ in 0..25 {
            for (x, y) in &base {
                pairs.push(DialoguePair {
                    x: x.clone(),
                    y: y.clone(),
                });
            }
        }
        pairs
    }

    #[test]
    fn training_learns_single_response_corpus() {
        let mut config = toy_config(12);
        config.word_dropout = 0.0;
        let mut params = ModelParams::init(ModelKind::Baseline, config, 1).unwrap();
        let pairs = tiny_pairs();
        let cfg = TrainConfig {
            seed: 1,
            epochs: 10,
            kl_anneal_steps: 0,
            rho: 0.95,
            eps: 1e-6,
            batch_size: 1,
            log_every: 0,
        };
        let dir = std::env::temp_dir().join("dvae-train-learn");
        let _ = std::fs::remove_dir_all(&dir);
        let mut log = Vec::new();
        let report = train(&mut params, &pairs, &cfg, &dir, "-", "-", &mut log).unwrap();
        assert_eq!(report.steps_run, 10 * pairs.len());

        let mut total_nll = 0.0;
        let mut total_tokens = 0usize;
        for pair in &pairs[..4] {
            total_nll += crate::model::sequence_nll(&params, &pair.x, &pair.y, &[0.0; 2]).unwrap();
            total_tokens += pair.y.len() - 1;
        }
        let per_token = total_nll / total_tokens as f64;
        assert!(
            per_token < (12f64).ln(),
            "per-token NLL {per_token} not below uniform {}",
            (12f64).ln()
        );
    }

    #[test]
    fn same_seed_and_resume_reproduce_checkpoints_bitwise() {
        let pairs = tiny_pairs();
        let config = toy_config(12);
        let cfg = |epochs: usize| TrainConfig {
            seed: 21,
            epochs,
            kl_anneal_steps: 0,
            rho: 0.95,
            eps: 1e-6,
            batch_size: 1,
            log_every: 25,
        };
        let run = |dir: &Path, epochs: usize, pairs: &[DialoguePair]| {
            let mut params = ModelParams::init(ModelKind::Latent, config.clone(), 21).unwrap();
            let mut log = Vec::new();
            train(&mut params, pairs, &cfg(epochs), dir, "-", "-", &mut log).unwrap();
            (std::fs::read(checkpoint_path(dir, ModelKind::Latent, epochs)).unwrap(), log)
        };

        let root = std::env::temp_dir().join("dvae-train-det");
        let _ = std::fs::remove_dir_all(&root);
        let (a, log_a) = run(&root.join("a"), 2, &pairs);
        let (b, log_b) = run(&root.join("b"), 2, &pairs);
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);

        // Input order must not matter: the canonical sort feeds the shuffle.
        let mut reversed = pairs.clone();
        reversed.reverse();
        let (c, _) = run(&root.join("c"), 2, &reversed);
        assert_eq!(a, c);

        // Resume after epoch 1 must land on the same epoch-2 bytes.
        let d = root.join("d");
        run(&d, 1, &pairs);
        let (resumed, _) = run(&d, 2, &pairs);
        assert_eq!(a, resumed);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in proptest::collection::vec(-5.0f64..5.0, 1..6),
            lv in proptest::collection::vec(-4.0f64..4.0, 1..6),
        ) {
            let d = mu.len().min(lv.len());
            let g = GaussianParams {
                mu: mu[..d].to_vec(),
                log_sigma_diag: lv[..d].to_vec(),
            };
            prop_assert!(kl_gaussian(&g) >= 0.0);
        }

        #[test]
        fn anneal_weight_is_monotone(steps in 1usize..1000, a in 0usize..2000, b in 0usize..2000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(anneal_weight(lo, steps) <= anneal_weight(hi, steps));
        }
    }
}
