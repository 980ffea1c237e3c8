//! Generation strategies: ML beam search, MMI anti-LM beam search,
//! temperature-scaled ancestral sampling, and latent shell sampling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{decoder_step, prompt_state, ModelKind, ModelParams};
use crate::numerics::Tensor;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    MlBeam,
    MmiBeam,
    TempSample,
    LatentShell,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::MlBeam => "ml-beam",
            Strategy::MmiBeam => "mmi-beam",
            Strategy::TempSample => "temp-sample",
            Strategy::LatentShell => "latent-shell",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "ml-beam" => Ok(Strategy::MlBeam),
            "mmi-beam" => Ok(Strategy::MmiBeam),
            "temp-sample" => Ok(Strategy::TempSample),
            "latent-shell" => Ok(Strategy::LatentShell),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected ml-beam, mmi-beam, temp-sample, or latent-shell)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub width: usize,
    pub tau: f64,
    pub mmi_lambda: f64,
    pub mmi_window: usize,
    pub radius: f64,
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("width must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.mmi_lambda < 0.0 {
            return Err(Error::Config(format!(
                "mmi_lambda {} must be nonnegative",
                self.mmi_lambda
            )));
        }
        if !(self.radius >= 0.0) {
            return Err(Error::Config(format!(
                "radius {} must be nonnegative",
                self.radius
            )));
        }
        Ok(())
    }
}

/// One partial or finished reply. `cond_lps`/`lm_lps` hold per-position
/// log-probs under the conditional model and the anti-LM (zeros when no LM
/// runs alongside).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub cond_lps: Vec<f64>,
    pub lm_lps: Vec<f64>,
    pub finished: bool,
}

impl Hypothesis {
    pub fn ml_score(&self) -> f64 {
        self.cond_lps.iter().sum()
    }
}

/// Σ_t cond − λ·Σ_{t≤g} lm: the anti-LM penalty accrues only on the first
/// `g` generated positions.
pub fn mmi_score(h: &Hypothesis, lambda: f64, g: usize) -> f64 {
    let lm_head: f64 = h.lm_lps.iter().take(g).sum();
    h.ml_score() - lambda * lm_head
}

/// Generic beam search with no length normalization. `step` yields per-token
/// (conditional, LM) log-probs for a state; tokens whose conditional log-prob
/// is −∞ are never proposed. `advance` consumes one token. Finished
/// hypotheses (EOS, or `max_len` tokens) retire into a pool after competing
/// for beam slots like any candidate; the pool argmax under `score` wins,
/// with ties broken by lexicographically smaller token ids.
pub fn beam_search<S: Clone>(
    init: S,
    mut step: impl FnMut(&S) -> Result<Vec<(f64, f64)>>,
    mut advance: impl FnMut(&S, usize) -> Result<S>,
    width: usize,
    max_len: usize,
    score: impl Fn(&Hypothesis) -> f64,
) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::Usage("beam width must be at least 1".into()));
    }
    let root = Hypothesis {
        ids: Vec::new(),
        cond_lps: Vec::new(),
        lm_lps: Vec::new(),
        finished: false,
    };
    let mut live: Vec<(Hypothesis, S)> = vec![(root, init)];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for t in 0..max_len {
        let mut candidates: Vec<(Hypothesis, &S)> = Vec::new();
        for (hyp, state) in &live {
            for (id, (cond, lm)) in step(state)?.into_iter().enumerate() {
                if cond == f64::NEG_INFINITY {
                    continue;
                }
                let mut ids = hyp.ids.clone();
                ids.push(id);
                let mut cond_lps = hyp.cond_lps.clone();
                cond_lps.push(cond);
                let mut lm_lps = hyp.lm_lps.clone();
                lm_lps.push(lm);
                let finished = id == EOS || t + 1 == max_len;
                candidates.push((
                    Hypothesis {
                        ids,
                        cond_lps,
                        lm_lps,
                        finished,
                    },
                    state,
                ));
            }
        }
        candidates.sort_by(|(a, _), (b, _)| {
            score(b)
                .total_cmp(&score(a))
                .then_with(|| a.ids.cmp(&b.ids))
        });
        candidates.truncate(width);

        let mut next: Vec<(Hypothesis, S)> = Vec::new();
        for (hyp, state) in candidates {
            if hyp.finished {
                pool.push(hyp);
            } else {
                let advanced = advance(state, *hyp.ids.last().expect("candidate has a token"))?;
                next.push((hyp, advanced));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }

    pool.into_iter()
        .max_by(|a, b| {
            score(a)
                .total_cmp(&score(b))
                .then_with(|| b.ids.cmp(&a.ids))
        })
        .ok_or_else(|| Error::Usage("beam search retired no hypothesis".into()))
}

/// Sharpens `p` to q ∝ p^(1/τ), computed in log space. τ = 1 returns the
/// input unchanged, bit for bit.
pub fn temperature_scale(p: &[f64], tau: f64) -> Result<Vec<f64>> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Usage(format!(
            "temperature input sums to {total}, not 1"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Usage(format!("tau {tau} must be positive")));
    }
    if tau == 1.0 {
        return Ok(p.to_vec());
    }
    let logs: Vec<f64> = p.iter().map(|&x| x.ln() / tau).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|u| u / z).collect())
}

/// Draws one index from the temperature-sharpened distribution.
pub fn temperature_sample(p: &[f64], tau: f64, rng: &mut (impl Rng + ?Sized)) -> Result<usize> {
    let q = temperature_scale(p, tau)?;
    let u: f64 = rng.random::<f64>();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &qi) in q.iter().enumerate() {
        if qi > 0.0 {
            last_nonzero = i;
        }
        cum += qi;
        if u < cum {
            return Ok(i);
        }
    }
    Ok(last_nonzero)
}

/// Uniform draw from the radius-r shell of R^d: z ~ N(0, I) rescaled to
/// norm r. Radius 0 is the zero vector (deterministic decoding).
pub fn shell_sample(d: usize, radius: f64, rng: &mut (impl Rng + ?Sized)) -> Vec<f64> {
    if radius == 0.0 {
        return vec![0.0; d];
    }
    loop {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return z.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

/// Decoder-in-flight state: hidden vector plus the distribution it implies
/// for the next token.
#[derive(Clone)]
struct StepState {
    h: Tensor,
    p: Vec<f64>,
}

impl StepState {
    fn start(params: &ModelParams, x_ids: &[usize], z: &[f64]) -> Result<StepState> {
        let h0 = prompt_state(params, x_ids, z)?;
        let (h, p) = decoder_step(params, BOS, &h0)?;
        Ok(StepState { h, p })
    }

    /// LM start state: the same decoder over a zero "encoding", so the
    /// continuation scores are prompt-independent.
    fn start_unconditioned(params: &ModelParams) -> Result<StepState> {
        let h0 = Tensor::zeros(vec![params.config.enc_hidden + params.config.latent_dim])?;
        let (h, p) = decoder_step(params, BOS, &h0)?;
        Ok(StepState { h, p })
    }

    fn advance(&self, params: &ModelParams, id: usize) -> Result<StepState> {
        let (h, p) = decoder_step(params, id, &self.h)?;
        Ok(StepState { h, p })
    }
}

fn masked_ln(p: &[f64]) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(id, &x)| {
            if id == PAD || id == BOS {
                f64::NEG_INFINITY
            } else {
                x.ln()
            }
        })
        .collect()
}

fn beam_decode(
    params: &ModelParams,
    lm: Option<(&ModelParams, f64, usize)>,
    x_ids: &[usize],
    z: &[f64],
    width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let cond0 = StepState::start(params, x_ids, z)?;
    match lm {
        None => {
            let hyp = beam_search(
                cond0,
                |s| Ok(masked_ln(&s.p).into_iter().map(|l| (l, 0.0)).collect()),
                |s, id| s.advance(params, id),
                width,
                max_len,
                Hypothesis::ml_score,
            )?;
            Ok(hyp.ids)
        }
        Some((lm_params, lambda, g)) => {
            let lm0 = StepState::start_unconditioned(lm_params)?;
            let hyp = beam_search(
                (cond0, lm0),
                |(c, l)| {
                    Ok(masked_ln(&c.p)
                        .into_iter()
                        .zip(l.p.iter().map(|&x| x.ln()))
                        .collect())
                },
                |(c, l), id| Ok((c.advance(params, id)?, l.advance(lm_params, id)?)),
                width,
                max_len,
                |h| mmi_score(h, lambda, g),
            )?;
            Ok(hyp.ids)
        }
    }
}

fn sample_decode(
    params: &ModelParams,
    x_ids: &[usize],
    z: &[f64],
    tau: f64,
    max_len: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Vec<usize>> {
    let mut state = StepState::start(params, x_ids, z)?;
    let mut out = Vec::new();
    for _ in 0..max_len {
        // PAD/BOS are excluded before sharpening; the rest renormalizes.
        let live: f64 = state
            .p
            .iter()
            .enumerate()
            .filter(|&(id, _)| id != PAD && id != BOS)
            .map(|(_, &x)| x)
            .sum();
        let masked: Vec<f64> = state
            .p
            .iter()
            .enumerate()
            .map(|(id, &x)| {
                if id == PAD || id == BOS {
                    0.0
                } else {
                    x / live
                }
            })
            .collect();
        let id = temperature_sample(&masked, tau, rng)?;
        out.push(id);
        if id == EOS {
            break;
        }
        state = state.advance(params, id)?;
    }
    Ok(out)
}

/// Generates one reply. `params` is the model whose decoder runs (baseline
/// for ml-beam/mmi-beam/temp-sample, the latent model for latent-shell);
/// `lm` supplies the anti-LM for mmi-beam. Returns generated ids, EOS
/// included when the reply terminated on its own.
pub fn decode_prompt(
    params: &ModelParams,
    lm: Option<&ModelParams>,
    x_ids: &[usize],
    cfg: &DecodeConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let d = params.config.latent_dim;
    match cfg.strategy {
        Strategy::MlBeam => beam_decode(params, None, x_ids, &vec![0.0; d], cfg.width, cfg.max_len),
        Strategy::MmiBeam => {
            let lm = lm.ok_or_else(|| {
                Error::Config("mmi-beam requires a baseline model for the anti-LM".into())
            })?;
            beam_decode(
                params,
                Some((lm, cfg.mmi_lambda, cfg.mmi_window)),
                x_ids,
                &vec![0.0; d],
                cfg.width,
                cfg.max_len,
            )
        }
        Strategy::TempSample => {
            sample_decode(params, x_ids, &vec![0.0; d], cfg.tau, cfg.max_len, rng)
        }
        Strategy::LatentShell => {
            if params.kind != ModelKind::Latent {
                return Err(Error::Config(
                    "latent-shell requires a latent-variable model".into(),
                ));
            }
            let z = shell_sample(d, cfg.radius, rng);
            beam_decode(params, None, x_ids, &z, cfg.width, cfg.max_len)
        }
    }
}

/// One generated reply row: prompt index, sample index, token ids.
pub type ReplyRow = (usize, usize, Vec<usize>);

/// Decodes `n_samples` replies per prompt, each from an independent RNG
/// stream keyed by (prompt, sample), so any subset can be regenerated in
/// isolation and parallel schedules cannot change results.
pub fn generate_replies(
    params: &ModelParams,
    lm: Option<&ModelParams>,
    prompts: &[Vec<usize>],
    cfg: &DecodeConfig,
    seed: u64,
    n_samples: usize,
) -> Result<Vec<ReplyRow>> {
    let mut rows = Vec::with_capacity(prompts.len() * n_samples);
    for (p_idx, x_ids) in prompts.iter().enumerate() {
        for s_idx in 0..n_samples {
            let key = ((p_idx as u64) << 32) | s_idx as u64;
            let mut rng = rng::indexed_stream(seed, "generate", key);
            let ids = decode_prompt(params, lm, x_ids, cfg, &mut rng)?;
            rows.push((p_idx, s_idx, ids));
        }
    }
    Ok(rows)
}
