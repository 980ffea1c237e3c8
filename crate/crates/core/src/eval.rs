//! Reply-set statistics: Zipf exponent, unique-reply percentage, type-token
//! ratio, and NLL under the deterministic baseline.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::corpus::Vocabulary;
use crate::decoding::{generate_replies, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::model::{sequence_nll, ModelKind, ModelParams};

/// Pooled word frequencies of a reply set, descending. Only the multiset of
/// counts matters to the Zipf fit, so the word identities are dropped.
fn pooled_counts(replies: &[Vec<String>]) -> Vec<u64> {
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for reply in replies {
        for tok in reply {
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut counts: Vec<u64> = freq.into_values().collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    counts
}

/// ζ(s) with the tail beyond K summed by Euler–Maclaurin. Accurate to far
/// below the fit tolerance for s ≥ 1.001.
fn zeta(s: f64) -> f64 {
    const K: f64 = 1000.0;
    let mut sum = 0.0;
    for k in 1..=1000u64 {
        sum += (k as f64).powf(-s);
    }
    sum + K.powf(1.0 - s) / (s - 1.0) - 0.5 * K.powf(-s) + s * K.powf(-s - 1.0) / 12.0
}

/// Discrete power-law MLE over frequency ranks with x_min = 1: maximizes
/// −n·ln ζ(s) − s·Σ_r f_r·ln r by golden-section search on s ∈ [1.001, 4].
/// The log-likelihood is strictly concave in s, so the bracket search finds
/// the global optimum (clamped to the interval).
pub fn fit_zipf_counts(counts: &[u64]) -> Result<f64> {
    let distinct: std::collections::BTreeSet<u64> = counts.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Unfittable(format!(
            "{} distinct frequency values (need at least 2)",
            distinct.len()
        )));
    }
    let n: f64 = counts.iter().map(|&c| c as f64).sum();
    let rank_ln_sum: f64 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * ((i + 1) as f64).ln())
        .sum();
    let neg_ll = |s: f64| n * zeta(s).ln() + s * rank_ln_sum;

    let (mut a, mut b) = (1.001f64, 4.0f64);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (neg_ll(c), neg_ll(d));
    while b - a > 1e-9 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = neg_ll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = neg_ll(d);
        }
    }
    Ok(0.5 * (a + b))
}

/// MLE Zipf exponent of the pooled word frequencies; smaller = more diverse.
pub fn fit_zipf(replies: &[Vec<String>]) -> Result<f64> {
    fit_zipf_counts(&pooled_counts(replies))
}

/// Least-squares slope of ln f against ln rank, as a secondary diagnostic
/// for the MLE fit (the two disagree on heavy-tailed finite samples).
pub fn fit_zipf_regression(counts: &[u64]) -> Result<f64> {
    if counts.len() < 2 {
        return Err(Error::Unfittable(format!(
            "{} frequency ranks (need at least 2)",
            counts.len()
        )));
    }
    let n = counts.len() as f64;
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (((i + 1) as f64).ln(), (c as f64).ln()))
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if var == 0.0 {
        return Err(Error::Unfittable("all ranks identical".into()));
    }
    Ok(-(cov / var))
}

/// 100 · distinct reply strings / total replies. Distinctness is judged on
/// the space-joined token string.
pub fn unique_pct(replies: &[Vec<String>]) -> Result<f64> {
    if replies.is_empty() {
        return Err(Error::Usage("unique_pct of an empty reply set".into()));
    }
    let distinct: std::collections::HashSet<String> =
        replies.iter().map(|r| r.join(" ")).collect();
    Ok(100.0 * distinct.len() as f64 / replies.len() as f64)
}

/// Type-token ratio pooled over all replies. Length-sensitive: comparable
/// only between sets of similar token counts.
pub fn ttr(replies: &[Vec<String>]) -> Result<f64> {
    let tokens: usize = replies.iter().map(|r| r.len()).sum();
    if tokens == 0 {
        return Err(Error::Usage("type-token ratio of an empty token pool".into()));
    }
    let types: std::collections::HashSet<&str> = replies
        .iter()
        .flat_map(|r| r.iter().map(|t| t.as_str()))
        .collect();
    Ok(types.len() as f64 / tokens as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredNll {
    pub mean_nll: f64,
    /// Reply tokens that fell outside the vocabulary and scored as UNK.
    pub oov_tokens: usize,
}

/// Mean total per-reply NLL (sum over reply tokens including EOS) under the
/// deterministic baseline. Out-of-vocabulary reply tokens score as UNK,
/// counted in the result.
pub fn score_nll(
    baseline: &ModelParams,
    vocab: &Vocabulary,
    prompts: &[Vec<usize>],
    items: &[(usize, Vec<String>)],
) -> Result<ScoredNll> {
    if baseline.kind != ModelKind::Baseline {
        return Err(Error::Config("NLL scoring needs the baseline model".into()));
    }
    if items.is_empty() {
        return Err(Error::Usage("no replies to score".into()));
    }
    let z = vec![0.0; baseline.config.latent_dim];
    let mut total = 0.0;
    let mut oov = 0usize;
    for (p_idx, tokens) in items {
        let x_ids = prompts.get(*p_idx).ok_or_else(|| {
            Error::Usage(format!("reply references prompt {p_idx}, have {}", prompts.len()))
        })?;
        oov += tokens.iter().filter(|t| vocab.id(t).is_none()).count();
        let y_ids = vocab.encode(tokens, baseline.config.max_len);
        total += sequence_nll(baseline, x_ids, &y_ids, &z)?;
    }
    Ok(ScoredNll {
        mean_nll: total / items.len() as f64,
        oov_tokens: oov,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplyStats {
    /// None when the frequency table is too degenerate to fit.
    pub zipf: Option<f64>,
    pub mean_nll: f64,
    pub unique_pct: f64,
    pub ttr: f64,
}

/// All reply statistics for one strategy's output against its prompts.
pub fn reply_stats(
    baseline: &ModelParams,
    vocab: &Vocabulary,
    prompts: &[Vec<usize>],
    items: &[(usize, Vec<String>)],
) -> Result<ReplyStats> {
    let replies: Vec<Vec<String>> = items.iter().map(|(_, r)| r.clone()).collect();
    let zipf = match fit_zipf(&replies) {
        Ok(s) => Some(s),
        Err(Error::Unfittable(_)) => None,
        Err(e) => return Err(e),
    };
    let scored = score_nll(baseline, vocab, prompts, items)?;
    Ok(ReplyStats {
        zipf,
        mean_nll: scored.mean_nll,
        unique_pct: unique_pct(&replies)?,
        ttr: ttr(&replies)?,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub radius: f64,
    pub stats: ReplyStats,
}

/// Latent-shell generation swept over radii: `samples_per_radius` replies per
/// prompt at each radius, scored like any reply set. The same seed serves
/// every radius, so each (prompt, sample) slot reuses one underlying draw
/// scaled to the radius; differences between rows are then purely radial.
pub fn shell_sweep(
    latent: &ModelParams,
    baseline: &ModelParams,
    vocab: &Vocabulary,
    prompts: &[Vec<usize>],
    radii: &[f64],
    samples_per_radius: usize,
    base: &DecodeConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if radii.is_empty() {
        return Err(Error::Usage("empty radius list".into()));
    }
    let mut rows = Vec::with_capacity(radii.len());
    for &radius in radii {
        let cfg = DecodeConfig {
            strategy: Strategy::LatentShell,
            radius,
            ..base.clone()
        };
        let generated = generate_replies(latent, None, prompts, &cfg, seed, samples_per_radius)?;
        let mut items = Vec::with_capacity(generated.len());
        for (p_idx, _, ids) in generated {
            items.push((p_idx, vocab.decode(&ids)?));
        }
        rows.push(SweepRow {
            radius,
            stats: reply_stats(baseline, vocab, prompts, &items)?,
        });
    }
    Ok(rows)
}

fn zipf_cell(stats: &ReplyStats) -> String {
    stats.zipf.map_or_else(|| "-".to_string(), |s| format!("{s:.4}"))
}

/// Machine-readable stats: header line then one row per labeled reply set.
pub fn render_stats_tsv(rows: &[(String, ReplyStats)]) -> String {
    let mut out = String::from("strategy_or_radius\tzipf\tmean_nll\tunique_pct\tttr\n");
    for (label, s) in rows {
        writeln!(
            out,
            "{label}\t{}\t{}\t{}\t{}",
            s.zipf.map_or_else(|| "-".to_string(), |z| z.to_string()),
            s.mean_nll,
            s.unique_pct,
            s.ttr
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Human-facing aligned table of the same rows.
pub fn render_stats_table(rows: &[(String, ReplyStats)]) -> String {
    let mut out = format!(
        "{:<18} {:>8} {:>10} {:>10} {:>8}\n",
        "strategy/radius", "zipf", "mean_nll", "unique_pct", "ttr"
    );
    for (label, s) in rows {
        writeln!(
            out,
            "{label:<18} {:>8} {:>10.3} {:>10.1} {:>8.4}",
            zipf_cell(s),
            s.mean_nll,
            s.unique_pct,
            s.ttr
        )
        .expect("writing to a String cannot fail");
    }
    out
}
