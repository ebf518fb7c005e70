//! Training-set selectors: the learning-dynamics rule and its baselines.
//!
//! A selector sees the candidate pool (labeled and pseudo-labeled samples with
//! their current labels) together with the dynamics recorded while the last
//! model trained, and returns which candidates to train on next.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsTrace;
use crate::error::{invalid, DipsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Useful,
    Harmful,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Characterization {
    pub sample_index: usize,
    pub verdict: Verdict,
    pub confidence: f64,
    pub aleatoric: f64,
}

/// How the aleatoric cutoff is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "value", rename_all = "snake_case")]
pub enum AleatoricThreshold {
    Fixed(f64),
    /// `factor * (max - min)` over the candidate set.
    Adaptive(f64),
    /// `min + factor * (max - min)` over the candidate set.
    AdaptiveFromMin(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Dips,
    Identity,
    SmallLoss,
    Fluctuation,
}

impl std::str::FromStr for SelectorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dips" => Ok(Self::Dips),
            "identity" | "none" => Ok(Self::Identity),
            "small_loss" => Ok(Self::SmallLoss),
            "fluctuation" => Ok(Self::Fluctuation),
            other => Err(format!("unknown selector {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub kind: SelectorKind,
    pub tau_conf: f64,
    /// When set, `tau_conf` is replaced by this quantile of the candidates' confidences.
    pub conf_percentile: Option<f64>,
    pub tau_al: AleatoricThreshold,
    /// Fraction kept by the small-loss selector.
    pub keep_fraction: f64,
    /// Add `1 - confidence` to the fluctuation score.
    pub smoothing: bool,
    /// Fluctuation scores above this quantile of the candidate scores are rejected.
    pub fluctuation_quantile: f64,
    /// Drop the aleatoric condition when no candidate satisfies it, leaving the
    /// confidence condition alone.
    pub relax_vacuous_al_gate: bool,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            kind: SelectorKind::Dips,
            tau_conf: 0.8,
            conf_percentile: None,
            tau_al: AleatoricThreshold::Adaptive(0.75),
            keep_fraction: 0.8,
            smoothing: true,
            fluctuation_quantile: 0.8,
            relax_vacuous_al_gate: true,
        }
    }
}

impl SelectorConfig {
    pub fn identity() -> Self {
        Self {
            kind: SelectorKind::Identity,
            ..Self::default()
        }
    }

    pub fn with_kind(kind: SelectorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_conf) {
            return Err(invalid("tau_conf must lie in [0,1]"));
        }
        if let Some(q) = self.conf_percentile {
            if !(0.0..=1.0).contains(&q) {
                return Err(invalid("conf_percentile must lie in [0,1]"));
            }
        }
        match self.tau_al {
            AleatoricThreshold::Fixed(v) if !v.is_finite() || v < 0.0 => {
                return Err(invalid("fixed tau_al must be finite and >= 0"))
            }
            AleatoricThreshold::Adaptive(f) | AleatoricThreshold::AdaptiveFromMin(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(invalid("adaptive tau_al factor must lie in (0,1]"))
            }
            _ => {}
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(invalid("keep_fraction must lie in (0,1]"));
        }
        if !(0.0..=1.0).contains(&self.fluctuation_quantile) {
            return Err(invalid("fluctuation_quantile must lie in [0,1]"));
        }
        Ok(())
    }
}

fn min_max(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(invalid("empty aleatoric vector"));
    }
    Ok(values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

/// `factor * (max - min)` of the aleatoric values.
pub fn adaptive_al_threshold(aleatoric: &[f64], factor: f64) -> Result<f64> {
    let (lo, hi) = min_max(aleatoric)?;
    Ok(factor * (hi - lo))
}

/// Resolve the aleatoric cutoff against a candidate set.
pub fn resolve_al_threshold(policy: AleatoricThreshold, aleatoric: &[f64]) -> Result<f64> {
    match policy {
        AleatoricThreshold::Fixed(v) => Ok(v),
        AleatoricThreshold::Adaptive(f) => adaptive_al_threshold(aleatoric, f),
        AleatoricThreshold::AdaptiveFromMin(f) => {
            let (lo, hi) = min_max(aleatoric)?;
            Ok(lo + f * (hi - lo))
        }
    }
}

/// Useful iff `confidence >= tau_conf` and `aleatoric < tau_al`.
pub fn verdict(confidence: f64, aleatoric: f64, tau_conf: f64, tau_al: f64) -> Verdict {
    if confidence >= tau_conf && aleatoric < tau_al {
        Verdict::Useful
    } else {
        Verdict::Harmful
    }
}

/// Characterize every candidate. The adaptive cutoff is evaluated on the
/// candidates' own aleatoric values. Sample indices are positions in the input.
pub fn dips_select(confidence: &[f64], aleatoric: &[f64], config: &SelectorConfig) -> Result<Vec<Characterization>> {
    if confidence.len() != aleatoric.len() {
        return Err(DipsError::ShapeMismatch {
            expected: format!("{} aleatoric values", confidence.len()),
            got: format!("{}", aleatoric.len()),
        });
    }
    if confidence.is_empty() {
        return Ok(Vec::new());
    }
    let tau_conf = match config.conf_percentile {
        Some(q) => quantile(confidence, q),
        None => config.tau_conf,
    };
    let mut tau_al = resolve_al_threshold(config.tau_al, aleatoric)?;
    if config.relax_vacuous_al_gate && aleatoric.iter().all(|&a| a >= tau_al) {
        tau_al = f64::INFINITY;
    }
    Ok(confidence
        .iter()
        .zip(aleatoric)
        .enumerate()
        .map(|(i, (&c, &a))| Characterization {
            sample_index: i,
            verdict: verdict(c, a, tau_conf, tau_al),
            confidence: c,
            aleatoric: a,
        })
        .collect())
}

pub fn identity_select(n: usize) -> Vec<bool> {
    vec![true; n]
}

/// Keep the `round(keep_fraction * n)` lowest-loss samples; ties go to the lower index.
pub fn small_loss_select(losses: &[f64], keep_fraction: f64) -> Result<Vec<bool>> {
    if losses.is_empty() {
        return Err(invalid("small-loss selection on an empty set"));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(invalid("keep_fraction must lie in (0,1]"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(invalid("losses must be finite"));
    }
    let keep = (keep_fraction * losses.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut mask = vec![false; losses.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Count of correct-to-incorrect transitions between adjacent checkpoints.
pub fn fluctuation_count(stream: &[f64]) -> Result<usize> {
    if stream.len() < 2 {
        return Err(invalid("fluctuation needs at least two checkpoints"));
    }
    Ok(stream.windows(2).filter(|w| w[0] > 0.5 && w[1] < 0.5).count())
}

/// Fluctuation scores, optionally smoothed by adding `1 - confidence` to the
/// normalized transition count.
pub fn fluctuation_scores(streams: &[Vec<f64>], confidence: &[f64], smoothing: bool) -> Result<Vec<f64>> {
    if streams.len() != confidence.len() {
        return Err(DipsError::ShapeMismatch {
            expected: format!("{} confidence values", streams.len()),
            got: format!("{}", confidence.len()),
        });
    }
    streams
        .iter()
        .zip(confidence)
        .map(|(s, &c)| {
            let count = fluctuation_count(s)? as f64;
            Ok(if smoothing {
                count / (s.len() - 1) as f64 + (1.0 - c)
            } else {
                count
            })
        })
        .collect()
}

/// Nearest-rank quantile of `values`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Reject samples whose fluctuation score exceeds the configured quantile.
pub fn fluctuation_select(streams: &[Vec<f64>], confidence: &[f64], config: &SelectorConfig) -> Result<Vec<bool>> {
    if streams.is_empty() {
        return Err(invalid("fluctuation selection on an empty set"));
    }
    let scores = fluctuation_scores(streams, confidence, config.smoothing)?;
    let cut = quantile(&scores, config.fluctuation_quantile);
    Ok(scores.iter().map(|&s| s <= cut).collect())
}

/// A pool member offered to the selector: its row in the dynamics trace and its
/// current (given or pseudo) label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub trace_index: usize,
    pub label: usize,
}

/// Output of [`select_training_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Parallel to the candidate slice.
    pub mask: Vec<bool>,
    /// Filled for the DIPS selector; indices are candidate positions.
    pub characterizations: Vec<Characterization>,
    /// Candidates added by the class-coverage safeguard.
    pub rescued: Vec<usize>,
}

/// Apply the configured selector to a candidate pool.
///
/// Whenever a class present among the candidates ends up with no selected
/// member, its highest-confidence candidate is added back so training never
/// sees an empty or single-class set.
pub fn select_training_set(candidates: &[Candidate], trace: &DynamicsTrace, config: &SelectorConfig) -> Result<Selection> {
    config.validate()?;
    if candidates.is_empty() {
        return Ok(Selection {
            mask: Vec::new(),
            characterizations: Vec::new(),
            rescued: Vec::new(),
        });
    }
    let pairs: Vec<(usize, usize)> = candidates.iter().map(|c| (c.trace_index, c.label)).collect();
    let (confidence, aleatoric) = trace.extract_pairs(&pairs)?;
    let mut characterizations = Vec::new();
    let mut mask = match config.kind {
        SelectorKind::Identity => identity_select(candidates.len()),
        SelectorKind::Dips => {
            characterizations = dips_select(&confidence, &aleatoric, config)?;
            characterizations.iter().map(|c| c.verdict == Verdict::Useful).collect()
        }
        SelectorKind::SmallLoss => {
            let losses = pairs
                .iter()
                .map(|&(i, y)| trace.mean_loss(i, y))
                .collect::<Result<Vec<_>>>()?;
            small_loss_select(&losses, config.keep_fraction)?
        }
        SelectorKind::Fluctuation => {
            let streams = pairs
                .iter()
                .map(|&(i, y)| trace.label_stream(i, y))
                .collect::<Result<Vec<_>>>()?;
            fluctuation_select(&streams, &confidence, config)?
        }
    };
    let rescued = ensure_class_coverage(candidates, &confidence, &mut mask, trace.class_count());
    Ok(Selection {
        mask,
        characterizations,
        rescued,
    })
}

fn ensure_class_coverage(candidates: &[Candidate], confidence: &[f64], mask: &mut [bool], class_count: usize) -> Vec<usize> {
    let mut covered = vec![false; class_count];
    let mut best: Vec<Option<usize>> = vec![None; class_count];
    for (j, c) in candidates.iter().enumerate() {
        if mask[j] {
            covered[c.label] = true;
        }
        match best[c.label] {
            Some(b) if confidence[b] >= confidence[j] => {}
            _ => best[c.label] = Some(j),
        }
    }
    let mut rescued = Vec::new();
    for k in 0..class_count {
        if let (false, Some(j)) = (covered[k], best[k]) {
            mask[j] = true;
            rescued.push(j);
        }
    }
    rescued
}

/// Write characterizations with a provenance tag per row.
pub fn write_characterizations_csv<W: Write>(out: W, rows: &[(Characterization, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_index", "provenance", "confidence", "aleatoric", "verdict"])?;
    for (c, prov) in rows {
        w.write_record([
            c.sample_index.to_string(),
            prov.clone(),
            c.confidence.to_string(),
            c.aleatoric.to_string(),
            match c.verdict {
                Verdict::Useful => "useful".into(),
                Verdict::Harmful => "harmful".into(),
            },
        ])?;
    }
    w.flush()?;
    Ok(())
}
