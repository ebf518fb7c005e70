//! Pseudo-label selectors: which unlabeled rows receive a label, and which one.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::clip_prob;
use crate::datagen::Dataset;
use crate::error::{invalid, DipsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlabelerKind {
    Greedy,
    Ups,
    Flexmatch,
    SlaLite,
}

impl std::str::FromStr for PlabelerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "ups" => Ok(Self::Ups),
            "flexmatch" => Ok(Self::Flexmatch),
            "sla_lite" | "sla" => Ok(Self::SlaLite),
            other => Err(format!("unknown pseudo-labeler {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlabelerConfig {
    pub kind: PlabelerKind,
    pub tau_p: f64,
    pub tau_n: f64,
    pub kappa_p: f64,
    pub kappa_n: f64,
    pub ensemble_size: usize,
    pub flex_base_tau: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tolerance: f64,
}

impl Default for PlabelerConfig {
    fn default() -> Self {
        Self {
            kind: PlabelerKind::Greedy,
            tau_p: 0.8,
            tau_n: 0.2,
            kappa_p: 0.2,
            kappa_n: 0.05,
            ensemble_size: 10,
            flex_base_tau: 0.9,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 500,
            sinkhorn_tolerance: 1e-6,
        }
    }
}

impl PlabelerConfig {
    pub fn with_kind(kind: PlabelerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_n < self.tau_p) {
            return Err(invalid("tau_n must be below tau_p"));
        }
        if !(self.kappa_n < self.kappa_p) {
            return Err(invalid("kappa_n must be below kappa_p"));
        }
        if self.kind == PlabelerKind::Ups && self.ensemble_size < 2 {
            return Err(invalid("UPS needs an ensemble of at least two members"));
        }
        if !(self.sinkhorn_epsilon > 0.0 && self.sinkhorn_epsilon.is_finite()) {
            return Err(invalid("sinkhorn_epsilon must be positive"));
        }
        if self.sinkhorn_iters == 0 {
            return Err(invalid("sinkhorn_iters must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Row of the probability matrix handed to the selector.
    pub sample: usize,
    pub class: usize,
    pub iteration: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub method: PlabelerKind,
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn samples(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.sample).collect()
    }

    /// Write `sample,class,iteration,confidence` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample", "class", "iteration", "confidence"])?;
        for e in &self.entries {
            w.write_record([
                e.sample.to_string(),
                e.class.to_string(),
                e.iteration.to_string(),
                e.confidence.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn row_max(probs: ArrayView2<f64>, i: usize) -> (usize, f64) {
    let row = probs.row(i);
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    (best, row[best])
}

fn batch_where(
    method: PlabelerKind,
    probs: ArrayView2<f64>,
    iteration: usize,
    mut keep: impl FnMut(usize, usize, f64) -> bool,
) -> PseudoLabelBatch {
    let entries = (0..probs.nrows())
        .filter_map(|i| {
            let (class, p) = row_max(probs, i);
            keep(i, class, p).then_some(PseudoLabel {
                sample: i,
                class,
                iteration,
                confidence: p,
            })
        })
        .collect();
    PseudoLabelBatch { method, entries }
}

/// Select rows whose top probability is at least `tau_p`, labeled with the argmax.
pub fn greedy_select(probs: ArrayView2<f64>, config: &PlabelerConfig, iteration: usize) -> PseudoLabelBatch {
    batch_where(PlabelerKind::Greedy, probs, iteration, |_, _, p| p >= config.tau_p)
}

/// Greedy selection additionally gated on the ensemble spread of the argmax
/// coordinate being at most `kappa_p`.
pub fn ups_select(
    probs: ArrayView2<f64>,
    uncertainty: ArrayView2<f64>,
    config: &PlabelerConfig,
    iteration: usize,
) -> Result<PseudoLabelBatch> {
    if probs.dim() != uncertainty.dim() {
        return Err(DipsError::ShapeMismatch {
            expected: format!("{:?}", probs.dim()),
            got: format!("{:?}", uncertainty.dim()),
        });
    }
    Ok(batch_where(PlabelerKind::Ups, probs, iteration, |i, k, p| {
        p >= config.tau_p && uncertainty[[i, k]] <= config.kappa_p
    }))
}

/// Per-class thresholds `base * status_c / max(status)`; all `base` while no
/// class has been selected yet.
pub fn flexmatch_thresholds(status: &[usize], base: f64) -> Vec<f64> {
    let max = status.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![base; status.len()];
    }
    status
        .iter()
        .map(|&s| base * s as f64 / max as f64)
        .collect()
}

/// Select rows whose top probability exceeds the dynamic threshold of the top class.
pub fn flexmatch_select(
    probs: ArrayView2<f64>,
    status: &[usize],
    config: &PlabelerConfig,
    iteration: usize,
) -> Result<PseudoLabelBatch> {
    if status.len() != probs.ncols() {
        return Err(DipsError::ShapeMismatch {
            expected: format!("{} class counts", probs.ncols()),
            got: format!("{}", status.len()),
        });
    }
    let thresholds = flexmatch_thresholds(status, config.flex_base_tau);
    Ok(batch_where(PlabelerKind::Flexmatch, probs, iteration, |_, k, p| p > thresholds[k]))
}

/// Result of the entropic transport solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute marginal violation of the returned plan.
    pub violation: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn between uniform row mass and the given column masses,
/// with cost `-log(clip(p))`.
pub fn sinkhorn_plan(probs: ArrayView2<f64>, column_mass: &[f64], config: &PlabelerConfig) -> Result<TransportPlan> {
    let (n, c) = probs.dim();
    if column_mass.len() != c {
        return Err(DipsError::ShapeMismatch {
            expected: format!("{c} marginals"),
            got: format!("{}", column_mass.len()),
        });
    }
    if column_mass.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(invalid("class marginals must be finite and non-negative"));
    }
    let total: f64 = column_mass.iter().sum();
    if total <= 0.0 {
        return Err(invalid("class marginals sum to zero"));
    }
    if n == 0 {
        return Err(invalid("no rows to allocate"));
    }
    let eps = config.sinkhorn_epsilon;
    let cost = probs.mapv(|p| -clip_prob(p).ln());
    let row_mass = total / n as f64;
    let log_a = row_mass.ln();
    let log_b: Vec<f64> = column_mass.iter().map(|m| m.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; c];

    let plan_of = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((n, c), |(i, j)| {
            if g[j] == f64::NEG_INFINITY {
                0.0
            } else {
                ((f[i] + g[j] - cost[[i, j]]) / eps).exp()
            }
        })
    };
    let violation_of = |plan: &Array2<f64>| {
        let rows = plan
            .rows()
            .into_iter()
            .map(|r| (r.sum() - row_mass).abs())
            .fold(0.0, f64::max);
        let cols = plan
            .columns()
            .into_iter()
            .zip(column_mass)
            .map(|(col, &m)| (col.sum() - m).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    };

    let mut best: Option<(f64, Array2<f64>, usize)> = None;
    for it in 1..=config.sinkhorn_iters {
        for i in 0..n {
            let lse = log_sum_exp((0..c).map(|j| (g[j] - cost[[i, j]]) / eps));
            f[i] = eps * (log_a - lse);
        }
        for j in 0..c {
            if log_b[j] == f64::NEG_INFINITY {
                g[j] = f64::NEG_INFINITY;
                continue;
            }
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost[[i, j]]) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        let plan = plan_of(&f, &g);
        let violation = violation_of(&plan);
        if violation < config.sinkhorn_tolerance {
            return Ok(TransportPlan {
                plan,
                iterations: it,
                converged: true,
                violation,
            });
        }
        if best.as_ref().is_none_or(|b| violation < b.0) {
            best = Some((violation, plan, it));
        }
    }
    let (violation, plan, iterations) = best.expect("at least one iteration");
    tracing::warn!(violation, iterations, "sinkhorn did not reach tolerance; using best iterate");
    Ok(TransportPlan {
        plan,
        iterations,
        converged: false,
        violation,
    })
}

/// Allocate classes by entropic transport, then keep rows whose model
/// confidence in the allocated class is at least `tau_p`.
pub fn sinkhorn_allocate(
    probs: ArrayView2<f64>,
    class_marginals: &[f64],
    config: &PlabelerConfig,
    iteration: usize,
) -> Result<(PseudoLabelBatch, TransportPlan)> {
    let plan = sinkhorn_plan(probs, class_marginals, config)?;
    let mut entries = Vec::new();
    for i in 0..probs.nrows() {
        let (class, _) = row_max(plan.plan.view(), i);
        let p = probs[[i, class]];
        if p >= config.tau_p {
            entries.push(PseudoLabel {
                sample: i,
                class,
                iteration,
                confidence: p,
            });
        }
    }
    Ok((
        PseudoLabelBatch {
            method: PlabelerKind::SlaLite,
            entries,
        },
        plan,
    ))
}

/// Labeled class proportions scaled to `pool_size`.
pub fn derive_class_marginals(labeled: &Dataset, pool_size: usize) -> Result<Vec<f64>> {
    if labeled.is_empty() {
        return Err(invalid("labeled set is empty"));
    }
    let counts = labeled.class_counts()?;
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(invalid("labeled set holds a single class; marginals are degenerate"));
    }
    let n = labeled.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| c as f64 / n * pool_size as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn greedy_examples() {
        let cfg = PlabelerConfig::default();
        let b = greedy_select(array![[0.85, 0.15], [0.75, 0.25], [0.1, 0.9]].view(), &cfg, 2);
        assert_eq!(b.samples(), vec![0, 2]);
        assert_eq!(b.entries[0].class, 0);
        assert_eq!(b.entries[1].class, 1);
        assert_eq!(b.entries[1].iteration, 2);
        let uniform = Array2::from_elem((10, 2), 0.5);
        assert!(greedy_select(uniform.view(), &cfg, 1).is_empty());
    }

    #[test]
    fn ups_examples() {
        let cfg = PlabelerConfig::with_kind(PlabelerKind::Ups);
        let probs = array![[0.9, 0.1], [0.9, 0.1]];
        let u = array![[0.05, 0.05], [0.3, 0.3]];
        let b = ups_select(probs.view(), u.view(), &cfg, 1).unwrap();
        assert_eq!(b.samples(), vec![0]);
        assert!(ups_select(probs.view(), array![[0.0, 0.0]].view(), &cfg, 1).is_err());
    }

    #[test]
    fn flexmatch_examples() {
        let cfg = PlabelerConfig::with_kind(PlabelerKind::Flexmatch);
        assert_eq!(flexmatch_thresholds(&[10, 5], 0.9), vec![0.9, 0.45]);
        assert_eq!(flexmatch_thresholds(&[0, 0], 0.9), vec![0.9, 0.9]);
        assert_eq!(flexmatch_thresholds(&[4, 4, 4], 0.9), vec![0.9; 3]);
        let b = flexmatch_select(array![[0.5, 0.5 + 1e-9], [0.5 - 1e-9, 0.5 + 1e-9]].view(), &[10, 5], &cfg, 1).unwrap();
        assert_eq!(b.samples(), vec![0, 1]);
        assert!(b.entries.iter().all(|e| e.class == 1));
        assert!(flexmatch_select(array![[0.5, 0.5]].view(), &[1], &cfg, 1).is_err());
    }

    #[test]
    fn flexmatch_equal_counts_is_greedy_at_base() {
        let probs = array![[0.95, 0.05], [0.9, 0.1], [0.3, 0.7], [0.02, 0.98]];
        let flex = flexmatch_select(probs.view(), &[3, 3], &PlabelerConfig::default(), 1).unwrap();
        let greedy_cfg = PlabelerConfig { tau_p: 0.9 + 1e-12, ..PlabelerConfig::default() };
        assert_eq!(flex.samples(), greedy_select(probs.view(), &greedy_cfg, 1).samples());
    }

    #[test]
    fn flexmatch_unselected_class_keeps_lower_threshold() {
        let cfg = PlabelerConfig::default();
        let probs = array![[0.97, 0.03], [0.95, 0.05], [0.7, 0.3], [0.92, 0.08]];
        let mut status = vec![0usize, 0];
        for it in 1..=2 {
            let batch = flexmatch_select(probs.view(), &status, &cfg, it).unwrap();
            for e in &batch.entries {
                status[e.class] += 1;
            }
        }
        let t = flexmatch_thresholds(&status, cfg.flex_base_tau);
        assert!(status[1] == 0 && status[0] > 0);
        assert!(t[1] < t[0]);
    }

    #[test]
    fn sinkhorn_one_hot_matches_argmax() {
        let probs = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]];
        let (batch, plan) = sinkhorn_allocate(probs.view(), &[3.0, 1.0], &PlabelerConfig::default(), 1).unwrap();
        assert!(plan.converged);
        assert_eq!(batch.entries.iter().map(|e| e.class).collect::<Vec<_>>(), vec![0, 1, 0, 0]);
    }

    #[test]
    fn sinkhorn_marginals() {
        let probs = array![[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4], [0.6, 0.1, 0.3], [0.2, 0.5, 0.3]];
        let marg = [2.0, 2.0, 1.0];
        let plan = sinkhorn_plan(probs.view(), &marg, &PlabelerConfig { sinkhorn_epsilon: 0.5, ..PlabelerConfig::default() }).unwrap();
        assert!(plan.converged);
        for (col, m) in plan.plan.columns().into_iter().zip(marg) {
            assert!((col.sum() - m).abs() < 1e-6);
        }
        for row in plan.plan.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert!(plan.plan.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sinkhorn_errors_and_best_iterate() {
        let probs = array![[0.7, 0.3]];
        assert!(sinkhorn_plan(probs.view(), &[0.0, 0.0], &PlabelerConfig::default()).is_err());
        assert!(sinkhorn_plan(probs.view(), &[1.0], &PlabelerConfig::default()).is_err());
        let probs = array![[0.9, 0.1], [0.8, 0.2], [0.6, 0.4]];
        let cfg = PlabelerConfig { sinkhorn_iters: 1, sinkhorn_epsilon: 0.01, ..PlabelerConfig::default() };
        let plan = sinkhorn_plan(probs.view(), &[1.0, 2.0], &cfg).unwrap();
        assert_eq!(plan.iterations, 1);
    }

    #[test]
    fn marginals_examples() {
        let lab = Dataset::new(Array2::zeros((10, 1)), Some((0..10).map(|i| i % 2).collect()), 2).unwrap();
        assert_eq!(derive_class_marginals(&lab, 900).unwrap(), vec![450.0, 450.0]);
        let lab = Dataset::new(Array2::zeros((10, 1)), Some((0..10).map(|i| usize::from(i >= 3)).collect()), 2).unwrap();
        let m = derive_class_marginals(&lab, 100).unwrap();
        assert!((m[0] - 30.0).abs() < 1e-9 && (m[1] - 70.0).abs() < 1e-9);
        let one = Dataset::new(Array2::zeros((3, 1)), Some(vec![1, 1, 1]), 2).unwrap();
        assert!(derive_class_marginals(&one, 10).is_err());
    }

    #[test]
    fn batch_csv() {
        let b = greedy_select(array![[0.9, 0.1]].view(), &PlabelerConfig::default(), 3);
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "sample,class,iteration,confidence\n0,0,3,0.9\n");
    }

    #[test]
    fn config_validation() {
        assert!(PlabelerConfig { tau_n: 0.9, ..PlabelerConfig::default() }.validate().is_err());
        assert!(PlabelerConfig { kappa_n: 0.5, ..PlabelerConfig::default() }.validate().is_err());
        assert!(PlabelerConfig::default().validate().is_ok());
    }
}
