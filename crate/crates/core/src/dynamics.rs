//! Per-sample learning dynamics kept as running statistics over checkpoints.
//!
//! For every probe sample and every class the trace holds the mean checkpoint
//! probability and the mean of `p (1 - p)`. Labels are only consulted at
//! extraction time, so pseudo-labels chosen after training can still be scored.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{clip_prob, CheckpointObserver};
use crate::error::{invalid, DipsError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTrace {
    mean_p: Array2<f64>,
    mean_pq: Array2<f64>,
    /// Mean clipped negative log-probability, used by the small-loss selector.
    mean_nll: Array2<f64>,
    e_seen: usize,
    /// Checkpoints with index <= this are ignored (window ablation only).
    skip_through: usize,
    /// Full per-checkpoint matrices, kept only when requested.
    stream: Option<Vec<Array2<f64>>>,
}

impl DynamicsTrace {
    pub fn new(n_samples: usize, class_count: usize) -> Self {
        Self {
            mean_p: Array2::zeros((n_samples, class_count)),
            mean_pq: Array2::zeros((n_samples, class_count)),
            mean_nll: Array2::zeros((n_samples, class_count)),
            e_seen: 0,
            skip_through: 0,
            stream: None,
        }
    }

    /// Ignore checkpoints `1..=skip_through`.
    pub fn with_window_start(mut self, skip_through: usize) -> Self {
        self.skip_through = skip_through;
        self
    }

    /// Also store every checkpoint matrix (needed by the fluctuation selector).
    pub fn keeping_stream(mut self) -> Self {
        self.stream = Some(Vec::new());
        self
    }

    pub fn n_samples(&self) -> usize {
        self.mean_p.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.mean_p.ncols()
    }

    pub fn e_seen(&self) -> usize {
        self.e_seen
    }

    pub fn mean_p(&self) -> &Array2<f64> {
        &self.mean_p
    }

    pub fn mean_pq(&self) -> &Array2<f64> {
        &self.mean_pq
    }

    pub fn stream(&self) -> Option<&[Array2<f64>]> {
        self.stream.as_deref()
    }

    /// Fold one checkpoint's probability matrix into the running means.
    pub fn update_running_stats(&mut self, probs: &Array2<f64>) -> Result<()> {
        if probs.dim() != self.mean_p.dim() {
            return Err(DipsError::ShapeMismatch {
                expected: format!("{:?}", self.mean_p.dim()),
                got: format!("{:?}", probs.dim()),
            });
        }
        self.e_seen += 1;
        let inv = 1.0 / self.e_seen as f64;
        ndarray::Zip::from(&mut self.mean_p)
            .and(&mut self.mean_pq)
            .and(&mut self.mean_nll)
            .and(probs)
            .for_each(|mp, mpq, nll, &p| {
                *mp += (p - *mp) * inv;
                *mpq += (p * (1.0 - p) - *mpq) * inv;
                *nll += (-clip_prob(p).ln() - *nll) * inv;
            });
        if let Some(stream) = &mut self.stream {
            stream.push(probs.clone());
        }
        Ok(())
    }

    fn check(&self, sample: usize, label: usize) -> Result<()> {
        if self.e_seen == 0 {
            return Err(DipsError::NoDynamics);
        }
        if sample >= self.n_samples() {
            return Err(DipsError::IndexOutOfRange {
                index: sample,
                len: self.n_samples(),
            });
        }
        if label >= self.class_count() {
            return Err(DipsError::IndexOutOfRange {
                index: label,
                len: self.class_count(),
            });
        }
        Ok(())
    }

    /// Average probability assigned to `label` across checkpoints.
    pub fn confidence(&self, sample: usize, label: usize) -> Result<f64> {
        self.check(sample, label)?;
        Ok(self.mean_p[[sample, label]])
    }

    /// Average of `p (1 - p)` at `label` across checkpoints.
    pub fn aleatoric(&self, sample: usize, label: usize) -> Result<f64> {
        self.check(sample, label)?;
        Ok(self.mean_pq[[sample, label]])
    }

    /// Average clipped cross-entropy of `label` across checkpoints.
    pub fn mean_loss(&self, sample: usize, label: usize) -> Result<f64> {
        self.check(sample, label)?;
        Ok(self.mean_nll[[sample, label]])
    }

    /// Confidence and aleatoric vectors for one label per sample.
    pub fn extract_for_labels(&self, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        if labels.len() != self.n_samples() {
            return Err(DipsError::ShapeMismatch {
                expected: format!("{} labels", self.n_samples()),
                got: format!("{} labels", labels.len()),
            });
        }
        let pairs: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
        self.extract_pairs(&pairs)
    }

    /// Confidence and aleatoric vectors for explicit `(sample, label)` pairs.
    pub fn extract_pairs(&self, pairs: &[(usize, usize)]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut conf = Vec::with_capacity(pairs.len());
        let mut al = Vec::with_capacity(pairs.len());
        for &(i, y) in pairs {
            conf.push(self.confidence(i, y)?);
            al.push(self.aleatoric(i, y)?);
        }
        Ok((conf, al))
    }

    /// Per-checkpoint probabilities of `label` for `sample`; requires a stored stream.
    pub fn label_stream(&self, sample: usize, label: usize) -> Result<Vec<f64>> {
        self.check(sample, label)?;
        let stream = self
            .stream
            .as_ref()
            .ok_or_else(|| invalid("trace was recorded without a checkpoint stream"))?;
        Ok(stream.iter().map(|m| m[[sample, label]]).collect())
    }

    /// Write `sample,e_seen,mean_p_0..,mean_pq_0..` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let c = self.class_count();
        let mut header = vec!["sample".to_string(), "e_seen".to_string()];
        header.extend((0..c).map(|k| format!("mean_p_{k}")));
        header.extend((0..c).map(|k| format!("mean_pq_{k}")));
        w.write_record(&header)?;
        for i in 0..self.n_samples() {
            let mut rec = vec![i.to_string(), self.e_seen.to_string()];
            rec.extend(self.mean_p.row(i).iter().map(|v| v.to_string()));
            rec.extend(self.mean_pq.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row {
            sample: usize,
            mean_p: Vec<f64>,
            mean_pq: Vec<f64>,
        }
        #[derive(Serialize)]
        struct Export {
            e_seen: usize,
            samples: Vec<Row>,
        }
        let samples = (0..self.n_samples())
            .map(|i| Row {
                sample: i,
                mean_p: self.mean_p.row(i).to_vec(),
                mean_pq: self.mean_pq.row(i).to_vec(),
            })
            .collect();
        Ok(serde_json::to_string(&Export {
            e_seen: self.e_seen,
            samples,
        })?)
    }
}

impl CheckpointObserver for DynamicsTrace {
    fn observe(&mut self, checkpoint: usize, probs: &Array2<f64>) -> Result<()> {
        if checkpoint <= self.skip_through {
            return Ok(());
        }
        self.update_running_stats(probs)
    }
}
