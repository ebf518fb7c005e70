//! The pseudo-labeling loop with a training-set selector applied to the whole
//! candidate pool at every iteration.
//!
//! Pool rows `0..n_lab` are the labeled samples, rows `n_lab..` the unlabeled
//! ones. Every model is trained from scratch and its checkpoints are recorded
//! over the full pool, so any candidate can be characterized regardless of
//! whether that model saw it.

use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{train_ensemble, train_with_checkpoints, ensemble_uncertainty, BackboneConfig, Model};
use crate::datagen::{Dataset, Split};
use crate::dynamics::DynamicsTrace;
use crate::error::{invalid, DipsError, Result};
use crate::plabelers::{
    derive_class_marginals, flexmatch_select, greedy_select, sinkhorn_allocate, ups_select, PlabelerConfig,
    PlabelerKind, PseudoLabelBatch,
};
use crate::seed::{derive, Stream};
use crate::selectors::{select_training_set, Candidate, SelectorConfig, SelectorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Version {
    /// Pseudo-labels accumulate across iterations.
    Grow,
    /// Each iteration starts again from the initial labeled set plus the newest batch.
    Rebuild,
}

impl std::str::FromStr for Version {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "grow" | "1" => Ok(Self::Grow),
            "rebuild" | "2" => Ok(Self::Rebuild),
            other => Err(format!("unknown version {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum Origin {
    Labeled,
    PseudoLabeled { iteration: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub origin: Origin,
    pub current_label: usize,
    pub selected_last_round: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub iterations: usize,
    pub plabeler: PlabelerConfig,
    pub selector: SelectorConfig,
    pub backbone: BackboneConfig,
    pub dips_at_init: bool,
    pub dips_at_iters: bool,
    pub version: Version,
    /// Fraction of early checkpoints left out of the dynamics (window ablation).
    pub dynamics_skip_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            plabeler: PlabelerConfig::default(),
            selector: SelectorConfig::default(),
            backbone: BackboneConfig::default(),
            dips_at_init: true,
            dips_at_iters: true,
            version: Version::Grow,
            dynamics_skip_fraction: 0.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Vanilla pseudo-labeling: identity selector.
    pub fn vanilla() -> Self {
        Self {
            selector: SelectorConfig::identity(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("iterations must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dynamics_skip_fraction) {
            return Err(invalid("dynamics_skip_fraction must lie in [0,1)"));
        }
        self.plabeler.validate()?;
        self.selector.validate()?;
        self.backbone.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub labeled_useful: usize,
    pub labeled_harmful: usize,
    pub pseudo_useful: usize,
    pub pseudo_harmful: usize,
}

/// One iteration of the loop. Iteration 0 describes the model trained on the
/// labeled set and the initial selection; iteration `t >= 1` the model trained
/// on the `t`-th training set and the pool it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Rows the model of this iteration was trained on.
    pub trained_on: usize,
    pub test_accuracy: Option<f64>,
    pub new_pseudo_labels: usize,
    /// Pool indices of the candidate set after this iteration.
    pub pool: Vec<usize>,
    /// Pool indices selected for the next training set.
    pub train: Vec<usize>,
    /// `(unlabeled index, class)` for every pseudo-label held in the pool.
    pub pseudo_labels: Vec<(usize, usize)>,
    pub pseudo_label_accuracy: Option<f64>,
    pub verdicts: VerdictCounts,
    pub rescued: usize,
    /// Training degenerated and the previous model was reused.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub train_ms: f64,
    pub pseudo_label_ms: f64,
    pub select_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub history: Vec<IterationRecord>,
    pub timings: Vec<PhaseTimings>,
    pub final_trace: DynamicsTrace,
}

/// Fraction of argmax predictions equal to the labels.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<f64> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| invalid("test set has no labels"))?;
    if labels.is_empty() {
        return Err(invalid("test set is empty"));
    }
    let pred = model.predict(test.features.view())?;
    Ok(accuracy(&pred, labels))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Per-iteration share of held pseudo-labels that match the hidden truth;
/// `None` where no pseudo-labels are held.
pub fn pseudo_label_accuracy(history: &[IterationRecord], hidden: &[usize]) -> Result<Vec<Option<f64>>> {
    history
        .iter()
        .map(|r| {
            if r.pseudo_labels.is_empty() {
                return Ok(None);
            }
            let mut hits = 0;
            for &(j, c) in &r.pseudo_labels {
                let truth = *hidden.get(j).ok_or(DipsError::IndexOutOfRange {
                    index: j,
                    len: hidden.len(),
                })?;
                hits += usize::from(truth == c);
            }
            Ok(Some(hits as f64 / r.pseudo_labels.len() as f64))
        })
        .collect()
}

/// Train on the labeled part only.
pub fn supervised(split: &Split, backbone: &BackboneConfig) -> Result<Model> {
    train_with_checkpoints(
        &split.labeled,
        split.labeled.features.view(),
        backbone,
        &mut crate::backbone::Discard,
    )
}

struct Pool {
    features: Array2<f64>,
    n_lab: usize,
    class_count: usize,
    prov: Vec<Option<SampleProvenance>>,
    train: Vec<bool>,
}

impl Pool {
    fn members(&self) -> Vec<usize> {
        (0..self.prov.len()).filter(|&i| self.prov[i].is_some()).collect()
    }

    fn training_rows(&self) -> Vec<usize> {
        (0..self.prov.len()).filter(|&i| self.train[i]).collect()
    }

    fn training_set(&self) -> Result<Dataset> {
        let rows = self.training_rows();
        let x = self.features.select(Axis(0), &rows);
        let y = rows
            .iter()
            .map(|&i| self.prov[i].expect("training row is a pool member").current_label)
            .collect();
        Dataset::new_allow_empty(x, Some(y), self.class_count)
    }

    fn pseudo_labels(&self) -> Vec<(usize, usize)> {
        (self.n_lab..self.prov.len())
            .filter_map(|i| {
                self.prov[i].and_then(|p| match p.origin {
                    Origin::PseudoLabeled { .. } => Some((i - self.n_lab, p.current_label)),
                    Origin::Labeled => None,
                })
            })
            .collect()
    }
}

struct Trained {
    model: Model,
    trace: DynamicsTrace,
}

fn train_recording(train: &Dataset, pool: &Pool, config: &PipelineConfig, iteration: usize) -> Result<Trained> {
    let backbone = BackboneConfig {
        seed: derive(config.seed, Stream::Backbone, iteration as u64),
        ..config.backbone.clone()
    };
    let skip = (config.dynamics_skip_fraction * backbone.rounds as f64).floor() as usize;
    let mut trace = DynamicsTrace::new(pool.features.nrows(), pool.class_count).with_window_start(skip);
    if config.selector.kind == SelectorKind::Fluctuation {
        trace = trace.keeping_stream();
    }
    let model = train_with_checkpoints(train, pool.features.view(), &backbone, &mut trace)?;
    Ok(Trained { model, trace })
}

/// Run the loop: train on the labeled set, optionally select from it, then for
/// each iteration train, pseudo-label, grow the pool and optionally select the
/// next training set from the whole pool.
pub fn run(split: &Split, config: &PipelineConfig) -> Result<RunOutput> {
    config.validate()?;
    split.validate()?;
    let lab_labels = split.labeled.labels()?;
    let n_lab = split.labeled.len();
    let n_unlab = split.unlabeled.len();
    let c = split.class_count();
    let features = if n_unlab > 0 {
        concatenate(Axis(0), &[split.labeled.features.view(), split.unlabeled.features.view()])
            .map_err(|e| invalid(e.to_string()))?
    } else {
        split.labeled.features.clone()
    };
    let mut pool = Pool {
        features,
        n_lab,
        class_count: c,
        prov: vec![None; n_lab + n_unlab],
        train: vec![false; n_lab + n_unlab],
    };
    for (i, &y) in lab_labels.iter().enumerate() {
        pool.prov[i] = Some(SampleProvenance {
            origin: Origin::Labeled,
            current_label: y,
            selected_last_round: true,
        });
        pool.train[i] = true;
    }
    let hidden = (split.hidden_labels.len() == n_unlab && n_unlab > 0).then_some(&split.hidden_labels);
    let test_acc = |m: &Model| -> Result<Option<f64>> {
        if split.test.is_empty() {
            Ok(None)
        } else {
            evaluate(m, &split.test).map(Some)
        }
    };

    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut timings = Vec::with_capacity(config.iterations + 1);

    // f^(0) on the labeled set
    let clock = Instant::now();
    let initial = train_recording(&split.labeled, &pool, config, 0)?;
    let mut phase = PhaseTimings {
        train_ms: clock.elapsed().as_secs_f64() * 1e3,
        ..PhaseTimings::default()
    };
    let clock = Instant::now();
    let (verdicts, rescued) = if config.dips_at_init {
        // D^(1) = D_train^(1) = r(D_lab, f^(0)); rejected labeled rows leave the pool
        let (v, r) = apply_selector(&mut pool, &initial.trace, &config.selector)?;
        for i in 0..n_lab {
            if !pool.train[i] {
                pool.prov[i] = None;
            }
        }
        (v, r)
    } else {
        (VerdictCounts::default(), 0)
    };
    phase.select_ms = clock.elapsed().as_secs_f64() * 1e3;
    timings.push(phase);
    history.push(IterationRecord {
        iteration: 0,
        trained_on: n_lab,
        test_accuracy: test_acc(&initial.model)?,
        new_pseudo_labels: 0,
        pool: pool.members(),
        train: pool.training_rows(),
        pseudo_labels: Vec::new(),
        pseudo_label_accuracy: None,
        verdicts,
        rescued,
        fallback: false,
    });
    let base_members: Vec<bool> = pool.prov.iter().map(Option::is_some).collect();

    let mut current = initial;
    let mut flex_status = vec![0usize; c];
    for t in 1..=config.iterations {
        let mut phase = PhaseTimings::default();
        let clock = Instant::now();
        let train_set = pool.training_set()?;
        let trained_on = train_set.len();
        let mut fallback = false;
        match train_recording(&train_set, &pool, config, t) {
            Ok(next) => current = next,
            Err(DipsError::DegenerateTraining(reason)) => {
                tracing::warn!(iteration = t, %reason, "degenerate training set, keeping previous model");
                fallback = true;
            }
            Err(e) => return Err(e),
        }
        phase.train_ms = clock.elapsed().as_secs_f64() * 1e3;

        // pseudo-label the unlabeled rows still eligible
        let clock = Instant::now();
        let eligible: Vec<usize> = (0..n_unlab)
            .filter(|&j| config.version == Version::Rebuild || pool.prov[n_lab + j].is_none())
            .collect();
        let batch = if eligible.is_empty() {
            None
        } else {
            Some(pseudo_label(split, &train_set, &eligible, &current.model, config, &flex_status, t)?)
        };
        if config.version == Version::Rebuild {
            for i in n_lab..pool.prov.len() {
                pool.prov[i] = None;
            }
            for i in 0..n_lab {
                if !base_members[i] {
                    pool.prov[i] = None;
                }
            }
        }
        let mut new_labels = 0;
        if let Some(batch) = &batch {
            for e in &batch.entries {
                let j = eligible[e.sample];
                pool.prov[n_lab + j] = Some(SampleProvenance {
                    origin: Origin::PseudoLabeled { iteration: t },
                    current_label: e.class,
                    selected_last_round: false,
                });
                flex_status[e.class] += 1;
                new_labels += 1;
            }
        }
        phase.pseudo_label_ms = clock.elapsed().as_secs_f64() * 1e3;

        let clock = Instant::now();
        for i in 0..pool.prov.len() {
            pool.train[i] = pool.prov[i].is_some();
        }
        let (verdicts, rescued) = if config.dips_at_iters {
            apply_selector(&mut pool, &current.trace, &config.selector)?
        } else {
            (VerdictCounts::default(), 0)
        };
        for i in 0..pool.prov.len() {
            let selected = pool.train[i];
            if let Some(p) = &mut pool.prov[i] {
                p.selected_last_round = selected;
            }
        }
        phase.select_ms = clock.elapsed().as_secs_f64() * 1e3;
        timings.push(phase);

        let pseudo_labels = pool.pseudo_labels();
        let pl_acc = match hidden {
            Some(h) if !pseudo_labels.is_empty() => {
                let hits = pseudo_labels.iter().filter(|&&(j, c)| h[j] == c).count();
                Some(hits as f64 / pseudo_labels.len() as f64)
            }
            _ => None,
        };
        history.push(IterationRecord {
            iteration: t,
            trained_on,
            test_accuracy: test_acc(&current.model)?,
            new_pseudo_labels: new_labels,
            pool: pool.members(),
            train: pool.training_rows(),
            pseudo_labels,
            pseudo_label_accuracy: pl_acc,
            verdicts,
            rescued,
            fallback,
        });
        tracing::debug!(iteration = t, pool = pool.members().len(), new = new_labels, "iteration done");
    }

    Ok(RunOutput {
        model: current.model,
        history,
        timings,
        final_trace: current.trace,
    })
}

/// Select among current pool members; updates the train mask in place.
fn apply_selector(pool: &mut Pool, trace: &DynamicsTrace, config: &SelectorConfig) -> Result<(VerdictCounts, usize)> {
    let members = pool.members();
    let candidates: Vec<Candidate> = members
        .iter()
        .map(|&i| Candidate {
            trace_index: i,
            label: pool.prov[i].expect("member").current_label,
        })
        .collect();
    let selection = select_training_set(&candidates, trace, config)?;
    let mut counts = VerdictCounts::default();
    for (j, &i) in members.iter().enumerate() {
        let keep = selection.mask[j];
        pool.train[i] = keep;
        let labeled = i < pool.n_lab;
        match (labeled, keep) {
            (true, true) => counts.labeled_useful += 1,
            (true, false) => counts.labeled_harmful += 1,
            (false, true) => counts.pseudo_useful += 1,
            (false, false) => counts.pseudo_harmful += 1,
        }
    }
    Ok((counts, selection.rescued.len()))
}

fn pseudo_label(
    split: &Split,
    train_set: &Dataset,
    eligible: &[usize],
    model: &Model,
    config: &PipelineConfig,
    flex_status: &[usize],
    iteration: usize,
) -> Result<PseudoLabelBatch> {
    let x = split.unlabeled.features.select(Axis(0), eligible);
    let probs = model.predict_proba(x.view())?;
    let pl = &config.plabeler;
    match pl.kind {
        PlabelerKind::Greedy => Ok(greedy_select(probs.view(), pl, iteration)),
        PlabelerKind::Ups => {
            let backbone = BackboneConfig {
                bootstrap: true,
                seed: derive(config.seed, Stream::Ensemble, iteration as u64),
                ..config.backbone.clone()
            };
            let ensemble = train_ensemble(train_set, pl.ensemble_size, &backbone)?;
            let u = ensemble_uncertainty(&ensemble, x.view())?;
            ups_select(probs.view(), u.view(), pl, iteration)
        }
        PlabelerKind::Flexmatch => flexmatch_select(probs.view(), flex_status, pl, iteration),
        PlabelerKind::SlaLite => {
            let marginals = derive_class_marginals(&split.labeled, eligible.len())?;
            Ok(sinkhorn_allocate(probs.view(), &marginals, pl, iteration)?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::two_quadrant_split;

    fn small_split(seed: u64) -> Split {
        let mut s = two_quadrant_split(40, 120, 200, seed).unwrap();
        let (noisy, _) = crate::datagen::inject_symmetric_label_noise(s.labeled.labels().unwrap(), 0.2, 2, seed).unwrap();
        s.labeled = s.labeled.with_labels(noisy).unwrap();
        s
    }

    fn quick(mut cfg: PipelineConfig) -> PipelineConfig {
        cfg.backbone.rounds = 20;
        cfg.iterations = 3;
        cfg
    }

    #[test]
    fn evaluate_examples() {
        let split = small_split(1);
        let m = supervised(&split, &BackboneConfig { rounds: 5, ..BackboneConfig::default() }).unwrap();
        let acc = evaluate(&m, &split.test).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(evaluate(&m, &split.test.without_labels()).is_err());
        assert_eq!(accuracy(&[1, 1, 1, 1, 1], &[1, 1, 1, 0, 0]), 0.6);
    }

    #[test]
    fn grow_is_monotone_and_labels_immutable() {
        let split = small_split(2);
        let out = run(&split, &quick(PipelineConfig::default())).unwrap();
        assert_eq!(out.history.len(), 4);
        let mut seen: std::collections::BTreeMap<usize, usize> = Default::default();
        for w in out.history.windows(2) {
            if w[0].iteration >= 1 {
                assert!(w[1].pool.len() >= w[0].pool.len());
            }
        }
        for rec in &out.history {
            assert!(rec.train.iter().all(|i| rec.pool.contains(i)));
            for &(j, c) in &rec.pseudo_labels {
                assert_eq!(*seen.entry(j).or_insert(c), c);
            }
        }
    }

    #[test]
    fn a3_equals_identity_equals_trivial_dips() {
        let split = small_split(3);
        let a3 = PipelineConfig { dips_at_init: false, dips_at_iters: false, ..quick(PipelineConfig::default()) };
        let identity = quick(PipelineConfig::vanilla());
        let trivial = PipelineConfig {
            selector: SelectorConfig {
                tau_conf: 0.0,
                tau_al: crate::selectors::AleatoricThreshold::Fixed(0.26),
                ..SelectorConfig::default()
            },
            ..quick(PipelineConfig::default())
        };
        let h_a3 = run(&split, &a3).unwrap();
        let h_id = run(&split, &identity).unwrap();
        let h_tr = run(&split, &trivial).unwrap();
        let strip = |h: &[IterationRecord]| -> Vec<(Vec<usize>, Vec<usize>, Vec<(usize, usize)>)> {
            h.iter().map(|r| (r.pool.clone(), r.train.clone(), r.pseudo_labels.clone())).collect()
        };
        assert_eq!(strip(&h_a3.history), strip(&h_id.history));
        assert_eq!(strip(&h_a3.history), strip(&h_tr.history));
        assert_eq!(h_a3.model, h_id.model);
        assert_eq!(h_a3.model, h_tr.model);
    }

    #[test]
    fn empty_plabeler_leaves_initial_selection() {
        let split = small_split(4);
        let mut cfg = quick(PipelineConfig::default());
        cfg.iterations = 1;
        cfg.plabeler.tau_p = 1.0 + 1e-9;
        let out = run(&split, &cfg).unwrap();
        assert_eq!(out.history[1].new_pseudo_labels, 0);
        assert_eq!(out.history[1].trained_on, out.history[0].train.len());
    }

    #[test]
    fn rebuild_drops_old_pseudo_labels() {
        let split = small_split(5);
        let cfg = PipelineConfig { version: Version::Rebuild, ..quick(PipelineConfig::vanilla()) };
        let out = run(&split, &cfg).unwrap();
        for rec in &out.history[1..] {
            assert_eq!(rec.pseudo_labels.len(), rec.new_pseudo_labels);
        }
    }

    #[test]
    fn all_plabelers_and_selectors_run() {
        let split = small_split(6);
        for kind in [PlabelerKind::Greedy, PlabelerKind::Ups, PlabelerKind::Flexmatch, PlabelerKind::SlaLite] {
            for sel in [SelectorKind::Dips, SelectorKind::Identity, SelectorKind::SmallLoss, SelectorKind::Fluctuation] {
                let mut cfg = quick(PipelineConfig::default());
                cfg.iterations = 2;
                cfg.plabeler = PlabelerConfig { ensemble_size: 3, ..PlabelerConfig::with_kind(kind) };
                cfg.selector = SelectorConfig::with_kind(sel);
                let out = run(&split, &cfg).unwrap();
                assert_eq!(out.history.len(), 3);
                assert!(out.history.iter().all(|r| r.test_accuracy.is_some()));
            }
        }
    }

    #[test]
    fn pseudo_label_accuracy_metric() {
        let split = small_split(7);
        let out = run(&split, &quick(PipelineConfig::vanilla())).unwrap();
        let acc = pseudo_label_accuracy(&out.history, &split.hidden_labels).unwrap();
        assert_eq!(acc[0], None);
        for (a, r) in acc.iter().zip(&out.history) {
            assert_eq!(*a, r.pseudo_label_accuracy);
        }
        let perfect: Vec<IterationRecord> = out
            .history
            .iter()
            .map(|r| IterationRecord {
                pseudo_labels: r.pseudo_labels.iter().map(|&(j, _)| (j, split.hidden_labels[j])).collect(),
                ..r.clone()
            })
            .collect();
        for a in pseudo_label_accuracy(&perfect, &split.hidden_labels).unwrap().into_iter().flatten() {
            assert_eq!(a, 1.0);
        }
    }

    #[test]
    fn deterministic_history() {
        let split = small_split(8);
        let cfg = quick(PipelineConfig::default());
        assert_eq!(run(&split, &cfg).unwrap().history, run(&split, &cfg).unwrap().history);
    }

    #[test]
    fn single_class_labeled_set_is_rejected() {
        let mut split = small_split(9);
        let n = split.labeled.len();
        split.labeled = split.labeled.with_labels(vec![0; n]).unwrap();
        assert!(run(&split, &quick(PipelineConfig::default())).is_err());
    }
}
