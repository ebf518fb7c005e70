//! Iteratively trained probabilistic classifiers.
//!
//! Every backbone reports its class probabilities on a fixed probe set after
//! each checkpoint (a boosting round or an SGD epoch). Those matrices are what
//! the learning-dynamics trace consumes.

pub mod gbdt;
pub mod sgd;

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{invalid, DipsError, Result};
use crate::seed::rng;

use gbdt::{GbdtModel, TreeParams};
use sgd::{Mlp, Network, SoftmaxLinear};

/// Lower clip applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    GradientBoostedTrees,
    SgdLinear,
    SgdMlp,
}

impl std::str::FromStr for BackboneKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gradient_boosted_trees" | "gbdt" | "trees" => Ok(Self::GradientBoostedTrees),
            "sgd_linear" | "linear" => Ok(Self::SgdLinear),
            "sgd_mlp" | "mlp" => Ok(Self::SgdMlp),
            other => Err(format!("unknown backbone {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Boosting rounds or epochs; one checkpoint each.
    pub rounds: usize,
    pub learning_rate: f64,
    pub tree_depth: usize,
    /// L2 penalty on leaf weights.
    pub tree_l2: f64,
    /// Minimum hessian mass per child.
    pub min_child_weight: f64,
    pub hidden_width: usize,
    pub batch_size: usize,
    /// Train on a bootstrap resample of the training set.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::GradientBoostedTrees,
            rounds: 100,
            learning_rate: 0.1,
            tree_depth: 3,
            tree_l2: 1.0,
            min_child_weight: 1.0,
            hidden_width: 16,
            batch_size: 32,
            bootstrap: false,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn sgd_linear() -> Self {
        Self {
            kind: BackboneKind::SgdLinear,
            learning_rate: 0.5,
            ..Self::default()
        }
    }

    pub fn sgd_mlp() -> Self {
        Self {
            kind: BackboneKind::SgdMlp,
            learning_rate: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("rounds must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be finite and positive"));
        }
        match self.kind {
            BackboneKind::GradientBoostedTrees => {
                if self.tree_depth == 0 {
                    return Err(invalid("tree_depth must be >= 1"));
                }
                if !(self.tree_l2 >= 0.0 && self.min_child_weight >= 0.0) {
                    return Err(invalid("tree_l2 and min_child_weight must be >= 0"));
                }
            }
            BackboneKind::SgdLinear => {
                if self.batch_size == 0 {
                    return Err(invalid("batch_size must be >= 1"));
                }
            }
            BackboneKind::SgdMlp => {
                if self.batch_size == 0 || self.hidden_width == 0 {
                    return Err(invalid("batch_size and hidden_width must be >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// Receives the probe-set probabilities after every checkpoint.
pub trait CheckpointObserver {
    /// `checkpoint` runs from 1 to E.
    fn observe(&mut self, checkpoint: usize, probs: &Array2<f64>) -> Result<()>;
}

impl<F: FnMut(usize, &Array2<f64>)> CheckpointObserver for F {
    fn observe(&mut self, checkpoint: usize, probs: &Array2<f64>) -> Result<()> {
        self(checkpoint, probs);
        Ok(())
    }
}

/// Observer that discards everything.
pub struct Discard;

impl CheckpointObserver for Discard {
    fn observe(&mut self, _: usize, _: &Array2<f64>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelParams {
    Trees(GbdtModel),
    Linear(SoftmaxLinear),
    Mlp(Mlp),
}

/// A fitted classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: BackboneKind,
    pub class_count: usize,
    pub n_features: usize,
    pub seed: u64,
    pub params: ModelParams,
}

const MODEL_FORMAT: &str = "dips-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelEnvelope {
    format: String,
    version: u32,
    model: Model,
}

impl Model {
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_features {
            return Err(DipsError::ShapeMismatch {
                expected: format!("{} columns", self.n_features),
                got: format!("{} columns", x.ncols()),
            });
        }
        Ok(match &self.params {
            ModelParams::Trees(m) => gbdt::scores_to_proba(&m.raw_scores(x, m.rounds.len()), self.class_count),
            ModelParams::Linear(net) => sgd::softmax(&net.logits(x)),
            ModelParams::Mlp(net) => sgd::softmax(&net.logits(x)),
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(x)?))
    }

    /// Tree model restricted to its first `rounds` boosting rounds; `0` leaves
    /// only the class prior.
    pub fn truncated(&self, rounds: usize) -> Result<Model> {
        match &self.params {
            ModelParams::Trees(m) => Ok(Model {
                params: ModelParams::Trees(m.truncated(rounds)),
                ..self.clone()
            }),
            _ => Err(invalid("only tree models can be truncated")),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelEnvelope {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Model> {
        let env: ModelEnvelope = serde_json::from_str(s)?;
        if env.format != MODEL_FORMAT || env.version != MODEL_VERSION {
            return Err(invalid(format!(
                "unsupported model blob {} v{}",
                env.format, env.version
            )));
        }
        Ok(env.model)
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn bootstrap_indices<R: Rng>(labels: &[usize], rng: &mut R) -> Vec<usize> {
    let n = labels.len();
    // a resample holding a single class cannot be trained on; redraw a few times
    for _ in 0..32 {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let classes: BTreeSet<usize> = idx.iter().map(|&i| labels[i]).collect();
        if classes.len() >= 2 {
            return idx;
        }
    }
    (0..n).collect()
}

/// Train a fresh model, reporting probe probabilities at each checkpoint.
///
/// The returned model is the last checkpoint.
pub fn train_with_checkpoints(
    train: &Dataset,
    probe: ArrayView2<f64>,
    config: &BackboneConfig,
    observer: &mut dyn CheckpointObserver,
) -> Result<Model> {
    config.validate()?;
    let labels = train.labels()?;
    if train.is_empty() {
        return Err(DipsError::DegenerateTraining("empty training set".into()));
    }
    if probe.nrows() == 0 {
        return Err(invalid("probe set is empty"));
    }
    if probe.ncols() != train.n_features() {
        return Err(DipsError::ShapeMismatch {
            expected: format!("{} probe columns", train.n_features()),
            got: format!("{} probe columns", probe.ncols()),
        });
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(DipsError::DegenerateTraining(format!(
            "training set holds a single class ({:?})",
            classes.iter().next()
        )));
    }

    let mut rng = rng(config.seed);
    let (x, y): (Array2<f64>, Vec<usize>) = if config.bootstrap {
        let idx = bootstrap_indices(labels, &mut rng);
        (
            train.features.select(Axis(0), &idx),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    } else {
        (train.features.clone(), labels.to_vec())
    };

    let c = train.class_count;
    let params = match config.kind {
        BackboneKind::GradientBoostedTrees => ModelParams::Trees(fit_trees(&x, &y, c, probe, config, observer)?),
        BackboneKind::SgdLinear => {
            let net = SoftmaxLinear::zeros(x.ncols(), c);
            ModelParams::Linear(fit_sgd(net, &x, &y, probe, config, &mut rng, observer)?)
        }
        BackboneKind::SgdMlp => {
            let net = Mlp::init(x.ncols(), config.hidden_width, c, &mut rng);
            ModelParams::Mlp(fit_sgd(net, &x, &y, probe, config, &mut rng, observer)?)
        }
    };
    Ok(Model {
        kind: config.kind,
        class_count: c,
        n_features: x.ncols(),
        seed: config.seed,
        params,
    })
}

fn fit_trees(
    x: &Array2<f64>,
    y: &[usize],
    class_count: usize,
    probe: ArrayView2<f64>,
    config: &BackboneConfig,
    observer: &mut dyn CheckpointObserver,
) -> Result<GbdtModel> {
    let params = TreeParams {
        max_depth: config.tree_depth,
        learning_rate: config.learning_rate,
        l2: config.tree_l2,
        min_child_weight: config.min_child_weight,
    };
    let mut model = GbdtModel::from_prior(y, class_count);
    let heads = model.heads();
    let sorted = gbdt::presort(x.view());
    let mut train_scores = model.raw_scores(x.view(), 0);
    let mut probe_scores = model.raw_scores(probe, 0);
    let n = y.len();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for round in 1..=config.rounds {
        let mut trees = Vec::with_capacity(heads);
        for h in 0..heads {
            gbdt::logistic_grad_hess(&train_scores, y, h, &mut grad, &mut hess);
            let tree = gbdt::grow_tree(x.view(), &sorted, &grad, &hess, &params);
            trees.push(tree);
        }
        for (h, tree) in trees.iter().enumerate() {
            for (i, row) in x.rows().into_iter().enumerate() {
                train_scores[[i, h]] += tree.predict_row(row.as_slice().expect("standard layout"));
            }
            for (i, row) in probe.rows().into_iter().enumerate() {
                let owned;
                let slice = match row.as_slice() {
                    Some(s) => s,
                    None => {
                        owned = row.to_vec();
                        &owned
                    }
                };
                probe_scores[[i, h]] += tree.predict_row(slice);
            }
        }
        model.rounds.push(trees);
        if !gbdt::training_loss(&train_scores, y).is_finite() {
            return Err(DipsError::NonFiniteLoss { checkpoint: round });
        }
        observer.observe(round, &gbdt::scores_to_proba(&probe_scores, class_count))?;
    }
    Ok(model)
}

fn fit_sgd<N: Network, R: Rng>(
    mut net: N,
    x: &Array2<f64>,
    y: &[usize],
    probe: ArrayView2<f64>,
    config: &BackboneConfig,
    rng: &mut R,
    observer: &mut dyn CheckpointObserver,
) -> Result<N> {
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.rounds {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let bx = x.select(Axis(0), batch);
            let by: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            loss_sum += sgd::sgd_step(&mut net, bx.view(), &by, config.learning_rate) * batch.len() as f64;
        }
        if !loss_sum.is_finite() {
            return Err(DipsError::NonFiniteLoss { checkpoint: epoch });
        }
        observer.observe(epoch, &sgd::softmax(&net.logits(probe)))?;
    }
    Ok(net)
}

/// Seed-varied models trained on the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: Vec<Model>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn member_probs(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.members.iter().map(|m| m.predict_proba(x)).collect()
    }

    /// Mean member probability.
    pub fn mean_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let probs = self.member_probs(x)?;
        let k = probs.len() as f64;
        let mut mean = Array2::zeros(probs[0].raw_dim());
        for p in &probs {
            mean += p;
        }
        Ok(mean / k)
    }
}

/// Train `k` members with seeds `seed, seed+1, ..., seed+k-1`.
///
/// Members train in parallel; the result does not depend on scheduling.
pub fn train_ensemble(train: &Dataset, k: usize, config: &BackboneConfig) -> Result<Ensemble> {
    if k < 2 {
        return Err(invalid("ensemble size must be >= 2"));
    }
    let members = (0..k as u64)
        .into_par_iter()
        .map(|m| {
            let cfg = BackboneConfig {
                seed: config.seed.wrapping_add(m),
                ..config.clone()
            };
            train_with_checkpoints(train, train.features.view(), &cfg, &mut Discard)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { members })
}

/// Population standard deviation over members of each class probability.
pub fn ensemble_uncertainty(ensemble: &Ensemble, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if ensemble.is_empty() {
        return Err(invalid("empty ensemble"));
    }
    let probs = ensemble.member_probs(x)?;
    Ok(population_std(&probs))
}

pub(crate) fn population_std(probs: &[Array2<f64>]) -> Array2<f64> {
    let k = probs.len() as f64;
    let mut mean = Array2::<f64>::zeros(probs[0].raw_dim());
    for p in probs {
        mean += p;
    }
    mean /= k;
    let mut var = Array2::<f64>::zeros(mean.raw_dim());
    for p in probs {
        let d = p - &mean;
        var += &(&d * &d);
    }
    (var / k).mapv(|v| v.max(0.0).sqrt().min(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_two_quadrants;
    use ndarray::array;

    fn check_simplex(p: &Array2<f64>) {
        for row in p.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() <= 1e-9, "row sum {s}");
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    fn multiclass(seed: u64) -> Dataset {
        let mut r = rng(seed);
        let n = 90;
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let angle = c as f64 * 2.1;
            x[[i, 0]] = angle.cos() + 0.3 * r.random::<f64>();
            x[[i, 1]] = angle.sin() + 0.3 * r.random::<f64>();
            y.push(c);
        }
        Dataset::new(x, Some(y), 3).unwrap()
    }

    #[test]
    fn observer_called_e_times_with_simplex_rows() {
        let train = generate_two_quadrants(60, 1).unwrap();
        let probe = generate_two_quadrants(25, 2).unwrap();
        for cfg in [
            BackboneConfig { rounds: 7, ..BackboneConfig::default() },
            BackboneConfig { rounds: 7, ..BackboneConfig::sgd_linear() },
            BackboneConfig { rounds: 7, ..BackboneConfig::sgd_mlp() },
        ] {
            let mut calls = Vec::new();
            let model = train_with_checkpoints(&train, probe.features.view(), &cfg, &mut |e: usize, p: &Array2<f64>| {
                assert_eq!(p.dim(), (25, 2));
                check_simplex(p);
                calls.push((e, p.clone()));
            })
            .unwrap();
            assert_eq!(calls.iter().map(|c| c.0).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
            let final_p = model.predict_proba(probe.features.view()).unwrap();
            let last = &calls.last().unwrap().1;
            for (a, b) in final_p.iter().zip(last.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_checkpoint_matches_final_prediction() {
        let train = generate_two_quadrants(40, 3).unwrap();
        let cfg = BackboneConfig { rounds: 1, ..BackboneConfig::default() };
        let mut seen = Vec::new();
        let model = train_with_checkpoints(&train, train.features.view(), &cfg, &mut |_: usize, p: &Array2<f64>| {
            seen.push(p.clone())
        })
        .unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0], model.predict_proba(train.features.view()).unwrap());
    }

    #[test]
    fn deterministic_checkpoint_streams() {
        let train = generate_two_quadrants(50, 4).unwrap();
        for cfg in [
            BackboneConfig { rounds: 5, seed: 9, ..BackboneConfig::default() },
            BackboneConfig { rounds: 5, seed: 9, ..BackboneConfig::sgd_mlp() },
        ] {
            let run = || {
                let mut s = Vec::new();
                train_with_checkpoints(&train, train.features.view(), &cfg, &mut |_: usize, p: &Array2<f64>| {
                    s.push(p.clone())
                })
                .unwrap();
                s
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn separable_data_is_fit() {
        let train = generate_two_quadrants(200, 5).unwrap();
        let model = train_with_checkpoints(&train, train.features.view(), &BackboneConfig::default(), &mut Discard).unwrap();
        let pred = model.predict(train.features.view()).unwrap();
        let acc = pred.iter().zip(train.labels().unwrap()).filter(|(a, b)| a == b).count() as f64 / 200.0;
        assert!(acc >= 0.99);
    }

    #[test]
    fn multiclass_trees_and_mlp() {
        let train = multiclass(2);
        for cfg in [BackboneConfig::default(), BackboneConfig::sgd_mlp(), BackboneConfig::sgd_linear()] {
            let model = train_with_checkpoints(&train, train.features.view(), &cfg, &mut Discard).unwrap();
            let p = model.predict_proba(train.features.view()).unwrap();
            check_simplex(&p);
            let pred = argmax_rows(&p);
            let acc = pred.iter().zip(train.labels().unwrap()).filter(|(a, b)| a == b).count() as f64 / 90.0;
            assert!(acc > 0.9, "{:?}: {acc}", cfg.kind);
        }
    }

    #[test]
    fn prior_only_tree_model_predicts_class_prior() {
        let mut train = generate_two_quadrants(50, 6).unwrap();
        let labels: Vec<usize> = (0..50).map(|i| usize::from(i % 5 < 2)).collect();
        train = train.with_labels(labels.clone()).unwrap();
        let model = train_with_checkpoints(&train, train.features.view(), &BackboneConfig::default(), &mut Discard).unwrap();
        let prior = model.truncated(0).unwrap();
        let ones = labels.iter().filter(|&&l| l == 1).count() as f64 / 50.0;
        let p = prior.predict_proba(array![[0.3, 0.4], [-0.5, -0.5]].view()).unwrap();
        for row in p.rows() {
            assert!((row[1] - ones).abs() < 1e-12);
            assert!((row[0] - (1.0 - ones)).abs() < 1e-12);
        }
    }

    #[test]
    fn boosting_loss_is_non_increasing() {
        let train = generate_two_quadrants(80, 7).unwrap();
        let (noisy, _) = crate::datagen::inject_symmetric_label_noise(train.labels().unwrap(), 0.3, 2, 1).unwrap();
        let train = train.with_labels(noisy).unwrap();
        let model = train_with_checkpoints(&train, train.features.view(), &BackboneConfig::default(), &mut Discard).unwrap();
        let ModelParams::Trees(m) = &model.params else { unreachable!() };
        let y = train.labels().unwrap();
        let mut prev = f64::INFINITY;
        for e in 0..=m.rounds.len() {
            let loss = gbdt::training_loss(&m.raw_scores(train.features.view(), e), y);
            assert!(loss <= prev + 1e-12, "round {e}: {loss} > {prev}");
            prev = loss;
        }
    }

    #[test]
    fn errors() {
        let train = generate_two_quadrants(20, 8).unwrap();
        let single = train.with_labels(vec![1; 20]).unwrap();
        assert!(matches!(
            train_with_checkpoints(&single, train.features.view(), &BackboneConfig::default(), &mut Discard),
            Err(DipsError::DegenerateTraining(_))
        ));
        let bad = BackboneConfig { rounds: 0, ..BackboneConfig::default() };
        assert!(train_with_checkpoints(&train, train.features.view(), &bad, &mut Discard).is_err());
        let model = train_with_checkpoints(&train, train.features.view(), &BackboneConfig::default(), &mut Discard).unwrap();
        assert!(model.predict_proba(Array2::zeros((2, 3)).view()).is_err());

        let diverge = BackboneConfig { learning_rate: 1e300, rounds: 3, ..BackboneConfig::sgd_linear() };
        let big = train.with_labels(train.labels().unwrap().to_vec()).unwrap();
        let mut big = big;
        big.features.mapv_inplace(|v| v * 1e10);
        assert!(matches!(
            train_with_checkpoints(&big, big.features.view(), &diverge, &mut Discard),
            Err(DipsError::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let train = multiclass(4);
        for cfg in [BackboneConfig { rounds: 10, ..BackboneConfig::default() }, BackboneConfig { rounds: 5, ..BackboneConfig::sgd_mlp() }] {
            let model = train_with_checkpoints(&train, train.features.view(), &cfg, &mut Discard).unwrap();
            let back = Model::from_json(&model.to_json().unwrap()).unwrap();
            assert_eq!(
                model.predict_proba(train.features.view()).unwrap(),
                back.predict_proba(train.features.view()).unwrap()
            );
        }
        assert!(Model::from_json(r#"{"format":"other","version":1,"model":null}"#).is_err());
    }

    #[test]
    fn ensemble_members_and_uncertainty() {
        let train = generate_two_quadrants(100, 9).unwrap();
        let (noisy, _) = crate::datagen::inject_symmetric_label_noise(train.labels().unwrap(), 0.2, 2, 3).unwrap();
        let train = train.with_labels(noisy).unwrap();
        let cfg = BackboneConfig { rounds: 20, bootstrap: true, seed: 40, ..BackboneConfig::default() };
        let ens = train_ensemble(&train, 10, &cfg).unwrap();
        assert_eq!(ens.len(), 10);
        assert_eq!(ens.members.iter().map(|m| m.seed).collect::<Vec<_>>(), (40..50).collect::<Vec<_>>());
        let probe = generate_two_quadrants(50, 10).unwrap();
        let probs: Vec<_> = ens.members.iter().map(|m| m.predict_proba(probe.features.view()).unwrap()).collect();
        assert!(probs.windows(2).any(|w| w[0] != w[1]));

        let mean = ens.mean_proba(probe.features.view()).unwrap();
        for ((i, k), &v) in mean.indexed_iter() {
            let lo = probs.iter().map(|p| p[[i, k]]).fold(f64::INFINITY, f64::min);
            let hi = probs.iter().map(|p| p[[i, k]]).fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
        }
        let u = ensemble_uncertainty(&ens, probe.features.view()).unwrap();
        assert!(u.iter().all(|&v| (0.0..=0.5).contains(&v)));

        let same = train_ensemble(&train, 2, &BackboneConfig { bootstrap: false, rounds: 10, ..BackboneConfig::default() }).unwrap();
        assert_eq!(
            same.members[0].predict_proba(probe.features.view()).unwrap(),
            same.members[1].predict_proba(probe.features.view()).unwrap()
        );
        let zero = ensemble_uncertainty(&same, probe.features.view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(train_ensemble(&train, 1, &cfg).is_err());
    }

    #[test]
    fn std_two_point_extreme_and_brute_force() {
        let a = array![[0.0, 1.0]];
        let b = array![[1.0, 0.0]];
        let s = population_std(&[a, b]);
        assert_eq!(s, array![[0.5, 0.5]]);

        let mut r = rng(12);
        let mats: Vec<Array2<f64>> = (0..3)
            .map(|_| {
                let mut m = Array2::from_shape_fn((5, 2), |_| r.random::<f64>());
                for mut row in m.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                m
            })
            .collect();
        let got = population_std(&mats);
        for i in 0..5 {
            for k in 0..2 {
                let vals: Vec<f64> = mats.iter().map(|m| m[[i, k]]).collect();
                let mean = vals.iter().sum::<f64>() / 3.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
                assert!((got[[i, k]] - var.sqrt()).abs() < 1e-15);
            }
        }
    }
}
