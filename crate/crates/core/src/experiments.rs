//! Seeded experiment harness.
//!
//! An experiment is a grid of settings (noise level, labeled fraction, ...)
//! crossed with methods and seeds. Within a (setting, seed index) every method
//! sees the same split and the same noise realization. Runs execute on a
//! worker pool and are collected in grid order, so output never depends on
//! scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backbone::BackboneConfig;
use crate::datagen::{
    generate_two_moons, inject_symmetric_label_noise, load_csv, split_lab_unlab_test, stratified_prefix,
    two_quadrant_split, Dataset, LabelColumn, Split,
};
use crate::error::{invalid, Result};
use crate::pipeline::{evaluate, run, supervised, PipelineConfig, Version};
use crate::plabelers::{PlabelerConfig, PlabelerKind};
use crate::seed::{derive, Stream};
use crate::selectors::{AleatoricThreshold, SelectorConfig, SelectorKind};

pub const DEFAULT_NOISE_LEVELS: [f64; 8] = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45];
pub const DEFAULT_FRACTIONS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const DEFAULT_PERCENTILES: [f64; 6] = [0.15, 0.25, 0.35, 0.45, 0.55, 0.65];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    NoiseSweep,
    Ablation,
    ThresholdSweep,
    PercentileSweep,
    DataEfficiency,
    VersionCompare,
    TwoMoons,
    CustomCsv,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::NoiseSweep => "noise_sweep",
            Self::Ablation => "ablation",
            Self::ThresholdSweep => "threshold_sweep",
            Self::PercentileSweep => "percentile_sweep",
            Self::DataEfficiency => "data_efficiency",
            Self::VersionCompare => "version_compare",
            Self::TwoMoons => "two_moons",
            Self::CustomCsv => "custom_csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoonsParams {
    pub n_lab_per_class: usize,
    pub n_unlab: usize,
    pub n_test: usize,
    pub std: f64,
}

impl Default for MoonsParams {
    fn default() -> Self {
        Self {
            n_lab_per_class: 100,
            n_unlab: 800,
            n_test: 1000,
            std: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    pub label_column: String,
    pub has_header: bool,
    /// Fraction of rows held out for testing; the rest is split 0.1:0.9 by default.
    pub test_fraction: f64,
    /// Labeled share of the non-test rows.
    pub lab_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub seeds: usize,
    pub base_seed: u64,
    pub template: PipelineConfig,
    pub noise_levels: Vec<f64>,
    pub n_lab: usize,
    pub n_unlab: usize,
    pub n_test: usize,
    /// Also corrupt the hidden ground truth of the unlabeled part.
    pub corrupt_unlabeled: bool,
    pub percentiles: Vec<f64>,
    pub fractions: Vec<f64>,
    /// Noise level of the data-efficiency study.
    pub p_corrupt: f64,
    pub moons: MoonsParams,
    pub csv: Option<CsvSource>,
    pub plabelers: Vec<PlabelerKind>,
}

impl ExperimentSpec {
    /// Pipeline defaults used by the experiments: 100 boosting rounds at the
    /// usual library defaults for depth and step size.
    pub fn default_template() -> PipelineConfig {
        PipelineConfig {
            backbone: BackboneConfig {
                tree_depth: 6,
                learning_rate: 0.3,
                ..BackboneConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seeds: if kind == ExperimentKind::TwoMoons { 10 } else { 20 },
            base_seed: 0,
            template: Self::default_template(),
            noise_levels: DEFAULT_NOISE_LEVELS.to_vec(),
            n_lab: 100,
            n_unlab: 900,
            n_test: 1000,
            corrupt_unlabeled: false,
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            fractions: DEFAULT_FRACTIONS.to_vec(),
            p_corrupt: 0.2,
            moons: MoonsParams::default(),
            csv: None,
            plabelers: vec![
                PlabelerKind::Greedy,
                PlabelerKind::Ups,
                PlabelerKind::Flexmatch,
                PlabelerKind::SlaLite,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(invalid("at least one seed is required"));
        }
        self.template.validate()?;
        let uses_noise = matches!(
            self.kind,
            ExperimentKind::NoiseSweep
                | ExperimentKind::Ablation
                | ExperimentKind::ThresholdSweep
                | ExperimentKind::PercentileSweep
                | ExperimentKind::VersionCompare
        );
        if uses_noise && self.noise_levels.is_empty() {
            return Err(invalid("noise level list is empty"));
        }
        for &p in self.noise_levels.iter().chain([self.p_corrupt].iter()) {
            if !(0.0..0.5).contains(&p) {
                return Err(invalid(format!("noise level {p} outside [0, 0.5)")));
            }
        }
        if self.kind == ExperimentKind::PercentileSweep && self.percentiles.is_empty() {
            return Err(invalid("percentile list is empty"));
        }
        if self.percentiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(invalid("percentiles must lie in [0,1]"));
        }
        if self.kind == ExperimentKind::DataEfficiency {
            if self.fractions.is_empty() {
                return Err(invalid("fraction list is empty"));
            }
            if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                return Err(invalid("fractions must lie in (0,1]"));
            }
        }
        if self.n_lab < 2 || self.n_test == 0 {
            return Err(invalid("n_lab must be >= 2 and n_test >= 1"));
        }
        if self.kind == ExperimentKind::CustomCsv {
            let csv = self.csv.as_ref().ok_or_else(|| invalid("custom_csv needs a dataset path"))?;
            if !(csv.test_fraction > 0.0 && csv.test_fraction < 1.0) {
                return Err(invalid("test_fraction must lie in (0,1)"));
            }
            if !(csv.lab_share > 0.0 && csv.lab_share < 1.0) {
                return Err(invalid("lab_share must lie in (0,1)"));
            }
            if self.plabelers.is_empty() {
                return Err(invalid("pseudo-labeler list is empty"));
            }
        }
        Ok(())
    }
}

/// One (setting, method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub setting: String,
    pub p_corrupt: Option<f64>,
    pub label_fraction: Option<f64>,
    pub method: String,
    pub seed_index: usize,
    pub seed: u64,
    pub test_accuracy: Option<f64>,
    pub pseudo_label_accuracy: Option<f64>,
    pub pseudo_labels: usize,
    pub train_size: usize,
    pub error: Option<String>,
}

/// Mean and standard error of test accuracy over the successful seeds of one
/// (setting, method) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub setting: String,
    pub p_corrupt: Option<f64>,
    pub label_fraction: Option<f64>,
    pub method: String,
    pub n: usize,
    pub failures: usize,
    pub mean: f64,
    pub std_err: f64,
    pub mean_pseudo_label_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: ExperimentSpec,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
    pub report: Value,
}

impl RunResult {
    pub fn aggregate(&self, setting: &str, method: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.setting == setting && a.method == method)
    }

    /// Test accuracies of one group in seed order; failed runs are skipped.
    pub fn accuracies(&self, setting: &str, method: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.setting == setting && r.method == method)
            .filter_map(|r| r.test_accuracy)
            .collect()
    }
}

/// One-sided paired t-test of `a` against `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: Option<f64>,
    /// p-value for the alternative "mean of a - b is below zero".
    pub p_below: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid("paired test needs two equal-length samples of size >= 2"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mean = mean(&diffs);
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        let p_below = if mean < 0.0 { 0.0 } else { 1.0 };
        return Ok(PairedTest {
            n,
            mean_diff: mean,
            t: None,
            p_below,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| invalid(e.to_string()))?;
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t: Some(t),
        p_below: dist.cdf(t),
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation over `sqrt(n)`; zero for fewer than two values.
pub fn std_err(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

#[derive(Debug, Clone)]
enum DataSource {
    Quadrants { p_corrupt: f64 },
    Subsample { p_corrupt: f64, fraction: f64 },
    Moons,
    Csv,
}

#[derive(Debug, Clone)]
struct Setting {
    name: String,
    p_corrupt: Option<f64>,
    label_fraction: Option<f64>,
    source: DataSource,
}

#[derive(Debug, Clone)]
struct Method {
    name: String,
    /// `None` trains on the labeled part only.
    pipeline: Option<PipelineConfig>,
}

fn method(name: impl Into<String>, pipeline: Option<PipelineConfig>) -> Method {
    Method {
        name: name.into(),
        pipeline,
    }
}

fn with_selector(template: &PipelineConfig, kind: SelectorKind) -> PipelineConfig {
    PipelineConfig {
        selector: SelectorConfig {
            kind,
            ..template.selector.clone()
        },
        ..template.clone()
    }
}

fn noise_setting(p: f64) -> Setting {
    Setting {
        name: format!("p_corrupt={p}"),
        p_corrupt: Some(p),
        label_fraction: None,
        source: DataSource::Quadrants { p_corrupt: p },
    }
}

fn plan(spec: &ExperimentSpec) -> (Vec<Setting>, Vec<Method>) {
    let t = &spec.template;
    let vanilla = || with_selector(t, SelectorKind::Identity);
    let dips = || with_selector(t, SelectorKind::Dips);
    let noise_settings = || spec.noise_levels.iter().map(|&p| noise_setting(p)).collect::<Vec<_>>();
    match spec.kind {
        ExperimentKind::NoiseSweep => (
            noise_settings(),
            vec![
                method("supervised", None),
                method("pl", Some(vanilla())),
                method("pl_dips", Some(dips())),
                method("pl_small_loss", Some(with_selector(t, SelectorKind::SmallLoss))),
                method("pl_fluctuation", Some(with_selector(t, SelectorKind::Fluctuation))),
            ],
        ),
        ExperimentKind::Ablation => {
            let variant = |init: bool, iters: bool| PipelineConfig {
                dips_at_init: init,
                dips_at_iters: iters,
                ..dips()
            };
            (
                noise_settings(),
                vec![
                    method("dips", Some(variant(true, true))),
                    method("a1", Some(variant(true, false))),
                    method("a2", Some(variant(false, true))),
                    method("a3", Some(variant(false, false))),
                ],
            )
        }
        ExperimentKind::ThresholdSweep | ExperimentKind::PercentileSweep => {
            let mut methods = Vec::new();
            if spec.kind == ExperimentKind::ThresholdSweep {
                let fixed = |tau_conf: f64, tau_al: f64| {
                    let mut c = dips();
                    c.selector.tau_conf = tau_conf;
                    c.selector.tau_al = AleatoricThreshold::Fixed(tau_al);
                    c
                };
                methods.push(method("default", Some(dips())));
                methods.push(method("aggressive", Some(fixed(0.9, 0.1))));
                methods.push(method("permissive", Some(fixed(0.5, 0.2))));
            }
            for &q in &spec.percentiles {
                let mut c = dips();
                c.selector.conf_percentile = Some(q);
                methods.push(method(format!("percentile={q}"), Some(c)));
            }
            (noise_settings(), methods)
        }
        ExperimentKind::DataEfficiency => (
            spec.fractions
                .iter()
                .map(|&f| Setting {
                    name: format!("fraction={f}"),
                    p_corrupt: Some(spec.p_corrupt),
                    label_fraction: Some(f),
                    source: DataSource::Subsample {
                        p_corrupt: spec.p_corrupt,
                        fraction: f,
                    },
                })
                .collect(),
            vec![
                method("supervised", None),
                method("pl", Some(vanilla())),
                method("pl_dips", Some(dips())),
            ],
        ),
        ExperimentKind::VersionCompare => {
            let rebuild = |c: PipelineConfig| PipelineConfig {
                version: Version::Rebuild,
                ..c
            };
            let grow = |c: PipelineConfig| PipelineConfig {
                version: Version::Grow,
                ..c
            };
            (
                noise_settings(),
                vec![
                    method("supervised", None),
                    method("pl_grow", Some(grow(vanilla()))),
                    method("pl_dips_grow", Some(grow(dips()))),
                    method("pl_rebuild", Some(rebuild(vanilla()))),
                    method("pl_dips_rebuild", Some(rebuild(dips()))),
                ],
            )
        }
        ExperimentKind::TwoMoons => (
            vec![Setting {
                name: "two_moons".into(),
                p_corrupt: None,
                label_fraction: None,
                source: DataSource::Moons,
            }],
            vec![
                method("supervised", None),
                method("pl", Some(vanilla())),
                method("pl_dips", Some(dips())),
            ],
        ),
        ExperimentKind::CustomCsv => {
            let mut methods = vec![method("supervised", None)];
            for &kind in &spec.plabelers {
                let name = serde_json::to_value(kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                let with_plabeler = |c: PipelineConfig| PipelineConfig {
                    plabeler: PlabelerConfig {
                        kind,
                        ..c.plabeler.clone()
                    },
                    ..c
                };
                methods.push(method(format!("{name}"), Some(with_plabeler(vanilla()))));
                methods.push(method(format!("{name}+dips"), Some(with_plabeler(dips()))));
            }
            (
                vec![Setting {
                    name: "custom_csv".into(),
                    p_corrupt: None,
                    label_fraction: None,
                    source: DataSource::Csv,
                }],
                methods,
            )
        }
    }
}

/// Seeds shared by every method at one seed index.
struct SeedPlan {
    data: u64,
    noise: u64,
    subsample: u64,
    pipeline: u64,
}

fn seed_plan(base: u64, index: usize) -> SeedPlan {
    let i = index as u64;
    SeedPlan {
        data: derive(base, Stream::Data, i),
        noise: derive(base, Stream::Noise, i),
        subsample: derive(base, Stream::Subsample, i),
        pipeline: derive(base, Stream::Backbone, i),
    }
}

fn corrupt(split: &mut Split, p: f64, seeds: &SeedPlan, also_unlabeled: bool) -> Result<()> {
    let c = split.class_count();
    let (noisy, _) = inject_symmetric_label_noise(split.labeled.labels()?, p, c, seeds.noise)?;
    split.labeled = split.labeled.with_labels(noisy)?;
    if also_unlabeled && !split.hidden_labels.is_empty() {
        let (noisy, _) = inject_symmetric_label_noise(&split.hidden_labels, p, c, derive(seeds.noise, Stream::Noise, 1))?;
        split.hidden_labels = noisy;
    }
    Ok(())
}

fn build_split(spec: &ExperimentSpec, setting: &Setting, seeds: &SeedPlan, csv: Option<&Dataset>) -> Result<Split> {
    match setting.source {
        DataSource::Quadrants { p_corrupt } => {
            let mut split = two_quadrant_split(spec.n_lab, spec.n_unlab, spec.n_test, seeds.data)?;
            corrupt(&mut split, p_corrupt, seeds, spec.corrupt_unlabeled)?;
            Ok(split)
        }
        DataSource::Subsample { p_corrupt, fraction } => {
            let mut split = two_quadrant_split(spec.n_lab, spec.n_unlab, spec.n_test, seeds.data)?;
            corrupt(&mut split, p_corrupt, seeds, spec.corrupt_unlabeled)?;
            let keep = stratified_prefix(split.labeled.labels()?, split.class_count(), fraction, seeds.subsample)?;
            split.labeled = split.labeled.subset(&keep);
            Ok(split)
        }
        DataSource::Moons => {
            let m = &spec.moons;
            generate_two_moons(m.n_lab_per_class, m.n_unlab, m.n_test, m.std, seeds.data)
        }
        DataSource::Csv => {
            let data = csv.ok_or_else(|| invalid("no CSV dataset loaded"))?;
            let src = spec.csv.as_ref().ok_or_else(|| invalid("no CSV source configured"))?;
            let rest = 1.0 - src.test_fraction;
            split_lab_unlab_test(data, rest * src.lab_share, rest * (1.0 - src.lab_share), seeds.data)
        }
    }
}

fn run_one(spec: &ExperimentSpec, setting: &Setting, method: &Method, seed_index: usize, csv: Option<&Dataset>) -> RunRow {
    let seeds = seed_plan(spec.base_seed, seed_index);
    let mut row = RunRow {
        setting: setting.name.clone(),
        p_corrupt: setting.p_corrupt,
        label_fraction: setting.label_fraction,
        method: method.name.clone(),
        seed_index,
        seed: seeds.pipeline,
        test_accuracy: None,
        pseudo_label_accuracy: None,
        pseudo_labels: 0,
        train_size: 0,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let split = build_split(spec, setting, &seeds, csv)?;
        match &method.pipeline {
            None => {
                let mut backbone = spec.template.backbone.clone();
                backbone.seed = derive(seeds.pipeline, Stream::Backbone, 0);
                let model = supervised(&split, &backbone)?;
                row.test_accuracy = Some(evaluate(&model, &split.test)?);
                row.train_size = split.labeled.len();
            }
            Some(config) => {
                let config = PipelineConfig {
                    seed: seeds.pipeline,
                    ..config.clone()
                };
                let out = run(&split, &config)?;
                let last = out.history.last().expect("history holds iteration 0");
                row.test_accuracy = last.test_accuracy;
                row.pseudo_label_accuracy = last.pseudo_label_accuracy;
                row.pseudo_labels = last.pseudo_labels.len();
                row.train_size = last.trained_on;
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        tracing::warn!(setting = %setting.name, method = %method.name, seed_index, error = %e, "run failed");
        row.error = Some(e.to_string());
    }
    row
}

/// Execute an experiment on `jobs` worker threads (0 = all cores).
pub fn run_experiment(spec: &ExperimentSpec, jobs: usize) -> Result<RunResult> {
    spec.validate()?;
    let csv = match (&spec.kind, &spec.csv) {
        (ExperimentKind::CustomCsv, Some(src)) => {
            let column: LabelColumn = src.label_column.parse().expect("infallible");
            Some(load_csv(&src.path, &column, src.has_header)?.dataset)
        }
        _ => None,
    };
    let (settings, methods) = plan(spec);
    let grid: Vec<(usize, usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..methods.len()).flat_map(move |m| (0..spec.seeds).map(move |i| (s, m, i))))
        .collect();
    tracing::info!(experiment = spec.kind.name(), runs = grid.len(), "starting");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| invalid(e.to_string()))?;
    let rows: Vec<RunRow> = pool.install(|| {
        grid.par_iter()
            .map(|&(s, m, i)| run_one(spec, &settings[s], &methods[m], i, csv.as_ref()))
            .collect()
    });
    let aggregates = aggregate(&rows);
    let mut result = RunResult {
        spec: spec.clone(),
        rows,
        aggregates,
        report: Value::Null,
    };
    result.report = report(&result, &settings, &methods)?;
    tracing::info!(experiment = spec.kind.name(), "finished");
    Ok(result)
}

/// Group rows by (setting, method) in first-appearance order.
pub fn aggregate(rows: &[RunRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.setting.clone(), r.method.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(setting, method)| {
            let group: Vec<&RunRow> = rows.iter().filter(|r| r.setting == setting && r.method == method).collect();
            let acc: Vec<f64> = group.iter().filter_map(|r| r.test_accuracy).collect();
            let pl: Vec<f64> = group.iter().filter_map(|r| r.pseudo_label_accuracy).collect();
            Aggregate {
                p_corrupt: group[0].p_corrupt,
                label_fraction: group[0].label_fraction,
                n: acc.len(),
                failures: group.len() - acc.len(),
                mean: if acc.is_empty() { f64::NAN } else { mean(&acc) },
                std_err: std_err(&acc),
                mean_pseudo_label_accuracy: (!pl.is_empty()).then(|| mean(&pl)),
                setting,
                method,
            }
        })
        .collect()
}

fn paired(result: &RunResult, setting: &str, a: &str, b: &str) -> Value {
    let xa = result.accuracies(setting, a);
    let xb = result.accuracies(setting, b);
    match paired_t_test(&xa, &xb) {
        Ok(t) => json!(t),
        Err(_) => Value::Null,
    }
}

fn group_mean(result: &RunResult, setting: &str, method: &str) -> Option<f64> {
    result.aggregate(setting, method).filter(|a| a.n > 0).map(|a| a.mean)
}

fn report(result: &RunResult, settings: &[Setting], methods: &[Method]) -> Result<Value> {
    let spec = &result.spec;
    let per_setting = |f: &dyn Fn(&Setting) -> Value| -> Value {
        Value::Array(settings.iter().map(f).collect())
    };
    Ok(match spec.kind {
        ExperimentKind::NoiseSweep => per_setting(&|s| {
            let gap = group_mean(result, &s.name, "pl_dips")
                .zip(group_mean(result, &s.name, "pl"))
                .map(|(a, b)| a - b);
            json!({
                "setting": s.name,
                "p_corrupt": s.p_corrupt,
                "pl_dips_minus_pl": gap,
                "pl_dips_vs_pl": paired(result, &s.name, "pl_dips", "pl"),
                "pl_dips_vs_small_loss": paired(result, &s.name, "pl_dips", "pl_small_loss"),
                "pl_dips_vs_fluctuation": paired(result, &s.name, "pl_dips", "pl_fluctuation"),
            })
        }),
        ExperimentKind::Ablation => per_setting(&|s| {
            json!({
                "setting": s.name,
                "p_corrupt": s.p_corrupt,
                "dips_vs_a1": paired(result, &s.name, "dips", "a1"),
                "dips_vs_a2": paired(result, &s.name, "dips", "a2"),
                "a1_vs_a3": paired(result, &s.name, "a1", "a3"),
                "a2_vs_a3": paired(result, &s.name, "a2", "a3"),
            })
        }),
        ExperimentKind::ThresholdSweep | ExperimentKind::PercentileSweep => per_setting(&|s| {
            let mut best: Option<(f64, f64)> = None;
            for &q in &spec.percentiles {
                if let Some(m) = group_mean(result, &s.name, &format!("percentile={q}")) {
                    if best.map_or(true, |(_, b)| m > b) {
                        best = Some((q, m));
                    }
                }
            }
            let mut fixed = serde_json::Map::new();
            for name in ["default", "aggressive", "permissive"] {
                if let Some(a) = result.aggregate(&s.name, name) {
                    fixed.insert(
                        name.into(),
                        json!({"mean": a.mean, "std_err": a.std_err, "mean_pseudo_label_accuracy": a.mean_pseudo_label_accuracy}),
                    );
                }
            }
            json!({
                "setting": s.name,
                "p_corrupt": s.p_corrupt,
                "optimal_percentile": best.map(|b| b.0),
                "optimal_percentile_accuracy": best.map(|b| b.1),
                "fixed_configs": fixed,
            })
        }),
        ExperimentKind::DataEfficiency => {
            let full = settings.iter().find(|s| s.label_fraction == Some(1.0));
            let reference = full.and_then(|s| group_mean(result, &s.name, "pl"));
            let mut deltas = Vec::new();
            let mut crossover = serde_json::Map::new();
            for m in methods {
                let mut first: Option<f64> = None;
                for s in settings {
                    let mean = group_mean(result, &s.name, &m.name);
                    let delta = mean.zip(reference).map(|(a, r)| a - r);
                    if first.is_none() && delta.is_some_and(|d| d >= 0.0) {
                        first = s.label_fraction;
                    }
                    deltas.push(json!({
                        "method": m.name,
                        "label_fraction": s.label_fraction,
                        "mean": mean,
                        "delta_vs_pl_full": delta,
                    }));
                }
                crossover.insert(m.name.clone(), json!(first));
            }
            json!({
                "reference_pl_full": reference,
                "deltas": deltas,
                "crossover_fraction": crossover,
            })
        }
        ExperimentKind::VersionCompare => per_setting(&|s| {
            let diff = |a: &str, b: &str| {
                group_mean(result, &s.name, a)
                    .zip(group_mean(result, &s.name, b))
                    .map(|(x, y)| x - y)
            };
            json!({
                "setting": s.name,
                "p_corrupt": s.p_corrupt,
                "pl_grow_minus_pl_rebuild": diff("pl_grow", "pl_rebuild"),
                "pl_rebuild_minus_supervised": diff("pl_rebuild", "supervised"),
                "dips_minus_pl_grow": diff("pl_dips_grow", "pl_grow"),
                "dips_minus_pl_rebuild": diff("pl_dips_rebuild", "pl_rebuild"),
            })
        }),
        ExperimentKind::TwoMoons => {
            let s = &settings[0].name;
            let diff = |a: &str, b: &str| {
                group_mean(result, s, a)
                    .zip(group_mean(result, s, b))
                    .map(|(x, y)| x - y)
            };
            json!({
                "pl_dips_minus_pl": diff("pl_dips", "pl"),
                "pl_minus_supervised": diff("pl", "supervised"),
            })
        }
        ExperimentKind::CustomCsv => {
            let s = &settings[0].name;
            // variance in squared percentage points, averaged over pseudo-labelers
            let avg_var = |dips: bool| -> Option<f64> {
                let vars: Vec<f64> = methods
                    .iter()
                    .filter(|m| m.pipeline.is_some() && m.name.ends_with("+dips") == dips)
                    .map(|m| {
                        let pct: Vec<f64> = result.accuracies(s, &m.name).iter().map(|a| 100.0 * a).collect();
                        sample_variance(&pct)
                    })
                    .collect();
                (!vars.is_empty()).then(|| mean(&vars))
            };
            json!({
                "average_variance_vanilla": avg_var(false),
                "average_variance_dips": avg_var(true),
            })
        }
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Long-format table, one line per run.
pub fn rows_to_csv(rows: &[RunRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "setting",
        "p_corrupt",
        "label_fraction",
        "method",
        "seed_index",
        "seed",
        "test_accuracy",
        "pseudo_label_accuracy",
        "pseudo_labels",
        "train_size",
        "error",
    ])?;
    for r in rows {
        w.write_record([
            r.setting.clone(),
            opt(r.p_corrupt),
            opt(r.label_fraction),
            r.method.clone(),
            r.seed_index.to_string(),
            r.seed.to_string(),
            opt(r.test_accuracy),
            opt(r.pseudo_label_accuracy),
            r.pseudo_labels.to_string(),
            r.train_size.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Summary document: spec echo, aggregates and the experiment report.
pub fn summary_json(result: &RunResult) -> Result<String> {
    let doc = json!({
        "experiment": result.spec.kind.name(),
        "spec": result.spec,
        "aggregates": result.aggregates,
        "report": result.report,
    });
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Write `<name>_runs.csv` and `<name>_summary.json`; returns both paths.
pub fn write_outputs(result: &RunResult, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let name = result.spec.kind.name();
    let runs = out_dir.join(format!("{name}_runs.csv"));
    let summary = out_dir.join(format!("{name}_summary.json"));
    fs::write(&runs, rows_to_csv(&result.rows)?)?;
    let mut text = summary_json(result)?;
    text.push('\n');
    fs::write(&summary, text)?;
    Ok((runs, summary))
}

/// Human-readable table of aggregates for logs.
pub fn format_aggregates(aggregates: &[Aggregate]) -> String {
    let mut out = String::new();
    for a in aggregates {
        let _ = writeln!(
            out,
            "{:<22} {:<18} n={:<3} acc={:.4} ± {:.4}",
            a.setting, a.method, a.n, a.mean, a.std_err
        );
    }
    out
}
