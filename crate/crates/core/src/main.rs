use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use dips::backbone::{BackboneConfig, BackboneKind};
use dips::datagen::{inject_symmetric_label_noise, load_csv, split_lab_unlab_test, two_quadrant_split, write_label_dictionary, LabelColumn};
use dips::experiments::{
    format_aggregates, run_experiment, write_outputs, CsvSource, ExperimentKind, ExperimentSpec, MoonsParams,
};
use dips::pipeline::{run, PipelineConfig, Version};
use dips::plabelers::{PlabelerConfig, PlabelerKind};
use dips::seed::{derive, Stream};
use dips::selectors::{AleatoricThreshold, SelectorConfig, SelectorKind};
use dips::DipsError;

/// Pseudo-labeling with learning-dynamics based data selection.
///
/// Every flag can also be set through an environment variable `DIPS_<FLAG>`
/// (upper case, dashes as underscores) or through `--config <file.toml>`
/// whose keys are the long flag names. Command line beats environment,
/// environment beats the config file.
#[derive(Parser, Debug)]
#[command(name = "dips", version)]
struct Cli {
    /// TOML file with `flag-name = value` entries.
    #[arg(long, global = true, env = "DIPS_CONFIG")]
    config: Option<PathBuf>,

    /// Log level for the stderr event stream.
    #[arg(long, global = true, env = "DIPS_LOG_LEVEL", default_value = "info")]
    log_level: tracing::Level,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test accuracy of supervised, PL and PL with each selector across label-noise levels.
    NoiseSweep(NoiseCmd),
    /// DIPS at initialization and/or during iterations (DIPS, A1, A2, A3).
    Ablation(NoiseCmd),
    /// Fixed threshold configurations and confidence-percentile thresholds.
    ThresholdSweep(ThresholdCmd),
    /// Confidence-percentile thresholds only.
    PercentileSweep(ThresholdCmd),
    /// Accuracy against the size of nested labeled subsets.
    DataEfficiency(DataEfficiencyCmd),
    /// Growing versus rebuilt pseudo-label sets.
    VersionCompare(NoiseCmd),
    /// Clean-label two moons.
    TwoMoons(MoonsCmd),
    /// Pseudo-labeler grid with and without DIPS on a user CSV.
    RunCsv(CsvCmd),
    /// A single pipeline run with its per-iteration history.
    Run(SingleRunCmd),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Number of paired seeds [default: 20, two-moons 10].
    #[arg(long, env = "DIPS_SEEDS")]
    seeds: Option<usize>,
    /// Base seed from which every per-run seed is derived.
    #[arg(long, env = "DIPS_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "DIPS_OUT_DIR", default_value = "results")]
    out_dir: PathBuf,
    /// Worker threads, 0 for all cores. Results do not depend on it.
    #[arg(long, env = "DIPS_JOBS", default_value_t = 0)]
    jobs: usize,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// Pseudo-labeling iterations T.
    #[arg(long, env = "DIPS_ITERATIONS", default_value_t = 5)]
    iterations: usize,
    /// greedy, ups, flexmatch or sla_lite.
    #[arg(long, env = "DIPS_PLABELER", default_value = "greedy")]
    plabeler: PlabelerKind,
    #[arg(long, env = "DIPS_TAU_P", default_value_t = 0.8)]
    tau_p: f64,
    #[arg(long, env = "DIPS_KAPPA_P", default_value_t = 0.2)]
    kappa_p: f64,
    #[arg(long, env = "DIPS_ENSEMBLE_SIZE", default_value_t = 10)]
    ensemble_size: usize,
    #[arg(long, env = "DIPS_FLEX_BASE_TAU", default_value_t = 0.9)]
    flex_base_tau: f64,
    #[arg(long, env = "DIPS_SINKHORN_EPSILON", default_value_t = 0.05)]
    sinkhorn_epsilon: f64,
    #[arg(long, env = "DIPS_SINKHORN_ITERS", default_value_t = 500)]
    sinkhorn_iters: usize,
    #[arg(long, env = "DIPS_SINKHORN_TOLERANCE", default_value_t = 1e-6)]
    sinkhorn_tolerance: f64,
    #[arg(long, env = "DIPS_TAU_CONF", default_value_t = 0.8)]
    tau_conf: f64,
    /// adaptive, adaptive_from_min or fixed.
    #[arg(long, env = "DIPS_TAU_AL_POLICY", default_value = "adaptive")]
    tau_al_policy: String,
    /// Factor for the adaptive policies, cutoff for the fixed one.
    #[arg(long, env = "DIPS_TAU_AL", default_value_t = 0.75)]
    tau_al: f64,
    /// Keep the aleatoric condition even when no candidate passes it.
    #[arg(long, env = "DIPS_STRICT_AL_GATE", action = ArgAction::SetTrue)]
    strict_al_gate: bool,
    #[arg(long, env = "DIPS_KEEP_FRACTION", default_value_t = 0.8)]
    keep_fraction: f64,
    #[arg(long, env = "DIPS_FLUCTUATION_QUANTILE", default_value_t = 0.8)]
    fluctuation_quantile: f64,
    /// Score fluctuation without the confidence smoothing term.
    #[arg(long, env = "DIPS_NO_SMOOTHING", action = ArgAction::SetTrue)]
    no_smoothing: bool,
    /// grow or rebuild.
    #[arg(long, env = "DIPS_VERSION", default_value = "grow")]
    version: Version,
    /// Fraction of early checkpoints excluded from the dynamics.
    #[arg(long, env = "DIPS_DYNAMICS_SKIP_FRACTION", default_value_t = 0.0)]
    dynamics_skip_fraction: f64,
    /// gradient_boosted_trees, sgd_linear or sgd_mlp.
    #[arg(long, env = "DIPS_BACKBONE", default_value = "gradient_boosted_trees")]
    backbone: BackboneKind,
    /// Boosting rounds or epochs.
    #[arg(long, env = "DIPS_ROUNDS", default_value_t = 100)]
    rounds: usize,
    #[arg(long, env = "DIPS_LEARNING_RATE", default_value_t = 0.3)]
    learning_rate: f64,
    #[arg(long, env = "DIPS_TREE_DEPTH", default_value_t = 6)]
    tree_depth: usize,
    #[arg(long, env = "DIPS_TREE_L2", default_value_t = 1.0)]
    tree_l2: f64,
    #[arg(long, env = "DIPS_MIN_CHILD_WEIGHT", default_value_t = 1.0)]
    min_child_weight: f64,
    #[arg(long, env = "DIPS_HIDDEN_WIDTH", default_value_t = 16)]
    hidden_width: usize,
    #[arg(long, env = "DIPS_BATCH_SIZE", default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args, Debug, Clone)]
struct QuadrantArgs {
    #[arg(long, env = "DIPS_N_LAB", default_value_t = 100)]
    n_lab: usize,
    #[arg(long, env = "DIPS_N_UNLAB", default_value_t = 900)]
    n_unlab: usize,
    #[arg(long, env = "DIPS_N_TEST", default_value_t = 1000)]
    n_test: usize,
    /// Also corrupt the hidden labels of the unlabeled part.
    #[arg(long, env = "DIPS_CORRUPT_UNLABELED", action = ArgAction::SetTrue)]
    corrupt_unlabeled: bool,
}

#[derive(Args, Debug)]
struct NoiseCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: QuadrantArgs,
    /// Comma-separated corruption proportions.
    #[arg(long, env = "DIPS_NOISE_LEVELS", value_delimiter = ',')]
    noise_levels: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ThresholdCmd {
    #[command(flatten)]
    noise: NoiseCmd,
    /// Comma-separated confidence percentiles.
    #[arg(long, env = "DIPS_PERCENTILES", value_delimiter = ',')]
    percentiles: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct DataEfficiencyCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: QuadrantArgs,
    /// Comma-separated labeled fractions.
    #[arg(long, env = "DIPS_FRACTIONS", value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long, env = "DIPS_P_CORRUPT", default_value_t = 0.2)]
    p_corrupt: f64,
}

#[derive(Args, Debug)]
struct MoonsCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "DIPS_N_LAB_PER_CLASS", default_value_t = 100)]
    n_lab_per_class: usize,
    #[arg(long, env = "DIPS_N_UNLAB", default_value_t = 800)]
    n_unlab: usize,
    #[arg(long, env = "DIPS_N_TEST", default_value_t = 1000)]
    n_test: usize,
    #[arg(long, env = "DIPS_STD", default_value_t = 0.4)]
    std: f64,
}

#[derive(Args, Debug, Clone)]
struct CsvArgs {
    /// Path of the CSV file.
    #[arg(long, env = "DIPS_DATA")]
    data: PathBuf,
    /// Label column, by header name or zero-based index.
    #[arg(long, env = "DIPS_LABEL_COLUMN")]
    label_column: String,
    /// The first line is data, not a header.
    #[arg(long, env = "DIPS_NO_HEADER", action = ArgAction::SetTrue)]
    no_header: bool,
    /// Held-out test share.
    #[arg(long, env = "DIPS_TEST_FRACTION", default_value_t = 0.2)]
    test_fraction: f64,
    /// Labeled share of the remaining rows.
    #[arg(long, env = "DIPS_LAB_SHARE", default_value_t = 0.1)]
    lab_share: f64,
}

#[derive(Args, Debug)]
struct CsvCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    csv: CsvArgs,
    /// Comma-separated pseudo-labelers.
    #[arg(long, env = "DIPS_PLABELERS", value_delimiter = ',', default_value = "greedy,ups,flexmatch,sla_lite")]
    plabelers: Vec<PlabelerKind>,
}

#[derive(Args, Debug)]
struct SingleRunCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    quadrants: QuadrantArgs,
    /// Label noise injected into the labeled part.
    #[arg(long, env = "DIPS_P_CORRUPT", default_value_t = 0.0)]
    p_corrupt: f64,
    /// Use a CSV file instead of the two-quadrant generator.
    #[arg(long, env = "DIPS_DATA", requires = "label_column")]
    data: Option<PathBuf>,
    #[arg(long, env = "DIPS_LABEL_COLUMN")]
    label_column: Option<String>,
    #[arg(long, env = "DIPS_NO_HEADER", action = ArgAction::SetTrue)]
    no_header: bool,
    #[arg(long, env = "DIPS_TEST_FRACTION", default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, env = "DIPS_LAB_SHARE", default_value_t = 0.1)]
    lab_share: f64,
    /// dips, identity, small_loss or fluctuation.
    #[arg(long, env = "DIPS_SELECTOR", default_value = "dips")]
    selector: SelectorKind,
    #[arg(long, env = "DIPS_NO_DIPS_AT_INIT", action = ArgAction::SetTrue)]
    no_dips_at_init: bool,
    #[arg(long, env = "DIPS_NO_DIPS_AT_ITERS", action = ArgAction::SetTrue)]
    no_dips_at_iters: bool,
    /// Also write wall-clock time per phase to run_timings.json.
    #[arg(long, env = "DIPS_TIMINGS", action = ArgAction::SetTrue)]
    timings: bool,
}

impl PipelineArgs {
    fn to_config(&self) -> anyhow::Result<PipelineConfig> {
        let tau_al = match self.tau_al_policy.as_str() {
            "adaptive" => AleatoricThreshold::Adaptive(self.tau_al),
            "adaptive_from_min" => AleatoricThreshold::AdaptiveFromMin(self.tau_al),
            "fixed" => AleatoricThreshold::Fixed(self.tau_al),
            other => bail!("unknown tau-al-policy {other:?}"),
        };
        Ok(PipelineConfig {
            iterations: self.iterations,
            plabeler: PlabelerConfig {
                kind: self.plabeler,
                tau_p: self.tau_p,
                kappa_p: self.kappa_p,
                ensemble_size: self.ensemble_size,
                flex_base_tau: self.flex_base_tau,
                sinkhorn_epsilon: self.sinkhorn_epsilon,
                sinkhorn_iters: self.sinkhorn_iters,
                sinkhorn_tolerance: self.sinkhorn_tolerance,
                ..PlabelerConfig::default()
            },
            selector: SelectorConfig {
                tau_conf: self.tau_conf,
                tau_al,
                relax_vacuous_al_gate: !self.strict_al_gate,
                keep_fraction: self.keep_fraction,
                smoothing: !self.no_smoothing,
                fluctuation_quantile: self.fluctuation_quantile,
                ..SelectorConfig::default()
            },
            backbone: BackboneConfig {
                kind: self.backbone,
                rounds: self.rounds,
                learning_rate: self.learning_rate,
                tree_depth: self.tree_depth,
                tree_l2: self.tree_l2,
                min_child_weight: self.min_child_weight,
                hidden_width: self.hidden_width,
                batch_size: self.batch_size,
                ..BackboneConfig::default()
            },
            version: self.version,
            dynamics_skip_fraction: self.dynamics_skip_fraction,
            ..PipelineConfig::default()
        })
    }
}

fn base_spec(kind: ExperimentKind, common: &Common) -> anyhow::Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::new(kind);
    if let Some(s) = common.seeds {
        spec.seeds = s;
    }
    spec.base_seed = common.seed;
    spec.template = common.pipeline.to_config()?;
    Ok(spec)
}

fn apply_quadrants(spec: &mut ExperimentSpec, q: &QuadrantArgs) {
    spec.n_lab = q.n_lab;
    spec.n_unlab = q.n_unlab;
    spec.n_test = q.n_test;
    spec.corrupt_unlabeled = q.corrupt_unlabeled;
}

fn noise_spec(kind: ExperimentKind, cmd: &NoiseCmd) -> anyhow::Result<ExperimentSpec> {
    let mut spec = base_spec(kind, &cmd.common)?;
    apply_quadrants(&mut spec, &cmd.data);
    if let Some(levels) = &cmd.noise_levels {
        spec.noise_levels = levels.clone();
    }
    Ok(spec)
}

fn run_and_write(spec: ExperimentSpec, common: &Common) -> anyhow::Result<()> {
    let result = run_experiment(&spec, common.jobs)?;
    let (runs, summary) = write_outputs(&result, &common.out_dir)?;
    tracing::info!("\n{}", format_aggregates(&result.aggregates));
    let out = json!({
        "experiment": spec.kind.name(),
        "runs": runs,
        "summary": summary,
        "aggregates": result.aggregates,
    });
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn single_run(cmd: &SingleRunCmd) -> anyhow::Result<()> {
    let common = &cmd.common;
    let seed = derive(common.seed, Stream::Data, 0);
    let mut split = match &cmd.data {
        Some(path) => {
            let column: LabelColumn = cmd
                .label_column
                .as_deref()
                .ok_or_else(|| anyhow!("--label-column is required with --data"))?
                .parse()?;
            let loaded = load_csv(path, &column, !cmd.no_header)?;
            if let Some(dict) = &loaded.label_dictionary {
                fs::create_dir_all(&common.out_dir)?;
                write_label_dictionary(common.out_dir.join("label_dictionary.json"), dict)?;
            }
            let rest = 1.0 - cmd.test_fraction;
            split_lab_unlab_test(&loaded.dataset, rest * cmd.lab_share, rest * (1.0 - cmd.lab_share), seed)?
        }
        None => {
            let q = &cmd.quadrants;
            two_quadrant_split(q.n_lab, q.n_unlab, q.n_test, seed)?
        }
    };
    if cmd.p_corrupt > 0.0 {
        let noise_seed = derive(common.seed, Stream::Noise, 0);
        let (noisy, report) =
            inject_symmetric_label_noise(split.labeled.labels()?, cmd.p_corrupt, split.class_count(), noise_seed)?;
        tracing::info!(flipped = report.flipped_indices.len(), "label noise injected");
        split.labeled = split.labeled.with_labels(noisy)?;
    }
    let mut config = common.pipeline.to_config()?;
    config.selector.kind = cmd.selector;
    config.dips_at_init = !cmd.no_dips_at_init;
    config.dips_at_iters = !cmd.no_dips_at_iters;
    config.seed = derive(common.seed, Stream::Backbone, 0);
    let out = run(&split, &config)?;

    let n_lab = split.labeled.len();
    let iterations: Vec<_> = out
        .history
        .iter()
        .map(|h| {
            json!({
                "iteration": h.iteration,
                "pool_size": h.pool.len(),
                "train_size": h.train.len(),
                "trained_on": h.trained_on,
                "labeled_in_train": h.train.iter().filter(|&&i| i < n_lab).count(),
                "new_pseudo_labels": h.new_pseudo_labels,
                "pseudo_labels": h.pseudo_labels.len(),
                "test_accuracy": h.test_accuracy,
                "pseudo_label_accuracy": h.pseudo_label_accuracy,
                "verdicts": h.verdicts,
                "rescued": h.rescued,
                "fallback": h.fallback,
            })
        })
        .collect();
    let history = json!({ "config": config, "iterations": iterations });
    fs::create_dir_all(&common.out_dir)?;
    write_text(&common.out_dir.join("run_history.json"), &serde_json::to_string_pretty(&history)?)?;
    write_text(&common.out_dir.join("run_model.json"), &out.model.to_json()?)?;
    let mut trace = Vec::new();
    out.final_trace.write_csv(&mut trace)?;
    fs::write(common.out_dir.join("run_dynamics.csv"), trace)?;
    if cmd.timings {
        write_text(&common.out_dir.join("run_timings.json"), &serde_json::to_string_pretty(&out.timings)?)?;
    }
    let last = out.history.last().expect("history holds iteration 0");
    println!(
        "{}",
        serde_json::to_string(&json!({
            "test_accuracy": last.test_accuracy,
            "pseudo_label_accuracy": last.pseudo_label_accuracy,
            "history": common.out_dir.join("run_history.json"),
        }))?
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> std::io::Result<()> {
    let mut s = text.to_owned();
    s.push('\n');
    fs::write(path, s)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::NoiseSweep(c) => run_and_write(noise_spec(ExperimentKind::NoiseSweep, c)?, &c.common),
        Command::Ablation(c) => run_and_write(noise_spec(ExperimentKind::Ablation, c)?, &c.common),
        Command::VersionCompare(c) => run_and_write(noise_spec(ExperimentKind::VersionCompare, c)?, &c.common),
        Command::ThresholdSweep(c) | Command::PercentileSweep(c) => {
            let kind = if matches!(cli.command, Command::ThresholdSweep(_)) {
                ExperimentKind::ThresholdSweep
            } else {
                ExperimentKind::PercentileSweep
            };
            let mut spec = noise_spec(kind, &c.noise)?;
            if let Some(p) = &c.percentiles {
                spec.percentiles = p.clone();
            }
            run_and_write(spec, &c.noise.common)
        }
        Command::DataEfficiency(c) => {
            let mut spec = base_spec(ExperimentKind::DataEfficiency, &c.common)?;
            apply_quadrants(&mut spec, &c.data);
            if let Some(f) = &c.fractions {
                spec.fractions = f.clone();
            }
            spec.p_corrupt = c.p_corrupt;
            run_and_write(spec, &c.common)
        }
        Command::TwoMoons(c) => {
            let mut spec = base_spec(ExperimentKind::TwoMoons, &c.common)?;
            spec.moons = MoonsParams {
                n_lab_per_class: c.n_lab_per_class,
                n_unlab: c.n_unlab,
                n_test: c.n_test,
                std: c.std,
            };
            run_and_write(spec, &c.common)
        }
        Command::RunCsv(c) => {
            let mut spec = base_spec(ExperimentKind::CustomCsv, &c.common)?;
            spec.csv = Some(CsvSource {
                path: c.csv.data.clone(),
                label_column: c.csv.label_column.clone(),
                has_header: !c.csv.no_header,
                test_fraction: c.csv.test_fraction,
                lab_share: c.csv.lab_share,
            });
            spec.plabelers = c.plabelers.clone();
            run_and_write(spec, &c.common)
        }
        Command::Run(c) => single_run(c),
    }
}

/// Command-line tokens for config-file entries the user did not already set
/// on the command line or through the environment.
fn config_tokens(path: &Path, sub: &clap::Command, matches: &ArgMatches) -> anyhow::Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    let known_anywhere = |key: &str| {
        Cli::command()
            .get_subcommands()
            .any(|s| s.get_arguments().any(|a| a.get_long() == Some(key)))
    };
    let mut tokens = Vec::new();
    for (raw_key, value) in &table {
        let key = raw_key.replace('_', "-");
        if key == "config" || key == "log-level" {
            continue;
        }
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            if known_anywhere(&key) {
                tracing::debug!(key, "config key not used by this command");
                continue;
            }
            bail!("unknown config key {raw_key:?}");
        };
        let explicit = matches!(
            matches.value_source(arg.get_id().as_str()),
            Some(ValueSource::CommandLine | ValueSource::EnvVariable)
        );
        if explicit {
            continue;
        }
        let scalar = |v: &toml::Value| -> anyhow::Result<String> {
            Ok(match v {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => bail!("unsupported value for {raw_key:?}: {other}"),
            })
        };
        match value {
            toml::Value::Boolean(b) if !arg.get_action().takes_values() => {
                if *b {
                    tokens.push(format!("--{key}").into());
                }
            }
            toml::Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<anyhow::Result<Vec<_>>>()?;
                tokens.push(format!("--{key}={}", parts.join(",")).into());
            }
            v => tokens.push(format!("--{key}={}", scalar(v)?).into()),
        }
    }
    Ok(tokens)
}

fn parse_cli(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(&args)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let Some(path) = cli.config.clone() else {
        return Ok(cli);
    };
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let command = Cli::command();
    let sub = command.find_subcommand(name).expect("matched subcommand exists");
    let tokens = config_tokens(&path, sub, sub_matches)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e:#}\n")))?;
    let mut full = args;
    full.extend(tokens);
    Cli::try_parse_from(full)
}

fn error_json(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match parse_cli(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            println!("{}", error_json("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(cli.log_level)
        .with_target(false)
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<DipsError>().map_or("error", DipsError::kind);
            println!("{}", error_json(kind, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
