//! Command-line front end: train models, evaluate checkpoints, predict and
//! explain recommendations, run the numerical verification suites, and
//! generate synthetic datasets.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
//! failure, 4 training divergence.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use dmr::data::{
    self, filter_min_observations, load_partitions, load_ratings, save_partitions, save_ratings,
    synthesize_dataset, Dataset, Partition, PlantedCovariance, SynthConfig,
};
use dmr::eval::{
    avg_rating_difference, avg_rating_difference_with, confidence_report, pairwise_accuracy,
    rank_metrics, EvalConfig,
};
use dmr::model::PmtfModel;
use dmr::trainer::{train, train_dmr_i, TrainConfig, TrainOutcome};
use dmr::verify;
use dmr::{DmrError, Result};

#[derive(Parser)]
#[command(
    name = "dmr",
    version,
    about = "Directional multivariate ranking over multi-aspect ratings"
)]
struct Cli {
    /// Cap the worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress progress commentary; print only the requested output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on a ratings file: filter, split, estimate the prior
    /// covariance, then run two-phase stochastic ascent.
    Train(TrainArgs),
    /// Report ranking metrics, pairwise accuracy, confidence buckets, and
    /// the explanation gap for a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Predict per-aspect ratings, or rank a user's unrated items.
    Predict(PredictArgs),
    /// Name the aspects most correlated with Overall for one (user, item).
    Explain(ExplainArgs),
    /// Run the numerical self-checks against independent references.
    Verify(VerifyArgs),
    /// Generate a synthetic ratings file from a planted model.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Tab-separated ratings file (user_id, item_id, one column per aspect).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Training log output (one JSON record per validation check).
    #[arg(long, default_value = "train_log.jsonl")]
    log: PathBuf,
    /// Partition assignment sidecar, consumed by `evaluate`.
    #[arg(long, default_value = "partitions.tsv")]
    partitions_out: PathBuf,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Latent dimensionality.
    #[arg(long)]
    dim: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// User-side covariance weight in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Lower integration margin.
    #[arg(long)]
    margin: Option<f64>,
    /// Triples per phase per iteration.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations between validation checks.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Validation checks without improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Drop users and items with fewer observations than this.
    #[arg(long)]
    min_obs: Option<usize>,
    /// Train/validation/test fractions, e.g. "0.7,0.15,0.15".
    #[arg(long)]
    split: Option<String>,
    /// Freeze all covariances at identity (ablation).
    #[arg(long = "dmr-i")]
    dmr_i: bool,
    /// Also sample rated-versus-unrated triples.
    #[arg(long)]
    implicit: bool,
    /// Allow unordered gradient reduction (faster, not bitwise reproducible).
    #[arg(long)]
    unordered_reduction: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Partition sidecar written by `train`.
    #[arg(long)]
    partitions: PathBuf,
    /// Which partition to score.
    #[arg(long, default_value = "test")]
    partition: String,
    /// Ratings at or above this value count as relevant for MAP.
    #[arg(long, default_value_t = 4.0)]
    map_threshold: f64,
    /// Rank every item instead of only the user's partition items.
    #[arg(long)]
    all_items: bool,
    /// Number of confidence buckets.
    #[arg(long, default_value_t = 10)]
    buckets: usize,
    /// Apply the same minimum-observation filter used in training.
    #[arg(long)]
    min_obs: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    user: String,
    /// Predict for this item only; otherwise rank the user's unrated items.
    #[arg(long)]
    item: Option<String>,
    /// How many ranked items to print.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    user: String,
    #[arg(long)]
    item: String,
    /// How many aspects to name.
    #[arg(long, default_value_t = 1)]
    top: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Corrupt the analytic user gradient by 10% first; the run must fail.
    #[arg(long)]
    negative_control: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    aspects: usize,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    /// Probability that each (user, item) cell is observed.
    #[arg(long, default_value_t = 0.3)]
    density: f64,
    /// Probability that an observed vector drops each non-Overall aspect.
    #[arg(long, default_value_t = 0.0)]
    missing_rate: f64,
    #[arg(long, default_value_t = 0.8)]
    factor_scale: f64,
    #[arg(long, default_value_t = 1.1)]
    noise_scale: f64,
    /// Planted correlation strength in [0, 1); 0 plants identity covariances.
    #[arg(long, default_value_t = 0.8)]
    correlation: f64,
    /// Added to every mean before sampling; 3.0 centers a 1-5 scale and
    /// keeps ranking gains nonnegative.
    #[arg(long, default_value_t = 3.0)]
    offset: f64,
    /// Clip sampled ratings into "lo,hi".
    #[arg(long)]
    clip: Option<String>,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value = "synth.tsv")]
    out: PathBuf,
    /// Also save the generating model here.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

/// Optional overrides loaded from `--config`; any field a flag also sets is
/// taken from the flag.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    batch_size: Option<usize>,
    max_iters: Option<usize>,
    learning_rate: Option<f64>,
    margin: Option<f64>,
    lambda: Option<f64>,
    latent_dim: Option<usize>,
    seed: Option<u64>,
    eval_every: Option<usize>,
    patience: Option<usize>,
    min_obs: Option<usize>,
    split: Option<[f64; 3]>,
}

struct PipelineConfig {
    train: TrainConfig,
    min_obs: usize,
    split: (f64, f64, f64),
}

fn parse_split(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| DmrError::InvalidConfig(format!("split fractions '{text}': {e}")))?;
    if parts.len() != 3 {
        return Err(DmrError::InvalidConfig(format!(
            "split needs three comma-separated fractions, got '{text}'"
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

/// Resolves the training configuration: built-in defaults, then the config
/// file, then explicit flags.
fn resolve_config(args: &TrainArgs) -> Result<PipelineConfig> {
    let mut train = TrainConfig {
        batch_size: 2000,
        max_iters: 40_000,
        learning_rate: 0.03,
        margin: 0.2,
        lambda: 0.5,
        latent_dim: 10,
        seed: 42,
        eval_every: 500,
        patience: 5,
        deterministic: true,
        implicit_triples: false,
    };
    let mut min_obs = 5usize;
    let mut split = (0.7, 0.15, 0.15);

    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        let file: FileConfig = serde_json::from_str(&text)
            .map_err(|e| DmrError::InvalidConfig(format!("config file {path:?}: {e}")))?;
        if let Some(v) = file.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = file.max_iters {
            train.max_iters = v;
        }
        if let Some(v) = file.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = file.margin {
            train.margin = v;
        }
        if let Some(v) = file.lambda {
            train.lambda = v;
        }
        if let Some(v) = file.latent_dim {
            train.latent_dim = v;
        }
        if let Some(v) = file.seed {
            train.seed = v;
        }
        if let Some(v) = file.eval_every {
            train.eval_every = v;
        }
        if let Some(v) = file.patience {
            train.patience = v;
        }
        if let Some(v) = file.min_obs {
            min_obs = v;
        }
        if let Some([a, b, c]) = file.split {
            split = (a, b, c);
        }
    }

    if let Some(v) = args.batch {
        train.batch_size = v;
    }
    if let Some(v) = args.max_iters {
        train.max_iters = v;
    }
    if let Some(v) = args.lr {
        train.learning_rate = v;
    }
    if let Some(v) = args.margin {
        train.margin = v;
    }
    if let Some(v) = args.lambda {
        train.lambda = v;
    }
    if let Some(v) = args.dim {
        train.latent_dim = v;
    }
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.eval_every {
        train.eval_every = v;
    }
    if let Some(v) = args.patience {
        train.patience = v;
    }
    if let Some(v) = args.min_obs {
        min_obs = v;
    }
    if let Some(text) = &args.split {
        split = parse_split(text)?;
    }
    train.implicit_triples = args.implicit;
    train.deterministic = !args.unordered_reduction;
    train.validate()?;
    Ok(PipelineConfig {
        train,
        min_obs,
        split,
    })
}

fn parse_partition(name: &str) -> Result<Partition> {
    match name.to_ascii_lowercase().as_str() {
        "train" => Ok(Partition::Train),
        "valid" => Ok(Partition::Valid),
        "test" => Ok(Partition::Test),
        other => Err(DmrError::InvalidConfig(format!(
            "unknown partition '{other}' (expected train, valid, or test)"
        ))),
    }
}

fn lookup_user(dataset: &Dataset, id: &str) -> Result<usize> {
    dataset
        .user_ids()
        .iter()
        .position(|u| u == id)
        .ok_or_else(|| DmrError::IndexOutOfRange(format!("unknown user id '{id}'")))
}

fn lookup_item(dataset: &Dataset, id: &str) -> Result<usize> {
    dataset
        .item_ids()
        .iter()
        .position(|i| i == id)
        .ok_or_else(|| DmrError::IndexOutOfRange(format!("unknown item id '{id}'")))
}

fn cmd_train(args: &TrainArgs, quiet: bool) -> Result<i32> {
    let config = resolve_config(args)?;
    if let Some(warning) = config.train.margin_warning() {
        eprintln!("warning: {warning}");
    }
    let raw = load_ratings(&args.data)?;
    let filtered = filter_min_observations(&raw, config.min_obs)?;
    let dataset = data::split(&filtered, config.split, config.train.seed)?;
    if !quiet {
        let counts = dataset.partition_counts();
        let count = |p: Partition| counts.get(&p).copied().unwrap_or(0);
        eprintln!(
            "dataset: {} users, {} items, {} aspects; observations {}/{}/{} (train/valid/test)",
            dataset.num_users(),
            dataset.num_items(),
            dataset.num_aspects(),
            count(Partition::Train),
            count(Partition::Valid),
            count(Partition::Test)
        );
    }

    let outcome: TrainOutcome = if args.dmr_i {
        train_dmr_i(&dataset, &config.train)?
    } else {
        train(&dataset, &config.train)?
    };

    save_partitions(&dataset, &args.partitions_out)?;
    outcome.model.save(&args.out)?;
    let mut log = std::fs::File::create(&args.log)?;
    for record in &outcome.log {
        serde_json::to_writer(&mut log, record)
            .map_err(|e| DmrError::Data(format!("writing training log: {e}")))?;
        log.write_all(b"\n")?;
    }

    if !quiet {
        eprintln!(
            "trained {} iterations; best validation NDCG@50 {:.4} at iteration {}",
            outcome.iterations_run, outcome.best_validation, outcome.best_iteration
        );
        eprintln!(
            "probe objective {:.4} -> {:.4}",
            outcome.initial_probe_objective, outcome.best_probe_objective
        );
    }
    println!(
        "checkpoint {} (log {}, partitions {})",
        args.out.display(),
        args.log.display(),
        args.partitions_out.display()
    );
    Ok(0)
}

fn cmd_evaluate(args: &EvaluateArgs, quiet: bool) -> Result<i32> {
    let model = PmtfModel::load(&args.model)?;
    let mut dataset = load_ratings(&args.data)?;
    if let Some(min_obs) = args.min_obs {
        dataset = filter_min_observations(&dataset, min_obs)?;
    }
    let dataset = load_partitions(dataset, &args.partitions)?;
    let partition = parse_partition(&args.partition)?;
    let eval_config = EvalConfig {
        relevance_threshold: args.map_threshold,
        all_items_candidates: args.all_items,
    };

    let ranking = rank_metrics(&model, &dataset, partition, &eval_config)?;
    println!("ranking metrics on {partition}:");
    println!("{:<16} {:>8} {:>8} {:>8}", "aspect", "MAP", "NDCG@10", "NDCG@50");
    for (name, m) in ranking.aspect_names.iter().zip(&ranking.per_aspect) {
        println!("{:<16} {:>8.4} {:>8.4} {:>8.4}", name, m.map, m.ndcg10, m.ndcg50);
    }
    let avg = &ranking.average;
    println!("{:<16} {:>8.4} {:>8.4} {:>8.4}", "average", avg.map, avg.ndcg10, avg.ndcg50);

    let accuracy = pairwise_accuracy(&model, &dataset, partition)?;
    println!("\npairwise accuracy: {accuracy:.4}");

    match confidence_report(&model, &dataset, partition, args.buckets) {
        Ok(report) => {
            println!("\nconfidence buckets (low to high):");
            println!("{:<24} {:>8} {:>10}", "log-likelihood range", "pairs", "accuracy");
            for b in &report.buckets {
                println!(
                    "[{:>9.3}, {:>9.3}] {:>8} {:>10.4}",
                    b.low, b.high, b.count, b.accuracy
                );
            }
        }
        Err(e) => {
            if !quiet {
                eprintln!("confidence report unavailable: {e}");
            }
        }
    }

    let explained = avg_rating_difference(&model, &dataset, partition)?;
    println!("\nexplanation quality (mean |Overall - selected aspect|):");
    println!("  model-selected aspect: {explained:.4}");
    if dataset.num_aspects() > 2 {
        let mut total = 0.0;
        for aspect in 1..dataset.num_aspects() {
            total += avg_rating_difference_with(&dataset, partition, &mut |_, _| Ok(aspect))?;
        }
        let baseline = total / (dataset.num_aspects() - 1) as f64;
        println!("  fixed-aspect average:  {baseline:.4}");
    }
    Ok(0)
}

fn cmd_predict(args: &PredictArgs) -> Result<i32> {
    let model = PmtfModel::load(&args.model)?;
    let dataset = load_ratings(&args.data)?;
    let user = lookup_user(&dataset, &args.user)?;
    match &args.item {
        Some(id) => {
            let item = lookup_item(&dataset, id)?;
            let predicted = model.predict_ratings(user, item)?;
            println!("predicted ratings for user {} on item {}:", args.user, id);
            for (name, value) in dataset.aspect_names().iter().zip(predicted.iter()) {
                println!("{name:<16} {value:>8.4}");
            }
        }
        None => {
            let mut unrated: Vec<(usize, f64)> = (0..dataset.num_items())
                .filter(|&i| dataset.find(user, i).is_none())
                .map(|i| Ok((i, model.predict_ratings(user, i)?[0])))
                .collect::<Result<_>>()?;
            if unrated.is_empty() {
                return Err(DmrError::Data(format!(
                    "user {} has rated every item",
                    args.user
                )));
            }
            unrated.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            println!(
                "top {} unrated items for user {} by predicted Overall:",
                args.top.min(unrated.len()),
                args.user
            );
            for (item, score) in unrated.into_iter().take(args.top) {
                println!("{:<16} {score:>8.4}", dataset.item_ids()[item]);
            }
        }
    }
    Ok(0)
}

/// Aspects ranked by correlation with Overall under the point covariance,
/// skipping degenerate variances.
fn correlated_aspects(model: &PmtfModel, user: usize, item: usize) -> Result<Vec<(usize, f64)>> {
    let cov = model.point_covariance(user, item)?;
    let floor = 4.0 * model.hyper.jitter;
    let overall_var = cov[(0, 0)];
    if overall_var <= floor {
        return Err(DmrError::NoExplainableAspect(
            "Overall variance is degenerate".into(),
        ));
    }
    let mut ranked: Vec<(usize, f64)> = (1..cov.nrows())
        .filter(|&a| cov[(a, a)] > floor)
        .map(|a| (a, cov[(0, a)] / (overall_var * cov[(a, a)]).sqrt()))
        .collect();
    if ranked.is_empty() {
        return Err(DmrError::NoExplainableAspect(
            "every aspect variance is degenerate".into(),
        ));
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(ranked)
}

fn cmd_explain(args: &ExplainArgs) -> Result<i32> {
    let model = PmtfModel::load(&args.model)?;
    let dataset = load_ratings(&args.data)?;
    let user = lookup_user(&dataset, &args.user)?;
    let item = lookup_item(&dataset, &args.item)?;
    let ranked = correlated_aspects(&model, user, item)?;
    let chosen: Vec<&(usize, f64)> = ranked.iter().take(args.top.max(1)).collect();

    let names: Vec<&str> = chosen
        .iter()
        .map(|(a, _)| dataset.aspect_names()[*a].as_str())
        .collect();
    let list = match names.len() {
        1 => format!("[{}]", names[0]),
        _ => {
            let head = names[..names.len() - 1]
                .iter()
                .map(|n| format!("[{n}]"))
                .collect::<Vec<_>>()
                .join(", ");
            format!("{head} and [{}]", names[names.len() - 1])
        }
    };
    println!(
        "We recommend item [{}] to you, because you may like its aspects of {list}.",
        args.item
    );
    println!("\ncorrelation with Overall:");
    for (aspect, corr) in &ranked {
        println!("{:<16} {corr:>8.4}", dataset.aspect_names()[*aspect]);
    }
    if chosen[0].1.abs() < 0.1 {
        println!("\nnote: no strong correlation with Overall; the named aspect is a tie-break choice.");
    }
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let mut reports = verify::run_all(args.seed)?;
    if args.negative_control {
        let corrupted = verify::gradient_suite(args.seed, 100, 0.1)?;
        reports.push(corrupted);
    }
    let mut failures = Vec::new();
    for report in &reports {
        println!("{report}");
        if !report.passed {
            failures.push(report.name);
        }
    }
    if failures.is_empty() {
        println!("all {} suites passed", reports.len());
        Ok(0)
    } else {
        eprintln!("failing suites: {}", failures.join(", "));
        Ok(3)
    }
}

fn cmd_synth(args: &SynthArgs, quiet: bool) -> Result<i32> {
    let clip = match &args.clip {
        None => None,
        Some(text) => {
            let parts: Vec<&str> = text.split(',').collect();
            if parts.len() != 2 {
                return Err(DmrError::InvalidConfig(format!(
                    "clip needs 'lo,hi', got '{text}'"
                )));
            }
            let lo = parts[0].trim().parse::<f64>().map_err(|e| {
                DmrError::InvalidConfig(format!("clip bound '{}': {e}", parts[0]))
            })?;
            let hi = parts[1].trim().parse::<f64>().map_err(|e| {
                DmrError::InvalidConfig(format!("clip bound '{}': {e}", parts[1]))
            })?;
            Some((lo, hi))
        }
    };
    let covariance = if args.correlation == 0.0 {
        PlantedCovariance::Identity
    } else {
        PlantedCovariance::Correlated {
            strength: args.correlation,
        }
    };
    let config = SynthConfig {
        num_users: args.users,
        num_items: args.items,
        num_aspects: args.aspects,
        latent_dim: args.dim,
        density: args.density,
        missing_rate: args.missing_rate,
        factor_scale: args.factor_scale,
        noise_scale: args.noise_scale,
        covariance,
        mean_offset: args.offset,
        clip,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let (dataset, truth) = synthesize_dataset(&config)?;
    save_ratings(&dataset, &args.out)?;
    if let Some(path) = &args.model_out {
        align_to_saved_order(&truth, &dataset)?.save(path)?;
    }
    if !quiet {
        eprintln!(
            "synthesized {} observations ({} users x {} items, {} aspects)",
            dataset.observations().len(),
            args.users,
            args.items,
            args.aspects
        );
    }
    println!("wrote {}", args.out.display());
    Ok(0)
}

/// Reorders a generating model's per-user and per-item rows to match the
/// indices a fresh load of the saved ratings file will assign. The loader
/// interns ids by first appearance, so the saved sidecar has to follow the
/// same order or its rows point at the wrong users and items.
fn align_to_saved_order(model: &PmtfModel, dataset: &Dataset) -> Result<PmtfModel> {
    let mut user_order = Vec::new();
    let mut item_order = Vec::new();
    let mut user_seen = vec![false; dataset.num_users()];
    let mut item_seen = vec![false; dataset.num_items()];
    for obs in dataset.observations() {
        if !user_seen[obs.user] {
            user_seen[obs.user] = true;
            user_order.push(obs.user);
        }
        if !item_seen[obs.item] {
            item_seen[obs.item] = true;
            item_order.push(obs.item);
        }
    }
    // Entities with no observations are absent from the reloaded dataset;
    // keep their rows at the tail so the model shapes stay intact.
    user_order.extend((0..dataset.num_users()).filter(|&u| !user_seen[u]));
    item_order.extend((0..dataset.num_items()).filter(|&i| !item_seen[i]));
    let pick_rows = |m: &nalgebra::DMatrix<f64>, order: &[usize]| {
        nalgebra::DMatrix::from_fn(order.len(), m.ncols(), |r, c| m[(order[r], c)])
    };
    PmtfModel::from_parts(
        model.hyper.clone(),
        model.aspect_names.clone(),
        pick_rows(&model.u_factors, &user_order),
        pick_rows(&model.v_factors, &item_order),
        model.w_factors.clone(),
        user_order
            .iter()
            .map(|&u| model.user_cov_factors[u].clone())
            .collect(),
        item_order
            .iter()
            .map(|&i| model.item_cov_factors[i].clone())
            .collect(),
    )
}

fn exit_code(error: &DmrError) -> i32 {
    match error {
        DmrError::Divergence { .. } => 4,
        DmrError::VerificationFailed(_) => 3,
        DmrError::InvalidConfig(_) => 1,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} threads: {e}");
            std::process::exit(1);
        }
    }
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args, cli.quiet),
        Command::Evaluate(args) => cmd_evaluate(args, cli.quiet),
        Command::Predict(args) => cmd_predict(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Synth(args) => cmd_synth(args, cli.quiet),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
