//! Experiment harness: synthetic dataset generation, training runs,
//! checkpoint evaluation, model comparisons, and layout heatmap export.
//!
//! Exit codes: 0 ok, 1 user error (flags, config, referenced files),
//! 2 internal error (the run itself failed on valid inputs).

mod models;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use tilenet::baselines::{collect_click_dataset, train_utility_ranker, RankerTrainConfig, UtilityRanker};
use tilenet::checkpoint::{self, Checkpoint, ParamGroup};
use tilenet::config::ExperimentConfig;
use tilenet::critic::Critic;
use tilenet::dataset::{gen_dataset, load_dataset, split_indices, DatasetFiles, Split};
use tilenet::env::{Environment, EnvironmentSpec};
use tilenet::metrics::evaluate_policy;
use tilenet::page::PageInstance;
use tilenet::policy::TilePolicy;
use tilenet::rng::SeededRng;
use tilenet::trainer::{self, write_stats_csv, TrainerError};

use models::{restore_evaluator, EvalModel, Evaluator, TrainModel};

#[derive(Parser)]
#[command(name = "tilenet", version, about = "Grid layout policy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic users/items/pages CSVs under the output dir.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one model; writes <model>.ckpt and <model>-stats.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: TrainModel,
    },
    /// Score a checkpoint on one dataset split; writes a metric report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: EvalModel,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Mean test-split NDCG of every model family across environments.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tile: PathBuf,
        #[arg(long)]
        pointer_row: PathBuf,
        #[arg(long)]
        pointer_col: PathBuf,
        #[arg(long)]
        pointer_z: PathBuf,
        #[arg(long)]
        ranker: PathBuf,
        /// Extra environment columns as NAME=SPEC.json; without any, the
        /// config file's own environment fills a single "config" column.
        #[arg(long = "env", value_parser = parse_env_arg)]
        envs: Vec<(String, PathBuf)>,
    },
    /// Export the learned tile fill-order map as CSV and SVG.
    ExportHeatmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-split pages averaged into the map.
        #[arg(long, default_value_t = 64)]
        pages: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Validation => "validation",
            SplitArg::Test => "test",
        }
    }

    fn pick(self, split: &Split) -> &[usize] {
        match self {
            SplitArg::Train => &split.train,
            SplitArg::Validation => &split.validation,
            SplitArg::Test => &split.test,
        }
    }
}

fn parse_env_arg(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err("expected NAME=PATH".to_string()),
    }
}

/// Failure with its exit code class baked in.
enum Failure {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

trait Classify<T> {
    fn or_user(self) -> Result<T, Failure>;
    fn or_internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_user(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::User(e.into()))
    }

    fn or_internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; only real parse
            // errors are user errors.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config } => cmd_gen_data(&config),
        Command::Train { config, model } => cmd_train(&config, model),
        Command::Evaluate {
            config,
            model,
            checkpoint,
            split,
        } => cmd_evaluate(&config, model, &checkpoint, split),
        Command::Compare {
            config,
            tile,
            pointer_row,
            pointer_col,
            pointer_z,
            ranker,
            envs,
        } => cmd_compare(
            &config,
            [&tile, &pointer_row, &pointer_col, &pointer_z, &ranker],
            &envs,
        ),
        Command::ExportHeatmap {
            config,
            checkpoint,
            pages,
        } => cmd_export_heatmap(&config, &checkpoint, pages),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))
        .or_user()
}

/// Config plus the assembled page instances and their split, loaded from the
/// CSVs `gen-data` wrote under the output dir.
struct Workspace {
    config: ExperimentConfig,
    pages: Vec<PageInstance>,
    split: Split,
}

impl Workspace {
    fn take(&self, indices: &[usize]) -> Vec<PageInstance> {
        indices.iter().map(|&i| self.pages[i].clone()).collect()
    }

    fn environment(&self) -> Result<Environment, Failure> {
        build_environment(&self.config, self.config.environment.clone())
    }
}

fn build_environment(config: &ExperimentConfig, spec: EnvironmentSpec) -> Result<Environment, Failure> {
    Environment::new(
        spec,
        config.dataset.user_width,
        config.dataset.item_width,
    )
    .or_user()
}

fn load_workspace(config_path: &Path) -> Result<Workspace, Failure> {
    let config = load_config(config_path)?;
    let files = DatasetFiles::under(&config.output_dir.join("data"));
    let dataset = load_dataset(&files)
        .context("loading dataset CSVs (run gen-data first)")
        .or_user()?;
    if dataset.user_width != config.dataset.user_width
        || dataset.item_width != config.dataset.item_width
    {
        return Err(Failure::User(anyhow!(
            "dataset feature widths {}+{} disagree with config {}+{}; regenerate with gen-data",
            dataset.user_width,
            dataset.item_width,
            config.dataset.user_width,
            config.dataset.item_width
        )));
    }
    let pages = dataset.assemble_pages(config.dataset.grid).or_user()?;
    if let Some(page) = pages.first() {
        if page.n() != config.dataset.candidates {
            return Err(Failure::User(anyhow!(
                "dataset pages carry {} candidates but the config says {}; regenerate with gen-data",
                page.n(),
                config.dataset.candidates
            )));
        }
    }
    let split = split_indices(pages.len(), config.train.seed);
    Ok(Workspace {
        config,
        pages,
        split,
    })
}

fn write_artifact(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .or_internal()
}

fn cmd_gen_data(config_path: &Path) -> Result<(), Failure> {
    let config = load_config(config_path)?;
    let dir = config.output_dir.join("data");
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .or_internal()?;
    let files = DatasetFiles::under(&dir);
    gen_dataset(&config.dataset, &files, config.train.seed).or_internal()?;
    for path in [&files.users, &files.items, &files.pages] {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Trainer failures caused by the config or dataset shape are user errors;
/// everything past that point (divergence, numerics, artifact IO) is not.
fn classify_trainer(e: TrainerError) -> Failure {
    match e {
        TrainerError::EmptyBatch
        | TrainerError::BatchTooLarge { .. }
        | TrainerError::NoTrainingPages
        | TrainerError::BadHyper { .. } => Failure::User(e.into()),
        other => Failure::Internal(other.into()),
    }
}

fn cmd_train(config_path: &Path, model: TrainModel) -> Result<(), Failure> {
    let ws = load_workspace(config_path)?;
    let config = &ws.config;
    let env = ws.environment()?;
    let train_pages = ws.take(&ws.split.train);
    let validation_pages = ws.take(&ws.split.validation);
    let seed = config.train.seed;
    let ckpt_path = config.output_dir.join(format!("{}.ckpt", model.slug()));

    if model == TrainModel::Ranker {
        let clicks = collect_click_dataset(
            &env,
            &train_pages,
            4,
            &mut SeededRng::derive(seed, "ranker-data", &[]),
        )
        .or_internal()?;
        let mut ranker =
            UtilityRanker::new(config.input_width(), &mut SeededRng::derive(seed, "ranker-init", &[]));
        let ranker_config = RankerTrainConfig::default();
        train_utility_ranker(
            &mut ranker,
            &clicks,
            &ranker_config,
            &mut SeededRng::derive(seed, "ranker-shuffle", &[]),
        )
        .or_internal()?;
        let ckpt = Checkpoint {
            step: ranker_config.epochs as u64,
            groups: vec![ParamGroup {
                name: "ranker".to_string(),
                params: ranker.params.clone(),
                adam: None,
            }],
        };
        checkpoint::save(&ckpt_path, &ckpt).or_internal()?;
        println!(
            "trained ranker on {} click rows for {} epochs",
            clicks.len(),
            ranker_config.epochs
        );
        println!("checkpoint {}", ckpt_path.display());
        return Ok(());
    }

    let layout = model.layout();
    let mut policy_config = config.policy_config();
    if layout.is_some() {
        // Pointer baselines keep their fixed 128-wide decoder.
        policy_config.decoder_hidden = 128;
    }
    let mut policy = TilePolicy::new(
        policy_config,
        &mut SeededRng::derive(seed, "policy-init", &[]),
    );
    let mut critic = Critic::new(
        config.critic_config(),
        &mut SeededRng::derive(seed, "critic-init", &[]),
    );
    let outcome = trainer::train(
        &mut policy,
        &mut critic,
        &env,
        layout,
        &train_pages,
        &validation_pages,
        &config.train,
        Some(&ckpt_path),
    )
    .map_err(classify_trainer)?;
    let stats_path = config.output_dir.join(format!("{}-stats.csv", model.slug()));
    write_stats_csv(&stats_path, &outcome).or_internal()?;
    for (step, report) in &outcome.evaluations {
        println!(
            "eval step {step}: ndcg {:.4} pre@{} {:.4} clicks {:.4}",
            report.ndcg.mean, report.precision_cutoff, report.precision.mean, report.clicks.mean
        );
    }
    println!("checkpoint {}", ckpt_path.display());
    println!("stats {}", stats_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .or_user()
}

fn cmd_evaluate(
    config_path: &Path,
    model: EvalModel,
    checkpoint_path: &Path,
    split: SplitArg,
) -> Result<(), Failure> {
    let ws = load_workspace(config_path)?;
    let pages = ws.take(split.pick(&ws.split));
    if pages.is_empty() {
        return Err(Failure::User(anyhow!(
            "the {} split holds no pages for this dataset",
            split.name()
        )));
    }
    let env = ws.environment()?;
    let ckpt = load_checkpoint(checkpoint_path)?;
    let evaluator = restore_evaluator(model, &ws.config, &ckpt)
        .with_context(|| format!("checkpoint does not fit a {} model", model.slug()))
        .or_user()?;
    let eval_seed = SeededRng::derive(ws.config.train.seed, "cli-eval", &[]).next_u64();
    let report = evaluate_policy(|page| evaluator.rollout(page), &env, &pages, eval_seed)
        .or_internal()?;
    let csv_path = ws
        .config
        .output_dir
        .join(format!("evaluate-{}-{}.csv", model.slug(), split.name()));
    write_artifact(&csv_path, &report::evaluation_csv(&report))?;
    println!(
        "model {} on {} split ({} pages, checkpoint step {})",
        model.slug(),
        split.name(),
        report.episodes,
        ckpt.step
    );
    print!("{}", report::evaluation_table(&report));
    println!("report {}", csv_path.display());
    Ok(())
}

fn cmd_compare(
    config_path: &Path,
    checkpoints: [&PathBuf; 5],
    env_args: &[(String, PathBuf)],
) -> Result<(), Failure> {
    let [tile, pointer_row, pointer_col, pointer_z, ranker] = checkpoints;
    let ws = load_workspace(config_path)?;
    let pages = ws.take(&ws.split.test);
    if pages.is_empty() {
        return Err(Failure::User(anyhow!(
            "the test split holds no pages for this dataset"
        )));
    }

    // Row order mirrors the fixed-layout families first, the grid policy last.
    let row_plan: [(EvalModel, &PathBuf); 7] = [
        (EvalModel::RankerRow, ranker),
        (EvalModel::RankerCol, ranker),
        (EvalModel::RankerZ, ranker),
        (EvalModel::PointerRow, pointer_row),
        (EvalModel::PointerCol, pointer_col),
        (EvalModel::PointerZ, pointer_z),
        (EvalModel::Tile, tile),
    ];
    let mut evaluators: Vec<(EvalModel, Evaluator)> = Vec::with_capacity(row_plan.len());
    for (model, path) in row_plan {
        let ckpt = load_checkpoint(path)?;
        let evaluator = restore_evaluator(model, &ws.config, &ckpt)
            .with_context(|| format!("checkpoint {} does not fit a {} model", path.display(), model.slug()))
            .or_user()?;
        evaluators.push((model, evaluator));
    }

    let mut environments: Vec<(String, Environment)> = Vec::new();
    if env_args.is_empty() {
        environments.push(("config".to_string(), ws.environment()?));
    } else {
        for (name, path) in env_args {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading environment spec {}", path.display()))
                .or_user()?;
            let spec: EnvironmentSpec = serde_json::from_str(&text)
                .with_context(|| format!("parsing environment spec {}", path.display()))
                .or_user()?;
            environments.push((name.clone(), build_environment(&ws.config, spec)?));
        }
    }

    // One eval seed per environment column, shared by all rows so models
    // face identical click draws.
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); evaluators.len()];
    for (column, (_, env)) in environments.iter().enumerate() {
        let eval_seed =
            SeededRng::derive(ws.config.train.seed, "compare-env", &[column as u64]).next_u64();
        for (row, (_, evaluator)) in evaluators.iter().enumerate() {
            let report = evaluate_policy(|page| evaluator.rollout(page), env, &pages, eval_seed)
                .or_internal()?;
            cells[row].push(report.ndcg.mean);
        }
    }

    let mut csv = String::from("model");
    for (name, _) in &environments {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for (row, (model, _)) in evaluators.iter().enumerate() {
        csv.push_str(model.slug());
        for value in &cells[row] {
            csv.push(',');
            csv.push_str(&value.to_string());
        }
        csv.push('\n');
    }

    let mut header = vec!["model".to_string()];
    header.extend(environments.iter().map(|(name, _)| name.clone()));
    let rows: Vec<Vec<String>> = evaluators
        .iter()
        .enumerate()
        .map(|(row, (model, _))| {
            let mut cols = vec![model.slug().to_string()];
            cols.extend(cells[row].iter().map(|v| format!("{v:.4}")));
            cols
        })
        .collect();
    let table = report::aligned_table(&header, &rows);

    let csv_path = ws.config.output_dir.join("compare.csv");
    let txt_path = ws.config.output_dir.join("compare.txt");
    write_artifact(&csv_path, &csv)?;
    write_artifact(&txt_path, &table)?;
    print!("{table}");
    println!("table {} and {}", csv_path.display(), txt_path.display());
    Ok(())
}

fn cmd_export_heatmap(
    config_path: &Path,
    checkpoint_path: &Path,
    pages: usize,
) -> Result<(), Failure> {
    let ws = load_workspace(config_path)?;
    if pages == 0 {
        return Err(Failure::User(anyhow!("--pages must be at least 1")));
    }
    let sample_indices: Vec<usize> = ws.split.test.iter().copied().take(pages).collect();
    if sample_indices.is_empty() {
        return Err(Failure::User(anyhow!(
            "the test split holds no pages for this dataset"
        )));
    }
    let sample = ws.take(&sample_indices);
    let ckpt = load_checkpoint(checkpoint_path)?;
    let evaluator = restore_evaluator(EvalModel::Tile, &ws.config, &ckpt)
        .context("checkpoint does not fit the tile model")
        .or_user()?;
    let Evaluator::Policy { policy, .. } = evaluator else {
        unreachable!("tile evaluator is always a policy");
    };
    let heat = policy.tile_priority_heatmap(&sample).or_internal()?;
    let grid = ws.config.dataset.grid;
    let csv_path = ws.config.output_dir.join("heatmap.csv");
    let svg_path = ws.config.output_dir.join("heatmap.svg");
    write_artifact(&csv_path, &report::heatmap_csv(grid, &heat))?;
    write_artifact(&svg_path, &report::heatmap_svg(grid, &heat))?;
    println!(
        "heatmap over {} pages: {} and {}",
        sample.len(),
        csv_path.display(),
        svg_path.display()
    );
    Ok(())
}
