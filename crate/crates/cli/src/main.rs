use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fewshot_core::data::LabeledDataset;
use fewshot_core::eval::{check_disjoint, evaluate_embeddings, extract_embeddings, EvalReport};
use fewshot_core::io::{
    export_embeddings, generate_toy_corpus, load_checkpoint, DatasetManifest, RunConfig, RunWriter,
    ToyCorpusSpec, FINAL_CHECKPOINT,
};
use fewshot_core::model::{MultiTaskModel, TaskSet, ViewPolicy};
use fewshot_core::rng::{stream, stream_rng};
use fewshot_core::tensor::snapshot;
use fewshot_core::trainer::{train, EpochRecord, MetricsSink, StepRecord};
use fewshot_core::{Error, Result};

const OUTPUT_ROOT_ENV: &str = "FEWSHOT_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "fewshot",
    version,
    about = "Multi-task few-shot training and episodic evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the merged meta-training split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on N-way K-shot episodes.
    Eval(EvalArgs),
    /// Write the synthetic toy corpus and its manifest.
    GenToy(GenToyArgs),
    /// Export frozen-encoder embeddings of one split.
    ExtractEmbeddings(ExtractArgs),
    /// List the tensors stored in a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of sup, rot, byol.
    #[arg(long)]
    tasks: Option<TaskSet>,
    /// separate, shared or two_view.
    #[arg(long)]
    view_policy: Option<ViewPolicy>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to `<output_dir>/final.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    q_query: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the evaluated split's embeddings here.
    #[arg(long)]
    export_embeddings: Option<PathBuf>,
    /// Report path; defaults to `<output_dir>/eval_report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    train_classes: usize,
    #[arg(long, default_value_t = 2)]
    val_classes: usize,
    #[arg(long, default_value_t = 6)]
    test_classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GenToy(a) => cmd_gen_toy(a),
        Command::ExtractEmbeddings(a) => cmd_extract(a),
        Command::InspectCheckpoint { path } => cmd_inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Io(_) | Error::Tensor(_) => 1,
        _ => 2,
    }
}

/// Loads the config and resolves the output directory: flag, then file,
/// with relative paths placed under `$FEWSHOT_OUTPUT_ROOT` when set.
fn load_run(args: &RunArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    if config.output_dir.is_relative() {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            config.output_dir = PathBuf::from(root).join(&config.output_dir);
        }
    }
    Ok(config)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(path)?)
}

/// Prints one line per epoch while forwarding everything to the run writer.
struct Progress(RunWriter);

impl<E: fewshot_core::Element> MetricsSink<E> for Progress {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        MetricsSink::<E>::on_step(&mut self.0, record)
    }

    fn on_epoch(&mut self, r: &EpochRecord, model: &MultiTaskModel<E>) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  sup {}  rot {}  byol {}  {:.1}s",
            r.epoch,
            r.lr,
            r.loss_total,
            opt(r.loss_sup),
            opt(r.loss_rot),
            opt(r.loss_byol),
            r.wall_time_s
        );
        self.0.on_epoch(r, model)
    }

    fn on_finish(&mut self, model: &MultiTaskModel<E>) -> Result<()> {
        self.0.on_finish(model)
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = load_run(&args.run)?;
    let t = &mut config.train;
    t.seed = args.seed.unwrap_or(t.seed);
    t.active_tasks = args.tasks.unwrap_or(t.active_tasks);
    t.view_policy = args.view_policy.unwrap_or(t.view_policy);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    config.validate()?;

    let manifest = DatasetManifest::load(&config.dataset.manifest)?;
    let data = manifest.ingest(&config.dataset.train_split)?;
    let model_config = config.model_config(data.num_classes());
    model_config.validate()?;
    let pipes = config.pipelines()?;

    std::fs::create_dir_all(&config.output_dir)?;
    let mut snapshot_config = config.clone();
    snapshot_config.dataset.manifest = absolute(&config.dataset.manifest)?;
    snapshot_config.output_dir = absolute(&config.output_dir)?;
    std::fs::write(
        config.output_dir.join("config.toml"),
        snapshot_config.to_toml(),
    )?;

    let mut model = MultiTaskModel::<f32>::new(
        &model_config,
        &mut stream_rng(config.train.seed, &[stream::INIT]),
    )?;
    let mut sink = Progress(RunWriter::create(
        &config.output_dir,
        config.train.checkpoint_every,
    )?);
    eprintln!(
        "training {} examples of {} classes, tasks {}, views {}",
        data.len(),
        data.num_classes(),
        config.train.active_tasks,
        config.train.view_policy
    );
    let summary = train(&config.train, &pipes, &data, &mut model, &mut sink)?;
    println!(
        "trained {} steps; artifacts in {}",
        summary.steps,
        config.output_dir.display()
    );
    Ok(())
}

/// Builds the model described by `config`, loads `checkpoint` and ingests
/// `split`, which must share no class with training when `held_out` is set.
fn restore(
    config: &RunConfig,
    checkpoint: &Path,
    split: &str,
    held_out: bool,
) -> Result<(MultiTaskModel<f32>, LabeledDataset)> {
    let manifest = DatasetManifest::load(&config.dataset.manifest)?;
    let train_classes = manifest
        .splits
        .get(&config.dataset.train_split)
        .ok_or_else(|| {
            Error::Data(format!(
                "manifest has no split `{}`",
                config.dataset.train_split
            ))
        })?;
    let model_config = config.model_config(train_classes.len());
    let mut model = MultiTaskModel::<f32>::new(&model_config, &mut stream_rng(0, &[stream::INIT]))?;
    load_checkpoint(&mut model, checkpoint)?;
    let data = manifest.ingest(split)?;
    if held_out {
        check_disjoint(train_classes, &data.class_names)?;
    }
    Ok((model, data))
}

fn checkpoint_path(config: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| config.output_dir.join(FINAL_CHECKPOINT))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut config = load_run(&args.run)?;
    let spec = &mut config.eval.episodes;
    spec.n_episodes = args.episodes.unwrap_or(spec.n_episodes);
    spec.n_way = args.n_way.unwrap_or(spec.n_way);
    spec.k_shot = args.k_shot.unwrap_or(spec.k_shot);
    spec.q_query = args.q_query.unwrap_or(spec.q_query);
    spec.seed = args.seed.unwrap_or(spec.seed);
    config.eval.episodes.validate()?;

    let checkpoint = checkpoint_path(&config, args.checkpoint);
    let split = args
        .split
        .unwrap_or_else(|| config.dataset.eval_split.clone());
    let (model, data) = restore(&config, &checkpoint, &split, true)?;
    let emb = extract_embeddings(&model.encoder, &data, 64)?;
    if let Some(path) = &args.export_embeddings {
        export_embeddings(path, &emb)?;
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut report: EvalReport = evaluate_embeddings(
        &emb,
        &config.eval.episodes,
        &config.eval.base_learner,
        threads,
    )?;
    report.checkpoint_id = Some(checkpoint.display().to_string());

    let json = report.to_json();
    println!("{json}");
    let path = args
        .report
        .unwrap_or_else(|| config.output_dir.join("eval_report.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, json + "\n")?;
    std::fs::write(path.with_extension("episodes.csv"), report.episodes_csv())?;
    match report.ci95 {
        Some(ci) => eprintln!(
            "{}-way {}-shot: {:.2} +- {:.2}%",
            report.n_way, report.k_shot, report.mean_accuracy, ci
        ),
        None => eprintln!(
            "{}-way {}-shot: {:.2}% (confidence interval undefined for one episode)",
            report.n_way, report.k_shot, report.mean_accuracy
        ),
    }
    Ok(())
}

fn cmd_gen_toy(args: GenToyArgs) -> Result<()> {
    let spec = ToyCorpusSpec::new(
        args.train_classes,
        args.val_classes,
        args.test_classes,
        args.per_class,
        args.size,
        args.seed,
    );
    let manifest = generate_toy_corpus(&spec, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let config = load_run(&args.run)?;
    let checkpoint = checkpoint_path(&config, args.checkpoint);
    let split = args
        .split
        .unwrap_or_else(|| config.dataset.eval_split.clone());
    let (model, data) = restore(&config, &checkpoint, &split, false)?;
    let emb = extract_embeddings(&model.encoder, &data, 64)?;
    export_embeddings(&args.out, &emb)?;
    println!(
        "{} embeddings of dim {} -> {}",
        emb.labels.len(),
        emb.dim,
        args.out.display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let entries =
        snapshot::load(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut total = 0;
    for e in &entries {
        println!("{}\t{:?}\t{}", e.name, e.dims, e.data.len());
        total += e.data.len();
    }
    println!("{} tensors, {} values", entries.len(), total);
    Ok(())
}
