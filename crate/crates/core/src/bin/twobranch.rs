//! Command-line surface: synthetic data generation, training, evaluation,
//! single-query localization and retrieval.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use twobranch::branches::{EmbeddingModel, Model, SimilarityModel};
use twobranch::checkpoint;
use twobranch::config::Config;
use twobranch::data::{
    generate_split_datasets, load_dataset, write_dataset, SplitCounts, SyntheticSpec,
};
use twobranch::dataset::{GroundedDataset, TaskKind};
use twobranch::error::Error;
use twobranch::eval::{
    combined_retrieval, cross_modal_retrieval, localization_recall, localize_phrase,
    sentence_to_sentence, Direction, MetricRecord, RecallReport, Scorer,
};
use twobranch::geometry::iou;
use twobranch::optim::{train, mix_seed};

#[derive(Parser)]
#[command(
    name = "twobranch",
    about = "Two-branch embedding and similarity networks for cross-modal matching",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Localization,
    Retrieval,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> TaskKind {
        match t {
            TaskArg::Localization => TaskKind::Localization,
            TaskArg::Retrieval => TaskKind::Retrieval,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NetworkArg {
    Embedding,
    Similarity,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    I2s,
    S2i,
    S2s,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test datasets with planted
    /// correspondence.
    GenData(GenDataArgs),
    /// Train a network on a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint: localization or bi-directional retrieval
    /// recall tables.
    Eval(EvalArgs),
    /// Rank one phrase's proposals and print them.
    Localize(LocalizeArgs),
    /// Run a single retrieval direction.
    Retrieve(RetrieveArgs),
    /// Print the effective config for a task (defaults plus optional file).
    ShowConfig(ShowConfigArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory; train/, val/ and test/ subdirectories are created.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "localization")]
    task: TaskArg,
    #[arg(long, default_value_t = 600)]
    items: usize,
    #[arg(long, default_value_t = 100)]
    val_items: usize,
    #[arg(long, default_value_t = 100)]
    test_items: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 64)]
    image_dim: usize,
    #[arg(long, default_value_t = 48)]
    text_dim: usize,
    #[arg(long, default_value_t = 5)]
    texts_per_item: usize,
    #[arg(long, default_value_t = 20)]
    proposals_per_item: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    corruption_scale: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, value_enum)]
    network: NetworkArg,
    #[arg(long)]
    manifest: PathBuf,
    /// Optional TOML overlay over the task defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Final checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Line-delimited per-epoch records.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory for per-epoch checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated recall cutoffs.
    #[arg(long, default_value = "1,5,10", value_delimiter = ',')]
    ks: Vec<usize>,
    /// Weight of the region-phrase distance; enables the combined protocol.
    #[arg(long)]
    alpha: Option<f64>,
    /// Region-phrase model for the combined protocol; defaults to the main
    /// checkpoint.
    #[arg(long)]
    region_checkpoint: Option<PathBuf>,
    /// Write machine-readable records (JSON lines) here.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Candidate pool cap for localization.
    #[arg(long, default_value_t = 200)]
    max_proposals: usize,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    phrase_id: u32,
    /// Print at most this many rows.
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    direction: DirectionArg,
    #[arg(long, default_value = "1,5,10", value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct ShowConfigArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", category(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn category(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Data(_) => "data",
        Error::Sampling(_) => "data",
        Error::Train(_) => "train",
        Error::Eval(_) => "eval",
        Error::Tensor(_) | Error::Geometry(_) | Error::Loss(_) => "numeric",
        Error::Io(_) => "io",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Data(_) | Error::Sampling(_) => 4,
        Error::Train(_) => 5,
        Error::Eval(_) => 6,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Localize(args) => run_localize(args),
        Command::Retrieve(args) => run_retrieve(args),
        Command::ShowConfig(args) => {
            let cfg = effective_config(args.config.as_deref(), args.task.into())?;
            print!("{}", cfg.canonical_toml());
            Ok(())
        }
    }
}

fn effective_config(path: Option<&std::path::Path>, task: TaskKind) -> Result<Config, Error> {
    let cfg = match path {
        Some(p) => Config::load(p, task)?,
        None => Config::for_task(task),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(args: GenDataArgs) -> Result<(), Error> {
    let spec = SyntheticSpec {
        items: args.items,
        latent_dim: args.latent_dim,
        image_feature_dim: args.image_dim,
        text_feature_dim: args.text_dim,
        texts_per_item: args.texts_per_item,
        proposals_per_item: args.proposals_per_item,
        noise_scale: args.noise_scale,
        corruption_scale: args.corruption_scale,
        include_gt_proposal: true,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let counts = SplitCounts {
        train: args.items,
        val: args.val_items,
        test: args.test_items,
    };
    let task: TaskKind = args.task.into();
    let (train_ds, val_ds, test_ds) = generate_split_datasets(&spec, &counts)?;
    for (name, ds) in [("train", &train_ds), ("val", &val_ds), ("test", &test_ds)] {
        let path = write_dataset(ds, task, &args.out.join(name))?;
        println!(
            "{name}: {} images, {} phrases, {} sentences -> {}",
            ds.images().len(),
            ds.phrases().len(),
            ds.sentences().len(),
            path.display()
        );
    }
    Ok(())
}

fn check_dims(cfg: &Config, ds: &GroundedDataset, task: TaskKind) -> Result<(), Error> {
    let image_dim = ds.image_feature_dim();
    let text_dim = match task {
        TaskKind::Localization => ds.phrase_feature_dim(),
        TaskKind::Retrieval => ds.sentence_feature_dim(),
    };
    if let Some(d) = image_dim {
        if d != cfg.model.image_input_dim {
            return Err(Error::Config(twobranch::error::ConfigError::Invalid(
                format!(
                    "model image_input_dim {} does not match dataset feature dim {d}",
                    cfg.model.image_input_dim
                ),
            )));
        }
    }
    if let Some(d) = text_dim {
        if d != cfg.model.text_input_dim {
            return Err(Error::Config(twobranch::error::ConfigError::Invalid(
                format!(
                    "model text_input_dim {} does not match dataset feature dim {d}",
                    cfg.model.text_input_dim
                ),
            )));
        }
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let task: TaskKind = args.task.into();
    let mut cfg = effective_config(args.config.as_deref(), task)?;
    // The bare task defaults carry embedding-only neighborhood weights; drop
    // them for the similarity network. An explicit config asking for both is
    // still a configuration error.
    if matches!(args.network, NetworkArg::Similarity) && args.config.is_none() {
        cfg.loss.lambda_xx = 0.0;
        cfg.loss.lambda_yy = 0.0;
        cfg.train.neighborhood_activation_epoch = None;
    }
    let (ds, manifest_task) = load_dataset(&args.manifest)?;
    if manifest_task != task {
        return Err(Error::Config(twobranch::error::ConfigError::Invalid(
            format!("manifest is for task {manifest_task}, requested {task}"),
        )));
    }
    ds.validate_for(task).map_err(twobranch::error::Error::Sampling)?;
    check_dims(&cfg, &ds, task)?;

    let init_seed = mix_seed(args.seed, 0x1217, 0);
    let mut model = match args.network {
        NetworkArg::Embedding => Model::Embedding(
            EmbeddingModel::init(cfg.embedding_dims(), cfg.model.nonlinear, init_seed)
                .map_err(twobranch::error::Error::Tensor)?,
        ),
        NetworkArg::Similarity => Model::Similarity(
            SimilarityModel::init(cfg.similarity_dims(), cfg.model.nonlinear, init_seed)
                .map_err(twobranch::error::Error::Tensor)?,
        ),
    };

    let mut opts = cfg.train_options(args.seed);
    opts.metrics_path = args.metrics.clone();
    opts.checkpoint_dir = args.checkpoint_dir.clone();

    let reports = train(&mut model, &ds, &opts, task)?;
    for r in &reports {
        println!(
            "epoch {:>3}: loss {:>12.4} ({} steps, {} items, {} skipped pairs, neighborhood {}) [{:.2}s]",
            r.epoch,
            r.loss.total,
            r.steps,
            r.items,
            r.skipped_positives,
            if r.neighborhood_terms_active { "on" } else { "off" },
            r.wall_secs
        );
    }
    checkpoint::save(&model, &args.out, &cfg.hash())?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn load_model(path: &std::path::Path) -> Result<Model, Error> {
    let (model, _) = checkpoint::load(path)?;
    Ok(model)
}

fn scorer_of(model: &Model) -> Scorer<'_> {
    match model {
        Model::Embedding(m) => Scorer::Embedding(m),
        Model::Similarity(m) => Scorer::Similarity(m),
    }
}

fn write_records(path: &std::path::Path, records: &[MetricRecord]) -> Result<(), Error> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("serializable record"))?;
    }
    Ok(())
}

fn print_report(title: &str, report: &RecallReport) {
    print!("{}", report.table(title));
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let model = load_model(&args.checkpoint)?;
    let (ds, task) = load_dataset(&args.manifest)?;
    let hyper = twobranch::branches::NormHyper::default();
    let mut records = Vec::new();
    match task {
        TaskKind::Localization => {
            let scorer = scorer_of(&model);
            let report = localization_recall(
                &scorer,
                &ds,
                &args.ks,
                0.5,
                args.max_proposals,
                &hyper,
            )?;
            print_report(
                &format!("phrase localization ({})", model.kind()),
                &report,
            );
            records.extend(report.records("localization", "phrase-to-region"));
        }
        TaskKind::Retrieval => {
            let scorer = scorer_of(&model);
            for direction in [Direction::ImageToSentence, Direction::SentenceToImage] {
                let report = cross_modal_retrieval(&scorer, &ds, direction, &args.ks, &hyper)?;
                print_report(&format!("{direction} ({})", model.kind()), &report);
                records.extend(report.records("retrieval", &direction.to_string()));
            }
            if let Model::Embedding(emb) = &model {
                let report = sentence_to_sentence(emb, &ds, &args.ks, &hyper)?;
                print_report("sentence-to-sentence", &report);
                records.extend(report.records("retrieval", "sentence-to-sentence"));
            }
            if let Some(alpha) = args.alpha {
                let Model::Embedding(emb) = &model else {
                    return Err(Error::Config(twobranch::error::ConfigError::Invalid(
                        "the combined protocol needs an embedding checkpoint".into(),
                    )));
                };
                let region_model;
                let region_ref = match &args.region_checkpoint {
                    Some(p) => {
                        let (m, _) = checkpoint::load(p)?;
                        let Model::Embedding(m) = m else {
                            return Err(Error::Config(twobranch::error::ConfigError::Invalid(
                                "the region checkpoint must be an embedding model".into(),
                            )));
                        };
                        region_model = m;
                        &region_model
                    }
                    None => emb,
                };
                if ds.phrases().is_empty() {
                    return Err(Error::Config(twobranch::error::ConfigError::Invalid(
                        "combined protocol needs phrases in the manifest".into(),
                    )));
                }
                for direction in [Direction::ImageToSentence, Direction::SentenceToImage] {
                    let report = combined_retrieval(
                        emb, region_ref, &ds, direction, alpha, &args.ks, &hyper,
                    )?;
                    print_report(&format!("{direction} (combined, alpha {alpha})"), &report);
                    records.extend(
                        report.records("retrieval-combined", &direction.to_string()),
                    );
                }
            }
        }
    }
    if let Some(path) = &args.records {
        write_records(path, &records)?;
    }
    Ok(())
}

fn run_localize(args: LocalizeArgs) -> Result<(), Error> {
    let model = load_model(&args.checkpoint)?;
    let (ds, _) = load_dataset(&args.manifest)?;
    let Some(pi) = ds.phrase_idx(args.phrase_id) else {
        return Err(Error::Data(twobranch::error::DataError::DanglingId {
            kind: "phrase",
            id: args.phrase_id,
            path: args.manifest.display().to_string(),
        }));
    };
    let phrase = &ds.phrases()[pi];
    let img = &ds.images()[ds.image_idx(phrase.image).expect("validated")];
    let hyper = twobranch::branches::NormHyper::default();
    let scorer = scorer_of(&model);
    let out = localize_phrase(
        &scorer,
        &phrase.feature,
        &img.proposals,
        &phrase.gt_box,
        &[1],
        0.5,
        &hyper,
    )?;
    println!(
        "phrase {} (image {}, ground truth {:?})",
        args.phrase_id,
        phrase.image,
        phrase.gt_box.corners()
    );
    println!("rank  proposal  score        iou     box");
    for (rank, &p) in out.ranking.iter().take(args.k).enumerate() {
        let b = img.proposals[p].bbox;
        println!(
            "{:>4}  {:>8}  {:>10.5}  {:.4}  [{:.1}, {:.1}, {:.1}, {:.1}]",
            rank + 1,
            p,
            out.scores[p],
            iou(&b, &phrase.gt_box),
            b.x_min,
            b.y_min,
            b.x_max,
            b.y_max
        );
    }
    Ok(())
}

fn run_retrieve(args: RetrieveArgs) -> Result<(), Error> {
    let model = load_model(&args.checkpoint)?;
    let (ds, _) = load_dataset(&args.manifest)?;
    let hyper = twobranch::branches::NormHyper::default();
    let mut records = Vec::new();
    match args.direction {
        DirectionArg::I2s | DirectionArg::S2i => {
            let direction = match args.direction {
                DirectionArg::I2s => Direction::ImageToSentence,
                _ => Direction::SentenceToImage,
            };
            let scorer = scorer_of(&model);
            let report = cross_modal_retrieval(&scorer, &ds, direction, &args.ks, &hyper)?;
            print_report(&format!("{direction} ({})", model.kind()), &report);
            records.extend(report.records("retrieval", &direction.to_string()));
        }
        DirectionArg::S2s => {
            let Model::Embedding(emb) = &model else {
                return Err(Error::Config(twobranch::error::ConfigError::Invalid(
                    "sentence-to-sentence retrieval needs an embedding checkpoint".into(),
                )));
            };
            let report = sentence_to_sentence(emb, &ds, &args.ks, &hyper)?;
            print_report("sentence-to-sentence", &report);
            records.extend(report.records("retrieval", "sentence-to-sentence"));
        }
    }
    if let Some(path) = &args.records {
        write_records(path, &records)?;
    }
    Ok(())
}
