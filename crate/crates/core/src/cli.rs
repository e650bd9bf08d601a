//! Command-line front end: dataset generation, training, evaluation,
//! diversity statistics, attention visualization, and checkpoint inspection
//! behind one executable.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or config), 2 runtime
//! error.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, ViewTag, Vocabulary};
use crate::encoders::{count_parameters, ModelConfig, Variant};
use crate::error::Error;
use crate::eval::{
    self, attention_mask, zero_shot_classify, FusionKind, FusionStrategy, RetrievalReport,
};
use crate::losses::LossKind;
use crate::matching::PlanMode;
use crate::tensor::Tensor;
use crate::training::{
    load_checkpoint, load_dataset, metrics_to_csv, save_checkpoint, train, worker_threads,
    TrainConfig,
};

/// Usage problems exit 1, runtime failures exit 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub views: Vec<String>,
    pub seed: u64,
    pub image_size: usize,
}

/// Merged view of model, training, and dataset settings; the single config
/// file format. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: Option<String>,
}

fn load_config(path: Option<&PathBuf>) -> std::result::Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn parse_views(spec: &str) -> std::result::Result<Vec<ViewTag>, Failure> {
    spec.split(',')
        .map(|v| ViewTag::parse(v.trim()).map_err(|_| usage(format!("unknown view '{v}'"))))
        .collect()
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, Failure> {
    match s {
        "o2o" => Ok(LossKind::O2O),
        "o2m" => Ok(LossKind::O2M),
        "m2m" => Ok(LossKind::M2M),
        other => Err(usage(format!("unknown loss '{other}' (o2o|o2m|m2m)"))),
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, Failure> {
    match s {
        "vanilla" => Ok(Variant::Vanilla),
        "cls" => Ok(Variant::Cls),
        "mlp" => Ok(Variant::Mlp),
        other => Err(usage(format!("unknown variant '{other}' (vanilla|cls|mlp)"))),
    }
}

fn parse_plan(s: &str) -> std::result::Result<PlanMode, Failure> {
    match s {
        "identity" => Ok(PlanMode::Identity),
        "grouped" => Ok(PlanMode::Grouped),
        "free" => Ok(PlanMode::Free),
        other => Err(usage(format!("unknown plan '{other}' (identity|grouped|free)"))),
    }
}

fn parse_fusion(s: &str) -> std::result::Result<FusionKind, Failure> {
    match s {
        "max" => Ok(FusionKind::Max),
        "norm_max" => Ok(FusionKind::NormMax),
        "average" => Ok(FusionKind::Average),
        other => Err(usage(format!("unknown fusion '{other}' (max|norm_max|average)"))),
    }
}

fn parse_branches(s: &str) -> std::result::Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|b| {
            b.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad branch index '{b}'")))
        })
        .collect()
}

#[derive(Parser)]
#[command(
    name = "m2mclip",
    about = "Desk-scale multi-branch contrastive language-image lab",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for both data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic (image, multi-texts) dataset.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of scenes.
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated views (details,nouns,main_object,background,style).
        #[arg(long)]
        views: Option<String>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Manifest path (overrides config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Loss kind: o2o|o2m|m2m.
        #[arg(long)]
        loss: Option<String>,
        /// Encoder variant: vanilla|cls|mlp.
        #[arg(long)]
        variant: Option<String>,
        /// Matching plan: identity|grouped|free.
        #[arg(long)]
        plan: Option<String>,
        /// Optional step cap.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint: retrieval and zero-shot classification.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fusion strategy: max|norm_max|average.
        #[arg(long)]
        fusion: Option<String>,
        /// Comma-separated branch subset, e.g. 0,1,2.
        #[arg(long)]
        branches: Option<String>,
    },
    /// Text-diversity statistics over a dataset manifest.
    Stats {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Attention heatmap export for one image and branch.
    Viz {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the manifest.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        branch: usize,
    },
    /// Checkpoint summary: configuration and parameter counts.
    Inspect {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Run the CLI against an argument vector; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData {
            common,
            n,
            views,
            image_size,
        } => gen_data(common, n, views, image_size),
        Command::Train {
            common,
            data,
            loss,
            variant,
            plan,
            steps,
        } => run_train(common, data, loss, variant, plan, steps),
        Command::Eval {
            common,
            ckpt,
            data,
            fusion,
            branches,
        } => run_eval(common, ckpt, data, fusion, branches),
        Command::Stats { common, data } => run_stats(common, data),
        Command::Viz {
            common,
            ckpt,
            data,
            index,
            branch,
        } => run_viz(common, ckpt, data, index, branch),
        Command::Inspect { common, ckpt } => run_inspect(common, ckpt),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            eprintln!("run with --help for details");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn out_dir(common: &CommonArgs, cfg: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn gen_data(
    common: CommonArgs,
    n: Option<usize>,
    views: Option<String>,
    image_size: Option<usize>,
) -> CliResult {
    let cfg = load_config(common.config.as_ref())?;
    let n = n.unwrap_or(if cfg.data.n == 0 { 100 } else { cfg.data.n });
    let seed = common.seed.unwrap_or(cfg.data.seed);
    let image_size = image_size.unwrap_or(if cfg.data.image_size == 0 {
        32
    } else {
        cfg.data.image_size
    });
    let views = match views {
        Some(list) => parse_views(&list)?,
        None if !cfg.data.views.is_empty() => {
            parse_views(&cfg.data.views.join(","))?
        }
        None => ViewTag::ALL_CAPTIONED.to_vec(),
    };
    let out = out_dir(&common, &cfg);
    let manifest = data::generate_dataset(n, &views, seed, image_size, &out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn run_train(
    common: CommonArgs,
    data_path: Option<PathBuf>,
    loss: Option<String>,
    variant: Option<String>,
    plan: Option<String>,
    steps: Option<usize>,
) -> CliResult {
    let cfg = load_config(common.config.as_ref())?;
    let mut model_cfg = cfg.model.clone();
    let mut train_cfg = cfg.train.clone();
    if let Some(seed) = common.seed {
        train_cfg.seed = seed;
    }
    if let Some(path) = data_path {
        train_cfg.manifest = path.display().to_string();
    }
    if let Some(loss) = loss {
        train_cfg.loss_kind = parse_loss(&loss)?;
    }
    if let Some(variant) = variant {
        model_cfg.variant = parse_variant(&variant)?;
        if model_cfg.variant == Variant::Vanilla {
            model_cfg.branch_count = 1;
        }
    }
    if let Some(plan) = plan {
        train_cfg.plan_mode = parse_plan(&plan)?;
    }
    if let Some(steps) = steps {
        train_cfg.max_steps = Some(steps);
    }
    if train_cfg.manifest.is_empty() {
        return Err(usage("no dataset manifest (use --data or the config file)"));
    }
    // The builtin vocabulary drives tokenization; keep the embedding table
    // aligned with it.
    model_cfg.vocab_size = model_cfg.vocab_size.max(Vocabulary::builtin().len());

    let out = out_dir(&common, &cfg);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let outcome = train(&model_cfg, &train_cfg, None)?;
    let ckpt_path = out.join("checkpoint.bin");
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    let csv_path = out.join("metrics.csv");
    fs::write(&csv_path, metrics_to_csv(&outcome.metrics)).map_err(|e| Error::io(&csv_path, e))?;
    let last = outcome.metrics.last();
    println!(
        "trained {} steps, final loss {}, checkpoint {}",
        outcome.metrics.len(),
        last.map_or(f64::NAN, |r| r.loss),
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    fusion: String,
    branches: Option<Vec<usize>>,
    retrieval: BTreeMap<String, RetrievalReport>,
    zero_shot: Option<ZeroShotReport>,
}

#[derive(Serialize)]
struct ZeroShotReport {
    top1: f64,
    top5: f64,
}

fn run_eval(
    common: CommonArgs,
    ckpt: PathBuf,
    data_path: PathBuf,
    fusion: Option<String>,
    branches: Option<String>,
) -> CliResult {
    let cfg = load_config(common.config.as_ref())?;
    let kind = match fusion {
        Some(f) => parse_fusion(&f)?,
        None => FusionKind::Average,
    };
    let subset = branches.map(|b| parse_branches(&b)).transpose()?;
    let strategy = FusionStrategy {
        kind,
        branch_subset: subset.clone(),
    };

    let checkpoint = load_checkpoint(&ckpt)?;
    let (model, _) = checkpoint.restore()?;
    let dataset = load_dataset(&data_path)?;
    let threads = worker_threads();
    let enc = eval::encode_dataset(&model, &dataset, threads)?;

    let mut retrieval = BTreeMap::new();
    for (slot, view) in enc.views.iter().enumerate() {
        retrieval.insert(
            view.name().to_string(),
            eval::per_view_retrieval(&enc, slot, &strategy)?,
        );
    }

    // Zero-shot object classification needs ground-truth scenes.
    let zero_shot = if dataset.samples.iter().all(|s| s.scene.is_some()) {
        let labels: Vec<usize> = dataset
            .samples
            .iter()
            .map(|s| s.scene.as_ref().unwrap().object_id)
            .collect();
        let class_rows: Vec<Tensor> = (0..data::OBJECT_COUNT)
            .map(|o| {
                let tokens = Vocabulary::builtin().tokenize(&data::object_class_text(o));
                model.encode_text(&tokens)
            })
            .collect::<crate::error::Result<_>>()?;
        let class_texts = Tensor::stack_rows(&class_rows)?;
        let (top1, top5) = zero_shot_classify(&enc.image_sets, &labels, &class_texts, &strategy)?;
        Some(ZeroShotReport { top1, top5 })
    } else {
        None
    };

    let report = EvalReport {
        fusion: kind.to_string(),
        branches: subset,
        retrieval,
        zero_shot,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if common.out.is_some() || cfg.out_dir.is_some() {
        let out = out_dir(&common, &cfg);
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let path = out.join("eval.json");
        fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn run_stats(common: CommonArgs, data_path: PathBuf) -> CliResult {
    let cfg = load_config(common.config.as_ref())?;
    let samples = data::ingest_jsonl(&data_path)?;
    if samples.is_empty() {
        return Err(usage("empty dataset"));
    }
    let report = data::diversity_report(&samples)
        .map_err(|_| usage("need samples with at least two texts"))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
    eprintln!("view          avg_words  word_variance");
    for (view, s) in &report.per_view {
        eprintln!("{view:<13} {:>9.2} {:>13.2}", s.avg_words, s.word_variance);
    }
    eprintln!(
        "pairwise similarity mean {:.4} variance {:.4}",
        report.mean_pairwise_similarity, report.variance_pairwise_similarity
    );
    if common.out.is_some() || cfg.out_dir.is_some() {
        let out = out_dir(&common, &cfg);
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let path = out.join("stats.json");
        fs::write(&path, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn run_viz(
    common: CommonArgs,
    ckpt: PathBuf,
    data_path: PathBuf,
    index: usize,
    branch: usize,
) -> CliResult {
    let cfg = load_config(common.config.as_ref())?;
    let checkpoint = load_checkpoint(&ckpt)?;
    let (model, _) = checkpoint.restore()?;
    let dataset = load_dataset(&data_path)?;
    if index >= dataset.images.len() {
        return Err(usage(format!(
            "index {index} outside dataset of {}",
            dataset.images.len()
        )));
    }
    let out = out_dir(&common, &cfg);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let csv = out.join(format!("attention_{index}_b{branch}.csv"));
    let pgm = out.join(format!("attention_{index}_b{branch}.pgm"));
    let mask = attention_mask(&model, &dataset.images[index], branch, &csv, &pgm)?;
    println!(
        "wrote {} and {} ({} of {} patches selected)",
        csv.display(),
        pgm.display(),
        mask.selected.len(),
        mask.scores.len()
    );
    Ok(())
}

fn run_inspect(_common: CommonArgs, ckpt: PathBuf) -> CliResult {
    let checkpoint = load_checkpoint(&ckpt)?;
    let counts = count_parameters(&checkpoint.model)?;
    let actual: usize = checkpoint.params.iter().map(|(_, t)| t.len()).sum();
    #[derive(Serialize)]
    struct Inspect<'a> {
        step: u64,
        model: &'a ModelConfig,
        parameters: usize,
        base_parameters: usize,
        branch_overhead: usize,
        overhead_fraction: f64,
    }
    let report = Inspect {
        step: checkpoint.step,
        model: &checkpoint.model,
        parameters: actual,
        base_parameters: counts.base,
        branch_overhead: counts.branch_overhead,
        overhead_fraction: counts.overhead_fraction,
    };
    assert_eq!(
        counts.total, actual,
        "closed-form parameter count disagrees with the checkpoint"
    );
    println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
    Ok(())
}

/// Entry point used by the binary.
pub fn main_from_env() -> i32 {
    run(std::env::args())
}
