//! Command-line interface.
//!
//! Every option can also be set in a `--config` file (see [`config`]);
//! command-line values take precedence over the file, which takes
//! precedence over built-in defaults.

pub mod config;
pub mod plot;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::dataset::{
    assign_folds, load_manifest, plan_classes, read_plan, synthesize, write_manifest, write_plan,
    FeatureStore, PlanConfig, Split, SyntheticSpec,
};
use crate::encoder::{Activation, EncoderConfig};
use crate::error::{Error, Result};
use crate::margin::{margin_at_epoch, MarginSchedule, DEFAULT_SCALE};
use crate::metrics::{
    mp_at_5_with, read_labels, truth_from_labels, write_labels, write_report, PrecisionRule,
};
use crate::optim::StratifiedLrConfig;
use crate::retrieval::{
    exhaustive_top_k, fuse_views, read_results, top_k_with_threads, write_results, EmbeddingStore,
};
use crate::rng::SeededRng;
use crate::trainer::{self, PhasePlan, TrainConfig};
use config::{ConfigFile, Resolver};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FEATURES_FILE: &str = "features.fea";

const VIEW_STREAM: u64 = 0x7669_6577;
const BENCH_STREAM: u64 = 0x6265_6e63;

#[derive(Debug, Parser)]
#[command(
    name = "embedkit",
    version,
    about = "Embedding training, exact retrieval and mP@5 evaluation"
)]
pub struct Cli {
    /// Optional key = value file supplying defaults for any option.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Log progress (-v) or debug detail (-vv) to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded clustered dataset: manifest CSV plus feature store.
    Synth(SynthArgs),
    /// Apply the class sampling rules and fold split to a manifest.
    Plan(PlanArgs),
    /// Train the encoder and margin head on a plan.
    Train(TrainArgs),
    /// Embed samples with a trained checkpoint into an EMB1 store.
    Embed(EmbedArgs),
    /// Exact top-k search of query embeddings against an index.
    Query(QueryArgs),
    /// Score retrieval results with mP@5.
    Evaluate(EvaluateArgs),
    /// Tabulate and plot the per-epoch margin schedule.
    MarginSchedule(MarginArgs),
    /// Time exact search on random unit vectors and spot-check it.
    Bench(BenchArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Plan(_) => "plan",
            Command::Train(_) => "train",
            Command::Embed(_) => "embed",
            Command::Query(_) => "query",
            Command::Evaluate(_) => "evaluate",
            Command::MarginSchedule(_) => "margin-schedule",
            Command::Bench(_) => "bench",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of classes [default: 200]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Feature dimension [default: 32]
    #[arg(long)]
    pub dim_in: Option<usize>,
    /// Fewest samples per class [default: 30]
    #[arg(long)]
    pub per_class_min: Option<usize>,
    /// Most samples per class [default: 60]
    #[arg(long)]
    pub per_class_max: Option<usize>,
    /// Per-component noise around each class center [default: 0.15]
    #[arg(long)]
    pub std: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; receives manifest.csv and features.fea
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Per-class sample cap [default: 100]
    #[arg(long)]
    pub cap: Option<usize>,
    /// Classes with fewer samples are dropped [default: 3]
    #[arg(long)]
    pub min_keep: Option<usize>,
    /// Smaller classes are resampled up to this count [default: 20]
    #[arg(long)]
    pub floor: Option<usize>,
    /// Number of folds [default: 20]
    #[arg(long)]
    pub k: Option<u32>,
    /// Fold held out for validation [default: 0]
    #[arg(long)]
    pub val_fold: Option<u32>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Plan CSV to write
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Phase list, e.g. 2u,1f (u = unfrozen backbone, f = frozen) [default: 2u,1f]
    #[arg(long)]
    pub phases: Option<String>,
    /// [default: 0.1]
    #[arg(long)]
    pub margin_init: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    pub margin_stride: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    pub margin_max: Option<f64>,
    /// Logit scale [default: 30]
    #[arg(long)]
    pub scale: Option<f64>,
    /// Head learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Backbone learning-rate reduction factor [default: 1e-3]
    #[arg(long = "c")]
    pub c: Option<f64>,
    /// [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Cosine schedule floor [default: 0]
    #[arg(long)]
    pub eta_min: Option<f64>,
    /// Restart the cosine schedule at each phase
    #[arg(long)]
    pub restart_per_phase: bool,
    /// [default: 64]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Upper bound on total epochs [default: 15]
    #[arg(long)]
    pub max_epochs: Option<u32>,
    /// Comma-separated backbone layer widths [default: 128,128]
    #[arg(long)]
    pub backbone_widths: Option<String>,
    /// [default: 64]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    pub projection_width: Option<usize>,
    /// [default: 0.2]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// tanh or relu [default: tanh]
    #[arg(long)]
    pub activation: Option<Activation>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train every epoch at the maximum margin
    #[arg(long)]
    pub no_dynamic_margin: bool,
    /// Keep a projection layer between backbone and neck
    #[arg(long)]
    pub with_projection: bool,
    /// Train the backbone at the full learning rate
    #[arg(long)]
    pub no_stratified_lr: bool,
    #[arg(long)]
    pub out_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out_report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Only embed samples of this plan ...
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// ... in this split (train or validation) [default: validation]
    #[arg(long)]
    pub split: Option<Split>,
    /// Views fused per sample; views after the first are jittered copies [default: 1]
    #[arg(long)]
    pub flip_views: Option<usize>,
    /// Noise scale of jittered views [default: 0.05]
    #[arg(long)]
    pub jitter: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// EMB1 store to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write an id,label CSV for the embedded samples
    #[arg(long)]
    pub out_labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// Never return a query's own id
    #[arg(long)]
    pub exclude_self: bool,
    /// Worker threads [default: all cores]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Results CSV to write
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub query_labels: Option<PathBuf>,
    #[arg(long)]
    pub index_labels: Option<PathBuf>,
    /// Per-query report CSV to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Count hits over the first 5 ranks instead of the first min(n_q, 5)
    #[arg(long)]
    pub clipped_denominator: bool,
}

#[derive(Debug, Args)]
pub struct MarginArgs {
    /// [default: 0.1]
    #[arg(long)]
    pub init: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    pub stride: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    pub max: Option<f64>,
    /// [default: 10]
    #[arg(long)]
    pub epochs: Option<u32>,
    /// CSV table to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SVG plot to write
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// [default: 200000]
    #[arg(long)]
    pub index_size: Option<usize>,
    /// [default: 5000]
    #[arg(long)]
    pub queries: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub dim: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// Worker threads [default: all cores]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Queries re-checked against an exhaustive scan [default: 100]
    #[arg(long)]
    pub verify: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional results CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Long option names accepted in config files, bare and command-scoped.
pub fn config_keys() -> HashSet<String> {
    let mut keys = HashSet::new();
    for sub in Cli::command().get_subcommands() {
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                if long == "config" || long == "verbose" || long == "help" {
                    continue;
                }
                keys.insert(long.to_string());
                keys.insert(format!("{}.{long}", sub.get_name()));
            }
        }
    }
    keys
}

pub fn run(cli: &Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path, &config_keys())?,
        None => ConfigFile::default(),
    };
    let r = file.scope(cli.command.name());
    match &cli.command {
        Command::Synth(a) => synth(a, &r),
        Command::Plan(a) => plan(a, &r),
        Command::Train(a) => train(a, &r),
        Command::Embed(a) => embed(a, &r),
        Command::Query(a) => query(a, &r),
        Command::Evaluate(a) => evaluate(a, &r),
        Command::MarginSchedule(a) => margin_schedule(a, &r),
        Command::Bench(a) => bench(a, &r),
    }
}

fn synth(a: &SynthArgs, r: &Resolver) -> Result<()> {
    let spec = SyntheticSpec {
        class_count: r.value(a.classes, "classes", 200)?,
        dim_in: r.value(a.dim_in, "dim-in", 32)?,
        samples_per_class: (
            r.value(a.per_class_min, "per-class-min", 30)?,
            r.value(a.per_class_max, "per-class-max", 60)?,
        ),
        cluster_std: r.value(a.std, "std", 0.15)?,
        seed: r.value(a.seed, "seed", 0)?,
    };
    let out: PathBuf = r.required(a.out.clone(), "out")?;
    let (records, features) = synthesize(&spec)?;
    if spec.cluster_std == 0.0 {
        eprintln!(
            "warning: --std 0 makes every sample of a class a duplicate vector of its center"
        );
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    write_manifest(&records, &out.join(MANIFEST_FILE))?;
    features.write(&out.join(FEATURES_FILE))?;
    println!(
        "wrote {} samples in {} classes (dim {}) to {}",
        records.len(),
        spec.class_count,
        spec.dim_in,
        out.display()
    );
    Ok(())
}

fn plan(a: &PlanArgs, r: &Resolver) -> Result<()> {
    let manifest: PathBuf = r.required(a.manifest.clone(), "manifest")?;
    let out: PathBuf = r.required(a.out.clone(), "out")?;
    let cfg = PlanConfig {
        cap: r.value(a.cap, "cap", 100)?,
        min_keep: r.value(a.min_keep, "min-keep", 3)?,
        resample_floor: r.value(a.floor, "floor", 20)?,
    };
    cfg.validate()?;
    let k = r.value(a.k, "k", 20)?;
    let val_fold = r.value(a.val_fold, "val-fold", 0)?;
    let seed = r.value(a.seed, "seed", 0)?;
    let records = load_manifest(&manifest)?;
    if records.is_empty() {
        return Err(Error::Validation(format!(
            "manifest {} has no samples",
            manifest.display()
        )));
    }
    let planned = plan_classes(&records, cfg, seed)?;
    let planned = assign_folds(&planned, k, val_fold, seed)?;
    write_plan(&planned, &out)?;
    let train_ids = planned.train_entries().count();
    let val_ids = planned.validation_entries().count();
    println!(
        "classes {}  entries {} (train {train_ids}, validation {val_ids})  total multiplicity {}",
        planned.class_count,
        planned.entries.len(),
        planned.total_multiplicity()
    );
    Ok(())
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::Argument(format!("bad backbone width {w:?}")))
        })
        .collect()
}

fn train(a: &TrainArgs, r: &Resolver) -> Result<()> {
    let plan_path: PathBuf = r.required(a.plan.clone(), "plan")?;
    let features_path: PathBuf = r.required(a.features.clone(), "features")?;
    let out_ckpt: PathBuf = r.required(a.out_ckpt.clone(), "out-ckpt")?;
    let out_report: Option<PathBuf> = r.optional(a.out_report.clone(), "out-report")?;
    let plan = read_plan(&plan_path)?;
    let features = FeatureStore::read(&features_path)?;

    let phases: PhasePlan = r
        .value(a.phases.clone(), "phases", "2u,1f".to_string())?
        .parse()?;
    let widths = parse_widths(&r.value(
        a.backbone_widths.clone(),
        "backbone-widths",
        "128,128".to_string(),
    )?)?;
    let seed = r.value(a.seed, "seed", 0)?;
    let defaults = StratifiedLrConfig::default();
    let cfg = TrainConfig {
        encoder: EncoderConfig {
            dim_in: features.dim(),
            backbone_widths: widths,
            with_projection: r.switch(a.with_projection, "with-projection")?,
            projection_width: r.value(a.projection_width, "projection-width", 128)?,
            embed_dim: r.value(a.embed_dim, "embed-dim", 64)?,
            dropout_rate: r.value(a.dropout, "dropout", 0.2)?,
            activation: r.value(a.activation, "activation", Activation::Tanh)?,
            seed,
        },
        scale: r.value(a.scale, "scale", DEFAULT_SCALE)?,
        margin: MarginSchedule {
            m_init: r.value(a.margin_init, "margin-init", 0.1)?,
            stride: r.value(a.margin_stride, "margin-stride", 0.1)?,
            m_max: r.value(a.margin_max, "margin-max", 0.5)?,
        },
        dynamic_margin: !r.switch(a.no_dynamic_margin, "no-dynamic-margin")?,
        optimizer: StratifiedLrConfig {
            lr: r.value(a.lr, "lr", defaults.lr)?,
            c: r.value(a.c, "c", defaults.c)?,
            weight_decay: r.value(a.weight_decay, "weight-decay", defaults.weight_decay)?,
            eta_min: r.value(a.eta_min, "eta-min", defaults.eta_min)?,
            restart_per_phase: r.switch(a.restart_per_phase, "restart-per-phase")?,
            ..defaults
        },
        stratified_lr: !r.switch(a.no_stratified_lr, "no-stratified-lr")?,
        phases,
        batch_size: r.value(a.batch, "batch", 64)?,
        max_epochs: r.value(a.max_epochs, "max-epochs", 15)?,
        seed,
    };

    let out = trainer::run(&plan, &features, &cfg)?;
    println!("epoch  loss        margin  lr_head     lr_backbone  val_mp5   seconds");
    for e in &out.report.epochs {
        println!(
            "{:<6} {:<11.6} {:<7} {:<11.3e} {:<12.3e} {:<9} {:.2}",
            e.epoch,
            e.loss,
            e.margin,
            e.lr_head,
            e.lr_backbone,
            e.val_mp5
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into()),
            e.seconds
        );
    }
    Checkpoint {
        encoder: out.encoder,
        head: Some(out.head),
        optimizer: Some(out.optimizer),
    }
    .write(&out_ckpt)?;
    if let Some(path) = out_report {
        out.report.write_csv(&path)?;
    }
    Ok(())
}

/// Copy of `x` with seeded Gaussian noise, one independent stream per
/// sample id and view.
fn jittered_view(x: &[f64], scale: f64, seed: u64, id: u64, view: usize) -> Vec<f64> {
    let mut rng = SeededRng::derive(seed, &[VIEW_STREAM, id, view as u64]);
    x.iter().map(|v| v + scale * rng.normal()).collect()
}

fn embed(a: &EmbedArgs, r: &Resolver) -> Result<()> {
    let ckpt = Checkpoint::read(&r.required::<PathBuf>(a.ckpt.clone(), "ckpt")?)?;
    let records = load_manifest(&r.required::<PathBuf>(a.manifest.clone(), "manifest")?)?;
    let features = FeatureStore::read(&r.required::<PathBuf>(a.features.clone(), "features")?)?;
    let out: PathBuf = r.required(a.out.clone(), "out")?;
    let out_labels: Option<PathBuf> = r.optional(a.out_labels.clone(), "out-labels")?;
    let views = r.value(a.flip_views, "flip-views", 1)?;
    let jitter = r.value(a.jitter, "jitter", 0.05)?;
    let seed = r.value(a.seed, "seed", 0)?;
    if views == 0 {
        return Err(Error::Argument("--flip-views must be >= 1".into()));
    }
    if !(jitter.is_finite() && jitter >= 0.0) {
        return Err(Error::Argument(format!(
            "--jitter must be >= 0, got {jitter}"
        )));
    }
    let keep: Option<HashSet<u64>> = match r.optional::<PathBuf>(a.plan.clone(), "plan")? {
        Some(path) => {
            let split = r.value(a.split, "split", Split::Validation)?;
            let plan = read_plan(&path)?;
            Some(
                plan.entries
                    .iter()
                    .filter(|e| e.split == split)
                    .map(|e| e.sample_id)
                    .collect(),
            )
        }
        None => None,
    };

    let encoder = &ckpt.encoder;
    let mut store = EmbeddingStore::new(encoder.config().embed_dim)?;
    let mut labels = Vec::new();
    for rec in &records {
        if keep.as_ref().is_some_and(|k| !k.contains(&rec.sample_id)) {
            continue;
        }
        let x = features.get(rec.sample_id).ok_or_else(|| {
            Error::Validation(format!("no features for sample_id {}", rec.sample_id))
        })?;
        let mut embedded = vec![encoder.embed(x)?];
        for v in 1..views {
            embedded.push(encoder.embed(&jittered_view(x, jitter, seed, rec.sample_id, v))?);
        }
        let refs: Vec<&[f64]> = embedded.iter().map(Vec::as_slice).collect();
        let fused = if views == 1 {
            embedded[0].clone()
        } else {
            fuse_views(&refs)?
        };
        store.push_f64(rec.sample_id, &fused)?;
        labels.push((rec.sample_id, rec.class_label.clone()));
    }
    store.write(&out)?;
    if let Some(path) = out_labels {
        write_labels(&labels, &path)?;
    }
    println!(
        "embedded {} samples (dim {}, {views} view(s)) to {}",
        store.len(),
        store.dim(),
        out.display()
    );
    Ok(())
}

fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn query(a: &QueryArgs, r: &Resolver) -> Result<()> {
    let index = EmbeddingStore::read(&r.required::<PathBuf>(a.index.clone(), "index")?)?;
    let queries = EmbeddingStore::read(&r.required::<PathBuf>(a.queries.clone(), "queries")?)?;
    let out: PathBuf = r.required(a.out.clone(), "out")?;
    let k = r.value(a.k, "k", 5)?;
    let exclude_self = r.switch(a.exclude_self, "exclude-self")?;
    let threads = r.value(a.threads, "threads", default_threads())?;
    let started = Instant::now();
    let results = top_k_with_threads(&index, &queries, k, exclude_self, threads)?;
    let elapsed = started.elapsed();
    write_results(&results, &out)?;
    println!(
        "{} queries x {} index vectors, top-{k} in {:.3} s",
        queries.len(),
        index.len(),
        elapsed.as_secs_f64()
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs, r: &Resolver) -> Result<()> {
    let results = read_results(&r.required::<PathBuf>(a.results.clone(), "results")?)?;
    let query_labels =
        read_labels(&r.required::<PathBuf>(a.query_labels.clone(), "query-labels")?)?;
    let index_labels =
        read_labels(&r.required::<PathBuf>(a.index_labels.clone(), "index-labels")?)?;
    let out: Option<PathBuf> = r.optional(a.out.clone(), "out")?;
    let rule = if r.switch(a.clipped_denominator, "clipped-denominator")? {
        PrecisionRule::ClippedDenominator
    } else {
        PrecisionRule::Literal
    };
    let labelled: HashMap<u64, &str> = query_labels
        .iter()
        .map(|(id, l)| (*id, l.as_str()))
        .collect();
    if let Some(q) = results
        .queries
        .iter()
        .find(|q| !labelled.contains_key(&q.query_id))
    {
        return Err(Error::Validation(format!(
            "query {} has no label",
            q.query_id
        )));
    }
    let truth = truth_from_labels(&query_labels, &index_labels);
    let report = mp_at_5_with(&results, &truth, rule)?;
    if let Some(path) = out {
        write_report(&report, &path)?;
    }
    println!("Q,skipped,mp_at_5");
    println!("{}", report.summary_line());
    Ok(())
}

fn margin_schedule(a: &MarginArgs, r: &Resolver) -> Result<()> {
    let sched = MarginSchedule::new(
        r.value(a.init, "init", 0.1)?,
        r.value(a.stride, "stride", 0.1)?,
        r.value(a.max, "max", 0.5)?,
    )?;
    let epochs = r.value(a.epochs, "epochs", 10)?;
    if epochs == 0 {
        return Err(Error::Argument("--epochs must be >= 1".into()));
    }
    let out: Option<PathBuf> = r.optional(a.out.clone(), "out")?;
    let svg: Option<PathBuf> = r.optional(a.svg.clone(), "svg")?;
    let mut table = String::from("epoch,margin\n");
    let mut points = Vec::new();
    for e in 1..=epochs {
        let m = margin_at_epoch(&sched, e)?;
        table.push_str(&format!("{e},{m}\n"));
        points.push((e as f64, m));
    }
    print!("{table}");
    if let Some(path) = out {
        write_text(&path, &table)?;
    }
    if let Some(path) = svg {
        write_text(
            &path,
            &plot::line_chart("Margin schedule", "epoch", "margin", &points),
        )?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn bench(a: &BenchArgs, r: &Resolver) -> Result<()> {
    let index_size = r.value(a.index_size, "index-size", 200_000)?;
    let query_count = r.value(a.queries, "queries", 5_000)?;
    let dim = r.value(a.dim, "dim", 64)?;
    let k = r.value(a.k, "k", 5)?;
    let threads = r.value(a.threads, "threads", default_threads())?;
    let verify = r.value(a.verify, "verify", 100)?;
    let seed = r.value(a.seed, "seed", 0)?;
    let out: Option<PathBuf> = r.optional(a.out.clone(), "out")?;

    let started = Instant::now();
    let mut seeds = SeededRng::derive(seed, &[BENCH_STREAM]);
    let index = EmbeddingStore::random(index_size, dim, seeds.next_u64(), 0)?;
    let queries = EmbeddingStore::random(query_count, dim, seeds.next_u64(), index_size as u64)?;
    let generated = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let results = top_k_with_threads(&index, &queries, k, false, threads)?;
    let searched = started.elapsed().as_secs_f64();
    println!(
        "index {index_size} x dim {dim}, {query_count} queries, k {k}, {threads} thread(s): \
         generated in {generated:.2} s, searched in {searched:.3} s ({:.0} queries/s)",
        query_count as f64 / searched.max(1e-9)
    );

    let mut picks: Vec<usize> = (0..query_count).collect();
    seeds.shuffle(&mut picks);
    picks.truncate(verify);
    picks.sort_unstable();
    for &row in &picks {
        let expected = exhaustive_top_k(&index, queries.vector(row), queries.ids()[row], k, false);
        let got = &results.queries[row].neighbors;
        let same = got.len() == expected.len()
            && got
                .iter()
                .zip(&expected)
                .all(|(g, e)| g.id == e.id && g.similarity.to_bits() == e.similarity.to_bits());
        if !same {
            return Err(Error::Validation(format!(
                "query {} differs from the exhaustive scan",
                queries.ids()[row]
            )));
        }
    }
    println!(
        "verified {} sampled queries against an exhaustive scan: ok",
        picks.len()
    );
    if let Some(path) = out {
        write_results(&results, &path)?;
    }
    Ok(())
}

/// Exit status for an error: 2 for usage and configuration problems,
/// 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_keys_cover_flags() {
        let keys = config_keys();
        assert!(keys.contains("lr"));
        assert!(keys.contains("train.lr"));
        assert!(keys.contains("c"));
        assert!(keys.contains("bench.index-size"));
        assert!(!keys.contains("config"));
    }

    #[test]
    fn jitter_is_seeded_per_view() {
        let x = [0.5, -0.5, 1.0];
        assert_eq!(
            jittered_view(&x, 0.1, 1, 7, 1),
            jittered_view(&x, 0.1, 1, 7, 1)
        );
        assert_ne!(
            jittered_view(&x, 0.1, 1, 7, 1),
            jittered_view(&x, 0.1, 1, 7, 2)
        );
        assert_eq!(jittered_view(&x, 0.0, 1, 7, 1), x.to_vec());
    }
}
