//! Command-line front end: ingest, prepare, gen, train, evaluate, predict.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ptgcn::config::Config;
use ptgcn::eval::{self, ModelScorer, Protocol, RankOptions};
use ptgcn::graph::{self, Interaction, InteractionLog, TemporalBipartiteGraph};
use ptgcn::io::{self, Format};
use ptgcn::par::Executor;
use ptgcn::synthetic::{self, GeneratorKind, GeneratorSpec};
use ptgcn::train;

#[derive(Parser)]
#[command(
    name = "ptgcn",
    version,
    about = "Time-aware graph convolution for sequential recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw dataset into canonical TSV plus id remap tables.
    Ingest(IngestArgs),
    /// Apply k-core filtering and split into train/valid/test files.
    Prepare(PrepareArgs),
    /// Write a synthetic dataset as canonical TSV.
    Gen(GenArgs),
    /// Train a model and write a checkpoint and a per-epoch history.
    Train(TrainArgs),
    /// Rank held-out interactions and report Recall@k / NDCG@k.
    Evaluate(EvaluateArgs),
    /// Print the top-k items for one user at one time.
    Predict(PredictArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Raw input file.
    #[arg(long)]
    input: PathBuf,
    /// movielens (user::item::rating::ts), amazon (item,user,rating,ts) or tsv.
    #[arg(long, default_value = "movielens")]
    format: String,
    /// Output directory for interactions.tsv, users.tsv and items.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitKind {
    /// Last interaction per user is test, second-to-last is validation.
    LeaveLast,
    /// Time-ordered train/valid/test slices by record count.
    Chrono,
}

#[derive(Args)]
struct PrepareArgs {
    /// Canonical TSV input.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for train.tsv, valid.tsv and test.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Minimum interactions per user and per item (k-core); 0 disables.
    #[arg(long, default_value_t = 0)]
    core: usize,
    #[arg(long, value_enum, default_value = "leave-last")]
    split: SplitKind,
    /// Training fraction for the chrono split.
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    /// Validation fraction for the chrono split.
    #[arg(long, default_value_t = 0.1)]
    valid_frac: f64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "cyclic")]
    kind: String,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    per_user: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise: Option<f64>,
    /// Drift windows.
    #[arg(long)]
    epochs: Option<usize>,
    /// Communities for the high-order generator.
    #[arg(long)]
    communities: Option<usize>,
    /// Output canonical TSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    /// Items keep static embeddings; only users are convolved.
    StaticItems,
    /// Drop time-bucket encodings.
    NoTime,
    /// Drop positional encodings.
    NoPos,
    /// Drop both encodings.
    NoTimeNoPos,
}

#[derive(Args)]
struct ModelFlags {
    /// Config file with `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set d=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl ModelFlags {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => Config::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training interactions (canonical TSV).
    #[arg(long)]
    train: PathBuf,
    /// Validation interactions for early stopping.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Output directory for model.ptgc and history.csv.
    #[arg(long)]
    out: PathBuf,
    /// Maximum number of epochs (overrides max_epochs).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Interactions visible as history (train and valid files). Repeatable.
    #[arg(long = "history")]
    history: Vec<PathBuf>,
    /// Held-out interactions to rank.
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "5,10", value_delimiter = ',')]
    k: Vec<usize>,
    /// Comma-separated ascending history thresholds for cold-start cohorts.
    #[arg(long, value_delimiter = ',')]
    cohorts: Vec<usize>,
    /// full or sampled:M.
    #[arg(long, default_value = "full")]
    protocol: String,
    /// Rank every test interaction instead of each user's last one.
    #[arg(long)]
    all_queries: bool,
    /// Keep items the user already consumed among the candidates.
    #[arg(long)]
    include_seen: bool,
    /// Write metrics CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Interactions visible as history. Repeatable.
    #[arg(long = "history")]
    history: Vec<PathBuf>,
    #[arg(long)]
    user: usize,
    /// Query timestamp (seconds).
    #[arg(long)]
    time: i64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    include_seen: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_log(path: &Path) -> Result<InteractionLog> {
    io::read_canonical(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let format: Format = a.format.parse()?;
    let (log, remap) = io::ingest(&a.input, format).with_context(|| format!("ingesting {}", a.input.display()))?;
    create_dir(&a.out)?;
    io::write_canonical(
        a.out.join("interactions.tsv"),
        &log,
        &[format!("source={}", a.input.display())],
    )?;
    io::write_remap(a.out.join("users.tsv"), &remap.users)?;
    io::write_remap(a.out.join("items.tsv"), &remap.items)?;
    println!(
        "users={} items={} interactions={}",
        log.user_count(),
        log.item_count(),
        log.len()
    );
    Ok(())
}

/// Second-to-last interaction of every user with at least three.
fn hold_out_valid(log: &InteractionLog) -> Result<(InteractionLog, InteractionLog)> {
    let mut counts = vec![0usize; log.user_count()];
    for r in log.records() {
        counts[r.user] += 1;
    }
    let mut seen = vec![0usize; log.user_count()];
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for r in log.records() {
        seen[r.user] += 1;
        if counts[r.user] >= 2 && seen[r.user] == counts[r.user] {
            valid.push(*r);
        } else {
            train.push(*r);
        }
    }
    Ok((
        InteractionLog::new(train, log.user_count(), log.item_count())?,
        InteractionLog::new(valid, log.user_count(), log.item_count())?,
    ))
}

fn cmd_prepare(a: PrepareArgs) -> Result<()> {
    let log = read_log(&a.input)?;
    let log = if a.core > 0 {
        let (filtered, user_map, item_map) = graph::k_core_filter_with_map(&log, a.core, a.core)?;
        create_dir(&a.out)?;
        let names = |ids: &[usize]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>();
        io::write_remap(a.out.join("user_map.tsv"), &names(&user_map))?;
        io::write_remap(a.out.join("item_map.tsv"), &names(&item_map))?;
        filtered
    } else {
        log
    };
    if log.is_empty() {
        bail!("no interactions left after {}-core filtering", a.core);
    }
    let (train, valid, test) = match a.split {
        SplitKind::LeaveLast => {
            let (rest, test) = graph::leave_last_out_split(&log)?;
            let (train, valid) = hold_out_valid(&rest)?;
            (
                train,
                valid,
                InteractionLog::new(test, log.user_count(), log.item_count())?,
            )
        }
        SplitKind::Chrono => graph::chronological_split(&log, a.train_frac, a.valid_frac)?,
    };
    create_dir(&a.out)?;
    for (name, part) in [("train.tsv", &train), ("valid.tsv", &valid), ("test.tsv", &test)] {
        io::write_canonical(a.out.join(name), part, &[])?;
    }
    println!(
        "users={} items={} interactions={} train={} valid={} test={}",
        log.user_count(),
        log.item_count(),
        log.len(),
        train.len(),
        valid.len(),
        test.len()
    );
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let kind: GeneratorKind = a.kind.parse()?;
    let mut spec = GeneratorSpec::new(kind);
    spec.seed = a.seed;
    if let Some(v) = a.users {
        spec.users = v;
    }
    if let Some(v) = a.items {
        spec.items = v;
    }
    if let Some(v) = a.per_user {
        spec.per_user = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    if let Some(v) = a.epochs {
        spec.epochs = v;
    }
    if let Some(v) = a.communities {
        spec.communities = v;
    }
    let log = synthetic::generate(&spec)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    io::write_canonical(&a.out, &log, &[format!("generator {}", spec.describe())])?;
    println!(
        "users={} items={} interactions={}",
        log.user_count(),
        log.item_count(),
        log.len()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.model.resolve()?;
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    match a.ablate {
        Some(Ablation::StaticItems) => cfg.model.static_items = true,
        Some(Ablation::NoTime) => cfg.model.use_time = false,
        Some(Ablation::NoPos) => cfg.model.use_position = false,
        Some(Ablation::NoTimeNoPos) => {
            cfg.model.use_time = false;
            cfg.model.use_position = false;
        }
        None => {}
    }
    cfg.validate()?;
    let train_log = read_log(&a.train)?;
    let valid = a.valid.as_deref().map(read_log).transpose()?;
    create_dir(&a.out)?;
    let outcome = train::train_with(&cfg, &train_log, valid.as_ref(), |s| {
        let valid = s
            .valid_ndcg10
            .map_or(String::new(), |v| format!(" valid_ndcg10={v:.4}"));
        eprintln!("epoch {} loss={:.6}{}", s.epoch, s.loss, valid);
    })?;
    let ck = a.out.join("model.ptgc");
    train::save_checkpoint(&ck, &cfg, &outcome.model, Some(&outcome.adam))?;
    let hist = a.out.join("history.csv");
    fs::write(&hist, train::history_csv(&outcome.history)).with_context(|| format!("writing {}", hist.display()))?;
    println!(
        "epochs={} best_epoch={} checkpoint={}",
        outcome.history.len(),
        outcome.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        ck.display()
    );
    Ok(())
}

/// Loads the history files plus optional extra interactions into one graph
/// sized to the checkpoint's universes.
fn build_graph(paths: &[PathBuf], extra: &[Interaction], users: usize, items: usize) -> Result<TemporalBipartiteGraph> {
    let mut records = extra.to_vec();
    for p in paths {
        let log = read_log(p)?;
        if log.user_count() > users || log.item_count() > items {
            bail!(
                "{} has ids beyond the checkpoint ({} users, {} items)",
                p.display(),
                users,
                items
            );
        }
        records.extend_from_slice(log.records());
    }
    let log = InteractionLog::new(records, users, items)?;
    Ok(TemporalBipartiteGraph::build(&log))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let ck = train::load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (users, items) = (ck.model.user_count(), ck.model.item_count());
    let test = read_log(&a.test)?;
    if test.user_count() > users || test.item_count() > items {
        bail!("test file has ids beyond the checkpoint");
    }
    let queries = if a.all_queries {
        test.records().to_vec()
    } else {
        test.last_per_user()
    };
    let g = build_graph(&a.history, test.records(), users, items)?;
    let options = RankOptions {
        protocol: a.protocol.parse::<Protocol>()?,
        exclude_seen: !a.include_seen,
        seed: ck.config.seed,
    };
    let executor = Executor::new(a.workers.unwrap_or(ck.config.workers));
    let scorer = ModelScorer::new(&ck.model, &g);
    let results = eval::rank_test_set(&scorer, &g, &queries, &options, &executor)?;
    let mut table = eval::metrics(&results, &a.k)?;
    if !a.cohorts.is_empty() {
        table.extend(eval::cold_start_report(&results, &a.cohorts, 10)?);
    }
    print!("{}", table.to_table());
    if let Some(out) = &a.out {
        fs::write(out, table.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ck = train::load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let g = build_graph(&a.history, &[], ck.model.user_count(), ck.model.item_count())?;
    let options = RankOptions {
        protocol: Protocol::Full,
        exclude_seen: !a.include_seen,
        seed: ck.config.seed,
    };
    let scorer = ModelScorer::new(&ck.model, &g);
    let ranked = eval::rank_items(&scorer, &g, a.user, a.time, None, &options)?;
    println!("rank\titem\tscore");
    for (i, (item, score)) in ranked.items.iter().zip(&ranked.scores).take(a.k).enumerate() {
        println!("{}\t{}\t{}", i + 1, item, score);
    }
    Ok(())
}
