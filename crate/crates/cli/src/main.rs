//! `ncgnn`: build graph filters, train and evaluate capsule models, export
//! explanations, and check gradients.
//!
//! Exit codes: 0 success, 1 numeric failure (divergence, failed gradient
//! check), 2 usage or I/O error. Failures print one JSON object on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::json;

use ncgnn::data::{
    filter_cache_dir, generate_split, load_dataset, load_filter, locate_manifest, save_filter,
    write_dataset, DatasetManifest, SplitSpec,
};
use ncgnn::eval::{
    capsule_embeddings, coupling_csv, embeddings_tsv, evaluate, export_explanations,
    mixing_metric, receptive_field_sweep, run_protocol, EmbeddingKind, RunRecord, RunReport,
};
use ncgnn::filter::{FilterMode, FilterSpec, GraphFilter, SparsifyRule, SparsifyStage};
use ncgnn::gradcheck::{run_gradcheck, GradcheckFilter, GradcheckSize};
use ncgnn::graph::normalize_adjacency;
use ncgnn::synth::{make_sbm, SbmSpec};
use ncgnn::train::{history_jsonl, train_model, Checkpoint, Model, TrainConfig};
use ncgnn::GraphDataset;

#[derive(Parser, Debug)]
#[command(name = "ncgnn", version, about = "Node-level capsule graph neural networks")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a graph filter and write it to a content-addressed cache.
    PrepareFilter(PrepareFilterArgs),
    /// Train one model on one split and write checkpoint, history and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Train over several splits and seeds, optionally for several receptive fields.
    Sweep(SweepArgs),
    /// Export hop attentions, coupling summaries, neighborhoods and embeddings.
    Explain(ExplainArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a stochastic block model dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Attention,
    Ppr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    PerHop,
    Final,
}

#[derive(Args, Debug, Default)]
struct FilterArgs {
    /// Filter family.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Largest hop of the attention filter (M = 1..max-hop).
    #[arg(long)]
    max_hop: Option<usize>,
    /// Teleport probability of the PPR filter.
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of PPR series terms; exact inverse when absent.
    #[arg(long)]
    truncate: Option<usize>,
    /// Sparsification rule: `topk:K` or `eps:E`.
    #[arg(long, value_parser = parse_sparsify)]
    sparsify: Option<SparsifyRule>,
    /// Where attention filters are sparsified.
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Dropout probability on primary features.
    #[arg(long)]
    dropout: Option<f64>,
    /// Routing iterations T.
    #[arg(long)]
    iterations: Option<usize>,
    /// Number of primary capsules K.
    #[arg(long)]
    n_primary: Option<usize>,
    /// Primary capsule dimension.
    #[arg(long)]
    primary_dim: Option<usize>,
    /// Class capsule dimension.
    #[arg(long)]
    class_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Training nodes per class.
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    /// Validation nodes (drawn from the non-training remainder).
    #[arg(long, default_value_t = 500)]
    val_size: usize,
}

#[derive(Args, Debug)]
struct PrepareFilterArgs {
    /// Manifest file, dataset directory, or name under $NCGNN_DATA_ROOT.
    #[arg(long)]
    dataset: String,
    #[command(flatten)]
    filter: FilterArgs,
    /// Cache root; the filter goes to `<out>/filter-<key>/`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: String,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Parameter and dropout seed; defaults to the config's `seed`.
    #[arg(long)]
    weight_seed: Option<u64>,
    /// Reuse or populate a filter cache under this directory.
    #[arg(long)]
    filter_cache: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    filter_cache: Option<PathBuf>,
    /// Write the evaluation as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    dataset: String,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Number of random splits (seeds 0..splits).
    #[arg(long, default_value_t = 5)]
    splits: u64,
    /// Number of weight seeds per split (seeds 0..seeds).
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Comma-separated max-hop values; one attention-filter report each.
    #[arg(long, value_delimiter = ',')]
    hops: Option<Vec<usize>>,
    /// JSON list of run reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EmbeddingArg {
    MaxCapsule,
    Lengths,
    Concat,
}

impl From<EmbeddingArg> for EmbeddingKind {
    fn from(e: EmbeddingArg) -> Self {
        match e {
            EmbeddingArg::MaxCapsule => EmbeddingKind::MaxCapsule,
            EmbeddingArg::Lengths => EmbeddingKind::Lengths,
            EmbeddingArg::Concat => EmbeddingKind::Concat,
        }
    }
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    filter_cache: Option<PathBuf>,
    /// Neighbors kept per node in the neighborhood export.
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long, value_enum, default_value_t = EmbeddingArg::MaxCapsule)]
    embedding: EmbeddingArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SizeArg {
    Tiny,
    Small,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = SizeArg::Tiny)]
    size: SizeArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Attention)]
    filter: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scales the squash adjoint (negative control).
    #[arg(long, hide = true)]
    corrupt_adjoint: Option<f64>,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    #[arg(long, default_value_t = 2)]
    n_classes: usize,
    #[arg(long, default_value_t = 0.05)]
    p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Distance between class means.
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Core(ncgnn::Error),
    Usage(String),
    Numeric(String),
}

impl From<ncgnn::Error> for Failure {
    fn from(e: ncgnn::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_numeric() => 1,
            Failure::Numeric(_) => 1,
            _ => 2,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            Failure::Core(e) => json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "path": e.path().map(|p| p.display().to_string()),
                }
            }),
            Failure::Usage(m) => json!({"error": {"kind": "usage", "message": m, "path": null}}),
            Failure::Numeric(m) => json!({"error": {"kind": "numeric", "message": m, "path": null}}),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_sparsify(s: &str) -> Result<SparsifyRule, String> {
    let (kind, value) = s
        .split_once(':')
        .ok_or_else(|| format!("expected topk:K or eps:E, got {s:?}"))?;
    let rule = match kind {
        "topk" => SparsifyRule::TopK {
            k: value.parse().map_err(|_| format!("invalid k {value:?}"))?,
        },
        "eps" => SparsifyRule::Epsilon {
            epsilon: value.parse().map_err(|_| format!("invalid epsilon {value:?}"))?,
        },
        other => return Err(format!("unknown sparsification {other:?}")),
    };
    rule.validate().map_err(|e| e.to_string())?;
    Ok(rule)
}

impl FilterArgs {
    /// Applies the flags on top of `base`, rejecting flags that do not
    /// belong to the resulting filter mode.
    fn apply(&self, base: FilterSpec) -> CliResult<FilterSpec> {
        let mode = self.mode.unwrap_or(match base.mode {
            FilterMode::Attention { .. } => ModeArg::Attention,
            FilterMode::Ppr { .. } => ModeArg::Ppr,
        });
        let mode = match mode {
            ModeArg::Attention => {
                if self.alpha.is_some() || self.truncate.is_some() {
                    return Err(Failure::Usage(
                        "--alpha and --truncate only apply to --mode ppr".into(),
                    ));
                }
                let max_hop = self.max_hop.unwrap_or(match base.mode {
                    FilterMode::Attention { max_hop } => max_hop,
                    FilterMode::Ppr { .. } => 2,
                });
                FilterMode::Attention { max_hop }
            }
            ModeArg::Ppr => {
                if self.max_hop.is_some() {
                    return Err(Failure::Usage("--max-hop only applies to --mode attention".into()));
                }
                if self.stage.is_some() {
                    return Err(Failure::Usage("--stage only applies to --mode attention".into()));
                }
                let (alpha, truncation) = match base.mode {
                    FilterMode::Ppr { alpha, truncation } => (alpha, truncation),
                    FilterMode::Attention { .. } => (0.1, None),
                };
                FilterMode::Ppr {
                    alpha: self.alpha.unwrap_or(alpha),
                    truncation: self.truncate.or(truncation),
                }
            }
        };
        let spec = FilterSpec {
            mode,
            sparsify: self.sparsify.unwrap_or(base.sparsify),
            stage: match self.stage {
                Some(StageArg::PerHop) => SparsifyStage::PerHop,
                Some(StageArg::Final) => SparsifyStage::Final,
                None => base.stage,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ModelArgs {
    fn effective(&self, filter: &FilterArgs) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_json_file(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout_p = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.n_primary {
            cfg.n_primary = v;
        }
        if let Some(v) = self.primary_dim {
            cfg.primary_dim = v;
        }
        if let Some(v) = self.class_dim {
            cfg.class_dim = v;
        }
        cfg.filter = filter.apply(cfg.filter)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SplitArgs {
    fn spec(&self, split_seed: u64) -> SplitSpec {
        SplitSpec {
            per_class_train: self.train_per_class,
            val_size: self.val_size,
            split_seed,
        }
    }
}

fn load(dataset: &str) -> CliResult<GraphDataset> {
    let manifest = DatasetManifest::load(&locate_manifest(dataset)?)?;
    Ok(load_dataset(&manifest)?)
}

/// Loads the filter from `cache` when present there, otherwise builds it
/// (and stores it when a cache is given). Returns whether it was a hit.
fn obtain_filter(
    ds: &GraphDataset,
    spec: &FilterSpec,
    cache: Option<&Path>,
) -> CliResult<(GraphFilter, bool)> {
    let key = spec.cache_key(&ds.adjacency);
    if let Some(root) = cache {
        let dir = filter_cache_dir(root, &key);
        if let Some(f) = load_filter(&dir, &key)? {
            info!("filter cache hit: {}", dir.display());
            return Ok((f, true));
        }
    }
    let filter = GraphFilter::build(&normalize_adjacency(&ds.adjacency)?, spec)?;
    if let Some(root) = cache {
        save_filter(&filter, spec, &key, &filter_cache_dir(root, &key))?;
    }
    Ok((filter, false))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, body).map_err(|e| io_failure(path, e))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(ncgnn::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

fn prepare_filter(args: &PrepareFilterArgs) -> CliResult<()> {
    let spec = args.filter.apply(FilterSpec::default())?;
    let ds = load(&args.dataset)?;
    let key = spec.cache_key(&ds.adjacency);
    let dir = filter_cache_dir(&args.out, &key);
    let (filter, hit) = obtain_filter(&ds, &spec, Some(&args.out))?;
    let stats = filter.stats();
    println!(
        "{} {} (nnz {}, row nnz {}..{})",
        if hit { "cache hit:" } else { "wrote" },
        dir.display(),
        stats.nnz,
        stats.min_row_nnz,
        stats.max_row_nnz
    );
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = args.model.effective(&args.filter)?;
    if let Some(seed) = args.weight_seed {
        cfg.seed = seed;
    }
    let split = args.split.spec(args.split_seed);
    let ds = load(&args.dataset)?;
    let ds = ds.clone().with_splits(generate_split(&ds, &split)?)?;
    let start = Instant::now();
    let (filter, _) = obtain_filter(&ds, &cfg.filter, args.filter_cache.as_deref())?;
    let filter_stats = filter.stats();
    let model = Model::with_filter(cfg.clone(), filter, ds.n_features(), ds.n_classes)?;
    let out = train_model(model, &ds, None)?;
    let test_accuracy = evaluate(&out.model, &ds, &ds.splits.test)?;
    let best_val_accuracy = out
        .best_epoch
        .and_then(|e| out.history.get(e - 1))
        .and_then(|r| r.val_acc);

    let dir = &args.out_dir;
    write_file(&dir.join("checkpoint.json"), out.model.checkpoint(out.best_epoch).to_bytes())?;
    write_file(&dir.join("history.jsonl"), history_jsonl(&out.history))?;
    let report = RunReport {
        dataset: ds.name.clone(),
        config: cfg,
        split,
        runs: vec![RunRecord {
            split_seed: split.split_seed,
            weight_seed: out.model.config.seed,
            test_accuracy,
            best_val_accuracy,
            best_epoch: out.best_epoch,
            history: Vec::new(),
            history_ref: Some("history.jsonl".into()),
        }],
        mean_test_accuracy: test_accuracy,
        std_test_accuracy: 0.0,
        wall_clock_seconds: None,
        filter_stats,
    };
    write_file(&dir.join("report.json"), pretty(&report))?;
    println!(
        "test accuracy {test_accuracy:.4} (best epoch {:?}, {:.1}s); wrote {}",
        out.best_epoch,
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    dataset: String,
    checkpoint: String,
    config: TrainConfig,
    split: SplitSpec,
    train_accuracy: f64,
    val_accuracy: Option<f64>,
    test_accuracy: Option<f64>,
    /// Inter/intra class distance ratio of max-capsule embeddings.
    mixing_metric: f64,
}

fn eval_cmd(args: &EvalArgs) -> CliResult<()> {
    let split = args.split.spec(args.split_seed);
    let ck = Checkpoint::load(&args.checkpoint)?;
    let ds = load(&args.dataset)?;
    let ds = ds.clone().with_splits(generate_split(&ds, &split)?)?;
    let (filter, _) = obtain_filter(&ds, &ck.config.filter, args.filter_cache.as_deref())?;
    let model = Model::from_checkpoint(ck, &ds, Some(filter))?;
    let acc = |mask: &[bool]| -> CliResult<Option<f64>> {
        if mask.iter().any(|&m| m) {
            Ok(Some(evaluate(&model, &ds, mask)?))
        } else {
            Ok(None)
        }
    };
    let inf = model.infer(&ds.features)?;
    let emb = capsule_embeddings(&inf.class_caps, EmbeddingKind::MaxCapsule);
    let report = EvalReport {
        dataset: ds.name.clone(),
        checkpoint: args.checkpoint.display().to_string(),
        config: model.config.clone(),
        split,
        train_accuracy: evaluate(&model, &ds, &ds.splits.train)?,
        val_accuracy: acc(&ds.splits.val)?,
        test_accuracy: acc(&ds.splits.test)?,
        mixing_metric: mixing_metric(&emb, &ds.labels)?,
    };
    println!(
        "train {:.4}  val {}  test {}  mixing {:.4}",
        report.train_accuracy,
        report.val_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
        report.test_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
        report.mixing_metric
    );
    if let Some(p) = &args.out {
        write_file(p, pretty(&report))?;
    }
    Ok(())
}

fn sweep_cmd(args: &SweepArgs) -> CliResult<()> {
    if args.splits == 0 || args.seeds == 0 {
        return Err(Failure::Usage("--splits and --seeds must be positive".into()));
    }
    if args.hops.is_some() && (args.filter.mode == Some(ModeArg::Ppr) || args.filter.max_hop.is_some()) {
        return Err(Failure::Usage("--hops sweeps attention filters; drop --mode ppr / --max-hop".into()));
    }
    let cfg = args.model.effective(&args.filter)?;
    let split = args.split.spec(0);
    let ds = load(&args.dataset)?;
    let split_seeds: Vec<u64> = (0..args.splits).collect();
    let weight_seeds: Vec<u64> = (0..args.seeds).collect();
    let start = Instant::now();
    let mut reports = match &args.hops {
        Some(hops) => receptive_field_sweep(&ds, &cfg, hops, &split, &split_seeds, &weight_seeds)?,
        None => vec![run_protocol(&ds, &cfg, &split, &split_seeds, &weight_seeds)?],
    };
    for r in &mut reports {
        let label = match r.config.filter.mode {
            FilterMode::Attention { max_hop } => format!("attention max-hop {max_hop}"),
            FilterMode::Ppr { alpha, .. } => format!("ppr alpha {alpha}"),
        };
        println!(
            "{label}: {:.4} ± {:.4} over {} runs ({:.1}s)",
            r.mean_test_accuracy,
            r.std_test_accuracy,
            r.runs.len(),
            r.wall_clock_seconds.unwrap_or(0.0)
        );
        r.wall_clock_seconds = None;
    }
    write_file(&args.out, pretty(&reports))?;
    println!("{} report(s) in {:.1}s; wrote {}", reports.len(), start.elapsed().as_secs_f64(), args.out.display());
    Ok(())
}

fn explain_cmd(args: &ExplainArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let ds = load(&args.dataset)?;
    let (filter, _) = obtain_filter(&ds, &ck.config.filter, args.filter_cache.as_deref())?;
    let model = Model::from_checkpoint(ck, &ds, Some(filter))?;
    let inf = model.infer(&ds.features)?;
    let a_bar = model.materialized_filter()?;
    let bundle = export_explanations(&model, &inf.state, &a_bar, args.top)?;
    let emb = capsule_embeddings(&inf.class_caps, args.embedding.into());
    let dir = &args.out_dir;
    write_file(
        &dir.join("explanations.json"),
        pretty(&json!({"config": model.config, "explanation": bundle})),
    )?;
    write_file(&dir.join("coupling.csv"), coupling_csv(&bundle.coupling_summary))?;
    write_file(
        &dir.join("coupling_unweighted.csv"),
        coupling_csv(&bundle.coupling_summary_unweighted),
    )?;
    write_file(&dir.join("embeddings.tsv"), embeddings_tsv(&emb, &ds.labels))?;
    println!("hop attention {:?}; wrote {}", bundle.hop_attention, dir.display());
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> CliResult<()> {
    let size = match args.size {
        SizeArg::Tiny => GradcheckSize::Tiny,
        SizeArg::Small => GradcheckSize::Small,
    };
    let filter = match args.filter {
        ModeArg::Attention => GradcheckFilter::Attention,
        ModeArg::Ppr => GradcheckFilter::Ppr,
    };
    let start = Instant::now();
    let report = run_gradcheck(size, filter, args.seed, args.corrupt_adjoint)?;
    println!("{:<18} {:>8}  max relative error", "parameter", "entries");
    for row in &report.rows {
        let err = row.max_rel_error.map_or("unused".to_string(), |e| format!("{e:.3e}"));
        println!("{:<18} {:>8}  {err}", row.param.name(), row.entries);
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    if let Some(p) = &args.out {
        write_file(p, pretty(&report))?;
    }
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Numeric("gradient check exceeded tolerance".into()))
    }
}

fn synth_cmd(args: &SynthArgs) -> CliResult<()> {
    let ds = make_sbm(&SbmSpec {
        n_per_class: args.n_per_class,
        n_classes: args.n_classes,
        p_in: args.p_in,
        p_out: args.p_out,
        feature_dim: args.feature_dim,
        signal: args.signal,
        seed: args.seed,
    })?;
    let manifest = write_dataset(&ds, &args.out)?;
    println!("{} nodes, {} edges; wrote {}", ds.n_nodes, ds.n_edges(), manifest.display());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::PrepareFilter(a) => prepare_filter(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code())
        }
    }
}
