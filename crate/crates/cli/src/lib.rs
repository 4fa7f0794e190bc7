//! Batch commands over the xmrv library: `gen`, `train`, `eval`, `ablate`
//! and `gradcheck`.
//!
//! Results go to files under the output directory; progress goes to stderr.
//! Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 failed
//! ablation checks.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use xmrv::contrastive::{grad_check, random_batch};
use xmrv::encoders::EncodingMode;
use xmrv::io::checkpoint::Checkpoint;
use xmrv::io::config::RunConfig;
use xmrv::io::manifest::{read_dataset, write_dataset, MANIFEST_FILE};
use xmrv::io::store::EmbeddingStore;
use xmrv::io::tables::{history_csv, history_json, ranked_jsonl, ranks_csv, DatasetSummary};
use xmrv::io::write_atomic;
use xmrv::metrics::{ablation_checks, embed_pool, evaluate_embeddings, run_ablation};
use xmrv::pipeline::{generate_split_dataset, train_mode, SplitSets};
use xmrv::trainer::TrainEvent;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "XMRV_THREADS";

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECKS_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "xmrv", version, about = "Multi-view echo video / report retrieval benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed everywhere.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset, its split and summary.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one mode on the generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: EncodingMode,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate one mode on the test pool.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: EncodingMode,
        /// Defaults to the checkpoint of the mode's trained weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate all four modes and check the expected ordering.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the analytic loss gradient with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Number of consecutive seeds to check, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Lib(xmrv::Error),
    ChecksFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Lib(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Lib(_) => EXIT_RUNTIME,
            CliError::ChecksFailed(_) => EXIT_CHECKS_FAILED,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::ChecksFailed(m) => write!(f, "ablation checks failed: {m}"),
        }
    }
}

impl From<xmrv::Error> for CliError {
    fn from(e: xmrv::Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = Result<T, CliError>;

/// Output locations under the run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoint(&self, mode: EncodingMode) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", mode.key()))
    }

    pub fn history(&self, mode: EncodingMode, ext: &str) -> PathBuf {
        self.root.join("history").join(format!("{}.{ext}", mode.key()))
    }

    pub fn eval(&self, mode: EncodingMode) -> PathBuf {
        self.root.join("eval").join(mode.key())
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

fn load_config(common: &Common) -> CliResult<(RunConfig, Layout)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let layout = Layout {
        root: cfg.output_dir.clone(),
    };
    Ok((cfg, layout))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn load_sets(layout: &Layout) -> CliResult<SplitSets> {
    let dir = layout.dataset();
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::Runtime(format!(
            "no dataset at {}; run `xmrv gen` first",
            dir.display()
        )));
    }
    Ok(SplitSets::new(&read_dataset(&dir)?))
}

fn load_checkpoint(path: &Path, mode: EncodingMode, cfg: &RunConfig) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(xmrv::Error::MissingCheckpoint {
            mode: mode.key().to_string(),
            path: path.to_path_buf(),
        }
        .into());
    }
    let ck = Checkpoint::read(path)?;
    ck.expect_dims(&cfg.encoder, path)?;
    Ok(ck)
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // Fails only if a pool already exists, e.g. when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn cmd_gen(common: &Common) -> CliResult<()> {
    let (cfg, layout) = load_config(common)?;
    eprintln!("generating {} studies (seed {})", cfg.data.generator.n_studies, cfg.seed);
    let dataset = generate_split_dataset(&cfg)?;
    let dir = layout.dataset();
    write_dataset(&dir, &dataset)?;
    let summary = DatasetSummary::new(&dataset, cfg.data.split_ratios);
    write_text(&dir.join("summary.txt"), &summary.to_text())?;
    write_text(&dir.join("summary.json"), &summary.to_json())?;
    cfg.save(&layout.root.join("config.toml"))?;
    print!("{}", summary.to_text());
    Ok(())
}

fn cmd_train(common: &Common, mode: EncodingMode, init: Option<&Path>) -> CliResult<()> {
    let (cfg, layout) = load_config(common)?;
    let tc = cfg.train.get(mode)?.clone();
    let sets = load_sets(&layout)?;
    eprintln!(
        "training {} for {} steps on {} studies",
        mode.label(),
        tc.total_steps,
        sets.train.len()
    );
    let mut progress = |e: TrainEvent<'_>| match e {
        TrainEvent::Step(r) if r.step % tc.eval_every.max(1) == 0 => {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.4}", r.step, r.lr, r.loss)
        }
        TrainEvent::Eval(r) => eprintln!(
            "step {:>6}  valid MCMRR V->R {:.2}  R->V {:.2}",
            r.step, r.mcmrr_v2r, r.mcmrr_r2v
        ),
        _ => {}
    };
    let (params, history) = match init {
        Some(path) => {
            let start = load_checkpoint(path, mode, &cfg)?.params;
            xmrv::trainer::train_from(&tc, start, cfg.clip_len(), &sets.train, &sets.valid, &mut progress)?
        }
        None => train_mode(&cfg, mode, &sets, &mut progress)?,
    };
    Checkpoint { mode, params }.write(&layout.checkpoint(mode))?;
    write_text(&layout.history(mode, "csv"), &history_csv(&history))?;
    write_text(&layout.history(mode, "json"), &history_json(&history))?;
    eprintln!("wrote {}", layout.checkpoint(mode).display());
    Ok(())
}

fn cmd_eval(common: &Common, mode: EncodingMode, checkpoint: Option<&Path>) -> CliResult<()> {
    let (cfg, layout) = load_config(common)?;
    let source = mode.weights_from();
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| layout.checkpoint(source));
    let ck = load_checkpoint(&path, source, &cfg)?;
    if ck.mode != source {
        eprintln!("note: checkpoint was trained as {}, evaluating as {}", ck.mode.label(), mode.label());
    }
    let pool = load_sets(&layout)?.test_pool();
    eprintln!("evaluating {} on {} test studies", mode.label(), pool.len());
    let pool_embeddings = embed_pool(&ck.params, &pool, mode, cfg.clip_len())?;
    let eval = evaluate_embeddings(mode, &pool_embeddings, &cfg.eval.recall_ks)?;

    let dir = layout.eval(mode);
    let dim = cfg.encoder.embed;
    EmbeddingStore::from_f64(dim, &pool_embeddings.studies)?.write(&dir.join("study_embeddings.xmrv"))?;
    EmbeddingStore::from_f64(dim, &pool_embeddings.reports)?.write(&dir.join("report_embeddings.xmrv"))?;
    let metrics = serde_json::to_string_pretty(&eval.report).expect("metrics serialize");
    write_text(&dir.join("metrics.json"), &metrics)?;
    write_text(&dir.join("ranks_v2r.csv"), &ranks_csv(&eval.v2r))?;
    write_text(&dir.join("ranks_r2v.csv"), &ranks_csv(&eval.r2v))?;
    write_text(&dir.join("ranked_v2r.jsonl"), &ranked_jsonl(&eval.v2r))?;
    write_text(&dir.join("ranked_r2v.jsonl"), &ranked_jsonl(&eval.r2v))?;
    let (a, b) = eval.report.headline_recall();
    println!(
        "{}: MCMRR V->R {:.2} R->V {:.2}  R@10 V->R {a:.1}% R->V {b:.1}%  (pool {})",
        mode.label(),
        eval.report.mcmrr_v2r,
        eval.report.mcmrr_r2v,
        eval.report.pool_size
    );
    Ok(())
}

fn cmd_ablate(common: &Common) -> CliResult<()> {
    let (cfg, layout) = load_config(common)?;
    let mut weights = BTreeMap::new();
    for mode in EncodingMode::TRAINED {
        weights.insert(mode, load_checkpoint(&layout.checkpoint(mode), mode, &cfg)?.params);
    }
    let pool = load_sets(&layout)?.test_pool();
    let table = run_ablation(&weights, &pool, cfg.clip_len(), &cfg.eval.recall_ks)?;
    let checks = ablation_checks(std::slice::from_ref(&table));
    let dir = layout.ablation();
    write_text(&dir.join("table.txt"), &table.to_text())?;
    write_text(&dir.join("table.json"), &table.to_json())?;
    write_text(
        &dir.join("checks.json"),
        &serde_json::to_string_pretty(&checks).expect("checks serialize"),
    )?;
    print!("{}", table.to_text());
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed(failed.join(", ")))
    }
}

fn cmd_gradcheck(common: &Common, batch: usize, dim: usize, seeds: u64, eps: f64) -> CliResult<()> {
    if batch < 2 {
        return Err(CliError::Usage(format!("--batch must be at least 2, got {batch}")));
    }
    if dim == 0 || seeds == 0 {
        return Err(CliError::Usage("--dim and --seeds must be positive".into()));
    }
    let first = common.seed.unwrap_or(0);
    let mut worst: f64 = 0.0;
    for seed in first..first + seeds {
        let err = grad_check(&random_batch(batch, dim, seed)?, eps)?;
        worst = worst.max(err);
    }
    println!("max relative error {worst:e}");
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Gen { common } => cmd_gen(common),
        Command::Train { common, mode, init } => cmd_train(common, *mode, init.as_deref()),
        Command::Eval {
            common,
            mode,
            checkpoint,
        } => cmd_eval(common, *mode, checkpoint.as_deref()),
        Command::Ablate { common } => cmd_ablate(common),
        Command::Gradcheck {
            common,
            batch,
            dim,
            seeds,
            eps,
        } => cmd_gradcheck(common, *batch, *dim, *seeds, *eps),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
