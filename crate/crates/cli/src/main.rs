use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use diam::baselines::{bam_aggregate, bam_fuse, FusionConfig, Preset};
use diam::gradcheck::{self, DEFAULT_STEP, DEFAULT_TOLERANCE};
use diam::io::report::{run_task, score_prediction, TaskReport};
use diam::io::{read_task, write_task, PredictionMap, RunReport, TaskBundle};
use diam::labels::argmax_decode;
use diam::numeric::forward;
use diam::taskgen::{gen_suite, SyntheticConfig};
use diam::{PriorKind, PriorPolicy, Similarity, SolverConfig};

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {{
        writeln!(std::io::stdout().lock(), $($arg)*)?;
    }};
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

#[derive(Parser)]
#[command(name = "diam", version, about = "Transductive inference for generalized few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt the classifier on each task file and report scores.
    Infer(InferArgs),
    /// Score a stored prediction map against a task's query labels.
    Eval {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Generate a synthetic task suite.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients on random problems.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Aggregate novel foreground maps and fuse them with the base prediction.
    Fuse {
        task: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Uniform,
    #[value(name = "self")]
    SelfEstimated,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Dot,
    Cosine,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(required = true)]
    tasks: Vec<PathBuf>,
    /// Start from a named ablation preset; explicit flags override it.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Preset::ALL.map(Preset::name)))]
    preset: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum)]
    prior: Option<PriorArg>,
    /// Comma-separated iterations at which a self-estimated prior is refreshed.
    #[arg(long, value_delimiter = ',')]
    prior_updates: Option<Vec<usize>>,
    #[arg(long)]
    freeze_base: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    similarity: Option<SimilarityArg>,
    /// Cosine temperature.
    #[arg(long, default_value_t = 10.0)]
    temperature: f64,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for one prediction map per task.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n_base: Option<usize>,
    #[arg(long)]
    n_novel: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    background_fraction: Option<f64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    base_per_image: Option<usize>,
    #[arg(long)]
    novel_in_background: Option<f64>,
    /// Also store per-class foreground maps for `fuse`.
    #[arg(long)]
    fg_maps: bool,
}

fn solver_config(args: &InferArgs) -> Result<SolverConfig> {
    let mut c = match &args.preset {
        Some(name) => name.parse::<Preset>()?.config(),
        None => SolverConfig::default(),
    };
    if let Some(v) = args.alpha {
        c.weights.alpha = v;
    }
    if let Some(v) = args.beta {
        c.weights.beta = v;
    }
    if let Some(v) = args.lr {
        c.learning_rate = v;
    }
    if let Some(v) = args.iters {
        c.iterations = v;
    }
    if let Some(p) = args.prior {
        c.prior_policy.kind = match p {
            PriorArg::Uniform => PriorKind::Uniform,
            PriorArg::SelfEstimated => PriorKind::SelfEstimated,
            PriorArg::Oracle => PriorKind::Oracle,
        };
    }
    if let Some(its) = &args.prior_updates {
        c.prior_policy = PriorPolicy::new(c.prior_policy.kind, its.clone());
    }
    if args.freeze_base {
        c.freeze_base = true;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(s) = args.similarity {
        c.similarity = match s {
            SimilarityArg::Dot => Similarity::Dot,
            SimilarityArg::Cosine => Similarity::Cosine {
                temperature: args.temperature,
            },
        };
    }
    c.validate()?;
    Ok(c)
}

/// Worker count from `DIAM_THREADS`; unset or 0 lets rayon decide.
fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("DIAM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .with_context(|| format!("DIAM_THREADS must be a non-negative integer, got `{v}`"))?,
        Err(_) => 0,
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn task_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn infer(args: InferArgs) -> Result<()> {
    let config = solver_config(&args)?;
    let start = Instant::now();
    let runs: Vec<(TaskReport, PredictionMap)> = thread_pool()?.install(|| {
        args.tasks
            .par_iter()
            .map(|path| -> Result<_> {
                let bundle = read_task(path).with_context(|| format!("reading {}", path.display()))?;
                let run = run_task(&task_name(path), &bundle, &config)
                    .with_context(|| format!("running {}", path.display()))?;
                let q = &bundle.task.query;
                let map = PredictionMap::new(run.prediction, q.height(), q.width())?;
                Ok((run.report, map))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    if let Some(dir) = &args.predictions {
        std::fs::create_dir_all(dir)?;
        for (report, map) in &runs {
            map.write(dir.join(format!("{}.dimp", report.name)))?;
        }
    }
    let tasks = runs.into_iter().map(|(r, _)| r).collect();
    let report = RunReport::new(config, args.preset.clone(), tasks, start.elapsed().as_secs_f64() * 1e3)?;

    for t in &report.tasks {
        let last = t.trace.last().expect("trace holds iteration 0");
        match &t.scores {
            Some(s) => say!(
                "{}: loss {:.4} -> {:.4}  base {:.4}  novel {:.4}  mean {:.4}  h-mean {:.4}",
                t.name, t.trace[0].loss.total, last.loss.total, s.base, s.novel, s.mean, s.h_mean
            ),
            None => say!("{}: loss {:.4} -> {:.4}", t.name, t.trace[0].loss.total, last.loss.total),
        }
    }
    if let Some(a) = &report.aggregate {
        say!(
            "mean over {} tasks: base {:.4}  novel {:.4}  mean {:.4}  h-mean {:.4}",
            a.runs, a.mean.base, a.mean.novel, a.mean.mean, a.mean.h_mean
        );
    }
    if let Some(path) = &args.report {
        report.write(path)?;
    }
    Ok(())
}

fn eval(task: &Path, predictions: &Path) -> Result<()> {
    let bundle = read_task(task)?;
    let pred = PredictionMap::read(predictions)?;
    let q = &bundle.task.query;
    if (pred.height, pred.width) != (q.height(), q.width()) {
        bail!(
            "prediction is {}x{} but the task query is {}x{}",
            pred.height,
            pred.width,
            q.height(),
            q.width()
        );
    }
    let truth = bundle
        .task
        .query_labels
        .as_ref()
        .context("task file has no query labels")?;
    pred.labels.validate(&bundle.task.partition)?;
    match score_prediction(&pred.labels, truth, &bundle.task.partition)? {
        Some(s) => say!("{}", serde_json::to_string_pretty(&s)?),
        None => bail!("base or novel group has no class to score"),
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut c = SyntheticConfig::default();
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                c.$field = v;
            }
        )*};
    }
    set!(d, n_base, n_novel, height, width, shots, separation, background_fraction, tile, base_per_image, novel_in_background);
    c.foreground_maps = args.fg_maps;

    std::fs::create_dir_all(&args.out)?;
    let suite = gen_suite(&c, args.tasks, args.seed)?;
    for (i, ep) in suite.into_iter().enumerate() {
        let path = args.out.join(format!("task_{i:03}.diam"));
        let bundle = TaskBundle {
            task: ep.task,
            base_classifier: ep.base_classifier,
            foreground_maps: ep.foreground_maps,
        };
        write_task(&path, &bundle)?;
        say!("{}", path.display());
    }
    Ok(())
}

fn run_gradcheck(tasks: usize, seed: u64, step: f64, tolerance: f64) -> Result<bool> {
    let r = gradcheck::run_suite(tasks, seed, step)?;
    say!(
        "max relative error {:.3e} over {} tasks ({} entries compared, worst task {})",
        r.max_relative_error, r.tasks, r.compared_entries, r.worst_task
    );
    Ok(r.max_relative_error < tolerance)
}

fn fuse(task: &Path, tau: f64, out: Option<&Path>) -> Result<()> {
    let config = FusionConfig::new(tau)?;
    let bundle = read_task(task)?;
    let part = &bundle.task.partition;
    let maps = bundle
        .foreground_maps
        .as_ref()
        .context("task file has no foreground maps")?;
    let (aggregated, probs) = bam_aggregate(maps, part)?;
    let base_map = argmax_decode(&forward(&bundle.task.query, &bundle.base_classifier)?);
    let fused = bam_fuse(&aggregated, &probs, &base_map, &config)?;

    if let Some(truth) = &bundle.task.query_labels {
        match score_prediction(&fused, truth, part)? {
            Some(s) => say!(
                "base {:.4}  novel {:.4}  mean {:.4}  h-mean {:.4}",
                s.base, s.novel, s.mean, s.h_mean
            ),
            None => say!("base or novel group has no class to score"),
        }
    }
    if let Some(path) = out {
        let q = &bundle.task.query;
        PredictionMap::new(fused, q.height(), q.width())?.write(path)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Infer(args) => infer(args).map(|_| true),
        Command::Eval { task, predictions } => eval(&task, &predictions).map(|_| true),
        Command::Synth(args) => synth(args).map(|_| true),
        Command::Gradcheck {
            tasks,
            seed,
            step,
            tolerance,
        } => run_gradcheck(tasks, seed, step, tolerance),
        Command::Fuse { task, tau, out } => fuse(&task, tau, out.as_deref()).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
