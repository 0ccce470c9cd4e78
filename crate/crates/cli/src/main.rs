//! `mmnd`: generate, corrupt and complete paired datasets, train teacher and
//! student encoders, and evaluate retrieval under incompleteness.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmnd_core::approx::{self, IdentityRefiner, PrototypeBank};
use mmnd_core::dataset::{self, PairedSample};
use mmnd_core::eval::{self, Strategy};
use mmnd_core::gradcheck::{self, CheckedLoss};
use mmnd_core::model::{TaskLoss, TwoTowerModel};
use mmnd_core::train;

use config::{manifest_path, sibling, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "mmnd", version, about = "Completion, distillation and retrieval on incomplete video-text pairs")]
struct Cli {
    /// JSON run configuration or a manifest from a previous run; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads (default: all logical processors).
    #[arg(long, global = true, env = "MMND_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Mask frames and words at the given rates.
    Corrupt {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        rates: RateArgs,
    },
    /// Fill missing slots with the neighbour pipeline or a baseline.
    Complete {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Snapshot whose prototype bank reconstructs features first.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[command(flatten)]
        completion: CompletionArgs,
    },
    /// Train the teacher on complete pairs.
    TrainTeacher {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the student against a frozen teacher.
    TrainStudent {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Recall@{1,5,10} at one incompleteness setting.
    Eval {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Masking seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        rates: RateArgs,
        #[command(flatten)]
        completion: CompletionArgs,
    },
    /// Evaluate over a grid of rates and strategies (JSON plus CSV).
    Sweep {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated balanced rates.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Comma-separated strategies.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        /// Add the 50/50, 70/30 and 30/70 cells.
        #[arg(long)]
        unbalanced: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        completion: CompletionArgs,
    },
    /// Finite-difference check of every loss gradient; fails above 1e-4.
    GradCheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    words: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    keyframes: Option<usize>,
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Args, Debug)]
struct RateArgs {
    #[arg(long)]
    video_rate: Option<f64>,
    #[arg(long)]
    text_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct CompletionArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k0: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    mu_mlt: Option<f64>,
    #[arg(long)]
    mu_dir: Option<f64>,
    #[arg(long)]
    alpha_w: Option<f64>,
    #[arg(long)]
    sigma_kd: Option<f64>,
    #[arg(long)]
    sigma_nce: Option<f64>,
    /// mlt or retrieval
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskLoss>,
    #[arg(long)]
    dropout: Option<f64>,
    #[command(flatten)]
    completion: CompletionArgs,
}

fn parse_task(s: &str) -> Result<TaskLoss, String> {
    match s {
        "mlt" => Ok(TaskLoss::Mlt),
        "retrieval" => Ok(TaskLoss::Retrieval),
        other => Err(format!("unknown task {other:?}; expected mlt or retrieval")),
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(m: impl Into<String>) -> Failure {
    Failure::Usage(m.into())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

fn apply_completion(cfg: &mut RunConfig, c: CompletionArgs) {
    set(&mut cfg.completion.k, c.k);
    set(&mut cfg.completion.k0, c.k0);
    set(&mut cfg.train.k, c.k);
    set(&mut cfg.train.k0, c.k0);
}

fn apply_train(cfg: &mut RunConfig, t: TrainArgs) {
    let c = &mut cfg.train;
    set(&mut c.seed, t.seed);
    set(&mut c.epochs, t.epochs);
    set(&mut c.batch_size, t.batch_size);
    set(&mut c.lr, t.lr);
    set(&mut c.momentum, t.momentum);
    set(&mut c.alpha1, t.alpha1);
    set(&mut c.alpha2, t.alpha2);
    set(&mut c.beta, t.beta);
    set(&mut c.mu_mlt, t.mu_mlt);
    set(&mut c.mu_dir, t.mu_dir);
    set(&mut c.alpha_w, t.alpha_w);
    set(&mut c.sigma_kd, t.sigma_kd);
    set(&mut c.sigma_nce, t.sigma_nce);
    set(&mut c.task, t.task);
    set(&mut c.dropout, t.dropout);
    apply_completion(cfg, t.completion);
}

/// Merge flags into the file configuration; flags win.
fn resolve(config: Option<&Path>, command: Command) -> Result<(RunConfig, &'static str), Failure> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    let name = match command {
        Command::Generate { out, seed, data } => {
            set_path(&mut cfg.paths.output, out);
            let s = &mut cfg.synthetic;
            set(&mut s.seed, seed);
            set(&mut s.num_pairs, data.pairs);
            set(&mut s.frames_per_video, data.frames);
            set(&mut s.words_per_text, data.words);
            set(&mut s.dim, data.dim);
            set(&mut s.latent_dim, data.latent_dim);
            set(&mut s.noise_std, data.noise);
            set(&mut s.keyframes, data.keyframes);
            set(&mut s.keyframe_jitter, data.jitter);
            "generate"
        }
        Command::Corrupt { input, out, seed, rates } => {
            set_path(&mut cfg.paths.input, input);
            set_path(&mut cfg.paths.output, out);
            set(&mut cfg.incompleteness.seed, seed);
            set(&mut cfg.incompleteness.video_rate, rates.video_rate);
            set(&mut cfg.incompleteness.text_rate, rates.text_rate);
            "corrupt"
        }
        Command::Complete { input, out, model, strategy, completion } => {
            set_path(&mut cfg.paths.input, input);
            set_path(&mut cfg.paths.output, out);
            set_path(&mut cfg.paths.model, model);
            set(&mut cfg.eval.strategy, strategy);
            apply_completion(&mut cfg, completion);
            "complete"
        }
        Command::TrainTeacher { input, out, report, train } => {
            set_path(&mut cfg.paths.input, input);
            set_path(&mut cfg.paths.output, out);
            set_path(&mut cfg.paths.report, report);
            apply_train(&mut cfg, train);
            "train-teacher"
        }
        Command::TrainStudent { input, teacher, out, report, train } => {
            set_path(&mut cfg.paths.input, input);
            set_path(&mut cfg.paths.teacher, teacher);
            set_path(&mut cfg.paths.output, out);
            set_path(&mut cfg.paths.report, report);
            apply_train(&mut cfg, train);
            "train-student"
        }
        Command::Eval { input, model, out, strategy, seed, rates, completion } => {
            set_path(&mut cfg.paths.input, input);
            set_path(&mut cfg.paths.model, model);
            set_path(&mut cfg.paths.output, out);
            set(&mut cfg.eval.strategy, strategy);
            set(&mut cfg.incompleteness.seed, seed);
            set(&mut cfg.incompleteness.video_rate, rates.video_rate);
            set(&mut cfg.incompleteness.text_rate, rates.text_rate);
            apply_completion(&mut cfg, completion);
            "eval"
        }
        Command::Sweep { input, model, out, rates, strategies, unbalanced, seed, completion } => {
            set_path(&mut cfg.paths.input, input);
            set_path(&mut cfg.paths.model, model);
            set_path(&mut cfg.paths.output, out);
            set(&mut cfg.eval.rates, rates);
            set(&mut cfg.eval.strategies, strategies);
            cfg.eval.unbalanced |= unbalanced;
            set(&mut cfg.incompleteness.seed, seed);
            apply_completion(&mut cfg, completion);
            "sweep"
        }
        Command::GradCheck { out, points, seed } => {
            set_path(&mut cfg.paths.output, out);
            set(&mut cfg.gradcheck.points, points);
            set(&mut cfg.gradcheck.seed, seed);
            "grad-check"
        }
    };
    if let Some(previous) = &cfg.command {
        if previous != name {
            return Err(usage(format!("configuration was written by `{previous}`, not `{name}`")));
        }
    }
    cfg.command = Some(name.to_string());
    cfg.version = Some(env!("CARGO_PKG_VERSION").to_string());
    Ok((cfg, name))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<Vec<PairedSample>, Failure> {
    dataset::load_dataset(path).map_err(runtime)
}

fn load_model(path: &Path) -> Result<TwoTowerModel, Failure> {
    TwoTowerModel::load(path).map_err(runtime)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable") + "\n"
}

fn execute(cfg: &mut RunConfig, name: &str) -> Result<(), Failure> {
    let out = required(&cfg.paths.output, "out")?.to_path_buf();
    match name {
        "generate" => {
            cfg.synthetic.validate().map_err(|e| usage(e.to_string()))?;
            let data = dataset::generate_synthetic(&cfg.synthetic).map_err(runtime)?;
            dataset::save_dataset(&out, &data).map_err(runtime)?;
            println!("wrote {} pairs to {}", data.len(), out.display());
        }
        "corrupt" => {
            let input = required(&cfg.paths.input, "in")?;
            cfg.incompleteness.validate().map_err(|e| usage(e.to_string()))?;
            let data = dataset::apply_incompleteness(&load_data(input)?, &cfg.incompleteness).map_err(runtime)?;
            dataset::save_dataset(&out, &data).map_err(runtime)?;
            println!("wrote {} corrupted pairs to {}", data.len(), out.display());
        }
        "complete" => {
            let input = required(&cfg.paths.input, "in")?;
            cfg.completion.validate().map_err(|e| usage(e.to_string()))?;
            let data = load_data(input)?;
            let bank: Option<PrototypeBank> = match &cfg.paths.model {
                Some(p) => Some(load_model(p)?.bank),
                None => None,
            };
            let completed = data
                .iter()
                .map(|p| match cfg.eval.strategy {
                    Strategy::Pipeline => approx::complete_pair(p, bank.as_ref(), cfg.completion, &IdentityRefiner)
                        .map(|c| c.pair)
                        .map_err(runtime),
                    s => eval::baseline_complete(p, s).map_err(runtime),
                })
                .collect::<Result<Vec<_>, _>>()?;
            dataset::save_dataset(&out, &completed).map_err(runtime)?;
            println!("wrote {} completed pairs to {}", completed.len(), out.display());
        }
        "train-teacher" | "train-student" => {
            let input = required(&cfg.paths.input, "in")?;
            let data = load_data(input)?;
            if let Some(first) = data.first() {
                cfg.train.model.dim = first.video.dim();
            }
            cfg.train.validate().map_err(|e| usage(e.to_string()))?;
            let (model, mut report) = if name == "train-teacher" {
                train::train_teacher(&data, &cfg.train).map_err(runtime)?
            } else {
                let teacher = load_model(required(&cfg.paths.teacher, "teacher")?)?;
                train::train_student(&data, &teacher, &cfg.train).map_err(runtime)?
            };
            model.save(&out).map_err(runtime)?;
            let report_path = cfg.paths.report.clone().unwrap_or_else(|| sibling(&out, "report.json"));
            cfg.paths.report = Some(report_path.clone());
            report.snapshot_path = Some(out.display().to_string());
            write(&report_path, report.to_json() + "\n")?;
            let last = report.curve.last().map_or(f64::NAN, |e| e.loss.total);
            log::info!("{name} took {:.2}s", report.wall_time_secs);
            println!("{name}: {} epochs, final loss {last:.6}; snapshot {}", report.curve.len(), out.display());
        }
        "eval" => {
            let data = load_data(required(&cfg.paths.input, "in")?)?;
            let model = load_model(required(&cfg.paths.model, "model")?)?;
            let (t2v, v2t) =
                eval::evaluate_retrieval(&model, &data, cfg.eval.strategy, &cfg.incompleteness, cfg.completion)
                    .map_err(runtime)?;
            for r in [&t2v, &v2t] {
                println!("{} {}: R@1 {:.1} R@5 {:.1} R@10 {:.1}", r.strategy, r.direction.name(), r.r1, r.r5, r.r10);
            }
            write(&out, json(&serde_json::json!({ "t2v": t2v, "v2t": v2t })))?;
        }
        "sweep" => {
            let data = load_data(required(&cfg.paths.input, "in")?)?;
            let model = load_model(required(&cfg.paths.model, "model")?)?;
            let mut grid = eval::balanced_grid(&cfg.eval.rates);
            if cfg.eval.unbalanced {
                grid.extend(eval::unbalanced_grid());
            }
            let report = eval::sweep_incompleteness(
                &model,
                &data,
                &grid,
                &cfg.eval.strategies,
                cfg.incompleteness.seed,
                cfg.completion,
            )
            .map_err(runtime)?;
            let csv = sibling(&out, "csv");
            report.write(&out, &csv).map_err(runtime)?;
            println!("wrote {} cells to {} and {}", report.cells.len(), out.display(), csv.display());
        }
        "grad-check" => {
            let mut reports = Vec::new();
            for loss in CheckedLoss::ALL {
                let r = gradcheck::check_loss(loss, cfg.gradcheck.points, cfg.gradcheck.seed).map_err(runtime)?;
                println!(
                    "{} {}: max relative error {:.3e} over {} points",
                    if r.passed { "PASS" } else { "FAIL" },
                    loss.name(),
                    r.max_rel_error,
                    r.points
                );
                reports.push(r);
            }
            write(&out, json(&reports))?;
            write(&manifest_path(&out), cfg.to_json())?;
            if reports.iter().any(|r| !r.passed) {
                return Err(runtime("gradient check failed"));
            }
            return Ok(());
        }
        other => unreachable!("unknown command {other}"),
    }
    write(&manifest_path(&out), cfg.to_json())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = resolve(cli.config.as_deref(), cli.command).and_then(|(mut cfg, name)| execute(&mut cfg, name));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `mmnd --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
