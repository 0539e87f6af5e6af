mod ablate;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boundmatch_core::checkpoint::load_checkpoint;
use boundmatch_core::config::{Components, ExperimentConfig};
use boundmatch_core::dataset::{parse_fraction, Dataset, SceneConfig};
use boundmatch_core::gradcheck::{run_suite, Fault, SuiteOptions};
use boundmatch_core::metrics::MetricSet;
use boundmatch_core::model::BoundaryMode;
use boundmatch_core::oracle::run_oracle_suite;
use boundmatch_core::trainer::{evaluate, train_run, BoundarySource, RunOptions};
use boundmatch_core::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "boundmatch",
    version,
    about = "Semi-supervised segmentation with boundary consistency"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    Semantic,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Learned,
    Derived,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetArg {
    Auto,
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset to DIR.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// training images
        #[arg(long, default_value_t = 320)]
        n: usize,
        /// validation images
        #[arg(long, default_value_t = 64)]
        n_val: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// write into a non-empty directory
        #[arg(long)]
        force: bool,
    },
    /// Train one configuration and print its final metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// dataset directory written by gen-data
        #[arg(long)]
        data: Option<PathBuf>,
        /// subset of bcrm,bsf,sgf; empty for the plain mean teacher
        #[arg(long)]
        components: Option<String>,
        #[arg(long, value_enum)]
        boundary: Option<BoundaryArg>,
        #[arg(long, value_enum)]
        boundary_source: Option<SourceArg>,
        /// teacher copies the student's batch-norm buffers
        #[arg(long)]
        no_hbn: bool,
        /// labeled data only
        #[arg(long)]
        supervised: bool,
        /// e.g. 0.125 or 1/8
        #[arg(long)]
        label_fraction: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// dataset directory; defaults to the data described by the checkpoint config
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "miou,biou,bf1,mf")]
        metrics: String,
        /// write metric curves as SVG into this directory
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = NetArg::Auto)]
        net: NetArg,
        /// also write the report JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every arm for several seeds and tabulate the results.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// JSON list of arms; defaults to the component grid
        #[arg(long)]
        arms: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks and metric oracle comparisons.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 1000)]
        oracle_cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Check(_) => 4,
        Failure::Core(Error::Config(_) | Error::Shape { .. }) => 2,
        Failure::Core(
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json { .. } | Error::Checkpoint { .. },
        ) => 3,
        Failure::Core(_) => 1,
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Config(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            n,
            n_val,
            size,
            classes,
            seed,
            force,
        } => gen_data(&out, n, n_val, size, classes, seed, force),
        Command::Train {
            config,
            out,
            data,
            components,
            boundary,
            boundary_source,
            no_hbn,
            supervised,
            label_fraction,
            seed,
            iters,
            log_every,
        } => (|| {
            let mut cfg = base_config(config.as_deref())?;
            if let Some(c) = components {
                cfg.set_components(Components::parse(&c)?);
            }
            if let Some(b) = boundary {
                if cfg.model.boundary_mode == BoundaryMode::None {
                    return Err(config_err(
                        "--boundary needs the boundary head: add bcrm to --components",
                    ));
                }
                cfg.model.boundary_mode = match b {
                    BoundaryArg::Semantic => BoundaryMode::Semantic,
                    BoundaryArg::Binary => BoundaryMode::Binary,
                };
            }
            if let Some(s) = boundary_source {
                cfg.trainer.boundary_source = match s {
                    SourceArg::Learned => BoundarySource::Learned,
                    SourceArg::Derived => BoundarySource::Derived,
                };
            }
            if no_hbn {
                cfg.trainer.hbn = false;
            }
            if supervised {
                cfg.trainer.semi_supervised = false;
            }
            if let Some(f) = label_fraction {
                cfg.label_fraction = parse_fraction(&f)?;
            }
            if let Some(s) = seed {
                cfg.trainer.seed = s;
            }
            if let Some(t) = iters {
                cfg.trainer.total_iters = t;
            }
            if data.is_some() {
                cfg.data_dir = data;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            train(cfg, log_every)
        })(),
        Command::Eval {
            checkpoint,
            data,
            metrics,
            plot,
            net,
            out,
        } => eval(
            &checkpoint,
            data.as_deref(),
            &metrics,
            plot.as_deref(),
            net,
            out.as_deref(),
        ),
        Command::Ablate {
            config,
            seeds,
            arms,
            out,
        } => (|| {
            let cfg = base_config(config.as_deref())?;
            ablate::run(&cfg, seeds, arms.as_deref(), &out)
        })(),
        Command::Gradcheck {
            cases,
            oracle_cases,
            seed,
            inject_fault,
        } => gradcheck(cases, oracle_cases, seed, inject_fault.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Check(m) => eprintln!("check failed: {m}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}

fn base_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn gen_data(out: &Path, n: usize, n_val: usize, size: usize, classes: usize, seed: u64, force: bool) -> CliResult<()> {
    let scene = SceneConfig {
        size,
        num_classes: classes,
        seed,
        ..Default::default()
    };
    scene.validate()?;
    if n == 0 || n_val == 0 {
        return Err(config_err("--n and --n-val must be positive"));
    }
    let non_empty = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(config_err(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        for sub in ["images", "labels"] {
            let p = out.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
            }
        }
    }
    let data = Dataset::generate(&scene, n, n_val)?;
    data.save(out)?;
    println!(
        "wrote {} training and {} validation images to {}",
        n,
        n_val,
        out.display()
    );
    Ok(())
}

fn train(cfg: ExperimentConfig, log_every: usize) -> CliResult<()> {
    cfg.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| config_err("no output directory: pass --out or set output_dir"))?;
    let data = cfg.dataset()?;
    let summary = train_run(
        &cfg,
        &data,
        &RunOptions {
            out_dir: Some(out.clone()),
            log_every,
        },
    )?;
    log::info!("run written to {}", out.display());
    println!("{}", summary.final_metrics.to_json());
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data: Option<&Path>,
    metrics: &str,
    plot: Option<&Path>,
    net: NetArg,
    out: Option<&Path>,
) -> CliResult<()> {
    let set = MetricSet::parse(metrics)?;
    if !(set.miou || set.biou || set.bf1 || set.mf) {
        return Err(config_err(format!(
            "no metric requested; valid names: {}",
            MetricSet::NAMES.join(", ")
        )));
    }
    if plot.is_some() && !set.mf {
        return Err(config_err(
            "--plot draws the MF threshold curve: include mf in --metrics",
        ));
    }
    let (mut state, side) = load_checkpoint(checkpoint)?;
    let cfg = side.config;
    let data = match data {
        Some(d) => Dataset::load(d)?,
        None => cfg.dataset()?,
    };
    if data.num_classes() != cfg.model.num_classes {
        return Err(Failure::Core(Error::Checkpoint {
            path: checkpoint.to_path_buf(),
            msg: format!(
                "model predicts {} classes but the dataset has {}",
                cfg.model.num_classes,
                data.num_classes()
            ),
        }));
    }
    let teacher = match net {
        NetArg::Teacher => true,
        NetArg::Student => false,
        NetArg::Auto => cfg.trainer.semi_supervised,
    };
    let model = if teacher {
        &mut state.teacher
    } else {
        &mut state.student
    };
    let report = evaluate(model, &data.val, cfg.trainer.eval_k, set, cfg.trainer.boundary_radius)?;
    if set.mf && report.mf_ods.is_none() {
        log::warn!("the checkpoint has no boundary head; MF-ODS is not available");
    }
    let json = report.to_json();
    if let Some(p) = out {
        fs::write(p, &json).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    if let Some(dir) = plot {
        let mf = report
            .mf_ods
            .as_ref()
            .ok_or_else(|| config_err("no MF curve to plot: the model has no boundary head"))?;
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let p = dir.join("mf_threshold.svg");
        let title = format!(
            "boundary F vs threshold (ODS {:.4} at {:.2})",
            mf.ods, mf.best_threshold
        );
        fs::write(&p, plot::line_chart(&title, "threshold", "mean F", &mf.curve)).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        log::info!("wrote {}", p.display());
    }
    println!("{json}");
    Ok(())
}

fn gradcheck(cases: usize, oracle_cases: usize, seed: u64, fault: Option<&str>) -> CliResult<()> {
    let fault = fault.map(Fault::parse).transpose()?;
    let grads = run_suite(&SuiteOptions { cases, seed, fault })?;
    println!("{}", grads.table());
    let oracles = run_oracle_suite(oracle_cases, 3, seed)?;
    println!("{}", oracles.table());
    let failed: Vec<&str> = grads
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .chain(
            oracles
                .checks
                .iter()
                .filter(|c| c.mismatches > 0)
                .map(|c| c.name.as_str()),
        )
        .collect();
    if failed.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}
