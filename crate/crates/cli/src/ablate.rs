//! Arm × seed sweeps. Each run is a separate `train` process so runs never
//! share state; up to `BOUNDMATCH_THREADS` of them execute at once.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use boundmatch_core::config::{Arm, ExperimentConfig};
use boundmatch_core::trainer::RunSummary;
use boundmatch_core::Error;

use crate::{config_err, CliResult, Failure};

pub const THREADS_VAR: &str = "BOUNDMATCH_THREADS";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| {
        Failure::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Parallel worker cap; 1 when the variable is unset.
pub fn worker_limit() -> CliResult<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(config_err(format!(
                "{THREADS_VAR} must be a positive integer, got '{v}'"
            ))),
        },
    }
}

fn load_arms(path: Option<&Path>) -> CliResult<Vec<Arm>> {
    let Some(p) = path else {
        return Ok(Arm::component_grid());
    };
    let text = fs::read_to_string(p).map_err(io(p))?;
    let arms: Vec<Arm> = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
    if arms.is_empty() {
        return Err(config_err(format!("{}: no arms listed", p.display())));
    }
    let mut names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(config_err(format!("arm name '{}' is used twice", w[0])));
    }
    if let Some(a) = arms
        .iter()
        .find(|a| a.name.is_empty() || a.name.contains(['/', '\\', ',']))
    {
        return Err(config_err(format!(
            "arm name '{}' is not usable as a directory name",
            a.name
        )));
    }
    Ok(arms)
}

struct Job {
    arm: usize,
    seed: u64,
    config: PathBuf,
    dir: PathBuf,
}

fn spawn(job: &Job) -> CliResult<Child> {
    let exe = std::env::current_exe().map_err(|e| {
        Failure::Core(Error::Io {
            path: "boundmatch".into(),
            source: e,
        })
    })?;
    Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(&job.config)
        .stdout(Stdio::null())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(io(&job.config))
}

pub fn run(base: &ExperimentConfig, seeds: usize, arms: Option<&Path>, out: &Path) -> CliResult<()> {
    if seeds == 0 {
        return Err(config_err("--seeds must be at least 1"));
    }
    let arms = load_arms(arms)?;
    let workers = worker_limit()?;
    let cfg_dir = out.join("configs");
    fs::create_dir_all(&cfg_dir).map_err(io(&cfg_dir))?;

    let mut jobs = Vec::new();
    for (ai, arm) in arms.iter().enumerate() {
        let mut cfg = arm.apply(base)?;
        for s in 0..seeds as u64 {
            cfg.trainer.seed = base.trainer.seed + s;
            let dir = out.join(&arm.name).join(format!("seed{s}"));
            cfg.output_dir = Some(dir.clone());
            let config = cfg_dir.join(format!("{}_seed{s}.json", arm.name));
            fs::write(&config, cfg.to_json()).map_err(io(&config))?;
            jobs.push(Job {
                arm: ai,
                seed: s,
                config,
                dir,
            });
        }
    }

    let mut pending = jobs.iter();
    let mut running: Vec<(&Job, Child)> = Vec::new();
    loop {
        while running.len() < workers {
            let Some(job) = pending.next() else { break };
            log::info!("starting {} seed {}", arms[job.arm].name, job.seed);
            running.push((job, spawn(job)?));
        }
        if running.is_empty() {
            break;
        }
        let (job, mut child) = running.remove(0);
        let status = child.wait().map_err(io(&job.config))?;
        if !status.success() {
            return Err(Failure::Core(Error::Data(format!(
                "run {} seed {} failed ({status})",
                arms[job.arm].name, job.seed
            ))));
        }
    }

    let mut csv = String::from("arm,seed,miou,biou,bf1\n");
    let mut sums = vec![[0.0f64; 3]; arms.len()];
    for job in &jobs {
        let p = job.dir.join("summary.json");
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        let s: RunSummary = serde_json::from_str(&text).map_err(|e| {
            Failure::Core(Error::Json {
                path: p.clone(),
                source: e,
            })
        })?;
        let m = &s.final_metrics;
        let row = [
            m.miou().unwrap_or(f64::NAN),
            m.mean_biou().unwrap_or(f64::NAN),
            m.mean_bf1().unwrap_or(f64::NAN),
        ];
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6}",
            arms[job.arm].name, job.seed, row[0], row[1], row[2]
        );
        for (acc, v) in sums[job.arm].iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut means = String::from("arm,seeds,miou,biou,bf1\n");
    for (arm, s) in arms.iter().zip(&sums) {
        let n = seeds as f64;
        let _ = writeln!(
            means,
            "{},{seeds},{:.6},{:.6},{:.6}",
            arm.name,
            s[0] / n,
            s[1] / n,
            s[2] / n
        );
    }
    for (name, body) in [("ablation.csv", &csv), ("means.csv", &means)] {
        let p = out.join(name);
        fs::write(&p, body).map_err(io(&p))?;
    }
    print!("{means}");
    Ok(())
}
