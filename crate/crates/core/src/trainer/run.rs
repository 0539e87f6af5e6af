use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::images_to_tensor;
use super::{assemble_batch, hbn_iteration, BatchSampler, ModelState, StepContext};
use crate::boundary_gt::{binary_boundaries, semantic_boundaries, BoundaryTarget, LabelMap};
use crate::checkpoint::save_checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{make_split, Dataset, Scene};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{MetricSet, MetricsReport};
use crate::model::{BoundaryMode, Network};
use crate::tensor::{Graph, Mode, Tensor};

const EVAL_BATCH: usize = 16;

/// Label maps plus boundary probabilities when the model has a boundary head.
pub type Predictions = (Vec<LabelMap>, Option<Vec<Tensor<f32>>>);

/// Predicted labels and boundary probabilities for each scene, in eval mode.
pub fn predict(net: &mut Network<f32>, scenes: &[Scene]) -> Result<Predictions> {
    let mut labels = Vec::with_capacity(scenes.len());
    let mut bdry: Option<Vec<Tensor<f32>>> = None;
    for chunk in scenes.chunks(EVAL_BATCH) {
        let images: Vec<_> = chunk.iter().map(Scene::image).collect();
        let mut g = Graph::no_grad();
        let p = net.bind(&mut g, false);
        let x = g.constant(images_to_tensor(&images)?);
        let out = net.forward(&mut g, &p, x, Mode::Eval)?;
        let logits = g.value(out.logits);
        let (n, c, h, w) = logits.dims4()?;
        let d = logits.data();
        for b in 0..n {
            let mut m = LabelMap::filled(h, w, 0);
            for (i, l) in m.labels.iter_mut().enumerate() {
                let mut best = 0;
                for ch in 1..c {
                    if d[(b * c + ch) * h * w + i] > d[(b * c + best) * h * w + i] {
                        best = ch;
                    }
                }
                *l = best as u8;
            }
            labels.push(m);
        }
        if let Some(q) = out.boundary_source() {
            let q = g.value(q);
            let v = bdry.get_or_insert_with(Vec::new);
            for b in 0..n {
                v.push(q.narrow_batch(b, 1)?);
            }
        }
    }
    Ok((labels, bdry))
}

/// Segmentation and boundary metrics of `net` on `scenes`.
pub fn evaluate(
    net: &mut Network<f32>,
    scenes: &[Scene],
    k: usize,
    set: MetricSet,
    radius: usize,
) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let cfg = net.config.clone();
    let (pred, bdry) = predict(net, scenes)?;
    let gt: Vec<LabelMap> = scenes.iter().map(|s| s.labels.clone()).collect();
    let targets = match (set.mf, cfg.boundary_mode) {
        (true, BoundaryMode::Semantic) => Some(
            gt.iter()
                .map(|l| semantic_boundaries(l, cfg.num_classes, radius))
                .collect::<Result<Vec<BoundaryTarget>>>()?,
        ),
        (true, BoundaryMode::Binary) => Some(
            gt.iter()
                .map(|l| binary_boundaries(l, radius))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    let boundaries = match (&bdry, &targets) {
        (Some(p), Some(t)) => Some((p.as_slice(), t.as_slice())),
        _ => None,
    };
    MetricsReport::compute(&pred, &gt, cfg.num_classes, k, set, boundaries)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// iterations completed
    pub iter: usize,
    pub miou: f64,
    pub biou: Option<f64>,
    pub bf1: Option<f64>,
}

/// Outcome of a run; serialized as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iters: usize,
    /// `teacher` for semi-supervised runs, `student` otherwise
    pub evaluated: String,
    pub final_metrics: MetricsReport,
    pub best_miou: f64,
    pub best_iter: usize,
    pub evals: Vec<EvalPoint>,
    pub final_losses: LossBreakdown,
}

impl RunSummary {
    pub fn final_miou(&self) -> f64 {
        self.final_metrics.miou().unwrap_or(0.0)
    }

    pub fn final_bf1(&self) -> f64 {
        self.final_metrics.mean_bf1().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// run directory; nothing is written when absent
    pub out_dir: Option<PathBuf>,
    /// log progress every this many iterations (0 disables)
    pub log_every: usize,
}

struct RunFiles {
    dir: PathBuf,
    losses: BufWriter<fs::File>,
    metrics: BufWriter<fs::File>,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut BufWriter<fs::File>, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

impl RunFiles {
    fn open(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snap = dir.join("config.json");
        fs::write(&snap, cfg.to_json()).map_err(|e| Error::io(&snap, e))?;
        let mut losses = create(&dir.join("losses.csv"))?;
        write_line(
            &mut losses,
            &dir.join("losses.csv"),
            &format!("iter,lr,{},confident_fraction", LossBreakdown::CSV_HEADER),
        )?;
        let mut metrics = create(&dir.join("metrics.csv"))?;
        write_line(
            &mut metrics,
            &dir.join("metrics.csv"),
            &format!("iter,{}", MetricsReport::csv_header(cfg.model.num_classes)),
        )?;
        Ok(Self {
            dir: dir.to_path_buf(),
            losses,
            metrics,
        })
    }
}

/// Train for `trainer.total_iters` iterations with periodic validation.
pub fn train_run(cfg: &ExperimentConfig, data: &Dataset, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    if data.num_classes() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model is configured for {}",
            data.num_classes(),
            cfg.model.num_classes
        )));
    }
    let tc = &cfg.trainer;
    let split = make_split(data.train.len(), data.val.len(), cfg.label_fraction, cfg.split_seed)?;
    if tc.semi_supervised && split.unlabeled.is_empty() {
        log::warn!(
            "label fraction {} leaves no unlabeled images; training is supervised only",
            cfg.label_fraction
        );
    }
    let ctx = StepContext::new(cfg.model.clone(), tc.clone(), cfg.loss);
    let mut state = ModelState::new(&cfg.model, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut sampler = BatchSampler::new(&split)?;
    let use_teacher = tc.semi_supervised && sampler.has_unlabeled();
    let mut files = opts.out_dir.as_deref().map(|d| RunFiles::open(d, cfg)).transpose()?;

    let period = tc.eval_period();
    let periodic = MetricSet {
        mf: false,
        ..MetricSet::all()
    };
    let mut evals = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for t in 0..tc.total_iters {
        let batch = assemble_batch(&mut rng, data, &mut sampler, &cfg.model, tc, &cfg.augment)?;
        let out = hbn_iteration(&mut state, &batch, &ctx)?;
        if let Some(f) = files.as_mut() {
            let p = f.dir.join("losses.csv");
            let line = format!(
                "{t},{:.8},{},{:.6}",
                out.lr,
                out.losses.csv_row(),
                out.confident_fraction
            );
            write_line(&mut f.losses, &p, &line)?;
        }
        if opts.log_every > 0 && (t + 1) % opts.log_every == 0 {
            log::info!("iter {}/{}: loss {:.4}", t + 1, tc.total_iters, out.losses.total);
        }
        let done = t + 1;
        if done % period == 0 || done == tc.total_iters {
            let net = if use_teacher {
                &mut state.teacher
            } else {
                &mut state.student
            };
            let set = if done == tc.total_iters {
                MetricSet::all()
            } else {
                periodic
            };
            let report = evaluate(net, &data.val, tc.eval_k, set, tc.boundary_radius)?;
            let miou = report.miou().unwrap_or(0.0);
            evals.push(EvalPoint {
                iter: done,
                miou,
                biou: report.mean_biou(),
                bf1: report.mean_bf1(),
            });
            if let Some(f) = files.as_mut() {
                let p = f.dir.join("metrics.csv");
                write_line(
                    &mut f.metrics,
                    &p,
                    &format!("{done},{}", report.csv_row(cfg.model.num_classes)),
                )?;
            }
            if miou > best.0 {
                best = (miou, done);
                if let Some(f) = &files {
                    save_checkpoint(&f.dir.join("best.bmck"), &state, cfg)?;
                }
            }
            log::info!("eval at {done}: mIoU {miou:.4}");
            if done == tc.total_iters {
                let summary = RunSummary {
                    iters: done,
                    evaluated: if use_teacher { "teacher" } else { "student" }.into(),
                    final_metrics: report,
                    best_miou: best.0,
                    best_iter: best.1,
                    evals,
                    final_losses: out.losses,
                };
                if let Some(mut f) = files {
                    save_checkpoint(&f.dir.join("final.bmck"), &state, cfg)?;
                    for (w, name) in [(&mut f.losses, "losses.csv"), (&mut f.metrics, "metrics.csv")] {
                        w.flush().map_err(|e| Error::io(f.dir.join(name), e))?;
                    }
                    let p = f.dir.join("summary.json");
                    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
                    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
                }
                return Ok(summary);
            }
        }
    }
    unreachable!("the final iteration always evaluates")
}
