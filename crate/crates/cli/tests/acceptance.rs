//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! Criteria 5-7 share one set of training runs on the default synthetic dataset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use boundmatch_core::config::{Arm, Components, ExperimentConfig};
use boundmatch_core::dataset::{make_split, Dataset};
use boundmatch_core::gradcheck::{run_suite, SuiteOptions};
use boundmatch_core::losses::{bdry_bce_reweighted, duality_loss, seg_consistency_loss};
use boundmatch_core::oracle::{conv2d_direct, run_oracle_suite};
use boundmatch_core::trainer::reference::samth_step;
use boundmatch_core::trainer::{
    assemble_batch, hbn_iteration, train_run, BatchSampler, ModelState, RunOptions, RunSummary, StepContext,
};
use boundmatch_core::{BatchNormState, ConvSpec, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const MIN_SSL_GAIN: f64 = 0.02;
const MAX_MIOU_DROP: f64 = 0.005;
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn bits_eq(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

fn autodiff() -> Outcome {
    let t = Instant::now();
    let r = run_suite(&SuiteOptions {
        cases: 10,
        seed: 2024,
        fault: None,
    })
    .expect("suite runs");
    let worst = r.checks.iter().map(|c| c.max_rel).fold(0.0, f64::max);
    let el = t.elapsed();
    let failed: Vec<_> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    outcome(
        failed.is_empty() && el < Duration::from_secs(60),
        format!(
            "{} checks x 10 cases, worst rel err {worst:.2e} (tol {:.0e}), {:.1}s{}",
            r.checks.len(),
            r.tolerance,
            el.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(","))
            }
        ),
    )
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    let r = run_oracle_suite(1000, 3, 77).expect("oracles run");
    let el = t.elapsed();
    let bad: usize = r.checks.iter().map(|c| c.mismatches).sum();
    outcome(
        r.passed() && el < Duration::from_secs(60),
        format!(
            "{} routines x 1000 maps (<=12x12, C<=3, k=3), {bad} mismatches, {:.1}s",
            r.checks.len(),
            el.as_secs_f64()
        ),
    )
}

fn small_config(components: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.set_components(Components::parse(components).unwrap());
    c.trainer.crop = 32;
    c.trainer.batch_labeled = 4;
    c.trainer.batch_unlabeled = 4;
    c.trainer.total_iters = 100;
    c
}

struct Rig {
    data: Dataset,
    sampler: BatchSampler,
    rng: ChaCha8Rng,
    cfg: ExperimentConfig,
}

impl Rig {
    fn new(cfg: ExperimentConfig, seed: u64) -> Self {
        let data = cfg.dataset().unwrap();
        let split = make_split(data.train.len(), data.val.len(), cfg.label_fraction, cfg.split_seed).unwrap();
        Self {
            sampler: BatchSampler::new(&split).unwrap(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            data,
            cfg,
        }
    }

    fn batch(&mut self) -> boundmatch_core::trainer::Batch {
        let c = &self.cfg;
        assemble_batch(
            &mut self.rng,
            &self.data,
            &mut self.sampler,
            &c.model,
            &c.trainer,
            &c.augment,
        )
        .unwrap()
    }
}

fn hbn_invariants() -> Outcome {
    let mut rig = Rig::new(small_config("bcrm,bsf,sgf"), 31);
    let ctx = StepContext::new(rig.cfg.model.clone(), rig.cfg.trainer.clone(), rig.cfg.loss);
    let mut state = ModelState::new(&ctx.model, 17).unwrap();
    let alpha = ctx.trainer.ema_alpha as f32;
    let conv = state
        .teacher
        .param_names()
        .iter()
        .position(|n| n == "enc0.0.conv.weight")
        .unwrap();
    let bn0 = state.teacher.bn_names().iter().position(|n| n == "enc0.0.bn").unwrap();
    let (mut ema_bad, mut buf_bad, mut grads, mut worst_direct) = (0usize, 0usize, 0usize, 0.0f64);
    let mut warm = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        // a few unchecked steps between checks so the 20 samples land at random points
        for _ in 0..warm.gen_range(0..3) {
            let b = rig.batch();
            hbn_iteration(&mut state, &b, &ctx).unwrap();
        }
        let batch = rig.batch();
        let before = state.teacher.clone();
        let out = hbn_iteration(&mut state, &batch, &ctx).unwrap();
        grads += out.teacher_params_with_grad;
        for ((t, t0), s) in state
            .teacher
            .params()
            .iter()
            .zip(before.params())
            .zip(state.student.params())
        {
            for ((&v, &v0), &sv) in t.data().iter().zip(t0.data()).zip(s.data()) {
                ema_bad += (v.to_bits() != (alpha * v0 + (1.0 - alpha) * sv).to_bits()) as usize;
            }
        }
        for (bn, old) in state.teacher.bn_states().iter().zip(before.bn_states()) {
            let (Some(m), Some(v)) = (&bn.last_batch_mean, &bn.last_batch_var) else {
                buf_bad += 1;
                continue;
            };
            for ch in 0..bn.channels() {
                let em = BatchNormState::momentum_update(old.running_mean[ch], m[ch], bn.momentum);
                let ev = BatchNormState::momentum_update(old.running_var[ch], v[ch], bn.momentum);
                buf_bad += (em.to_bits() != bn.running_mean[ch].to_bits()) as usize;
                buf_bad += (ev.to_bits() != bn.running_var[ch].to_bits()) as usize;
            }
        }
        // teacher-side statistics recomputed from scratch for the first layer
        let u = batch.unlabeled.as_ref().unwrap();
        let x = Tensor::cat_batch(&[&batch.x, &u.uw, &u.us]).unwrap().cast::<f64>();
        let y = conv2d_direct(&x, &before.params()[conv].cast::<f64>(), None, ConvSpec::new(2, 1, 1));
        let (n, c, h, w) = y.dims4().unwrap();
        let (old, new) = (&before.bn_states()[bn0], &state.teacher.bn_states()[bn0]);
        let rho = f64::from(new.momentum);
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|k| y.data()[(k * c + ch) * h * w..(k * c + ch + 1) * h * w].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let em = (1.0 - rho) * f64::from(old.running_mean[ch]) + rho * mean;
            let ev = (1.0 - rho) * f64::from(old.running_var[ch]) + rho * var;
            worst_direct = worst_direct
                .max((em - f64::from(new.running_mean[ch])).abs())
                .max((ev - f64::from(new.running_var[ch])).abs());
        }
    }
    outcome(
        ema_bad == 0 && buf_bad == 0 && grads == 0 && worst_direct < 1e-5,
        format!(
            "20 iterations: EMA bit mismatches {ema_bad}, buffer mismatches {buf_bad}, teacher grads {grads}, direct-recompute err {worst_direct:.1e}"
        ),
    )
}

fn loss_degeneracies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (n, c, h, w) = (
            rng.gen_range(1..3),
            rng.gen_range(2..4),
            rng.gen_range(2..7),
            rng.gen_range(2..7),
        );
        let shape = [n, c, h, w];
        let mut g = Graph::<f64>::new();
        let q = g.param(Tensor::from_fn(&shape, |_| rng.gen_range(0.01..0.99)));
        for fill in [0.0, 1.0] {
            let l = bdry_bce_reweighted(&mut g, q, &Tensor::full(&shape, fill)).unwrap();
            worst = worst.max(g.value(l).data()[0].abs());
        }
        let z = Tensor::from_fn(&shape, |_| f64::from(rng.gen_range(0..2u8)));
        let qg = g.param(z.clone());
        let l = duality_loss(&mut g, qg, &z).unwrap();
        worst = worst.max(g.value(l).data()[0].abs());
        let logits = g.param(Tensor::from_fn(&shape, |_| rng.gen_range(-3.0..3.0)));
        let probs = Tensor::from_fn(&shape, |_| 1.0 / c as f64);
        let l = seg_consistency_loss(&mut g, logits, &probs, 0.99).unwrap();
        worst = worst.max(g.value(l).data()[0].abs());
    }

    let mut bitwise = true;
    for hbn in [true, false] {
        let mut cfg = small_config("");
        cfg.trainer.hbn = hbn;
        let mut rig = Rig::new(cfg, 3);
        let ctx = StepContext::new(rig.cfg.model.clone(), rig.cfg.trainer.clone(), rig.cfg.loss);
        let mut a = ModelState::new(&ctx.model, 4).unwrap();
        let mut b = a.clone();
        for _ in 0..5 {
            let batch = rig.batch();
            let la = hbn_iteration(&mut a, &batch, &ctx).unwrap().losses.total;
            let lb = samth_step(&mut b, &batch, &ctx).unwrap();
            bitwise &= la.to_bits() == lb.to_bits()
                && bits_eq(a.student.params(), b.student.params())
                && bits_eq(a.teacher.params(), b.teacher.params())
                && bits_eq(&a.velocity, &b.velocity)
                && a.teacher.bn_states() == b.teacher.bn_states()
                && a.student.bn_states() == b.student.bn_states();
        }
    }
    outcome(
        worst == 0.0 && bitwise,
        format!("max |degenerate loss| {worst:e}; boundary-free step vs reference path bitwise equal: {bitwise}"),
    )
}

/// Reduced schedule: 32 px crops, 4+4 images per batch, 2000 iterations, k = 3.
fn profile(arm: &Arm, seed: u64) -> ExperimentConfig {
    let mut base = ExperimentConfig::default();
    base.trainer.total_iters = 2000;
    base.trainer.crop = 32;
    base.trainer.batch_labeled = 4;
    base.trainer.batch_unlabeled = 4;
    base.trainer.eval_k = 3;
    base.trainer.seed = seed;
    arm.apply(&base).expect("arm is valid")
}

fn arm(name: &str, components: &str, semi: bool, hbn: bool) -> Arm {
    Arm {
        name: name.into(),
        components: components.into(),
        boundary: None,
        boundary_source: None,
        hbn: Some(hbn),
        semi_supervised: Some(semi),
    }
}

struct ArmRuns {
    summaries: Vec<RunSummary>,
    secs: f64,
}

impl ArmRuns {
    fn mean(&self, f: impl Fn(&RunSummary) -> f64) -> f64 {
        self.summaries.iter().map(f).sum::<f64>() / self.summaries.len() as f64
    }

    /// Mean over seeds of the population variance of the last quarter of validation mIoU.
    fn tail_variance(&self) -> f64 {
        self.mean(|s| {
            let n = s.evals.len();
            let tail: Vec<f64> = s.evals[n - n.div_ceil(4)..].iter().map(|e| e.miou).collect();
            let m = tail.iter().sum::<f64>() / tail.len() as f64;
            tail.iter().map(|v| (v - m).powi(2)).sum::<f64>() / tail.len() as f64
        })
    }
}

fn run_arm(data: &Dataset, a: &Arm) -> ArmRuns {
    let t = Instant::now();
    let summaries = SEEDS
        .iter()
        .map(|&s| train_run(&profile(a, s), data, &RunOptions::default()).expect("run completes"))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    println!("    [{:<10}] {} seeds in {secs:.0}s", a.name, SEEDS.len());
    ArmRuns { summaries, secs }
}

fn budget_ok(secs: f64) -> bool {
    secs <= RUN_BUDGET.as_secs_f64()
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = {
        let mut c = small_config("bcrm,bsf,sgf");
        c.trainer.total_iters = 40;
        c.n_train = 48;
        c.n_val = 8;
        c
    };
    fs::write(dir.join("c.json"), cfg.to_json()).unwrap();
    let train = |cfg: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_boundmatch"))
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .args(["train", "--config", cfg, "--out", out, "--seed", "5"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.join(out).join("summary.json")).unwrap()
    };
    let a = train("c.json", "r1");
    let b = train("c.json", "r2");
    let c = train("r1/config.json", "r3");
    outcome(
        a == b && a == c,
        format!(
            "repeat run identical: {}, rerun from snapshot identical: {} ({} bytes)",
            a == b,
            a == c,
            a.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {id} [{}] {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };

    report(1, "autodiff finite differences", autodiff());
    report(2, "metric oracle equivalence", metric_oracles());
    report(3, "HBN/EMA invariants", hbn_invariants());
    report(4, "loss degeneracies", loss_degeneracies());

    let data = ExperimentConfig::default().dataset().unwrap();
    println!(
        "    training 4 arms x {} seeds on the default dataset (1/8 labeled)",
        SEEDS.len()
    );
    let sup = run_arm(&data, &arm("supervised", "", false, true));
    let samth = run_arm(&data, &arm("samth", "", true, true));
    let full = run_arm(&data, &arm("boundmatch", "bcrm,bsf,sgf", true, true));
    let nohbn = run_arm(&data, &arm("no-hbn", "bcrm,bsf,sgf", true, false));

    let miou = |s: &RunSummary| s.final_miou();
    let bf1 = |s: &RunSummary| s.final_bf1();
    let (m_sup, m_samth, m_full, m_nohbn) = (sup.mean(miou), samth.mean(miou), full.mean(miou), nohbn.mean(miou));
    let (b_samth, b_full) = (samth.mean(bf1), full.mean(bf1));

    let secs5 = sup.secs + samth.secs;
    report(
        5,
        "semi-supervised gain",
        outcome(
            m_samth - m_sup >= MIN_SSL_GAIN && budget_ok(secs5),
            format!(
                "mIoU supervised {m_sup:.4}, SAMTH {m_samth:.4}, gain {:+.2} pts (need >= {:.0}), {secs5:.0}s",
                100.0 * (m_samth - m_sup),
                100.0 * MIN_SSL_GAIN
            ),
        ),
    );
    let secs6 = samth.secs + full.secs;
    report(
        6,
        "boundary-component gain",
        outcome(
            b_full >= b_samth && m_full >= m_samth - MAX_MIOU_DROP && budget_ok(secs6),
            format!(
                "BF1 SAMTH {b_samth:.4} vs BoundMatch {b_full:.4}; mIoU {m_samth:.4} vs {m_full:.4} (change {:+.2} pts, min -0.5), {secs6:.0}s",
                100.0 * (m_full - m_samth)
            ),
        ),
    );
    let (v_full, v_nohbn) = (full.tail_variance(), nohbn.tail_variance());
    let secs7 = full.secs + nohbn.secs;
    report(
        7,
        "HBN stabilization",
        outcome(
            m_nohbn <= m_full && v_full < v_nohbn && budget_ok(secs7),
            format!(
                "mIoU no-HBN {m_nohbn:.4} vs HBN {m_full:.4}; tail variance HBN {v_full:.2e} vs no-HBN {v_nohbn:.2e}, {secs7:.0}s"
            ),
        ),
    );

    let dir = tempfile::tempdir().unwrap();
    report(8, "determinism", determinism(dir.path()));

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2.passed)
        .map(|r| r.0.to_string())
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
