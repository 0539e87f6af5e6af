use boundmatch_core::augment::AugmentConfig;
use boundmatch_core::checkpoint::{load_checkpoint, save_checkpoint};
use boundmatch_core::config::{Components, ExperimentConfig};
use boundmatch_core::dataset::{make_split, Dataset, SceneConfig};
use boundmatch_core::losses::LossWeights;
use boundmatch_core::model::{BoundaryMode, ModelConfig};
use boundmatch_core::oracle::conv2d_direct;
use boundmatch_core::trainer::reference::samth_step;
use boundmatch_core::trainer::{
    assemble_batch, hbn_iteration, train_run, Batch, BatchSampler, BoundarySource, ModelState, RunOptions, StepContext,
    TrainerConfig,
};
use boundmatch_core::{BatchNormState, ConvSpec, Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        scene: SceneConfig {
            size: 32,
            num_classes: 3,
            ..Default::default()
        },
        n_train: 16,
        n_val: 4,
        label_fraction: 0.25,
        model: ModelConfig {
            num_classes: 3,
            widths: [4, 8, 8, 8],
            decoder_width: 8,
            skip_width: 4,
            ..Default::default()
        },
        trainer: TrainerConfig {
            total_iters: 20,
            batch_labeled: 2,
            batch_unlabeled: 2,
            crop: 32,
            eval_every: 10,
            ..Default::default()
        },
        ..Default::default()
    }
}

struct Rig {
    data: Dataset,
    sampler: BatchSampler,
    rng: ChaCha8Rng,
    cfg: ExperimentConfig,
}

impl Rig {
    fn new(cfg: ExperimentConfig) -> Self {
        let data = cfg.dataset().unwrap();
        let split = make_split(data.train.len(), data.val.len(), cfg.label_fraction, 0).unwrap();
        Self {
            sampler: BatchSampler::new(&split).unwrap(),
            rng: ChaCha8Rng::seed_from_u64(7),
            data,
            cfg,
        }
    }

    fn batch(&mut self) -> Batch {
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

    fn ctx(&self) -> StepContext {
        StepContext::new(self.cfg.model.clone(), self.cfg.trainer.clone(), self.cfg.loss)
    }
}

fn full() -> ExperimentConfig {
    let mut c = tiny();
    c.set_components(Components::parse("bcrm,bsf,sgf").unwrap());
    c
}

#[test]
fn teacher_invariants_hold_for_twenty_iterations() {
    let mut rig = Rig::new(full());
    let ctx = rig.ctx();
    let mut state = ModelState::new(&ctx.model, 3).unwrap();
    let alpha = ctx.trainer.ema_alpha as f32;
    for it in 0..20 {
        let batch = rig.batch();
        let teacher_before = state.teacher.clone();
        let out = hbn_iteration(&mut state, &batch, &ctx).unwrap();

        // (a) EMA, to the last bit
        for ((t, t0), s) in state
            .teacher
            .params()
            .iter()
            .zip(teacher_before.params())
            .zip(state.student.params())
        {
            for ((&v, &v0), &sv) in t.data().iter().zip(t0.data()).zip(s.data()) {
                assert_eq!(
                    v.to_bits(),
                    (alpha * v0 + (1.0 - alpha) * sv).to_bits(),
                    "iteration {it}"
                );
            }
        }
        // (b) buffers follow the teacher's own batch statistics
        for (bn, bn0) in state.teacher.bn_states().iter().zip(teacher_before.bn_states()) {
            let bm = bn.last_batch_mean.as_ref().expect("teacher ran in train mode");
            let bv = bn.last_batch_var.as_ref().unwrap();
            for ch in 0..bn.channels() {
                let m = BatchNormState::momentum_update(bn0.running_mean[ch], bm[ch], bn.momentum);
                let v = BatchNormState::momentum_update(bn0.running_var[ch], bv[ch], bn.momentum);
                assert_eq!(bn.running_mean[ch].to_bits(), m.to_bits());
                assert_eq!(bn.running_var[ch].to_bits(), v.to_bits());
            }
        }
        // (c) the teacher graph never produced a parameter gradient
        assert_eq!(out.teacher_params_with_grad, 0);
        // same multiset of inputs at step 0, so only later steps can tell them apart
        if it > 0 {
            assert_ne!(state.teacher.bn_states(), state.student.bn_states());
        }
    }
}

#[test]
fn teacher_first_layer_statistics_match_direct_convolution() {
    let mut rig = Rig::new(full());
    let ctx = rig.ctx();
    let mut state = ModelState::new(&ctx.model, 5).unwrap();
    let batch = rig.batch();
    let u = batch.unlabeled.as_ref().unwrap();
    let input = Tensor::cat_batch(&[&batch.x, &u.uw, &u.us]).unwrap().cast::<f64>();
    let i = state
        .teacher
        .param_names()
        .iter()
        .position(|n| n == "enc0.0.conv.weight")
        .unwrap();
    let w = state.teacher.params()[i].cast::<f64>();
    let b = state.teacher.bn_names().iter().position(|n| n == "enc0.0.bn").unwrap();
    let old = state.teacher.bn_states()[b].clone();

    hbn_iteration(&mut state, &batch, &ctx).unwrap();

    let y = conv2d_direct(&input, &w, None, ConvSpec::new(2, 1, 1));
    let (n, c, h, wd) = y.dims4().unwrap();
    let bn = &state.teacher.bn_states()[b];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|k| y.data()[(k * c + ch) * h * wd..(k * c + ch + 1) * h * wd].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        let exp_m = 0.9 * f64::from(old.running_mean[ch]) + 0.1 * mean;
        let exp_v = 0.9 * f64::from(old.running_var[ch]) + 0.1 * var;
        assert!((f64::from(bn.running_mean[ch]) - exp_m).abs() < 1e-5, "mean ch {ch}");
        assert!((f64::from(bn.running_var[ch]) - exp_v).abs() < 1e-5, "var ch {ch}");
    }
}

#[test]
fn without_hbn_teacher_copies_student_buffers() {
    let mut cfg = full();
    cfg.trainer.hbn = false;
    let mut rig = Rig::new(cfg);
    let ctx = rig.ctx();
    let mut state = ModelState::new(&ctx.model, 1).unwrap();
    for _ in 0..3 {
        let batch = rig.batch();
        let out = hbn_iteration(&mut state, &batch, &ctx).unwrap();
        assert_eq!(out.teacher_params_with_grad, 0);
        assert_eq!(state.teacher.bn_states(), state.student.bn_states());
    }
}

fn samth() -> ExperimentConfig {
    let mut c = tiny();
    c.set_components(Components::default());
    c
}

#[test]
fn boundary_free_step_matches_reference_bitwise() {
    for hbn in [true, false] {
        let mut cfg = samth();
        cfg.trainer.hbn = hbn;
        let mut rig = Rig::new(cfg);
        let ctx = rig.ctx();
        let mut a = ModelState::new(&ctx.model, 11).unwrap();
        let mut b = a.clone();
        for _ in 0..3 {
            let batch = rig.batch();
            let out = hbn_iteration(&mut a, &batch, &ctx).unwrap();
            let loss = samth_step(&mut b, &batch, &ctx).unwrap();
            assert_eq!(out.losses.total.to_bits(), loss.to_bits());
            for (x, y) in a.student.params().iter().zip(b.student.params()) {
                assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
            for (x, y) in a.teacher.params().iter().zip(b.teacher.params()) {
                assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
            assert_eq!(a.teacher.bn_states(), b.teacher.bn_states());
            assert_eq!(a.velocity, b.velocity);
        }
    }
}

#[test]
fn zero_lambda_ignores_unlabeled_terms() {
    let mut cfg = full();
    cfg.loss = LossWeights {
        lambda: 0.0,
        ..Default::default()
    };
    let mut rig = Rig::new(cfg.clone());
    let batch = rig.batch();
    let ctx = rig.ctx();
    let mut a = ModelState::new(&ctx.model, 2).unwrap();
    let out = hbn_iteration(&mut a, &batch, &ctx).unwrap();
    let l = out.losses;
    let expect = l.seg_l + l.w_bdry * l.bdry_l + l.dual;
    assert!((l.total - expect).abs() <= 1e-6 * expect.abs().max(1.0));
    assert!(l.seg_u > 0.0);

    // with the unlabeled terms switched off the teacher cannot influence the student
    let mut b = ModelState::new(&ctx.model, 2).unwrap();
    let mut c = ModelState::new(&ctx.model, 2).unwrap();
    for p in c.teacher.params_mut() {
        for v in p.data_mut() {
            *v = -*v * 1.5 + 0.01;
        }
    }
    for _ in 0..3 {
        let batch = rig.batch();
        hbn_iteration(&mut b, &batch, &ctx).unwrap();
        hbn_iteration(&mut c, &batch, &ctx).unwrap();
        assert_eq!(b.student.params(), c.student.params());
        assert_eq!(b.student.bn_states(), c.student.bn_states());
        assert_ne!(b.teacher.params(), c.teacher.params());
    }
}

#[test]
fn derived_boundaries_and_binary_mode_train() {
    for (mode, src) in [
        (BoundaryMode::Binary, BoundarySource::Learned),
        (BoundaryMode::Semantic, BoundarySource::Derived),
        (BoundaryMode::Binary, BoundarySource::Derived),
    ] {
        let mut cfg = full();
        cfg.model.boundary_mode = mode;
        cfg.trainer.boundary_source = src;
        let mut rig = Rig::new(cfg);
        let ctx = rig.ctx();
        let mut s = ModelState::new(&ctx.model, 0).unwrap();
        for _ in 0..2 {
            let b = rig.batch();
            let out = hbn_iteration(&mut s, &b, &ctx).unwrap();
            assert!(out.losses.total.is_finite() && out.losses.bdry_u >= 0.0);
        }
    }
}

#[test]
fn supervised_arm_leaves_teacher_untouched() {
    let mut cfg = full();
    cfg.trainer.semi_supervised = false;
    let mut rig = Rig::new(cfg);
    let ctx = rig.ctx();
    let mut s = ModelState::new(&ctx.model, 0).unwrap();
    let t0 = s.teacher.clone();
    let b = rig.batch();
    assert!(b.unlabeled.is_none());
    let out = hbn_iteration(&mut s, &b, &ctx).unwrap();
    assert_eq!(out.losses.seg_u, 0.0);
    assert_eq!(s.teacher.params(), t0.params());
}

#[test]
fn runs_are_deterministic_and_checkpoints_round_trip() {
    let cfg = full();
    let data = cfg.dataset().unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let s1 = train_run(
        &cfg,
        &data,
        &RunOptions {
            out_dir: Some(d1.path().into()),
            log_every: 0,
        },
    )
    .unwrap();
    let s2 = train_run(
        &cfg,
        &data,
        &RunOptions {
            out_dir: Some(d2.path().into()),
            log_every: 0,
        },
    )
    .unwrap();
    assert_eq!(s1, s2);
    assert_eq!(s1.evals.len(), 2);
    let j1 = std::fs::read(d1.path().join("summary.json")).unwrap();
    let j2 = std::fs::read(d2.path().join("summary.json")).unwrap();
    assert_eq!(j1, j2);
    for f in [
        "config.json",
        "losses.csv",
        "metrics.csv",
        "best.bmck",
        "final.bmck",
        "final.json",
    ] {
        assert!(d1.path().join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read(d1.path().join("final.bmck")).unwrap(),
        std::fs::read(d2.path().join("final.bmck")).unwrap()
    );

    let (state, side) = load_checkpoint(&d1.path().join("final.bmck")).unwrap();
    assert_eq!(side.iter, 20);
    assert_eq!(side.config, cfg);
    let again = d1.path().join("again.bmck");
    save_checkpoint(&again, &state, &cfg).unwrap();
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(d1.path().join("final.bmck")).unwrap()
    );
}

#[test]
fn checkpoint_rejects_mismatch_and_corruption() {
    let cfg = full();
    let state = ModelState::new(&cfg.model, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bmck");
    save_checkpoint(&p, &state, &cfg).unwrap();

    let mut other = cfg.clone();
    other.model.widths = [4, 8, 8, 16];
    let small = ModelState::new(&other.model, 0).unwrap();
    let q = dir.path().join("q.bmck");
    save_checkpoint(&q, &small, &other).unwrap();
    std::fs::copy(p.with_extension("json"), q.with_extension("json")).unwrap();
    assert!(matches!(load_checkpoint(&q), Err(Error::Checkpoint { .. })));

    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Parse { .. })));
    std::fs::write(&p, b"XXXX").unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Parse { offset: 0, .. })));
}

#[test]
fn dataset_round_trip_and_bad_files() {
    let cfg = SceneConfig {
        size: 16,
        num_classes: 3,
        ..Default::default()
    };
    let data = Dataset::generate(&cfg, 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.train, data.train);
    assert_eq!(back.val, data.val);

    let lab = std::fs::read_dir(dir.path().join("labels"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut bytes = std::fs::read(&lab).unwrap();
    *bytes.last_mut().unwrap() = 9;
    std::fs::write(&lab, &bytes).unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(Error::Data(_)) | Err(Error::Parse { .. })
    ));

    assert!(Dataset::load(&dir.path().join("missing")).is_err());
}

#[test]
fn components_and_augment_validation() {
    let mut c = tiny();
    c.augment = AugmentConfig {
        scale_min: 3.0,
        ..Default::default()
    };
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.model.num_classes = 4;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}
