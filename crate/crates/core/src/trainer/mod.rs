//! Teacher-student training with harmonious batch normalization.
//!
//! One iteration:
//! 1. the teacher runs on the whole batch `(x, u^w, u^s)` in train mode, so
//!    its batch-norm buffers follow its own activations;
//! 2. hard pseudo-labels come from the teacher's weak-view predictions and
//!    are CutMixed with the same boxes as the strong views;
//! 3. the student runs on `(x, u^s, u^w)`; `u^w` only feeds batch statistics;
//! 4. the combined loss is minimized with one SGD step (poly decay);
//! 5. teacher weights move toward the student by EMA. Buffers are not averaged.

mod batch;
pub mod reference;
mod run;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{assemble_batch, boundary_targets, Batch, BatchSampler, UnlabeledBatch};
pub use run::{evaluate, train_run, EvalPoint, RunOptions, RunSummary};

use crate::augment::{mix, CutMixRecord};
use crate::boundary_gt::{binary_boundaries, derive_boundaries_from_prediction, BoundaryTarget, LabelMap};
use crate::error::{Error, Result};
use crate::losses::{
    argmax_with_confidence, bdry_supervised_loss, duality_loss, seg_consistency_from_pseudo, seg_supervised_loss,
    threshold_boundaries, total_loss, LossBreakdown, LossParts, LossWeights, Schedules,
};
use crate::model::{BoundaryMode, ForwardOutputs, ModelConfig, Network};
use crate::tensor::{softmax_values, Graph, Mode, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundarySource {
    /// threshold the teacher's boundary head
    Learned,
    /// recompute boundaries from the teacher's segmentation pseudo-labels
    Derived,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub total_iters: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// square training crop, a multiple of 16
    pub crop: usize,
    pub lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    /// teacher keeps its own batch-norm statistics; otherwise it copies the student's
    pub hbn: bool,
    /// use the unlabeled set; `false` trains the student on labeled data only
    pub semi_supervised: bool,
    pub boundary_source: BoundarySource,
    pub boundary_radius: usize,
    /// add the duality loss when spatial-gradient fusion is on
    pub duality: bool,
    /// evaluation period in iterations, 0 for `total_iters / 20`
    pub eval_every: usize,
    pub eval_k: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_iters: 3000,
            batch_labeled: 8,
            batch_unlabeled: 8,
            crop: 64,
            lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            ema_alpha: 0.99,
            hbn: true,
            semi_supervised: true,
            boundary_source: BoundarySource::Learned,
            boundary_radius: crate::boundary_gt::DEFAULT_RADIUS,
            duality: true,
            eval_every: 0,
            eval_k: crate::metrics::DEFAULT_K,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha must be in [0, 1), got {}", self.ema_alpha));
        }
        if self.batch_labeled == 0 || (self.semi_supervised && self.batch_unlabeled == 0) {
            return bad("batch sizes must be at least 1".into());
        }
        if self.total_iters == 0 {
            return bad("total_iters must be at least 1".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(16) {
            return bad(format!("crop must be a positive multiple of 16, got {}", self.crop));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lr_power < 0.0 {
            return bad("lr must be positive and lr_power non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        if self.boundary_radius == 0 {
            return bad("boundary_radius must be at least 1".into());
        }
        if self.eval_k.is_multiple_of(2) {
            return bad(format!("eval_k must be odd, got {}", self.eval_k));
        }
        Ok(())
    }

    pub fn eval_period(&self) -> usize {
        if self.eval_every > 0 {
            self.eval_every
        } else {
            (self.total_iters / 20).max(1)
        }
    }

    /// `lr * (1 - t/T)^power`
    pub fn lr_at(&self, t: usize) -> f64 {
        let frac = 1.0 - (t as f64 / self.total_iters as f64).min(1.0);
        self.lr * frac.powf(self.lr_power)
    }
}

/// Everything the loop needs besides the batch.
#[derive(Clone, Debug)]
pub struct StepContext {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub weights: LossWeights,
    pub schedules: Schedules,
}

impl StepContext {
    pub fn new(model: ModelConfig, trainer: TrainerConfig, weights: LossWeights) -> Self {
        let schedules = Schedules::new(&weights, trainer.total_iters);
        Self {
            model,
            trainer,
            weights,
            schedules,
        }
    }
}

/// Student, teacher, optimizer velocity and the iteration counter.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub student: Network<f32>,
    pub teacher: Network<f32>,
    pub velocity: Vec<Tensor<f32>>,
    pub iter: usize,
}

impl ModelState {
    /// Student initialized from `seed`; the teacher starts as an exact copy.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let student = Network::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let velocity = student.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            teacher: student.clone(),
            student,
            velocity,
            iter: 0,
        })
    }
}

/// `theta_T <- alpha * theta_T + (1 - alpha) * theta_S` over learnable parameters only.
pub fn ema_update(teacher: &mut Network<f32>, student: &Network<f32>, alpha: f64) -> Result<()> {
    teacher.check_compatible(student)?;
    let a = alpha as f32;
    let b = 1.0 - a;
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

/// SGD with momentum and L2 weight decay:
/// `v <- mu v + (g + wd w)`, `w <- w - lr v`. Missing gradients count as zero.
pub fn sgd_step(
    net: &mut Network<f32>,
    velocity: &mut [Tensor<f32>],
    grads: &[Option<Tensor<f32>>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((p, v), g) in net.params_mut().iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for (j, (w, vel)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
            *vel = mu * *vel + (gj + wd * *w);
            *w -= lr * *vel;
        }
    }
}

/// Hard pseudo-labels and their confidence mask, per pixel of `N×C×H×W` probabilities.
pub fn make_seg_pseudo_labels(teacher_probs: &Tensor<f32>, tau: f64) -> Result<(Vec<u8>, Vec<bool>)> {
    argmax_with_confidence(teacher_probs, tau)
}

/// Boundary pseudo-labels from the teacher's map or from its segmentation pseudo-labels.
pub fn make_bdry_pseudo_labels(
    teacher_map: Option<&Tensor<f32>>,
    pseudo: &[LabelMap],
    source: BoundarySource,
    mode: BoundaryMode,
    num_classes: usize,
    tau_bdry: f64,
    radius: usize,
) -> Result<Tensor<f32>> {
    match source {
        BoundarySource::Learned => {
            let m = teacher_map.ok_or_else(|| Error::Config("learned boundary source needs a boundary head".into()))?;
            Ok(threshold_boundaries(m, tau_bdry))
        }
        BoundarySource::Derived => {
            let targets = pseudo
                .iter()
                .map(|l| match mode {
                    BoundaryMode::Binary => binary_boundaries(l, radius),
                    _ => derive_boundaries_from_prediction(l, num_classes, radius),
                })
                .collect::<Result<Vec<BoundaryTarget>>>()?;
            BoundaryTarget::stack(&targets)
        }
    }
}

fn split_planes<T: Copy>(data: &[T], n: usize) -> Vec<Vec<T>> {
    let per = data.len() / n.max(1);
    data.chunks(per.max(1)).map(<[T]>::to_vec).collect()
}

/// CutMix per-sample `planes × h × w` blocks of a flat `N`-sample buffer.
pub fn mix_flat<T: Copy>(
    data: &[T],
    n: usize,
    planes: usize,
    h: usize,
    w: usize,
    records: &[Option<CutMixRecord>],
) -> Vec<T> {
    mix(&split_planes(data, n), records, planes, h, w).concat()
}

/// Teacher outputs on the weak unlabeled view.
pub struct TeacherView {
    pub probs: Tensor<f32>,
    pub boundary: Option<Tensor<f32>>,
    /// teacher parameter handles that ended up with a gradient (must be 0)
    pub params_with_grad: usize,
}

/// Step 1: teacher forward. With HBN the whole batch goes through in train mode.
pub fn teacher_forward(state: &mut ModelState, batch: &Batch, unl: &UnlabeledBatch, hbn: bool) -> Result<TeacherView> {
    let bl = batch.labeled_len();
    let bu = unl.len();
    let mut g = Graph::no_grad();
    let p = state.teacher.bind(&mut g, false);
    let (input, mode, offset) = if hbn {
        (Tensor::cat_batch(&[&batch.x, &unl.uw, &unl.us])?, Mode::Train, bl)
    } else {
        (unl.uw.clone(), Mode::Eval, 0)
    };
    let x = g.constant(input);
    let out = state.teacher.forward(&mut g, &p, x, mode)?;
    let logits = g.value(out.logits).narrow_batch(offset, bu)?;
    let boundary = out
        .boundary_source()
        .map(|q| g.value(q).narrow_batch(offset, bu))
        .transpose()?;
    Ok(TeacherView {
        probs: softmax_values(&logits)?,
        boundary,
        params_with_grad: p.iter().filter(|&&v| g.grad(v).is_some()).count(),
    })
}

fn narrow_heads(g: &mut Graph<f32>, heads: &[Var], start: usize, len: usize) -> Result<Vec<Var>> {
    heads.iter().map(|&h| g.narrow_batch(h, start, len)).collect()
}

/// Losses and diagnostics of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationOutcome {
    pub iter: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    /// fraction of unlabeled pixels whose pseudo-label passed `tau`
    pub confident_fraction: f64,
    pub teacher_params_with_grad: usize,
}

/// Pseudo-labels after CutMix, ready for the student's strong view.
struct Pseudo {
    labels: Vec<u8>,
    mask: Vec<bool>,
    boundary: Option<Tensor<f32>>,
}

fn pseudo_labels(ctx: &StepContext, view: &TeacherView, unl: &UnlabeledBatch) -> Result<Pseudo> {
    let (n, _, h, w) = view.probs.dims4()?;
    let (labels, mask) = make_seg_pseudo_labels(&view.probs, ctx.weights.tau)?;
    let labels = mix_flat(&labels, n, 1, h, w, &unl.cutmix);
    let mask = mix_flat(&mask, n, 1, h, w, &unl.cutmix);
    let cb = ctx.model.boundary_channels();
    let boundary = if cb > 0 {
        let maps: Vec<LabelMap> = split_planes(&labels, n)
            .into_iter()
            .map(|l| LabelMap::new(h, w, l))
            .collect::<Result<_>>()?;
        let z = match ctx.trainer.boundary_source {
            BoundarySource::Learned => {
                let raw = make_bdry_pseudo_labels(
                    view.boundary.as_ref(),
                    &maps,
                    BoundarySource::Learned,
                    ctx.model.boundary_mode,
                    ctx.model.num_classes,
                    ctx.weights.tau_bdry,
                    ctx.trainer.boundary_radius,
                )?;
                let mixed = mix_flat(raw.data(), n, cb, h, w, &unl.cutmix);
                Tensor::new(vec![n, cb, h, w], mixed)?
            }
            BoundarySource::Derived => make_bdry_pseudo_labels(
                None,
                &maps,
                BoundarySource::Derived,
                ctx.model.boundary_mode,
                ctx.model.num_classes,
                ctx.weights.tau_bdry,
                ctx.trainer.boundary_radius,
            )?,
        };
        Some(z)
    } else {
        None
    };
    Ok(Pseudo { labels, mask, boundary })
}

/// One full training iteration; advances `state.iter`.
pub fn hbn_iteration(state: &mut ModelState, batch: &Batch, ctx: &StepContext) -> Result<IterationOutcome> {
    let t = state.iter;
    let tc = &ctx.trainer;
    let unl = if tc.semi_supervised {
        batch.unlabeled.as_ref()
    } else {
        None
    };
    let bl = batch.labeled_len();

    let (view, pseudo) = match unl {
        Some(u) => {
            let view = teacher_forward(state, batch, u, tc.hbn)?;
            let pseudo = pseudo_labels(ctx, &view, u)?;
            (Some(view), Some(pseudo))
        }
        None => (None, None),
    };

    let mut g = Graph::new();
    let sp = state.student.bind(&mut g, true);
    let input = match unl {
        Some(u) => Tensor::cat_batch(&[&batch.x, &u.us, &u.uw])?,
        None => batch.x.clone(),
    };
    let x = g.constant(input);
    let out: ForwardOutputs = state.student.forward(&mut g, &sp, x, Mode::Train)?;

    let mut parts = LossParts::default();
    let logits_l = g.narrow_batch(out.logits, 0, bl)?;
    parts.seg_l = Some(seg_supervised_loss(&mut g, logits_l, &batch.y)?.var);
    let heads = out.boundary_heads();
    if !heads.is_empty() {
        let z = batch
            .z
            .as_ref()
            .ok_or_else(|| Error::Data("boundary head enabled but the batch has no boundary targets".into()))?;
        let hl = narrow_heads(&mut g, &heads, 0, bl)?;
        parts.bdry_l = Some(bdry_supervised_loss(&mut g, &hl, z)?);
        if let (Some(qg), true) = (out.q_grad, tc.duality) {
            let ql = g.narrow_batch(qg, 0, bl)?;
            parts.dual = Some(duality_loss(&mut g, ql, z)?);
        }
    }
    let mut confident = 1.0;
    if let (Some(u), Some(ps)) = (unl, &pseudo) {
        let ls = g.narrow_batch(out.logits, bl, u.len())?;
        parts.seg_u = Some(seg_consistency_from_pseudo(&mut g, ls, &ps.labels, &ps.mask)?);
        confident = ps.mask.iter().filter(|&&m| m).count() as f64 / ps.mask.len().max(1) as f64;
        if let Some(zh) = &ps.boundary {
            let hs = narrow_heads(&mut g, &heads, bl, u.len())?;
            parts.bdry_u = Some(bdry_supervised_loss(&mut g, &hs, zh)?);
        }
    }
    let (total, losses) = total_loss(&mut g, &parts, &ctx.weights, &ctx.schedules, t)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite {
            op: "total_loss",
            detail: format!("iteration {t}: {losses:?}"),
        });
    }
    g.backward(total)?;

    let grads: Vec<Option<Tensor<f32>>> = sp.iter().map(|&v| g.grad(v).cloned()).collect();
    let lr = tc.lr_at(t);
    sgd_step(
        &mut state.student,
        &mut state.velocity,
        &grads,
        lr,
        tc.momentum,
        tc.weight_decay,
    );

    if unl.is_some() {
        ema_update(&mut state.teacher, &state.student, tc.ema_alpha)?;
        if !tc.hbn {
            state
                .teacher
                .bn_states_mut()
                .clone_from_slice(state.student.bn_states());
        }
    }
    state.iter += 1;
    Ok(IterationOutcome {
        iter: t,
        lr,
        losses,
        confident_fraction: confident,
        teacher_params_with_grad: view.map_or(0, |v| v.params_with_grad),
    })
}
