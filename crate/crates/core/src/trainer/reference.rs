//! A plain mean-teacher step with no boundary machinery.
//!
//! Written separately from [`super::hbn_iteration`] so the two can be compared:
//! with every boundary component off they must agree bit for bit.

use super::{Batch, ModelState, StepContext};
use crate::augment::mix;
use crate::error::{Error, Result};
use crate::losses::{seg_consistency_from_pseudo, seg_supervised_loss};
use crate::tensor::{softmax_values, Graph, Mode, Tensor};

/// Returns the total loss of the step.
pub fn samth_step(state: &mut ModelState, batch: &Batch, ctx: &StepContext) -> Result<f64> {
    if ctx.model.boundary_channels() > 0 || ctx.model.use_bsf || ctx.model.use_sgf {
        return Err(Error::Config(
            "the reference step covers the boundary-free model only".into(),
        ));
    }
    let tc = &ctx.trainer;
    let u = batch
        .unlabeled
        .as_ref()
        .ok_or_else(|| Error::Data("the reference step needs unlabeled data".into()))?;
    let bl = batch.y.len() / (batch.x.shape()[2] * batch.x.shape()[3]);
    let bu = u.uw.shape()[0];
    let t = state.iter;

    // teacher
    let probs = {
        let mut g = Graph::no_grad();
        let p = state.teacher.bind(&mut g, false);
        let (input, mode, off) = if tc.hbn {
            (Tensor::cat_batch(&[&batch.x, &u.uw, &u.us])?, Mode::Train, bl)
        } else {
            (u.uw.clone(), Mode::Eval, 0)
        };
        let x = g.constant(input);
        let out = state.teacher.forward(&mut g, &p, x, mode)?;
        softmax_values(&g.value(out.logits).narrow_batch(off, bu)?)?
    };
    let (_, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let d = probs.data();
    let mut labels = Vec::with_capacity(bu);
    let mut masks = Vec::with_capacity(bu);
    for b in 0..bu {
        let mut l = vec![0u8; hw];
        let mut m = vec![false; hw];
        for i in 0..hw {
            let mut k = 0;
            for ch in 1..c {
                if d[(b * c + ch) * hw + i] > d[(b * c + k) * hw + i] {
                    k = ch;
                }
            }
            l[i] = k as u8;
            m[i] = f64::from(d[(b * c + k) * hw + i]) >= ctx.weights.tau;
        }
        labels.push(l);
        masks.push(m);
    }
    let labels = mix(&labels, &u.cutmix, 1, h, w).concat();
    let masks = mix(&masks, &u.cutmix, 1, h, w).concat();

    // student
    let mut g = Graph::new();
    let sp = state.student.bind(&mut g, true);
    let x = g.constant(Tensor::cat_batch(&[&batch.x, &u.us, &u.uw])?);
    let out = state.student.forward(&mut g, &sp, x, Mode::Train)?;
    let ll = g.narrow_batch(out.logits, 0, bl)?;
    let seg_l = seg_supervised_loss(&mut g, ll, &batch.y)?.var;
    let ls = g.narrow_batch(out.logits, bl, bu)?;
    let seg_u = seg_consistency_from_pseudo(&mut g, ls, &labels, &masks)?;
    let w_seg = ctx.schedules.seg.value(t) as f32;
    let unsup = g.scale(seg_u, w_seg);
    let unsup = g.scale(unsup, ctx.weights.lambda as f32);
    let total = g.add(seg_l, unsup)?;
    let loss = f64::from(g.value(total).data()[0]);
    g.backward(total)?;

    let lr = tc.lr_at(t) as f32;
    let (mu, wd) = (tc.momentum as f32, tc.weight_decay as f32);
    let grads: Vec<Option<Tensor<f32>>> = sp.iter().map(|&v| g.grad(v).cloned()).collect();
    for ((p, v), gr) in state
        .student
        .params_mut()
        .iter_mut()
        .zip(&mut state.velocity)
        .zip(&grads)
    {
        let zero = vec![0.0; p.numel()];
        let gd = gr.as_ref().map_or(&zero[..], |t| t.data());
        for ((wv, vel), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gd) {
            *vel = mu * *vel + (gv + wd * *wv);
            *wv -= lr * *vel;
        }
    }

    let a = tc.ema_alpha as f32;
    for (tp, sp) in state.teacher.params_mut().iter_mut().zip(state.student.params()) {
        for (tv, &sv) in tp.data_mut().iter_mut().zip(sp.data()) {
            *tv = a * *tv + (1.0 - a) * sv;
        }
    }
    if !tc.hbn {
        let bn = state.student.bn_states().to_vec();
        state.teacher.bn_states_mut().clone_from_slice(&bn);
    }
    state.iter += 1;
    Ok(loss)
}
