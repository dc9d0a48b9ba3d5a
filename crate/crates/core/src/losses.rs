//! Training objectives with hand-derived gradients.
//!
//! Every loss returns its value together with the gradient with respect to the
//! prediction arrays it consumes, so the autodiff graph can splice the losses in
//! as opaque nodes. Reductions:
//!
//! * tolerance term: per coordinate per step, mean over coordinates and steps,
//!   summed over the K candidates, mean over agents;
//! * variance term: population variance across K per coordinate per step, mean;
//! * Huber / MSE terms: mean over elements;
//! * cross-entropy term: mean over agents and the two streams.

use serde::{Deserialize, Serialize};

use crate::arrays::{CandidateArray, TrackArray};
use crate::error::{Error, Result};
use crate::kinematics::Vec2;
use crate::scoring::{argmin, softmax};

/// How the position term is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionLossKind {
    /// Tolerance interval on every candidate plus variance across candidates.
    #[default]
    Tolerance,
    /// Plain MSE on the candidate closest to ground truth.
    MseBestOfK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub huber_delta: f64,
    pub position_kind: PositionLossKind,
    pub enable_pos: bool,
    pub enable_va: bool,
    pub enable_cons1: bool,
    pub enable_cons2: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.05,
            alpha: 0.2,
            beta: 0.8,
            lambda: 0.5,
            huber_delta: 1.0,
            position_kind: PositionLossKind::Tolerance,
            enable_pos: true,
            enable_va: true,
            enable_cons1: true,
            enable_cons2: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("huber_delta", self.huber_delta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.enable_pos || self.enable_va || self.enable_cons1 || self.enable_cons2) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(())
    }
}

/// Per-term values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub pos: f64,
    pub va: f64,
    pub cons1: f64,
    pub cons2: f64,
    pub total: f64,
}

/// Raw term values before switches and weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub pos: f64,
    pub va: f64,
    pub cons1: f64,
    pub cons2: f64,
}

/// Tolerance-interval error of one scalar coordinate.
pub fn diff_tolerance(pred: f64, gt: f64, epsilon: f64) -> Result<f64> {
    if epsilon < 0.0 {
        return Err(Error::invalid(format!("negative tolerance margin {epsilon}")));
    }
    Ok(diff_value(pred, gt, epsilon))
}

fn diff_value(pred: f64, gt: f64, eps: f64) -> f64 {
    let (lo, hi) = (gt - eps, gt + eps);
    if pred > hi {
        (pred - hi).abs()
    } else if pred < lo {
        (pred - lo).abs()
    } else {
        0.0
    }
}

/// Derivative of [`diff_tolerance`] in `pred`; zero on the closed interval.
pub fn diff_tolerance_grad(pred: f64, gt: f64, epsilon: f64) -> f64 {
    if pred > gt + epsilon {
        1.0
    } else if pred < gt - epsilon {
        -1.0
    } else {
        0.0
    }
}

/// A loss value and its gradient with respect to one input.
#[derive(Debug, Clone)]
pub struct Graded<G> {
    pub value: f64,
    pub grad: G,
}

fn check_candidates(preds: &CandidateArray, gt: &TrackArray) -> Result<()> {
    if preds.agents != gt.agents || preds.steps != gt.steps {
        return Err(Error::invalid(format!(
            "prediction shape {}x{}x{} does not match ground truth {}x{}",
            preds.agents, preds.k, preds.steps, gt.agents, gt.steps
        )));
    }
    if preds.k == 0 || preds.steps == 0 || preds.agents == 0 {
        return Err(Error::invalid("empty prediction set"));
    }
    Ok(())
}

/// Tolerance-interval position loss with the cross-candidate variance term.
pub fn position_loss(
    preds: &CandidateArray,
    gt: &TrackArray,
    cfg: &LossConfig,
) -> Result<Graded<CandidateArray>> {
    check_candidates(preds, gt)?;
    if cfg.epsilon < 0.0 {
        return Err(Error::invalid(format!("negative tolerance margin {}", cfg.epsilon)));
    }
    let (n, k, m) = (preds.agents, preds.k, preds.steps * 2);
    let eps = cfg.epsilon;
    let mut grad = CandidateArray::zeros(n, k, preds.steps);
    let diff_scale = cfg.alpha / (n * m) as f64;
    let var_scale = cfg.beta / (n * m) as f64;
    let mut value = 0.0;
    for i in 0..n {
        let target = gt.row(i);
        for c in 0..k {
            let p = preds.candidate(i, c);
            let g = grad.candidate_mut(i, c);
            for e in 0..m {
                value += diff_scale * diff_value(p[e], target[e], eps);
                g[e] += diff_scale * diff_tolerance_grad(p[e], target[e], eps);
            }
        }
        for e in 0..m {
            let mean = (0..k).map(|c| preds.candidate(i, c)[e]).sum::<f64>() / k as f64;
            let mut var = 0.0;
            for c in 0..k {
                let d = preds.candidate(i, c)[e] - mean;
                var += d * d;
                grad.candidate_mut(i, c)[e] += var_scale * 2.0 * d / k as f64;
            }
            value += var_scale * var / k as f64;
        }
    }
    Ok(Graded { value, grad })
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// MSE between ground truth and the closest of the K candidates.
pub fn mse_best_of_k_loss(preds: &CandidateArray, gt: &TrackArray) -> Result<Graded<CandidateArray>> {
    check_candidates(preds, gt)?;
    let (n, k, m) = (preds.agents, preds.k, preds.steps * 2);
    let mut grad = CandidateArray::zeros(n, k, preds.steps);
    let mut value = 0.0;
    for i in 0..n {
        let errs: Vec<f64> = (0..k).map(|c| mse(preds.candidate(i, c), gt.row(i))).collect();
        let best = argmin(&errs).expect("k > 0");
        value += errs[best] / n as f64;
        let p = preds.candidate(i, best).to_vec();
        let g = grad.candidate_mut(i, best);
        for e in 0..m {
            g[e] = 2.0 * (p[e] - gt.row(i)[e]) / (n * m) as f64;
        }
    }
    Ok(Graded { value, grad })
}

/// Huber loss of one residual.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

pub fn huber_grad(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

/// Mean elementwise Huber loss between two equally sized slices, with gradient in `pred`.
pub fn huber_mean(pred: &[f64], target: &[f64], delta: f64) -> Result<Graded<Vec<f64>>> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "huber operands differ in length: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            value += huber(p - t, delta) / n;
            huber_grad(p - t, delta) / n
        })
        .collect();
    Ok(Graded { value, grad })
}

/// Gradients of the velocity/acceleration supervision term.
#[derive(Debug, Clone)]
pub struct VaGrad {
    pub value: f64,
    pub d_vel: CandidateArray,
    pub d_acc: CandidateArray,
}

/// Huber loss between the selected velocity candidate and the ground-truth velocity,
/// plus the same for acceleration. `vel_index` and `acc_index` pick one candidate per agent.
pub fn va_loss(
    vel: &CandidateArray,
    vel_index: &[usize],
    gt_vel: &TrackArray,
    acc: &CandidateArray,
    acc_index: &[usize],
    gt_acc: &TrackArray,
    cfg: &LossConfig,
) -> Result<VaGrad> {
    check_candidates(vel, gt_vel)?;
    check_candidates(acc, gt_acc)?;
    if vel_index.len() != vel.agents || acc_index.len() != acc.agents {
        return Err(Error::invalid("selection index count does not match agents"));
    }
    let sel_v = vel.select(vel_index);
    let sel_a = acc.select(acc_index);
    let hv = huber_mean(&sel_v.data, &gt_vel.data, cfg.huber_delta)?;
    let ha = huber_mean(&sel_a.data, &gt_acc.data, cfg.huber_delta)?;
    let mut d_vel = CandidateArray::zeros(vel.agents, vel.k, vel.steps);
    let mut d_acc = CandidateArray::zeros(acc.agents, acc.k, acc.steps);
    let mv = vel.steps * 2;
    for (i, &k) in vel_index.iter().enumerate() {
        d_vel.candidate_mut(i, k).copy_from_slice(&hv.grad[i * mv..(i + 1) * mv]);
    }
    let ma = acc.steps * 2;
    for (i, &k) in acc_index.iter().enumerate() {
        d_acc.candidate_mut(i, k).copy_from_slice(&ha.grad[i * ma..(i + 1) * ma]);
    }
    Ok(VaGrad {
        value: hv.value + ha.value,
        d_vel,
        d_acc,
    })
}

/// Anchored first difference on a flat `(steps, 2)` slice.
fn anchored_diff(flat: &[f64], anchor: Vec2) -> Vec<f64> {
    let mut out = Vec::with_capacity(flat.len());
    let (mut px, mut py) = (anchor.x, anchor.y);
    for c in flat.chunks_exact(2) {
        out.push(c[0] - px);
        out.push(c[1] - py);
        px = c[0];
        py = c[1];
    }
    out
}

/// Backpropagates through [`anchored_diff`]: `g_in[t] = g_out[t] - g_out[t+1]`.
fn anchored_diff_backward(g_out: &[f64]) -> Vec<f64> {
    let m = g_out.len();
    (0..m)
        .map(|e| g_out[e] - if e + 2 < m { g_out[e + 2] } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Cons1Grad {
    pub value: f64,
    pub d_vel: CandidateArray,
    pub d_acc: CandidateArray,
}

/// MSE between each velocity candidate's implied acceleration and the acceleration
/// candidate with the same index, averaged over agents and candidates.
pub fn cons1_loss(vel: &CandidateArray, acc: &CandidateArray, last_obs_vel: &[Vec2]) -> Result<Cons1Grad> {
    if !vel.same_shape(acc) {
        return Err(Error::invalid(format!(
            "velocity candidates {}x{}x{} vs acceleration candidates {}x{}x{}",
            vel.agents, vel.k, vel.steps, acc.agents, acc.k, acc.steps
        )));
    }
    if last_obs_vel.len() != vel.agents {
        return Err(Error::invalid("one anchor velocity per agent required"));
    }
    if vel.k == 0 || vel.steps == 0 {
        return Err(Error::invalid("empty candidate set"));
    }
    let (n, k, m) = (vel.agents, vel.k, vel.steps * 2);
    let scale = 1.0 / (n * k * m) as f64;
    let mut d_vel = CandidateArray::zeros(n, k, vel.steps);
    let mut d_acc = CandidateArray::zeros(n, k, vel.steps);
    let mut value = 0.0;
    for i in 0..n {
        for c in 0..k {
            let pseudo = anchored_diff(vel.candidate(i, c), last_obs_vel[i]);
            let a = acc.candidate(i, c);
            let r: Vec<f64> = pseudo.iter().zip(a).map(|(p, q)| p - q).collect();
            value += scale * r.iter().map(|x| x * x).sum::<f64>();
            let g_pseudo: Vec<f64> = r.iter().map(|x| 2.0 * scale * x).collect();
            for (g, gp) in d_acc.candidate_mut(i, c).iter_mut().zip(&g_pseudo) {
                *g = -gp;
            }
            d_vel
                .candidate_mut(i, c)
                .copy_from_slice(&anchored_diff_backward(&g_pseudo));
        }
    }
    Ok(Cons1Grad { value, d_vel, d_acc })
}

/// Cross-entropy of `softmax(-d)` against the one-hot at `argmin d`, with the
/// gradient in `d`.
pub fn cross_entropy_from_distances(d: &[f64]) -> Result<Graded<Vec<f64>>> {
    let target = argmin(d).ok_or_else(|| Error::invalid("cross-entropy over zero candidates"))?;
    let neg: Vec<f64> = d.iter().map(|x| -x).collect();
    let p = softmax(&neg);
    let min = d[target];
    let lse = d.iter().map(|x| (min - x).exp()).sum::<f64>().ln();
    let grad = p
        .iter()
        .enumerate()
        .map(|(k, pk)| if k == target { 1.0 - pk } else { -pk })
        .collect();
    Ok(Graded { value: lse, grad })
}

#[derive(Debug, Clone)]
pub struct Cons2Grad {
    pub value: f64,
    pub d_pos: CandidateArray,
    pub d_sel_vel: TrackArray,
    pub d_sel_acc: TrackArray,
}

/// Distances, value and per-candidate gradient of one stream of the cross-entropy term.
fn stream_ce(pseudo: &[Vec<f64>], target: &[f64]) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let diffs: Vec<Vec<f64>> = pseudo
        .iter()
        .map(|p| p.iter().zip(target).map(|(a, b)| a - b).collect())
        .collect();
    let d: Vec<f64> = diffs
        .iter()
        .map(|r: &Vec<f64>| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let ce = cross_entropy_from_distances(&d)?;
    let mut g_target = vec![0.0; target.len()];
    let g_pseudo = diffs
        .iter()
        .zip(&d)
        .zip(&ce.grad)
        .map(|((r, &dk), &gd)| {
            if dk == 0.0 {
                return vec![0.0; r.len()];
            }
            r.iter()
                .zip(g_target.iter_mut())
                .map(|(x, gt)| {
                    let g = gd * x / dk;
                    *gt -= g;
                    g
                })
                .collect()
        })
        .collect();
    Ok((ce.value, g_pseudo, g_target))
}

/// Motion-consistency cross-entropy between the pseudo velocity/acceleration of
/// every position candidate and the selected velocity/acceleration pair.
///
/// The gradient with respect to the selected pair is returned separately; callers
/// treat the pair as a fixed target for the predictor and may route that gradient
/// elsewhere.
pub fn cons2_loss(
    pos: &CandidateArray,
    last_obs_pos: &[Vec2],
    last_obs_vel: &[Vec2],
    sel_vel: &TrackArray,
    sel_acc: &TrackArray,
) -> Result<Cons2Grad> {
    let (n, k, steps) = (pos.agents, pos.k, pos.steps);
    if k == 0 || steps == 0 {
        return Err(Error::invalid("empty candidate set"));
    }
    if last_obs_pos.len() != n || last_obs_vel.len() != n {
        return Err(Error::invalid("one anchor position and velocity per agent required"));
    }
    for t in [sel_vel, sel_acc] {
        if t.agents != n || t.steps != steps {
            return Err(Error::invalid(format!(
                "selected target {}x{} does not match candidates {n}x{steps}",
                t.agents, t.steps
            )));
        }
    }
    let scale = 1.0 / (2 * n) as f64;
    let mut d_pos = CandidateArray::zeros(n, k, steps);
    let mut d_sel_vel = TrackArray::zeros(n, steps);
    let mut d_sel_acc = TrackArray::zeros(n, steps);
    let mut value = 0.0;
    for i in 0..n {
        let pv: Vec<Vec<f64>> = (0..k)
            .map(|c| anchored_diff(pos.candidate(i, c), last_obs_pos[i]))
            .collect();
        let pa: Vec<Vec<f64>> = pv.iter().map(|v| anchored_diff(v, last_obs_vel[i])).collect();
        let (ce_v, gv, gtv) = stream_ce(&pv, sel_vel.row(i))?;
        let (ce_a, ga, gta) = stream_ce(&pa, sel_acc.row(i))?;
        value += scale * (ce_v + ce_a);
        for (dst, src) in d_sel_vel.row_mut(i).iter_mut().zip(&gtv) {
            *dst = scale * src;
        }
        for (dst, src) in d_sel_acc.row_mut(i).iter_mut().zip(&gta) {
            *dst = scale * src;
        }
        for c in 0..k {
            let from_acc = anchored_diff_backward(&ga[c]);
            let g_pv: Vec<f64> = gv[c].iter().zip(&from_acc).map(|(a, b)| a + b).collect();
            let g_pos = anchored_diff_backward(&g_pv);
            for (dst, src) in d_pos.candidate_mut(i, c).iter_mut().zip(&g_pos) {
                *dst = scale * src;
            }
        }
    }
    Ok(Cons2Grad {
        value,
        d_pos,
        d_sel_vel,
        d_sel_acc,
    })
}

/// Weighted sum of the enabled terms; disabled terms are reported as 0.
pub fn total_loss(parts: LossTerms, cfg: &LossConfig) -> LossReport {
    let pick = |on: bool, v: f64| if on { v } else { 0.0 };
    let pos = pick(cfg.enable_pos, parts.pos);
    let va = pick(cfg.enable_va, parts.va);
    let cons1 = pick(cfg.enable_cons1, parts.cons1);
    let cons2 = pick(cfg.enable_cons2, parts.cons2);
    LossReport {
        pos,
        va,
        cons1,
        cons2,
        total: pos + va + cons1 + cfg.lambda * cons2,
    }
}
